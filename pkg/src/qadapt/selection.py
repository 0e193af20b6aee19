"""Adaptation class-set construction and top-k training-data selection."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .llm import filter_synonyms, fold_plural
from .store import SceneStore, SegmentRecord
from .text_encoding import split_tokens

logger = logging.getLogger(__name__)


def load_word_list(path: Path | None, resource_name: str) -> list[str]:
    """Words from ``path`` or the bundled data file, one per line."""
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
    else:
        text = resources.files("qadapt.data").joinpath(resource_name).read_text("utf-8")
    return [line.strip().lower() for line in text.splitlines() if line.strip()]


def default_stopwords() -> set[str]:
    return set(load_word_list(None, "stopwords.txt"))


def default_noise_vocabulary() -> list[str]:
    """Bundled common-noun vocabulary (stopword complement)."""
    return load_word_list(None, "words.txt")


@dataclass(frozen=True)
class ClassSet:
    """Target classes plus mined negative classes."""

    targets: tuple[str, ...]
    negatives: tuple[str, ...]

    def __post_init__(self):
        union = self.targets + self.negatives
        if len(set(union)) != len(union):
            raise ValidationError("class set contains duplicates")
        if not self.targets:
            raise ValidationError("class set needs at least one target class")

    @property
    def all(self) -> tuple[str, ...]:
        return self.targets + self.negatives

    @property
    def n_targets(self) -> int:
        return len(self.targets)


@dataclass(frozen=True)
class TrainItem:
    """One selected training sample and its matched target class."""

    segment_id: str
    scene_id: str
    class_name: str
    class_index: int  # index into ClassSet.all (targets come first)
    similarity: float
    embedding_row: int


@dataclass(frozen=True)
class TrainingSet:
    items: tuple[TrainItem, ...]
    k: int

    def __len__(self) -> int:
        return len(self.items)


def extract_negative_classes(
    store: SceneStore, n: int, stopwords: set[str] | None = None
) -> list[str]:
    """The ``n`` most frequent plural-folded caption stems.

    Counting is per occurrence; ties break lexicographically. Fewer than
    ``n`` distinct stems returns them all with a warning.
    """
    if n <= 0:
        return []
    if stopwords is None:
        stopwords = default_stopwords()
    counts: Counter[str] = Counter()
    for caption in store.captions():
        for tok in split_tokens(caption):
            if tok in stopwords:
                continue
            counts[fold_plural(tok)] += 1
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    if len(ranked) < n:
        logger.warning("only %d distinct caption stems for n=%d", len(ranked), n)
    return [stem for stem, _ in ranked[:n]]


def build_class_set(targets: list[str], negatives: list[str], backend=None) -> ClassSet:
    """Concatenate targets with synonym-filtered negatives."""
    if not targets:
        raise ValidationError("targets must be nonempty")
    targets = list(dict.fromkeys(t.lower() for t in targets))
    negatives = list(dict.fromkeys(n.lower() for n in negatives))
    filtered = filter_synonyms(backend, negatives, targets)
    return ClassSet(tuple(targets), tuple(filtered))


def _scene_topk(store, scene_id, segments, target_features, k):
    rows = np.array([seg.embedding_row for seg in segments])
    ids = np.array([seg.segment_id for seg in segments])
    sims = store.embeddings[rows].astype(np.float64) @ target_features.T
    out = {}
    for t in range(target_features.shape[0]):
        order = np.lexsort((ids, -sims[:, t]))[:k]
        out[(scene_id, t)] = [(segments[i], float(sims[i, t])) for i in order]
    return out


def topk_per_scene_class(
    store: SceneStore, target_features: np.ndarray, k: int, threads: int = 1
) -> dict[tuple[str, int], list[tuple[SegmentRecord, float]]]:
    """Per (scene, target class) top-k segments by cosine similarity.

    Ties break by ascending segment_id. Scenes smaller than ``k`` yield
    all their segments. Scenes are independent, so the work may be spread
    over ``threads`` workers; results are keyed, not ordered, and the
    caller's canonical sort makes the merge scheduling-independent.
    """
    scenes = [(sid, segs) for sid, segs in store.scenes if segs]
    out: dict[tuple[str, int], list[tuple[SegmentRecord, float]]] = {}
    if threads > 1 and len(scenes) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [
                pool.submit(_scene_topk, store, sid, segs, target_features, k)
                for sid, segs in scenes
            ]
            for future in futures:
                out.update(future.result())
    else:
        for sid, segs in scenes:
            out.update(_scene_topk(store, sid, segs, target_features, k))
    return out


def select_training_data(
    store: SceneStore, class_set: ClassSet, backend, k: int, threads: int = 1
) -> TrainingSet:
    """Top-k segments per scene per target class, deduplicated.

    A segment picked by several classes keeps its highest-similarity class
    (ties: lowest class index). Output order is (scene order, class index,
    rank), so results do not depend on worker scheduling.
    """
    if k < 1:
        raise ValidationError("k must be >= 1")
    if store.n_segments == 0:
        raise ValidationError("store has no segments to select from")
    feats = backend.encode_class_features(list(class_set.targets))
    ranked = topk_per_scene_class(store, feats, k, threads=threads)

    best: dict[str, tuple[float, int, int, SegmentRecord, str]] = {}
    scene_order = {sid: i for i, sid in enumerate(store.scene_ids)}
    for (scene_id, t), pairs in ranked.items():
        for rank, (seg, sim) in enumerate(pairs):
            cur = best.get(seg.segment_id)
            cand = (-sim, t, rank, seg, scene_id)
            if cur is None or cand[:2] < cur[:2]:
                best[seg.segment_id] = cand

    items = sorted(
        best.values(), key=lambda v: (scene_order[v[4]], v[1], v[2], v[3].segment_id)
    )
    return TrainingSet(
        tuple(
            TrainItem(
                segment_id=seg.segment_id,
                scene_id=scene_id,
                class_name=class_set.targets[t],
                class_index=t,
                similarity=-neg_sim,
                embedding_row=seg.embedding_row,
            )
            for neg_sim, t, rank, seg, scene_id in items
        ),
        k=k,
    )


def full_store_training_set(store: SceneStore, class_set: ClassSet, backend) -> TrainingSet:
    """Every segment as a training item, pseudo-labeled by its most
    similar target class (used when top-k filtering is disabled)."""
    feats = backend.encode_class_features(list(class_set.targets))
    items = []
    for scene_id, segments in store.scenes:
        if not segments:
            continue
        rows = np.array([seg.embedding_row for seg in segments])
        sims = store.embeddings[rows].astype(np.float64) @ feats.T
        labels = np.argmax(sims, axis=1)
        for i, (seg, t) in enumerate(zip(segments, labels)):
            items.append(
                TrainItem(
                    segment_id=seg.segment_id,
                    scene_id=scene_id,
                    class_name=class_set.targets[int(t)],
                    class_index=int(t),
                    similarity=float(sims[i, t]),
                    embedding_row=seg.embedding_row,
                )
            )
    return TrainingSet(tuple(items), k=0)
