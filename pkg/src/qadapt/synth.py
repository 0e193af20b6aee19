"""Deterministic synthetic scene generator with a controllable gap between
image embeddings and the frozen text features.

Segments cluster around per-class anchor directions. The domain shift
rotates every anchor away from its text feature by a configurable angle,
realized along the prompt manifold: anchors are the class features the
frozen encoder emits under a displaced context, so a learnable prompt can
actually invert the shift (an ambient-space rotation is invisible to the
class softmax, which ignores displacements shared by all classes). A bias
vector in ambient space adds a non-invertible component. Most segments
are open-query distractors drawn from a noise vocabulary, mirroring raw
deployment data.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .selection import default_noise_vocabulary
from .store import GroundTruth, SceneStore, SegmentRecord, append_scene, save_ground_truth, save_store
from .text_encoding import (
    DEFAULT_CONTEXT_PHRASE,
    DEFAULT_EMBED_SCALE,
    DEFAULT_ENCODER_SEED,
    DEFAULT_HIDDEN_DIM,
    DEFAULT_OUT_DIM,
    DEFAULT_TOKEN_DIM,
    PromptLearner,
    TokenVocab,
    ToyTextEncoder,
    encode_classes,
    init_context,
)

DEFAULT_CLASSES = ("mug", "plant", "keyboard", "backpack", "lamp", "scissors")
CAPTION_TEMPLATE = "a photo of a {name}"


@dataclass
class SynthConfig:
    """Benchmark layout and difficulty knobs; fully seeded.

    ``noise_sigma`` and ``shift_bias`` are fractions of the mean pairwise
    distance between class anchors, so difficulty tracks the encoder's
    own feature dispersion instead of an absolute scale.
    """

    n_adapt_scenes: int = 8
    n_eval_scenes: int = 2
    classes: tuple[str, ...] = DEFAULT_CLASSES
    segments_per_scene: int = 60
    distractor_fraction: float = 0.7
    n_distractor_words: int = 60
    shift_angle_deg: float = 35.0
    shift_bias: float = 0.2
    noise_sigma: float = 0.3
    seed: int = 42
    encoder_seed: int = DEFAULT_ENCODER_SEED
    token_dim: int = DEFAULT_TOKEN_DIM
    hidden_dim: int = DEFAULT_HIDDEN_DIM
    out_dim: int = DEFAULT_OUT_DIM
    embed_scale: float = DEFAULT_EMBED_SCALE

    def __post_init__(self):
        if not 0.0 <= self.distractor_fraction < 1.0:
            raise ValueError("distractor_fraction must be in [0, 1)")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


@dataclass
class SynthResult:
    adapt_store: SceneStore
    eval_store: SceneStore
    gt_by_scene: dict[str, GroundTruth]
    tasks: list[dict]
    class_directions: np.ndarray = field(repr=False, default=None)


def _mean_feature_angle(base: np.ndarray, moved: np.ndarray) -> float:
    """Mean angle (deg) between corresponding rows of two feature sets."""
    cosines = np.clip((base * moved).sum(axis=1), -1.0, 1.0)
    return float(np.degrees(np.arccos(cosines)).mean())


def _shifted_anchors(
    encoder: ToyTextEncoder,
    learner,
    names: list[str],
    shift_dir: np.ndarray,
    angle_deg: float,
) -> np.ndarray:
    """Class anchors rotated ``angle_deg`` (mean feature angle) away from
    their text features.

    The rotation is realized by displacing the shared prompt context along
    ``shift_dir`` and re-encoding, so the shift always lies on the
    manifold a tuned prompt can reach; the displacement magnitude is found
    by bisection on the mean angle between anchors and text features.
    """
    base = encode_classes(encoder, learner, names)
    if angle_deg <= 0:
        return base.copy()

    def angle_at(alpha: float) -> float:
        moved = PromptLearner(learner.context - alpha * shift_dir[None, :] / learner.m)
        return _mean_feature_angle(base, encode_classes(encoder, moved, names))

    lo, hi = 0.0, 1.0
    while angle_at(hi) < angle_deg:
        hi *= 2.0
        if hi > 1e6:
            raise ValueError(f"cannot reach a {angle_deg} degree shift")
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if angle_at(mid) < angle_deg:
            lo = mid
        else:
            hi = mid
    moved = PromptLearner(learner.context - hi * shift_dir[None, :] / learner.m)
    return encode_classes(encoder, moved, names)


def _grid_centers(rng: np.random.Generator, n: int) -> np.ndarray:
    """Well-separated cluster centers: a 2 m grid, seeded shuffle + jitter."""
    side = int(np.ceil(n ** (1.0 / 3.0))) + 1
    coords = np.array(
        [(x, y, z) for x in range(side) for y in range(side) for z in range(side)],
        dtype=np.float64,
    )
    rng.shuffle(coords)
    return coords[:n] * 2.0 + rng.uniform(-0.2, 0.2, size=(n, 3))


def generate(cfg: SynthConfig) -> SynthResult:
    """Build adaptation and evaluation stores, ground truth, and tasks."""
    rng = np.random.default_rng(cfg.seed)
    noise_words = [w for w in default_noise_vocabulary() if w not in cfg.classes]
    picks = rng.permutation(len(noise_words))[: cfg.n_distractor_words]
    distractor_words = [noise_words[i] for i in picks]

    all_names = list(cfg.classes) + distractor_words
    vocab = TokenVocab.build(
        [CAPTION_TEMPLATE.format(name=n) for n in all_names] + [DEFAULT_CONTEXT_PHRASE]
    )
    encoder = ToyTextEncoder.create(
        vocab,
        token_dim=cfg.token_dim,
        hidden_dim=cfg.hidden_dim,
        out_dim=cfg.out_dim,
        seed=cfg.encoder_seed,
        embed_scale=cfg.embed_scale,
    )
    learner = init_context(encoder, DEFAULT_CONTEXT_PHRASE)

    shift_dir = rng.normal(size=cfg.token_dim)
    shift_dir /= np.linalg.norm(shift_dir)
    anchors = _shifted_anchors(
        encoder, learner, all_names, shift_dir, cfg.shift_angle_deg
    )
    dir_of = {name: anchors[i] for i, name in enumerate(all_names)}

    # intrinsic scale: mean pairwise distance between anchors, so noise and
    # bias are dimensionless fractions of the actual class separation
    diffs = anchors[:, None, :] - anchors[None, :, :]
    dists = np.linalg.norm(diffs, axis=2)
    n_anchor = len(all_names)
    scale = float(dists.sum() / (n_anchor * (n_anchor - 1)))

    bias_dir = rng.normal(size=cfg.out_dim)
    bias = cfg.shift_bias * scale * bias_dir / np.linalg.norm(bias_dir)
    noise_scale = cfg.noise_sigma * scale / np.sqrt(cfg.out_dim)

    n_seg = cfg.segments_per_scene
    n_distract = round(n_seg * cfg.distractor_fraction)
    n_target = n_seg - n_distract

    def build_scene(store: SceneStore, scene_id: str, with_gt: bool):
        names = [cfg.classes[i % len(cfg.classes)] for i in range(n_target)]
        names += [distractor_words[int(i)] for i in rng.integers(0, len(distractor_words), n_distract)]
        order = rng.permutation(n_seg)
        names = [names[i] for i in order]

        emb = np.zeros((n_seg, cfg.out_dim), dtype=np.float64)
        centers = _grid_centers(rng, n_seg)
        segments = []
        points_parts = []
        gt_points = []
        gt_labels = []
        offset = 0
        for i, name in enumerate(names):
            raw = dir_of[name] + noise_scale * rng.normal(size=cfg.out_dim)
            shifted = raw / np.linalg.norm(raw) + bias
            emb[i] = shifted / np.linalg.norm(shifted)
            pts = (centers[i] + rng.normal(0.0, 0.05, size=(5, 3))).astype(np.float32)
            points_parts.append(pts)
            segments.append(
                SegmentRecord(
                    segment_id=f"{scene_id}/seg{i:04d}",
                    scene_id=scene_id,
                    caption=CAPTION_TEMPLATE.format(name=name),
                    embedding_row=i,
                    point_offset=offset,
                    point_count=pts.shape[0],
                )
            )
            offset += pts.shape[0]
            if with_gt:
                gt_points.append(pts)
                gt_labels.extend([name] * pts.shape[0])
        store = append_scene(
            store,
            scene_id,
            segments,
            emb.astype(np.float32),
            np.concatenate(points_parts, axis=0),
        )
        gt = (
            GroundTruth(np.concatenate(gt_points, axis=0), tuple(gt_labels))
            if with_gt
            else None
        )
        return store, gt

    adapt_store = SceneStore()
    for j in range(cfg.n_adapt_scenes):
        adapt_store, _ = build_scene(adapt_store, f"adapt-{j:03d}", with_gt=False)

    eval_store = SceneStore()
    gt_by_scene: dict[str, GroundTruth] = {}
    for j in range(cfg.n_eval_scenes):
        scene_id = f"eval-{j:03d}"
        eval_store, gt = build_scene(eval_store, scene_id, with_gt=True)
        gt_by_scene[scene_id] = gt

    tasks = []
    for scene_id in eval_store.scene_ids:
        classes = list(cfg.classes)
        for i in range(0, len(classes) - 1, 2):
            tasks.append(
                {
                    "task": f"bring me the {classes[i]} and the {classes[i + 1]} from {scene_id}",
                    "scene_id": scene_id,
                    "relevant_classes": [classes[i], classes[i + 1]],
                }
            )
        tasks.append(
            {
                "task": f"tidy up {scene_id}",
                "scene_id": scene_id,
                "relevant_classes": classes,
            }
        )

    return SynthResult(adapt_store, eval_store, gt_by_scene, tasks, anchors)


def write_benchmark(cfg: SynthConfig, out_dir: Path) -> SynthResult:
    """Generate and write adapt/eval archives, ground truth and tasks."""
    out_dir = Path(out_dir)
    result = generate(cfg)
    save_store(result.adapt_store, out_dir / "adapt")
    save_store(result.eval_store, out_dir / "eval")
    for scene_id, gt in result.gt_by_scene.items():
        save_ground_truth(gt, out_dir / "eval" / f"gt_points_{scene_id}.bin")
    (out_dir / "tasks.json").write_text(
        json.dumps(result.tasks, ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
    )
    meta = {
        "classes": list(cfg.classes),
        "encoder_seed": cfg.encoder_seed,
        "embed_scale": cfg.embed_scale,
        "token_dim": cfg.token_dim,
        "hidden_dim": cfg.hidden_dim,
        "out_dim": cfg.out_dim,
        "seed": cfg.seed,
        "shift_angle_deg": cfg.shift_angle_deg,
        "shift_bias": cfg.shift_bias,
        "noise_sigma": cfg.noise_sigma,
        "distractor_fraction": cfg.distractor_fraction,
        "segments_per_scene": cfg.segments_per_scene,
    }
    (out_dir / "synth_meta.json").write_text(
        json.dumps(meta, ensure_ascii=False, indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    return result
