"""Query- and class-conditioned retrieval over a scene's segments."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimMismatch, EncoderError, ValidationError
from .adaptation import (
    MODE_PROMPT,
    AdapterCheckpoint,
    residual_forward,
)
from .store import SceneStore
from .text_encoding import PromptLearner, encode_prompted_class

import logging

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RetrievalResult:
    """Segments of one scene ranked by descending similarity."""

    ranked: tuple[tuple[str, float], ...]
    query_class: str

    def top(self) -> str | None:
        return self.ranked[0][0] if self.ranked else None


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Dot product of unit vectors (checked to 1e-4)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    for v in (a, b):
        if abs(np.linalg.norm(v) - 1.0) > 1e-4:
            raise ValidationError("cosine_similarity expects unit-norm inputs")
    return float(a @ b)


def _rank_segments(store, segments, query_feature, top_k, query_class):
    query_feature = np.asarray(query_feature, dtype=np.float64)
    if query_feature.shape != (store.dim,):
        raise DimMismatch(
            f"query feature has shape {query_feature.shape}, store dim is {store.dim}"
        )
    rows = np.array([seg.embedding_row for seg in segments])
    ids = np.array([seg.segment_id for seg in segments])
    sims = store.embeddings[rows].astype(np.float64) @ query_feature
    order = np.lexsort((ids, -sims))[:top_k]
    return RetrievalResult(
        tuple((segments[i].segment_id, float(sims[i])) for i in order), query_class
    )


def retrieve(
    store: SceneStore, scene_id: str, query_feature: np.ndarray, top_k: int, query_class: str = ""
) -> RetrievalResult:
    """Top ``top_k`` segments of a scene by similarity to the feature.

    Ties break by ascending segment_id; an empty scene yields an empty
    result.
    """
    if top_k < 1:
        raise ValidationError("top_k must be >= 1")
    segments = store.scene_segments(scene_id)
    if not segments:
        return RetrievalResult((), query_class)
    return _rank_segments(store, segments, query_feature, top_k, query_class)


def retrieve_across_scenes(
    store: SceneStore, query_feature: np.ndarray, top_k: int, query_class: str = ""
) -> RetrievalResult:
    """Ranking over every segment of every scene (off the default path;
    deployment retrieval is per-scene)."""
    if top_k < 1:
        raise ValidationError("top_k must be >= 1")
    segments = tuple(store.iter_segments())
    if not segments:
        return RetrievalResult((), query_class)
    return _rank_segments(store, segments, query_feature, top_k, query_class)


def checkpoint_class_feature(
    checkpoint: AdapterCheckpoint, class_name: str, http_encoder=None
) -> np.ndarray:
    """Adapted text feature for ``class_name`` under a checkpoint.

    Prompt mode rebuilds the frozen encoder and applies the tuned context;
    residual mode applies the learned affine map to the base feature
    (cached in the checkpoint, else fetched through ``http_encoder``).
    """
    if class_name not in checkpoint.class_set.targets:
        logger.warning("class %r was not a target of this checkpoint", class_name)
    if checkpoint.mode == MODE_PROMPT:
        encoder = checkpoint.encoder_spec.build()
        learner = PromptLearner(checkpoint.context.astype(np.float64))
        return encode_prompted_class(encoder, learner, class_name)
    names = list(checkpoint.class_set.all)
    if checkpoint.base_class_features is not None and class_name in names:
        base = checkpoint.base_class_features[names.index(class_name)].astype(np.float64)
    elif http_encoder is not None:
        base = http_encoder.encode_class_features([class_name])[0]
    else:
        raise EncoderError(
            f"no cached base feature for {class_name!r} and no encoder endpoint"
        )
    _, _, feats = residual_forward(
        checkpoint.residual_map, checkpoint.residual_bias, base[None, :]
    )
    return feats[0]


def retrieve_with_checkpoint(
    store: SceneStore,
    scene_id: str,
    checkpoint: AdapterCheckpoint,
    class_name: str,
    top_k: int,
    http_encoder=None,
) -> RetrievalResult:
    """Retrieval using the adapted prompt/residual feature for a class."""
    feature = checkpoint_class_feature(checkpoint, class_name, http_encoder)
    if feature.shape != (store.dim,):
        raise DimMismatch(
            f"checkpoint feature dim {feature.shape[0]} != store dim {store.dim}"
        )
    return retrieve(store, scene_id, feature, top_k, query_class=class_name)
