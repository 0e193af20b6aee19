import numpy as np
import pytest

from qadapt.store import SceneStore, SegmentRecord, append_scene


def unit_rows(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    """Random unit-norm float32 rows, renormalized after the f32 cast."""
    rows = rng.normal(size=(n, dim))
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    rows = rows.astype(np.float32)
    rows /= np.linalg.norm(rows.astype(np.float64), axis=1, keepdims=True)
    return rows.astype(np.float32)


def make_scene(
    rng: np.random.Generator,
    scene_id: str,
    captions: list[str],
    dim: int = 8,
    embeddings: np.ndarray | None = None,
    points_per_segment: int = 3,
):
    n = len(captions)
    if embeddings is None:
        embeddings = unit_rows(rng, n, dim)
    points = rng.uniform(-5, 5, size=(n * points_per_segment, 3)).astype(np.float32)
    segments = [
        SegmentRecord(
            segment_id=f"{scene_id}/s{i:03d}",
            scene_id=scene_id,
            caption=captions[i],
            embedding_row=i,
            point_offset=i * points_per_segment,
            point_count=points_per_segment,
        )
        for i in range(n)
    ]
    return segments, embeddings, points


def build_store(
    rng: np.random.Generator,
    scenes: dict[str, list[str]],
    dim: int = 8,
) -> SceneStore:
    store = SceneStore()
    for scene_id, captions in scenes.items():
        segments, emb, pts = make_scene(rng, scene_id, captions, dim=dim)
        store = append_scene(store, scene_id, segments, emb, pts)
    return store


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_store(rng):
    return build_store(
        rng,
        {
            "kitchen": ["a red mug", "a shiny kettle", "two chairs"],
            "office": ["a photo of a keyboard", "a desk lamp", "a plant", "a mug"],
        },
    )
