"""Segment/scene data model and the bit-exact archive file format.

An archive directory holds three files (all integers little-endian):

* ``segments.jsonl``  -- one JSON object per segment
* ``embeddings.bin``  -- magic ``QAEB``, u32 version, u32 count, u32 dim,
  then count*dim float32
* ``points.bin``      -- magic ``QAPC``, u32 version, u32 count, then
  count*3 float32

Ground truth uses ``QAGT`` files: u32 count, count*3 float32, then count
length-prefixed UTF-8 labels (u16 length each). A single-scene archive may
name it ``gt_points.bin``; multi-scene archives use
``gt_points_<scene_id>.bin``.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (
    ArchiveFormatError,
    DuplicateScene,
    NotFoundError,
    NormOutOfTolerance,
    ValidationError,
)

logger = logging.getLogger(__name__)

MAGIC_EMBEDDINGS = b"QAEB"
MAGIC_POINTS = b"QAPC"
MAGIC_GROUND_TRUTH = b"QAGT"
FORMAT_VERSION = 1

# Norms within LOAD_TOL of 1.0 are accepted; within KEEP_TOL the stored
# bits are kept untouched so save->load->save stays byte-identical.
NORM_LOAD_TOL = 1e-3
NORM_KEEP_TOL = 1e-4


@dataclass(frozen=True)
class SegmentRecord:
    """One observed object segment inside a scene."""

    segment_id: str
    scene_id: str
    caption: str
    embedding_row: int
    point_offset: int
    point_count: int
    mask_ref: str | None = None
    bbox: tuple[float, float, float, float] | None = None

    def to_json_obj(self) -> dict:
        return {
            "segment_id": self.segment_id,
            "scene_id": self.scene_id,
            "caption": self.caption,
            "embedding_row": self.embedding_row,
            "point_offset": self.point_offset,
            "point_count": self.point_count,
            "mask_ref": self.mask_ref,
            "bbox": list(self.bbox) if self.bbox is not None else None,
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "SegmentRecord":
        return cls(
            segment_id=obj["segment_id"],
            scene_id=obj["scene_id"],
            caption=obj["caption"],
            embedding_row=int(obj["embedding_row"]),
            point_offset=int(obj["point_offset"]),
            point_count=int(obj["point_count"]),
            mask_ref=obj.get("mask_ref"),
            bbox=tuple(obj["bbox"]) if obj.get("bbox") is not None else None,
        )


@dataclass(frozen=True)
class GroundTruth:
    """Labeled reference point cloud for one scene."""

    points: np.ndarray  # (N, 3) float32
    labels: tuple[str, ...]

    def __post_init__(self):
        if len(self.labels) != self.points.shape[0]:
            raise ValidationError(
                f"ground truth has {self.points.shape[0]} points "
                f"but {len(self.labels)} labels"
            )


@dataclass(frozen=True)
class SceneStore:
    """Ordered collection of scenes with a shared embedding/point buffer.

    Immutable after construction; appends produce a new store.
    """

    scenes: tuple[tuple[str, tuple[SegmentRecord, ...]], ...] = ()
    embeddings: np.ndarray = field(
        default_factory=lambda: np.zeros((0, 0), dtype=np.float32)
    )
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.float32))

    @property
    def dim(self) -> int:
        return int(self.embeddings.shape[1])

    @property
    def scene_ids(self) -> list[str]:
        return [sid for sid, _ in self.scenes]

    @property
    def n_segments(self) -> int:
        return sum(len(segs) for _, segs in self.scenes)

    def iter_segments(self):
        for _, segs in self.scenes:
            yield from segs

    def scene_segments(self, scene_id: str) -> tuple[SegmentRecord, ...]:
        for sid, segs in self.scenes:
            if sid == scene_id:
                return segs
        raise NotFoundError(f"scene {scene_id!r} not in store")

    def captions(self) -> list[str]:
        return [seg.caption for seg in self.iter_segments()]

    def embedding_of(self, segment: SegmentRecord) -> np.ndarray:
        """Unit embedding of a segment as float64."""
        return self.embeddings[segment.embedding_row].astype(np.float64)

    def points_of(self, segment: SegmentRecord) -> np.ndarray:
        return self.points[segment.point_offset : segment.point_offset + segment.point_count]

    def prefix_scenes(self, n: int) -> "SceneStore":
        """Compact store containing only the first ``n`` scenes."""
        kept = self.scenes[:n]
        records = [seg for _, segs in kept for seg in segs]
        emb = np.zeros((len(records), self.dim), dtype=np.float32)
        pts_parts = []
        new_scenes: list[tuple[str, tuple[SegmentRecord, ...]]] = []
        row = 0
        offset = 0
        for sid, segs in kept:
            new_segs = []
            for seg in segs:
                emb[row] = self.embeddings[seg.embedding_row]
                seg_pts = self.points_of(seg)
                pts_parts.append(seg_pts)
                new_segs.append(
                    replace(seg, embedding_row=row, point_offset=offset)
                )
                row += 1
                offset += seg.point_count
            new_scenes.append((sid, tuple(new_segs)))
        pts = (
            np.concatenate(pts_parts, axis=0)
            if pts_parts
            else np.zeros((0, 3), dtype=np.float32)
        )
        return SceneStore(tuple(new_scenes), emb, np.ascontiguousarray(pts))


def _validate(store: SceneStore) -> SceneStore:
    seen_scenes: set[str] = set()
    seen_segments: set[str] = set()
    count = store.embeddings.shape[0]
    n_points = store.points.shape[0]
    for sid, segs in store.scenes:
        if sid in seen_scenes:
            raise DuplicateScene(f"duplicate scene id {sid!r}")
        seen_scenes.add(sid)
        for seg in segs:
            if seg.segment_id in seen_segments:
                raise ValidationError(f"duplicate segment id {seg.segment_id!r}")
            seen_segments.add(seg.segment_id)
            if not 0 <= seg.embedding_row < count:
                raise ValidationError(
                    f"segment {seg.segment_id!r}: embedding_row {seg.embedding_row} "
                    f"outside [0, {count})"
                )
            if seg.point_offset < 0 or seg.point_offset + seg.point_count > n_points:
                raise ValidationError(
                    f"segment {seg.segment_id!r}: point range "
                    f"[{seg.point_offset}, {seg.point_offset + seg.point_count}) "
                    f"outside buffer of {n_points}"
                )
    return store


def normalize_embeddings(embeddings: np.ndarray) -> np.ndarray:
    """Enforce unit norms, keeping bits when already within tolerance.

    Rows off by more than NORM_LOAD_TOL raise; rows between KEEP_TOL and
    LOAD_TOL are renormalized; rows within KEEP_TOL keep their exact bits
    so round-trips stay byte-identical.
    """
    if embeddings.size == 0:
        return embeddings
    norms = np.linalg.norm(embeddings.astype(np.float64), axis=1)
    bad = np.abs(norms - 1.0) > NORM_LOAD_TOL
    if bad.any():
        row = int(np.argmax(bad))
        raise NormOutOfTolerance(
            f"embedding row {row} has norm {norms[row]:.6f}, "
            f"outside 1 +/- {NORM_LOAD_TOL}"
        )
    drifted = np.abs(norms - 1.0) > NORM_KEEP_TOL
    if drifted.any():
        logger.warning(
            "renormalized %d embedding rows whose norms drifted past %g",
            int(drifted.sum()),
            NORM_KEEP_TOL,
        )
        embeddings = embeddings.copy()
        embeddings[drifted] = (
            embeddings[drifted].astype(np.float64) / norms[drifted, None]
        ).astype(np.float32)
    return embeddings


def _read_exact(fh, n: int, path: Path) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise ArchiveFormatError(f"{path}: truncated (wanted {n} bytes, got {len(data)})")
    return data


def _read_header(path: Path, magic: bytes, n_fields: int) -> tuple:
    with open(path, "rb") as fh:
        got = _read_exact(fh, 4, path)
        if got != magic:
            raise ArchiveFormatError(f"{path}: bad magic {got!r}, expected {magic!r}")
        fields = struct.unpack(f"<{n_fields}I", _read_exact(fh, 4 * n_fields, path))
        if fields[0] != FORMAT_VERSION:
            raise ArchiveFormatError(
                f"{path}: unsupported version {fields[0]} (expected {FORMAT_VERSION})"
            )
        payload = fh.read()
    return fields, payload


def _write_embeddings(path: Path, embeddings: np.ndarray) -> None:
    count, dim = embeddings.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC_EMBEDDINGS)
        fh.write(struct.pack("<III", FORMAT_VERSION, count, dim))
        fh.write(np.ascontiguousarray(embeddings, dtype="<f4").tobytes())


def read_embeddings_file(path: Path) -> np.ndarray:
    (version, count, dim), payload = _read_header(path, MAGIC_EMBEDDINGS, 3)
    expected = count * dim * 4
    if len(payload) != expected:
        raise ArchiveFormatError(
            f"{path}: payload is {len(payload)} bytes, expected {expected}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(count, dim).copy()


def _write_points(path: Path, points: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC_POINTS)
        fh.write(struct.pack("<II", FORMAT_VERSION, points.shape[0]))
        fh.write(np.ascontiguousarray(points, dtype="<f4").tobytes())


def _read_points(path: Path) -> np.ndarray:
    (version, count), payload = _read_header(path, MAGIC_POINTS, 2)
    expected = count * 3 * 4
    if len(payload) != expected:
        raise ArchiveFormatError(
            f"{path}: payload is {len(payload)} bytes, expected {expected}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(count, 3).copy()


def save_ground_truth(gt: GroundTruth, path: Path) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC_GROUND_TRUTH)
        fh.write(struct.pack("<II", FORMAT_VERSION, gt.points.shape[0]))
        fh.write(np.ascontiguousarray(gt.points, dtype="<f4").tobytes())
        for label in gt.labels:
            raw = label.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)


def load_ground_truth_file(path: Path) -> GroundTruth:
    path = Path(path)
    if not path.is_file():
        raise NotFoundError(f"ground-truth file {path} not found")
    (version, count), payload = _read_header(path, MAGIC_GROUND_TRUTH, 2)
    need = count * 12
    if len(payload) < need:
        raise ArchiveFormatError(f"{path}: point payload truncated")
    points = np.frombuffer(payload[:need], dtype="<f4").reshape(count, 3).copy()
    labels = []
    pos = need
    for _ in range(count):
        if pos + 2 > len(payload):
            raise ArchiveFormatError(f"{path}: label block truncated")
        (n,) = struct.unpack_from("<H", payload, pos)
        pos += 2
        labels.append(payload[pos : pos + n].decode("utf-8"))
        pos += n
    if pos != len(payload):
        raise ArchiveFormatError(f"{path}: {len(payload) - pos} trailing bytes")
    return GroundTruth(points=points, labels=tuple(labels))


def load_ground_truth(path: Path, store: SceneStore) -> dict[str, GroundTruth]:
    """Per-scene ground truth from an archive directory.

    ``gt_points.bin`` covers the only scene of a single-scene archive;
    ``gt_points_<scene_id>.bin`` names its scene explicitly.
    """
    path = Path(path)
    out: dict[str, GroundTruth] = {}
    single = path / "gt_points.bin"
    if single.is_file():
        if len(store.scenes) != 1:
            raise ValidationError(
                "gt_points.bin is only valid for single-scene archives; "
                "use gt_points_<scene_id>.bin"
            )
        out[store.scene_ids[0]] = load_ground_truth_file(single)
    for p in sorted(path.glob("gt_points_*.bin")):
        scene_id = p.name[len("gt_points_") : -len(".bin")]
        out[scene_id] = load_ground_truth_file(p)
    return out


def save_store(store: SceneStore, path: Path) -> None:
    """Write the archive files; save -> load -> save is byte-identical."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    _validate(store)
    lines = []
    for seg in store.iter_segments():
        lines.append(json.dumps(seg.to_json_obj(), ensure_ascii=False, separators=(",", ":")))
    (path / "segments.jsonl").write_text(
        "".join(line + "\n" for line in lines), encoding="utf-8"
    )
    _write_embeddings(path / "embeddings.bin", store.embeddings)
    _write_points(path / "points.bin", store.points)


def load_store(path: Path) -> SceneStore:
    """Load and validate an archive directory."""
    path = Path(path)
    if not path.is_dir():
        raise NotFoundError(f"archive directory {path} not found")
    for name in ("segments.jsonl", "embeddings.bin", "points.bin"):
        if not (path / name).is_file():
            raise NotFoundError(f"archive file {path / name} missing")

    embeddings = normalize_embeddings(read_embeddings_file(path / "embeddings.bin"))
    points = _read_points(path / "points.bin")

    by_scene: dict[str, list[SegmentRecord]] = {}
    order: list[str] = []
    text = (path / "segments.jsonl").read_text(encoding="utf-8")
    for i, line in enumerate(text.splitlines()):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ArchiveFormatError(f"segments.jsonl line {i + 1}: {exc}") from exc
        seg = SegmentRecord.from_json_obj(obj)
        if seg.scene_id not in by_scene:
            by_scene[seg.scene_id] = []
            order.append(seg.scene_id)
        by_scene[seg.scene_id].append(seg)

    scenes = tuple((sid, tuple(by_scene[sid])) for sid in order)
    return _validate(SceneStore(scenes, embeddings, points))


def append_scene(
    store: SceneStore,
    scene_id: str,
    segments: list[SegmentRecord],
    embeddings: np.ndarray,
    points: np.ndarray,
) -> SceneStore:
    """New store with ``scene_id`` appended; prior scenes are untouched.

    Segment rows/offsets are local to the provided arrays and get rebased
    onto the store buffers.
    """
    if scene_id in store.scene_ids:
        raise DuplicateScene(f"scene {scene_id!r} already in store")
    embeddings = np.asarray(embeddings, dtype=np.float32)
    if embeddings.ndim != 2:
        raise ValidationError("embeddings must be a 2-D array")
    if store.dim and embeddings.shape[1] != store.dim:
        raise ArchiveFormatError(
            f"scene {scene_id!r} has dim {embeddings.shape[1]}, store has {store.dim}"
        )
    embeddings = normalize_embeddings(embeddings)
    points = np.asarray(points, dtype=np.float32).reshape(-1, 3)

    row_base = store.embeddings.shape[0]
    point_base = store.points.shape[0]
    rebased = tuple(
        replace(
            seg,
            scene_id=scene_id,
            embedding_row=seg.embedding_row + row_base,
            point_offset=seg.point_offset + point_base,
        )
        for seg in segments
    )
    if store.dim:
        new_embeddings = np.concatenate([store.embeddings, embeddings], axis=0)
    else:
        new_embeddings = embeddings
    new_points = np.concatenate([store.points, points], axis=0)
    new_store = SceneStore(
        store.scenes + ((scene_id, rebased),), new_embeddings, new_points
    )
    return _validate(new_store)
