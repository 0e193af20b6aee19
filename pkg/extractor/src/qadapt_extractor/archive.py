"""Writer for the segment-archive wire format.

Independent implementation of the consumer's on-disk contract (all
integers little-endian):

* ``segments.jsonl``: one JSON object per segment
* ``embeddings.bin``: magic ``QAEB``, u32 version=1, u32 count, u32 dim,
  count*dim float32
* ``points.bin``: magic ``QAPC``, u32 version=1, u32 count, count*3 float32
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class ArchiveSegment:
    segment_id: str
    scene_id: str
    caption: str
    embedding: np.ndarray  # (D,) unit norm
    points: np.ndarray  # (N, 3) float32, world frame; may be empty
    mask_ref: str | None = None
    bbox: tuple[float, float, float, float] | None = None


def write_archive(segments: list[ArchiveSegment], out_dir: Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dim = segments[0].embedding.shape[0] if segments else 0

    lines = []
    embeddings = np.zeros((len(segments), dim), dtype="<f4")
    point_parts = []
    offset = 0
    for row, seg in enumerate(segments):
        vec = np.asarray(seg.embedding, dtype=np.float64)
        embeddings[row] = (vec / np.linalg.norm(vec)).astype("<f4")
        pts = np.asarray(seg.points, dtype="<f4").reshape(-1, 3)
        point_parts.append(pts)
        lines.append(
            json.dumps(
                {
                    "segment_id": seg.segment_id,
                    "scene_id": seg.scene_id,
                    "caption": seg.caption,
                    "embedding_row": row,
                    "point_offset": offset,
                    "point_count": int(pts.shape[0]),
                    "mask_ref": seg.mask_ref,
                    "bbox": list(seg.bbox) if seg.bbox is not None else None,
                },
                ensure_ascii=False,
                separators=(",", ":"),
            )
        )
        offset += pts.shape[0]

    (out_dir / "segments.jsonl").write_text(
        "".join(line + "\n" for line in lines), encoding="utf-8"
    )
    with open(out_dir / "embeddings.bin", "wb") as fh:
        fh.write(b"QAEB")
        fh.write(struct.pack("<III", 1, embeddings.shape[0], dim))
        fh.write(np.ascontiguousarray(embeddings).tobytes())
    points = (
        np.concatenate(point_parts, axis=0)
        if point_parts
        else np.zeros((0, 3), dtype="<f4")
    )
    with open(out_dir / "points.bin", "wb") as fh:
        fh.write(b"QAPC")
        fh.write(struct.pack("<II", 1, points.shape[0]))
        fh.write(np.ascontiguousarray(points.astype("<f4")).tobytes())
