"""Frame-to-archive extraction.

Input directory layout, one frame per base name:

* ``<name>.png`` -- RGB image (required)
* ``<name>_depth.npy`` -- optional (H, W) float32 depth in meters
* ``<name>_pose.json`` -- optional 4x4 camera-to-world matrix
* ``<name>_intrinsics.json`` -- optional {"fx", "fy", "cx", "cy"}

Frames with depth+pose+intrinsics produce world-frame point clouds;
RGB-only frames produce empty point ranges with pixel bboxes instead.
The whole pipeline is deterministic, so re-running a job writes a
byte-identical archive.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .archive import ArchiveSegment, write_archive
from .captions import make_captioner
from .errors import InputError
from .features import make_embedder
from .segmentation import make_segmenter

logger = logging.getLogger(__name__)

MAX_POINTS_PER_SEGMENT = 200


@dataclass
class ExtractionJob:
    input_dir: Path
    output_dir: Path
    scene_id: str | None = None  # default: input directory name
    segmenter: str = "color-regions"
    embedder: str = "pooled-projection"
    captioner: str = "template"
    segmenter_options: dict = field(default_factory=dict)
    embedder_options: dict = field(default_factory=dict)


@dataclass
class Frame:
    name: str
    image: np.ndarray
    depth: np.ndarray | None = None
    pose: np.ndarray | None = None
    intrinsics: dict | None = None

    @property
    def has_geometry(self) -> bool:
        return self.depth is not None and self.pose is not None and self.intrinsics is not None


def load_frames(input_dir: Path) -> list[Frame]:
    input_dir = Path(input_dir)
    if not input_dir.is_dir():
        raise InputError(f"input directory {input_dir} not found")
    frames = []
    for png in sorted(input_dir.glob("*.png")):
        name = png.stem
        image = np.asarray(Image.open(png).convert("RGB"))
        depth_path = input_dir / f"{name}_depth.npy"
        pose_path = input_dir / f"{name}_pose.json"
        intr_path = input_dir / f"{name}_intrinsics.json"
        depth = np.load(depth_path) if depth_path.is_file() else None
        pose = (
            np.array(json.loads(pose_path.read_text()), dtype=np.float64)
            if pose_path.is_file()
            else None
        )
        intrinsics = json.loads(intr_path.read_text()) if intr_path.is_file() else None
        if depth is not None and depth.shape != image.shape[:2]:
            raise InputError(f"{name}: depth shape {depth.shape} != image {image.shape[:2]}")
        frames.append(Frame(name, image, depth, pose, intrinsics))
    if not frames:
        raise InputError(f"no *.png frames in {input_dir}")
    return frames


def project_mask_points(frame: Frame, mask: np.ndarray) -> np.ndarray:
    """World-frame points of a mask's pixels, subsampled to a cap."""
    ys, xs = np.where(mask)
    if len(ys) > MAX_POINTS_PER_SEGMENT:
        idx = np.linspace(0, len(ys) - 1, MAX_POINTS_PER_SEGMENT).astype(int)
        ys, xs = ys[idx], xs[idx]
    z = frame.depth[ys, xs].astype(np.float64)
    valid = z > 0
    ys, xs, z = ys[valid], xs[valid], z[valid]
    intr = frame.intrinsics
    x_cam = (xs - intr["cx"]) / intr["fx"] * z
    y_cam = (ys - intr["cy"]) / intr["fy"] * z
    cam = np.stack([x_cam, y_cam, z, np.ones_like(z)], axis=1)
    world = cam @ frame.pose.T
    return world[:, :3].astype(np.float32)


def extract(job: ExtractionJob) -> Path:
    """Run the extraction pipeline and write a canonical archive."""
    segmenter = make_segmenter(job.segmenter, **job.segmenter_options)
    embedder = make_embedder(job.embedder, **job.embedder_options)
    captioner = make_captioner(job.captioner)
    frames = load_frames(job.input_dir)
    scene_id = job.scene_id or Path(job.input_dir).name

    segments: list[ArchiveSegment] = []
    for frame in frames:
        masks = segmenter.segment(frame.image)
        logger.info("%s: %d segments", frame.name, len(masks))
        for i, sm in enumerate(masks):
            x0, y0, x1, y1 = sm.bbox
            crop = frame.image[y0:y1, x0:x1]
            embedding = embedder.embed_crop(crop)
            fraction = float(sm.mask.sum()) / sm.mask.size
            caption = captioner.caption(crop, fraction)
            if frame.has_geometry:
                points = project_mask_points(frame, sm.mask)
                bbox = None
            else:
                points = np.zeros((0, 3), dtype=np.float32)
                bbox = (float(x0), float(y0), float(x1), float(y1))
            segments.append(
                ArchiveSegment(
                    segment_id=f"{scene_id}/{frame.name}/seg{i:04d}",
                    scene_id=scene_id,
                    caption=caption,
                    embedding=embedding,
                    points=points,
                    mask_ref=f"{frame.name}/seg{i:04d}",
                    bbox=bbox,
                )
            )
    write_archive(segments, job.output_dir)
    logger.info("wrote %d segments to %s", len(segments), job.output_dir)
    return Path(job.output_dir)
