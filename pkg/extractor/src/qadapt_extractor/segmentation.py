"""Image segmentation backends.

The default segmenter posterizes colors and takes connected components,
which is deterministic and needs no model weights. Heavyweight mask
models can be slotted in behind the same interface.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ModelLoadError


@dataclass(frozen=True)
class SegmentMask:
    """One extracted region of a frame."""

    mask: np.ndarray  # (H, W) bool
    bbox: tuple[int, int, int, int]  # x0, y0, x1, y1 (inclusive-exclusive)


class ColorRegionSegmenter:
    """Posterize to a small palette, then take connected components.

    Regions smaller than ``min_area`` pixels are dropped; masks come out
    in raster order of their top-left pixel, so output order is stable.
    """

    def __init__(self, levels: int = 4, min_area: int = 64):
        self.levels = levels
        self.min_area = min_area

    def segment(self, image: np.ndarray) -> list[SegmentMask]:
        if image.ndim != 3 or image.shape[2] != 3:
            raise ValueError("expected an (H, W, 3) RGB array")
        quant = (image.astype(np.uint16) * self.levels // 256).astype(np.uint8)
        key = quant[:, :, 0].astype(np.int32) * self.levels * self.levels
        key += quant[:, :, 1].astype(np.int32) * self.levels
        key += quant[:, :, 2]
        masks: list[SegmentMask] = []
        for value in np.unique(key):
            labeled, count = ndimage.label(key == value)
            for comp in range(1, count + 1):
                mask = labeled == comp
                if mask.sum() < self.min_area:
                    continue
                ys, xs = np.where(mask)
                bbox = (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)
                masks.append(SegmentMask(mask, bbox))
        masks.sort(key=lambda m: (m.bbox[1], m.bbox[0], m.bbox[3], m.bbox[2]))
        return masks


class GridSegmenter:
    """Fixed tiling fallback; useful for smoke tests and depth-only data."""

    def __init__(self, rows: int = 3, cols: int = 3):
        self.rows = rows
        self.cols = cols

    def segment(self, image: np.ndarray) -> list[SegmentMask]:
        h, w = image.shape[:2]
        masks = []
        for r in range(self.rows):
            for c in range(self.cols):
                y0, y1 = r * h // self.rows, (r + 1) * h // self.rows
                x0, x1 = c * w // self.cols, (c + 1) * w // self.cols
                mask = np.zeros((h, w), dtype=bool)
                mask[y0:y1, x0:x1] = True
                masks.append(SegmentMask(mask, (x0, y0, x1, y1)))
        return masks


_SEGMENTERS = {
    "color-regions": ColorRegionSegmenter,
    "grid": GridSegmenter,
}

_UNAVAILABLE = {
    "sam": "SegmentAnything weights are not bundled; plug the model in "
    "behind the segmenter interface and register it",
}


def make_segmenter(name: str, **kwargs):
    if name in _UNAVAILABLE:
        raise ModelLoadError(f"segmenter {name!r}: {_UNAVAILABLE[name]}")
    try:
        return _SEGMENTERS[name](**kwargs)
    except KeyError:
        raise ModelLoadError(f"unknown segmenter {name!r} (have {sorted(_SEGMENTERS)})")
