"""Captioning backends.

The template captioner describes dominant color, size and aspect from
pixels alone; it is a deterministic stand-in for a multimodal captioner.
"""

from __future__ import annotations

import numpy as np

from .errors import ModelLoadError

_COLOR_NAMES = {
    "red": (200, 60, 60),
    "orange": (230, 140, 40),
    "yellow": (220, 210, 70),
    "green": (70, 170, 80),
    "blue": (60, 90, 200),
    "purple": (140, 80, 180),
    "white": (235, 235, 235),
    "gray": (128, 128, 128),
    "black": (25, 25, 25),
    "brown": (130, 90, 50),
}


class TemplateCaptioner:
    """Caption from dominant color + relative size + aspect."""

    def caption(self, crop: np.ndarray, mask_fraction: float) -> str:
        mean = crop.reshape(-1, 3).mean(axis=0)
        color = min(
            _COLOR_NAMES,
            key=lambda name: float(np.sum((mean - np.array(_COLOR_NAMES[name])) ** 2)),
        )
        size = "large" if mask_fraction > 0.15 else "small" if mask_fraction < 0.02 else "medium"
        h, w = crop.shape[:2]
        aspect = "wide" if w > 1.5 * h else "tall" if h > 1.5 * w else "boxy"
        return f"a photo of a {size} {color} {aspect} item"


_CAPTIONERS = {"template": TemplateCaptioner}
_UNAVAILABLE = {
    "llava": "multimodal captioner weights are not bundled; plug the "
    "model in behind the captioner interface and register it",
}


def make_captioner(name: str, **kwargs):
    if name in _UNAVAILABLE:
        raise ModelLoadError(f"captioner {name!r}: {_UNAVAILABLE[name]}")
    try:
        return _CAPTIONERS[name](**kwargs)
    except KeyError:
        raise ModelLoadError(f"unknown captioner {name!r} (have {sorted(_CAPTIONERS)})")
