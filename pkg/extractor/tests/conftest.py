import json

import numpy as np
import pytest
from PIL import Image


def paint_frame(path, blobs, size=(96, 96), background=(10, 10, 10)):
    """Write a synthetic frame: solid background plus colored rectangles."""
    img = np.full((size[1], size[0], 3), background, dtype=np.uint8)
    for (x0, y0, x1, y1), color in blobs:
        img[y0:y1, x0:x1] = color
    Image.fromarray(img).save(path)
    return img


@pytest.fixture
def rgb_frame_dir(tmp_path):
    frames = tmp_path / "frames"
    frames.mkdir()
    paint_frame(
        frames / "frame0.png",
        [
            ((8, 8, 40, 40), (200, 40, 40)),
            ((56, 8, 88, 30), (40, 60, 200)),
            ((20, 60, 80, 88), (60, 180, 70)),
        ],
    )
    return frames


@pytest.fixture
def rgbd_frame_dir(tmp_path):
    frames = tmp_path / "frames_rgbd"
    frames.mkdir()
    paint_frame(
        frames / "frame0.png",
        [((8, 8, 40, 40), (200, 40, 40)), ((56, 8, 88, 30), (40, 60, 200))],
    )
    depth = np.full((96, 96), 2.0, dtype=np.float32)
    np.save(frames / "frame0_depth.npy", depth)
    (frames / "frame0_pose.json").write_text(json.dumps(np.eye(4).tolist()))
    (frames / "frame0_intrinsics.json").write_text(
        json.dumps({"fx": 60.0, "fy": 60.0, "cx": 48.0, "cy": 48.0})
    )
    return frames
