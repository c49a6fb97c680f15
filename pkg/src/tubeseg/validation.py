"""Input validation helpers for the public estimator API."""

from __future__ import annotations

import numpy as np

from .types import LabelSpace, VideoClip


def as_video_clip(x) -> VideoClip:
    """Coerce user input to a VideoClip: accepts VideoClip or a float array
    shaped (T, H, W, ch) with intensities in [0, 1]."""
    if isinstance(x, VideoClip):
        return x
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 4:
        raise ValueError(f"video must be (T, H, W, ch), got shape {arr.shape}")
    return VideoClip(frames=arr)


def as_label_grids(y, clip: VideoClip) -> tuple:
    """Coerce one video's ground truth to (class, instance) int grids of
    shape (T, H, W) matching the clip."""
    if isinstance(y, (tuple, list)) and len(y) == 2:
        class_grid, inst_grid = (np.asarray(a) for a in y)
    else:
        raise ValueError("expected ground truth as a (class_grid, instance_grid) pair")
    expected = (clip.frame_count, clip.height, clip.width)
    if class_grid.shape != expected or inst_grid.shape != expected:
        raise ValueError(
            f"ground-truth grids must be {expected}, got {class_grid.shape} / {inst_grid.shape}")
    if not np.issubdtype(class_grid.dtype, np.integer) or not np.issubdtype(inst_grid.dtype, np.integer):
        raise ValueError("ground-truth grids must be integer arrays")
    if np.any(inst_grid < 0):
        raise ValueError("instance ids must be non-negative")
    return class_grid.astype(np.int64), inst_grid.astype(np.int64)


def infer_label_space(grid_pairs) -> LabelSpace:
    """Derive the label space from ground truth: classes carrying an
    instance id anywhere are things, the rest are stuff."""
    things, everything = set(), set()
    for class_grid, inst_grid in grid_pairs:
        everything.update(np.unique(class_grid).tolist())
        tracked = np.unique(class_grid[inst_grid > 0]).tolist()
        things.update(tracked)
    everything.discard(-1)
    if not everything:
        raise ValueError("ground truth contains no classes")
    return LabelSpace(thing_classes=things, stuff_classes=everything - things)


def check_label_space(labels: LabelSpace):
    dense = list(range(labels.num_classes))
    if labels.all_classes() != dense:
        raise ValueError(f"class ids must be dense from 0, got {labels.all_classes()}")
