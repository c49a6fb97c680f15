"""Domain types for clips, subclips, tubes, and label spaces.

A video is segmented per entity into spatial-temporal "tubes": binary masks
over a window of frames. Ground-truth tubes of the same frame never overlap;
stuff regions carry the reserved track id 0 while thing track ids start at 1.
All types are immutable after construction and all operations are pure.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

# Reserved identifiers.
STUFF_TRACK_ID = 0        # track id carried by every stuff annotation
VOID_CLASS = -1           # pixels claimed by no prediction after postprocessing


@dataclass(frozen=True)
class LabelSpace:
    """Category universe split into countable things and amorphous stuff."""

    thing_classes: frozenset
    stuff_classes: frozenset

    def __init__(self, thing_classes: Iterable[int], stuff_classes: Iterable[int]):
        things = frozenset(int(c) for c in thing_classes)
        stuff = frozenset(int(c) for c in stuff_classes)
        if things & stuff:
            raise ValueError(f"thing and stuff classes overlap: {sorted(things & stuff)}")
        object.__setattr__(self, "thing_classes", things)
        object.__setattr__(self, "stuff_classes", stuff)

    @property
    def num_classes(self) -> int:
        return len(self.thing_classes) + len(self.stuff_classes)

    def is_thing(self, class_id: int) -> bool:
        return class_id in self.thing_classes

    def all_classes(self) -> list:
        return sorted(self.thing_classes | self.stuff_classes)


@dataclass(frozen=True)
class VideoClip:
    """A full input video: T frames of H x W x ch intensities in [0, 1]."""

    frames: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=np.float64)
        if f.ndim != 4:
            raise ValueError(f"expected frames of shape (T, H, W, ch), got {f.shape}")
        if f.shape[0] < 1:
            raise ValueError("a clip needs at least one frame")
        if f.size and (f.min() < 0.0 or f.max() > 1.0):
            raise ValueError("frame intensities must lie in [0, 1]")
        object.__setattr__(self, "frames", f)

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]

    @property
    def channels(self) -> int:
        return self.frames.shape[3]


@dataclass(frozen=True)
class SubClip:
    """A contiguous n-frame window cut from a clip.

    The last window of a clip is padded by repeating the final frame;
    `padded_count` trailing frames are repeats and must be dropped from any
    per-frame output before evaluation.
    """

    frames: np.ndarray
    start_index: int
    padded_count: int = 0

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=np.float64)
        if f.ndim != 4 or f.shape[0] < 1:
            raise ValueError(f"expected frames of shape (n, H, W, ch) with n >= 1, got {f.shape}")
        if not 0 <= self.padded_count < f.shape[0]:
            raise ValueError(f"padded_count {self.padded_count} out of range for window {f.shape[0]}")
        object.__setattr__(self, "frames", f)

    @property
    def window_size(self) -> int:
        return self.frames.shape[0]

    @property
    def real_count(self) -> int:
        return self.window_size - self.padded_count


@dataclass(frozen=True)
class TubeMask:
    """Binary spatial-temporal mask over a frame window."""

    bits: np.ndarray
    window: tuple  # (start_index, n)

    def __post_init__(self):
        b = np.asarray(self.bits)
        if b.ndim != 3:
            raise ValueError(f"tube mask must be (n, H, W), got {b.shape}")
        if b.dtype != np.bool_:
            uniq = np.unique(b)
            if not np.all(np.isin(uniq, (0, 1))):
                raise ValueError("tube mask values must be 0/1")
            b = b.astype(bool)
        start, n = self.window
        if n != b.shape[0]:
            raise ValueError(f"window length {n} does not match mask depth {b.shape[0]}")
        object.__setattr__(self, "bits", b)
        object.__setattr__(self, "window", (int(start), int(n)))

    @property
    def area(self) -> int:
        return int(self.bits.sum())


@dataclass(frozen=True)
class TubeAnnotation:
    """A ground-truth tube: mask, category and (for things) a video-global id."""

    mask: TubeMask
    class_id: int
    track_id: int

    def __post_init__(self):
        if self.track_id < 0:
            raise ValueError("track ids are non-negative (0 is the stuff sentinel)")

    @property
    def is_stuff(self) -> bool:
        return self.track_id == STUFF_TRACK_ID


@dataclass(frozen=True)
class FrameInstance:
    """One entity's mask in a single frame (input form for tube assembly)."""

    mask: np.ndarray
    class_id: int
    track_id: int


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def split_into_subclips(clip: VideoClip, n: int) -> list:
    """Cut a clip into ceil(T/n) non-overlapping n-frame windows.

    The last window is padded by repeating the final frame; the number of
    repeats is recorded so downstream consumers can drop them.
    """
    if n < 1:
        raise ValueError(f"window size must be >= 1, got {n}")
    T = clip.frame_count
    out = []
    for start in range(0, T, n):
        chunk = clip.frames[start:start + n]
        pad = n - chunk.shape[0]
        if pad:
            tail = np.repeat(chunk[-1:], pad, axis=0)
            chunk = np.concatenate([chunk, tail], axis=0)
        out.append(SubClip(frames=chunk, start_index=start, padded_count=pad))
    return out


def stack_frame_masks(per_frame_masks: Sequence[np.ndarray], window: tuple) -> TubeMask:
    """Stack one identity's per-frame masks into a tube."""
    start, n = window
    if len(per_frame_masks) != n:
        raise ValueError(f"expected {n} frame masks, got {len(per_frame_masks)}")
    arrs = [np.asarray(m) for m in per_frame_masks]
    shape = arrs[0].shape
    for m in arrs:
        if m.shape != shape or m.ndim != 2:
            raise ValueError("all frame masks must share one (H, W) shape")
    return TubeMask(bits=np.stack(arrs).astype(bool), window=(start, n))


def tube_iou(a: TubeMask, b: TubeMask) -> float:
    """Intersection-over-union of two tubes; 0 when both are empty."""
    if a.bits.shape != b.bits.shape:
        raise ValueError(f"tube shape mismatch: {a.bits.shape} vs {b.bits.shape}")
    inter = int(np.logical_and(a.bits, b.bits).sum())
    union = int(np.logical_or(a.bits, b.bits).sum())
    if union == 0:
        return 0.0
    return inter / union


def flatten_tube_annotations(frame_annotations: Sequence[Sequence[FrameInstance]],
                             window: tuple) -> list:
    """Assemble per-identity tubes from per-frame instance masks.

    Every identity seen anywhere in the window gets one tube; frames where
    it is absent stay empty. Stuff entries (track id 0) are keyed by class
    so distinct stuff categories never merge.
    """
    start, n = window
    if len(frame_annotations) != n:
        raise ValueError(f"expected annotations for {n} frames, got {len(frame_annotations)}")

    shape = None
    per_identity: dict = {}
    class_of: dict = {}
    for t, instances in enumerate(frame_annotations):
        for inst in instances:
            m = np.asarray(inst.mask, dtype=bool)
            if m.ndim != 2:
                raise ValueError("frame masks must be 2-d")
            if shape is None:
                shape = m.shape
            elif m.shape != shape:
                raise ValueError("inconsistent frame mask shapes")
            if inst.track_id == STUFF_TRACK_ID:
                key = ("stuff", inst.class_id)
            else:
                key = ("thing", inst.track_id)
                if key in class_of and class_of[key] != inst.class_id:
                    raise ValueError(
                        f"track {inst.track_id} carries conflicting classes "
                        f"{class_of[key]} and {inst.class_id}")
            class_of[key] = inst.class_id
            slices = per_identity.setdefault(key, {})
            if t in slices:
                slices[t] = np.logical_or(slices[t], m)
            else:
                slices[t] = m

    if shape is None:
        return []

    tubes = []
    for key in sorted(per_identity, key=lambda k: (k[0], k[1])):
        slices = per_identity[key]
        bits = np.zeros((n,) + shape, dtype=bool)
        for t, m in slices.items():
            bits[t] = m
        track_id = STUFF_TRACK_ID if key[0] == "stuff" else key[1]
        tubes.append(TubeAnnotation(
            mask=TubeMask(bits=bits, window=(start, n)),
            class_id=class_of[key],
            track_id=track_id,
        ))
    return tubes


def frame_instances_from_grids(class_grid: np.ndarray, inst_grid: np.ndarray) -> list:
    """Decompose one frame's panoptic grids into FrameInstance masks."""
    class_grid = np.asarray(class_grid)
    inst_grid = np.asarray(inst_grid)
    if class_grid.shape != inst_grid.shape or class_grid.ndim != 2:
        raise ValueError("class and instance grids must share one (H, W) shape")
    out = []
    keys = np.unique(np.stack([class_grid.ravel(), inst_grid.ravel()]), axis=1)
    for class_id, track_id in keys.T:
        if class_id == VOID_CLASS:
            continue
        mask = (class_grid == class_id) & (inst_grid == track_id)
        out.append(FrameInstance(mask=mask, class_id=int(class_id), track_id=int(track_id)))
    return out
