"""Bit-exact on-disk formats: panoptic grids, frame rasters, dataset
manifests, and model checkpoints.

All binary files open with a 4-byte magic and a u32 format version and are
little-endian throughout. A panoptic cell packs class and instance as
class * 2**22 + instance, with the all-ones cell reserved for void pixels.
Corrupt or mismatched files raise DataFormatError; nothing is silently
coerced.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .types import VOID_CLASS, LabelSpace, VideoClip

FORMAT_VERSION = 1
GRID_MAGIC = b"TLNK"
FRAME_MAGIC = b"TLNF"
CHECKPOINT_MAGIC = b"TLCK"

INSTANCE_BITS = 22
INSTANCE_BASE = 1 << INSTANCE_BITS     # cell = class * 2**22 + instance
MAX_CLASS = 1000
MAX_INSTANCE = INSTANCE_BASE
VOID_CELL = 0xFFFFFFFF


class DataFormatError(ValueError):
    """A file failed structural validation (magic, version, size, range)."""


# ---------------------------------------------------------------------------
# panoptic grids
# ---------------------------------------------------------------------------

def write_panoptic_grid(path, class_grid: np.ndarray, instance_grid: np.ndarray):
    class_grid = np.asarray(class_grid, dtype=np.int64)
    instance_grid = np.asarray(instance_grid, dtype=np.int64)
    if class_grid.shape != instance_grid.shape or class_grid.ndim != 2:
        raise DataFormatError("grids must be two matching (H, W) arrays")
    void = class_grid == VOID_CLASS
    if np.any((class_grid < 0) & ~void) or np.any(class_grid >= MAX_CLASS):
        raise DataFormatError(f"class ids must lie in [0, {MAX_CLASS}) or be the void class")
    if np.any(instance_grid < 0) or np.any(instance_grid >= MAX_INSTANCE):
        raise DataFormatError(f"instance ids must lie in [0, {MAX_INSTANCE})")
    cells = (class_grid * INSTANCE_BASE + instance_grid).astype(np.uint32)
    cells[void] = VOID_CELL
    H, W = class_grid.shape
    with open(path, "wb") as fh:
        fh.write(GRID_MAGIC)
        fh.write(struct.pack("<III", FORMAT_VERSION, H, W))
        fh.write(cells.astype("<u4").tobytes())


def read_panoptic_grid(path):
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise DataFormatError(f"{path}: truncated header")
    if raw[:4] != GRID_MAGIC:
        raise DataFormatError(f"{path}: bad magic {raw[:4]!r}")
    version, H, W = struct.unpack("<III", raw[4:16])
    if version != FORMAT_VERSION:
        raise DataFormatError(f"{path}: unsupported format version {version}")
    expected = 16 + 4 * H * W
    if len(raw) != expected:
        raise DataFormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    cells = np.frombuffer(raw, dtype="<u4", offset=16).reshape(H, W).astype(np.int64)
    void = cells == VOID_CELL
    class_grid = cells // INSTANCE_BASE
    instance_grid = cells % INSTANCE_BASE
    class_grid[void] = VOID_CLASS
    instance_grid[void] = 0
    return class_grid, instance_grid


# ---------------------------------------------------------------------------
# frame rasters
# ---------------------------------------------------------------------------

def write_frame(path, frame: np.ndarray):
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 3:
        raise DataFormatError("frame must be (H, W, ch)")
    H, W, C = frame.shape
    with open(path, "wb") as fh:
        fh.write(FRAME_MAGIC)
        fh.write(struct.pack("<IIII", FORMAT_VERSION, H, W, C))
        fh.write(frame.astype("<f8").tobytes())


def read_frame(path):
    raw = Path(path).read_bytes()
    if len(raw) < 20:
        raise DataFormatError(f"{path}: truncated header")
    if raw[:4] != FRAME_MAGIC:
        raise DataFormatError(f"{path}: bad magic {raw[:4]!r}")
    version, H, W, C = struct.unpack("<IIII", raw[4:20])
    if version != FORMAT_VERSION:
        raise DataFormatError(f"{path}: unsupported format version {version}")
    expected = 20 + 8 * H * W * C
    if len(raw) != expected:
        raise DataFormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f8", offset=20).reshape(H, W, C).copy()


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass
class VideoRecord:
    video_id: str
    clip: VideoClip
    gt_class: np.ndarray   # (T, H, W)
    gt_inst: np.ndarray    # (T, H, W)


@dataclass
class DatasetBundle:
    name: str
    seed: int
    labels: LabelSpace
    videos: list


def write_dataset(out_dir, name: str, seed: int, labels: LabelSpace, videos):
    """Write a split directory: manifest.json plus per-frame binaries."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": FORMAT_VERSION,
        "name": name,
        "seed": seed,
        "label_space": {
            "thing_classes": sorted(labels.thing_classes),
            "stuff_classes": sorted(labels.stuff_classes),
        },
        "videos": [],
    }
    for rec in videos:
        vdir = out / rec.video_id
        vdir.mkdir(exist_ok=True)
        frame_files, ann_files = [], []
        for t in range(rec.clip.frame_count):
            ff = f"{rec.video_id}/frame_{t:03d}.tlf"
            af = f"{rec.video_id}/ann_{t:03d}.tlg"
            write_frame(out / ff, rec.clip.frames[t])
            write_panoptic_grid(out / af, rec.gt_class[t], rec.gt_inst[t])
            frame_files.append(ff)
            ann_files.append(af)
        manifest["videos"].append({
            "id": rec.video_id,
            "frame_count": rec.clip.frame_count,
            "height": rec.clip.height,
            "width": rec.clip.width,
            "frames": frame_files,
            "annotations": ann_files,
        })
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out / "manifest.json"


def _validate_label_space(entry: dict) -> LabelSpace:
    labels = LabelSpace(entry["thing_classes"], entry["stuff_classes"])
    dense = list(range(labels.num_classes))
    if labels.all_classes() != dense:
        raise DataFormatError(f"label ids must be dense from 0, got {labels.all_classes()}")
    return labels


def load_dataset(split_dir) -> DatasetBundle:
    split = Path(split_dir)
    manifest_path = split / "manifest.json"
    if not manifest_path.exists():
        raise DataFormatError(f"no manifest.json under {split}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DataFormatError(f"unsupported dataset format version {manifest.get('format_version')}")
    labels = _validate_label_space(manifest["label_space"])
    videos = []
    for entry in manifest["videos"]:
        frames, classes, insts = [], [], []
        if len(entry["frames"]) != entry["frame_count"]:
            raise DataFormatError(f"video {entry['id']}: frame list does not match frame_count")
        for ff, af in zip(entry["frames"], entry["annotations"]):
            fpath, apath = split / ff, split / af
            if not fpath.exists() or not apath.exists():
                raise DataFormatError(f"video {entry['id']}: missing file {ff} or {af}")
            frames.append(read_frame(fpath))
            c, i = read_panoptic_grid(apath)
            classes.append(c)
            insts.append(i)
        videos.append(VideoRecord(
            video_id=entry["id"],
            clip=VideoClip(frames=np.stack(frames)),
            gt_class=np.stack(classes),
            gt_inst=np.stack(insts),
        ))
    return DatasetBundle(name=manifest["name"], seed=manifest["seed"],
                         labels=labels, videos=videos)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model, path):
    """Serialize model config + every named parameter as float64 arrays."""
    state = model.state_arrays()
    config_blob = json.dumps(model.config_dict(), sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(config_blob)))
        fh.write(config_blob)
        fh.write(struct.pack("<I", len(state)))
        for name, arr in state.items():
            encoded = name.encode()
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f8").tobytes())


def load_checkpoint(path):
    """Rebuild the model a checkpoint describes; the parameter set must
    match its embedded architecture exactly."""
    from .model import TubeSegModel

    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise DataFormatError(f"{path}: bad magic {raw[:4]!r}")
    off = 4
    try:
        (version,) = struct.unpack_from("<I", raw, off); off += 4
        if version != FORMAT_VERSION:
            raise DataFormatError(f"{path}: unsupported checkpoint version {version}")
        (config_len,) = struct.unpack_from("<I", raw, off); off += 4
        config = json.loads(raw[off:off + config_len].decode()); off += config_len
        (count,) = struct.unpack_from("<I", raw, off); off += 4
        state = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", raw, off); off += 2
            name = raw[off:off + name_len].decode(); off += name_len
            (ndim,) = struct.unpack_from("<B", raw, off); off += 1
            shape = struct.unpack_from(f"<{ndim}I", raw, off); off += 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            if off + 8 * n > len(raw):
                raise struct.error(f"parameter {name} runs past end of file")
            arr = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape)
            off += 8 * n
            state[name] = arr.copy()
    except (struct.error, UnicodeDecodeError) as exc:
        raise DataFormatError(f"{path}: truncated or corrupt checkpoint ({exc})") from exc
    if off != len(raw):
        raise DataFormatError(f"{path}: {len(raw) - off} trailing bytes")
    model = TubeSegModel.from_config_dict(config)
    model.load_state(state)
    return model
