"""Near-online inference: per-subclip panoptic assembly and tube linking.

A video is cut into inference windows, each window is decoded into tube
predictions, and the surviving thing tubes are associated across windows by
bi-directional softmax similarity of their learned embeddings. Identity
inside a window is the query index; only window boundaries need matching.
Padded frames produced by the last window are dropped here, at the output
boundary, so downstream metrics never see them.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import no_grad
from .decoder import upsample_nearest
from .types import STUFF_TRACK_ID, VOID_CLASS, LabelSpace, VideoClip

MODES = ("VPS", "VIS", "VSS")


@dataclass(frozen=True)
class InferenceConfig:
    window: int = 6
    score_thresh: float = 0.3
    overlap_thresh: float = 0.8
    match_thresh: float = 0.5
    max_age: int = 2
    mode: str = "VPS"
    use_linked_queries: bool = True
    overlap: int = 0  # frames shared between consecutive windows

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("inference window must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not 0 <= self.overlap < self.window:
            raise ValueError("overlap must satisfy 0 <= overlap < window")
        if self.max_age < 1:
            raise ValueError("max_age must be >= 1")


@dataclass
class TrackRecord:
    embedding: np.ndarray
    class_id: int
    age: int
    last_subclip: int


@dataclass
class TrackStore:
    """Cross-subclip identity state; ids are unique and monotonic."""

    tracks: dict = field(default_factory=dict)
    next_id: int = 1

    def live_ids(self) -> list:
        return sorted(self.tracks)

    def new_track(self, embedding: np.ndarray, class_id: int, subclip_index: int) -> int:
        tid = self.next_id
        self.next_id += 1
        self.tracks[tid] = TrackRecord(embedding=embedding.copy(), class_id=class_id,
                                       age=0, last_subclip=subclip_index)
        return tid


@dataclass
class PanopticMap:
    """Per-frame class and instance grids; instance 0 marks stuff or none."""

    class_ids: np.ndarray     # (T, H, W) int
    instance_ids: np.ndarray  # (T, H, W) int

    def __post_init__(self):
        if self.class_ids.shape != self.instance_ids.shape:
            raise ValueError("class and instance grids must align")


@dataclass
class PostprocessResult:
    class_grid: np.ndarray   # (n, H, W); VOID_CLASS where no query claims a pixel
    query_grid: np.ndarray   # (n, H, W); query index on thing pixels, else -1
    kept_queries: list       # queries passing the class/score filter
    thing_queries: list      # subset that produced a surviving thing segment
    query_classes: np.ndarray
    query_scores: np.ndarray


@dataclass
class InferenceResult:
    panoptic: PanopticMap
    tracks: list            # dicts: track_id, class_id, first_subclip, last_subclip
    frames_per_second: float
    elapsed_seconds: float


def _class_probs(class_logits: np.ndarray) -> np.ndarray:
    shift = class_logits.max(axis=-1, keepdims=True)
    e = np.exp(class_logits - shift)
    return e / e.sum(axis=-1, keepdims=True)


def panoptic_postprocess(prediction, labels: LabelSpace, cfg: InferenceConfig,
                         patch_size: int) -> PostprocessResult:
    """Fuse per-query class scores and tube masks into panoptic grids.

    A query survives when its top class is a real category with probability
    at or above score_thresh (in VIS mode stuff categories also drop). Each
    pixel goes to the kept query maximizing score * sigmoid(mask), provided
    that query's own mask clears 0.5 there; other pixels stay void. Thing
    tubes keeping less than overlap_thresh of their full sigmoid mask are
    discarded; stuff segments of one class merge.
    """
    class_logits = prediction.class_logits.data
    mask_logits = prediction.mask_logits.data
    num_classes = class_logits.shape[1] - 1
    probs = _class_probs(class_logits)
    top_class = probs[:, :num_classes].argmax(axis=1)
    top_score = probs[np.arange(len(probs)), top_class]
    no_object = probs.argmax(axis=1) == num_classes

    keep = ~no_object & (top_score >= cfg.score_thresh)
    if cfg.mode == "VIS":
        keep &= np.array([labels.is_thing(int(c)) for c in top_class])
    kept = [int(q) for q in np.flatnonzero(keep)]

    n = mask_logits.shape[1]
    H = mask_logits.shape[2] * patch_size
    W = mask_logits.shape[3] * patch_size
    class_grid = np.full((n, H, W), VOID_CLASS, dtype=np.int64)
    query_grid = np.full((n, H, W), -1, dtype=np.int64)
    if not kept:
        return PostprocessResult(class_grid, query_grid, [], [], top_class, top_score)

    sig = 1.0 / (1.0 + np.exp(-upsample_nearest(mask_logits[kept], patch_size)))
    weighted = top_score[kept, None, None, None] * sig
    winner = weighted.argmax(axis=0)                      # (n, H, W) index into kept
    win_sig = np.take_along_axis(sig, winner[None], axis=0)[0]
    claimed = win_sig >= 0.5                              # void elsewhere

    thing_queries = []
    for slot, q in enumerate(kept):
        c = int(top_class[q])
        seg = claimed & (winner == slot)
        if labels.is_thing(c):
            full = sig[slot] >= 0.5
            full_area = int(full.sum())
            seg_area = int((seg & full).sum())
            if full_area == 0 or seg_area == 0 or seg_area / full_area < cfg.overlap_thresh:
                continue
            class_grid[seg] = c
            query_grid[seg] = q
            thing_queries.append(q)
        else:
            class_grid[seg] = c
    return PostprocessResult(class_grid, query_grid, kept, thing_queries,
                             top_class, top_score)


def association_scores(prev_embeddings: np.ndarray, cur_embeddings: np.ndarray) -> np.ndarray:
    """Bi-directional softmax similarity, (K current) x (M previous)."""
    K = cur_embeddings.shape[0]
    M = prev_embeddings.shape[0]
    if K == 0 or M == 0:
        return np.zeros((K, M))

    def rowwise_softmax(x):
        shift = x.max(axis=1, keepdims=True)
        e = np.exp(x - shift)
        return e / e.sum(axis=1, keepdims=True)

    forward = rowwise_softmax(cur_embeddings @ prev_embeddings.T)   # over M
    backward = rowwise_softmax(prev_embeddings @ cur_embeddings.T)  # over K
    return 0.5 * (forward + backward.T)


def link_tubes(store: TrackStore, cur_embeddings: np.ndarray, cur_classes,
               cfg: InferenceConfig, subclip_index: int) -> list:
    """Greedy descending-score matching of current tubes to stored tracks.

    A pair is accepted when its score reaches match_thresh and the classes
    agree. Unmatched tubes open fresh tracks; unmatched tracks age and are
    evicted once their age reaches max_age.
    """
    track_ids = store.live_ids()
    prev = (np.stack([store.tracks[t].embedding for t in track_ids])
            if track_ids else np.zeros((0, cur_embeddings.shape[1] if cur_embeddings.size else 0)))
    scores = association_scores(prev, cur_embeddings)

    order = []
    for k in range(scores.shape[0]):
        for m in range(scores.shape[1]):
            order.append((-scores[k, m], k, m))
    order.sort()

    assigned = [None] * len(cur_classes)
    used_tracks = set()
    for neg_score, k, m in order:
        if -neg_score < cfg.match_thresh:
            break
        if assigned[k] is not None or m in used_tracks:
            continue
        tid = track_ids[m]
        if store.tracks[tid].class_id != int(cur_classes[k]):
            continue
        assigned[k] = tid
        used_tracks.add(m)
        rec = store.tracks[tid]
        rec.embedding = cur_embeddings[k].copy()
        rec.age = 0
        rec.last_subclip = subclip_index

    for k in range(len(cur_classes)):
        if assigned[k] is None:
            assigned[k] = store.new_track(cur_embeddings[k], int(cur_classes[k]), subclip_index)

    for m, tid in enumerate(track_ids):
        if m not in used_tracks:
            rec = store.tracks[tid]
            rec.age += 1
            if rec.age >= cfg.max_age:
                del store.tracks[tid]
    return assigned


def _inference_windows(video: VideoClip, cfg: InferenceConfig):
    """Window start offsets and padded frame blocks for the configured
    window/overlap; every frame is covered and order is temporal."""
    T = video.frame_count
    W = cfg.window
    stride = W - cfg.overlap
    windows = []
    start = 0
    while True:
        chunk = video.frames[start:start + W]
        pad = W - chunk.shape[0]
        if pad:
            chunk = np.concatenate([chunk, np.repeat(chunk[-1:], pad, axis=0)], axis=0)
        windows.append((start, chunk, pad))
        if start + W >= T:
            break
        start += stride
    return windows


def run_inference(video: VideoClip, model, labels: LabelSpace,
                  cfg: InferenceConfig) -> InferenceResult:
    """Segment and track a full video.

    Subclips are decoded independently; surviving thing tubes are embedded
    (through the linking block against the previous subclip's queries when
    enabled) and greedily associated with the track store. With overlapping
    windows the earlier window's output wins on shared frames.
    """
    T = video.frame_count
    H, Wd = video.height, video.width
    class_out = np.full((T, H, Wd), VOID_CLASS, dtype=np.int64)
    inst_out = np.zeros((T, H, Wd), dtype=np.int64)
    written = np.zeros(T, dtype=bool)

    store = TrackStore()
    track_meta = {}
    prev_queries = None
    t0 = time.perf_counter()
    with no_grad():
        for si, (start, frames, pad) in enumerate(_inference_windows(video, cfg)):
            preds = model.forward_subclip(frames)
            final = preds[-1]
            post = panoptic_postprocess(final, labels, cfg, model.config.patch_size)

            queries = final.queries
            if cfg.use_linked_queries and prev_queries is not None:
                emb_all = model.embed_queries(model.link_queries(queries, prev_queries)).data
            else:
                emb_all = model.embed_queries(queries).data
            prev_queries = queries

            things = post.thing_queries
            cur_emb = emb_all[things] if things else np.zeros((0, model.config.embed_channels))
            cur_cls = [int(post.query_classes[q]) for q in things]
            track_ids = link_tubes(store, cur_emb, cur_cls, cfg, si)

            remap = {q: tid for q, tid in zip(things, track_ids)}
            for q, tid in remap.items():
                meta = track_meta.setdefault(tid, {
                    "track_id": tid, "class_id": int(post.query_classes[q]),
                    "first_subclip": si, "last_subclip": si})
                meta["last_subclip"] = si

            real = cfg.window - pad
            for local_t in range(real):
                t = start + local_t
                if t >= T or written[t]:
                    continue
                written[t] = True
                class_out[t] = post.class_grid[local_t]
                frame_inst = np.zeros((H, Wd), dtype=np.int64)
                for q, tid in remap.items():
                    frame_inst[post.query_grid[local_t] == q] = tid
                inst_out[t] = frame_inst
    elapsed = time.perf_counter() - t0

    tracks = [track_meta[tid] for tid in sorted(track_meta)]
    fps = T / elapsed if elapsed > 0 else float("inf")
    return InferenceResult(panoptic=PanopticMap(class_out, inst_out),
                           tracks=tracks, frames_per_second=fps,
                           elapsed_seconds=elapsed)


def run_vss_inference(video: VideoClip, model, cfg: InferenceConfig) -> np.ndarray:
    """Semantic-only path: per pixel, argmax over classes of the
    probability-weighted sigmoid mask sum. No tracking, no instances."""
    T, H, Wd = video.frame_count, video.height, video.width
    out = np.zeros((T, H, Wd), dtype=np.int64)
    written = np.zeros(T, dtype=bool)
    with no_grad():
        for start, frames, pad in _inference_windows(video, cfg):
            final = model.forward_subclip(frames)[-1]
            probs = _class_probs(final.class_logits.data)[:, :model.config.num_classes]
            sig = 1.0 / (1.0 + np.exp(-upsample_nearest(final.mask_logits.data,
                                                        model.config.patch_size)))
            # fused[c, t, y, x] = sum_q p_q(c) * sig_q(t, y, x)
            fused = np.einsum("qc,qtyx->ctyx", probs, sig)
            labels = fused.argmax(axis=0)
            real = cfg.window - pad
            for local_t in range(real):
                t = start + local_t
                if t >= T or written[t]:
                    continue
                written[t] = True
                out[t] = labels[local_t]
    return out
