"""Evaluation suite: VPQ at multiple window sizes, STQ (= sqrt(AQ * SQ)),
mIoU, and mVC.

Conventions, pinned so results are reproducible and testable:

* VPQ^k: over every span of k consecutive frames (stride 1 by default),
  segments are (class, id) tubes; a pred/gt pair of the same class matches
  when its tube IoU exceeds 0.5 (at most one match each, by disjointness);
  PQ per class is sum(IoU of TPs) / (TP + FP/2 + FN/2); classes absent from
  both sides of a span are excluded; span scores average classes, VPQ^k
  averages spans.
* AQ: mean over ground-truth thing tracks g of
  (1/|g|) * sum over overlapping predicted tracks p of |p n g| * IoU(p, g),
  with tracks accumulated over the full video. Videos without thing tracks
  score a vacuous 1.
* SQ / mIoU: class-mean IoU of semantic labels, accumulated over the video,
  over classes present in either side.
* mVC_c measures consistency, not correctness: among pixels whose gt label
  is constant over a c-frame window, the fraction whose predicted label is
  also constant.

Predicted pixels may carry the void class (claimed by no query); void never
forms a segment or a class.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .types import VOID_CLASS, LabelSpace

DEFAULT_VPQ_WINDOWS = (1, 2, 4, 6)
DEFAULT_MVC_WINDOWS = (2, 4, 8)

_ID_BITS = 22          # instance ids fit below 2**22 (same budget as dataio)
_SEG_BASE = 1 << _ID_BITS


@dataclass
class EvalResult:
    vpq_per_k: dict
    vpq_mean: float
    stq: float
    aq: float
    sq: float
    miou: float
    mvc_per_c: dict
    per_class: list = field(default_factory=list)

    def scores(self) -> dict:
        out = {f"vpq_{k}": v for k, v in sorted(self.vpq_per_k.items())}
        out.update({f"mvc_{c}": v for c, v in sorted(self.mvc_per_c.items())})
        out.update(vpq_mean=self.vpq_mean, stq=self.stq, aq=self.aq,
                   sq=self.sq, miou=self.miou)
        return out


def _check_aligned(pred: np.ndarray, gt: np.ndarray):
    if pred.shape != gt.shape:
        raise ValueError(f"prediction/ground-truth shape mismatch: {pred.shape} vs {gt.shape}")
    if pred.ndim != 3:
        raise ValueError("expected (T, H, W) label videos")


def _encode_segments(class_ids: np.ndarray, inst_ids: np.ndarray) -> np.ndarray:
    """One integer per pixel identifying its (class, id) segment; 0 = void."""
    return np.where(class_ids == VOID_CLASS, 0,
                    (class_ids.astype(np.int64) + 1) * _SEG_BASE + inst_ids.astype(np.int64))


def _span_class_stats(pred_class, pred_inst, gt_class, gt_inst) -> dict:
    """Per-class matching stats for one span: class -> [iou_sum, tp, fp, fn]."""
    p = _encode_segments(pred_class, pred_inst).ravel()
    g = _encode_segments(gt_class, gt_inst).ravel()

    p_ids, p_areas = np.unique(p, return_counts=True)
    g_ids, g_areas = np.unique(g, return_counts=True)
    p_area = dict(zip(p_ids.tolist(), p_areas.tolist()))
    g_area = dict(zip(g_ids.tolist(), g_areas.tolist()))
    p_area.pop(0, None)
    g_area.pop(0, None)

    both = (g.astype(np.uint64) << np.uint64(32)) + p.astype(np.uint64)
    pair_ids, inters = np.unique(both, return_counts=True)

    def seg_class(code):
        return code // _SEG_BASE - 1

    stats = {}
    for code in p_area:
        stats.setdefault(seg_class(code), [0.0, 0, 0, 0])
    for code in g_area:
        stats.setdefault(seg_class(code), [0.0, 0, 0, 0])

    matched_p, matched_g = set(), set()
    for pair, inter in zip(pair_ids.tolist(), inters.tolist()):
        g_code = int(pair >> np.uint64(32))
        p_code = int(pair & np.uint64((1 << 32) - 1))
        if p_code == 0 or g_code == 0:
            continue
        c = seg_class(p_code)
        if c != seg_class(g_code):
            continue
        union = p_area[p_code] + g_area[g_code] - inter
        iou = inter / union
        if iou > 0.5:
            entry = stats[c]
            entry[0] += iou
            entry[1] += 1
            matched_p.add(p_code)
            matched_g.add(g_code)
    for code in p_area:
        if code not in matched_p:
            stats[seg_class(code)][2] += 1
    for code in g_area:
        if code not in matched_g:
            stats[seg_class(code)][3] += 1
    return stats


def vpq(pred_class, pred_inst, gt_class, gt_inst, k: int, stride: int = 1) -> float:
    """Video panoptic quality over k-frame spans (0 when k exceeds T)."""
    _check_aligned(pred_class, gt_class)
    _check_aligned(pred_inst, gt_inst)
    T = pred_class.shape[0]
    if k < 1 or stride < 1:
        raise ValueError("k and stride must be >= 1")
    if k > T:
        raise ValueError(f"span {k} exceeds video length {T}")
    span_scores = []
    for start in range(0, T - k + 1, stride):
        sl = slice(start, start + k)
        stats = _span_class_stats(pred_class[sl], pred_inst[sl],
                                  gt_class[sl], gt_inst[sl])
        if not stats:
            continue
        per_class = [iou_sum / (tp + 0.5 * fp + 0.5 * fn)
                     for iou_sum, tp, fp, fn in stats.values()]
        span_scores.append(float(np.mean(per_class)))
    if not span_scores:
        return 0.0
    return float(np.mean(span_scores))


def vpq_per_k(pred_class, pred_inst, gt_class, gt_inst,
              windows=DEFAULT_VPQ_WINDOWS, stride: int = 1) -> dict:
    """VPQ at each window size that fits the video."""
    T = pred_class.shape[0]
    return {k: vpq(pred_class, pred_inst, gt_class, gt_inst, k, stride)
            for k in windows if k <= T}


def vpq_mean(pred_class, pred_inst, gt_class, gt_inst,
             windows=DEFAULT_VPQ_WINDOWS, stride: int = 1) -> float:
    per_k = vpq_per_k(pred_class, pred_inst, gt_class, gt_inst, windows, stride)
    return float(np.mean(list(per_k.values())))


def semantic_iou_per_class(pred_sem: np.ndarray, gt_sem: np.ndarray) -> dict:
    """Video-accumulated IoU per class present in either side (void skipped)."""
    _check_aligned(pred_sem, gt_sem)
    classes = np.union1d(np.unique(pred_sem), np.unique(gt_sem))
    out = {}
    for c in classes.tolist():
        if c == VOID_CLASS:
            continue
        pm = pred_sem == c
        gm = gt_sem == c
        union = int(np.logical_or(pm, gm).sum())
        if union == 0:
            continue
        out[int(c)] = int(np.logical_and(pm, gm).sum()) / union
    return out


def miou(pred_sem: np.ndarray, gt_sem: np.ndarray) -> float:
    per_class = semantic_iou_per_class(pred_sem, gt_sem)
    if not per_class:
        return 1.0
    return float(np.mean(list(per_class.values())))


def stq(pred_class, pred_inst, gt_class, gt_inst) -> tuple:
    """(STQ, AQ, SQ) over the full video; STQ is the geometric mean."""
    _check_aligned(pred_class, gt_class)
    _check_aligned(pred_inst, gt_inst)
    sq = miou(pred_class, gt_class)

    gt_tracks = [t for t in np.unique(gt_inst).tolist() if t > 0]
    if not gt_tracks:
        aq = 1.0
    else:
        pred_tracks = [t for t in np.unique(pred_inst).tolist() if t > 0]
        pred_area = {t: int((pred_inst == t).sum()) for t in pred_tracks}
        terms = []
        for gid in gt_tracks:
            g_mask = gt_inst == gid
            g_area = int(g_mask.sum())
            acc = 0.0
            for pid in pred_tracks:
                inter = int((g_mask & (pred_inst == pid)).sum())
                if inter == 0:
                    continue
                iou = inter / (g_area + pred_area[pid] - inter)
                acc += inter * iou
            terms.append(acc / g_area)
        aq = float(np.mean(terms))
    return float(np.sqrt(aq * sq)), aq, sq


def mvc(pred_sem: np.ndarray, gt_sem: np.ndarray, c: int) -> float:
    """Mean video consistency over c-frame windows (stride 1).

    Constant-but-wrong predictions still count as consistent; this metric
    deliberately measures stability, not accuracy.
    """
    _check_aligned(pred_sem, gt_sem)
    T = pred_sem.shape[0]
    if c < 2:
        raise ValueError("consistency window must span at least 2 frames")
    if c > T:
        raise ValueError(f"window {c} exceeds video length {T}")
    ratios = []
    for start in range(T - c + 1):
        gt_w = gt_sem[start:start + c]
        pred_w = pred_sem[start:start + c]
        gt_stable = np.all(gt_w == gt_w[0], axis=0)
        denom = int(gt_stable.sum())
        if denom == 0:
            continue
        pred_stable = np.all(pred_w == pred_w[0], axis=0)
        ratios.append(int((gt_stable & pred_stable).sum()) / denom)
    if not ratios:
        return 1.0
    return float(np.mean(ratios))


def mvc_per_c(pred_sem, gt_sem, windows=DEFAULT_MVC_WINDOWS) -> dict:
    T = pred_sem.shape[0]
    return {c: mvc(pred_sem, gt_sem, c) for c in windows if c <= T}


def per_class_table(pred_class, pred_inst, gt_class, gt_inst,
                    labels: LabelSpace) -> list:
    """Per-class rows: semantic IoU plus frame-level PQ (k=1 spans)."""
    sem = semantic_iou_per_class(pred_class, gt_class)
    T = pred_class.shape[0]
    pq_acc: dict = {}
    for t in range(T):
        stats = _span_class_stats(pred_class[t:t + 1], pred_inst[t:t + 1],
                                  gt_class[t:t + 1], gt_inst[t:t + 1])
        for c, (iou_sum, tp, fp, fn) in stats.items():
            pq_acc.setdefault(c, []).append(iou_sum / (tp + 0.5 * fp + 0.5 * fn))
    rows = []
    for c in sorted(set(sem) | set(pq_acc)):
        rows.append({
            "class_id": int(c),
            "kind": "thing" if labels.is_thing(int(c)) else "stuff",
            "sem_iou": sem.get(c, 0.0),
            "pq": float(np.mean(pq_acc[c])) if c in pq_acc else 0.0,
        })
    return rows


def evaluate_video(pred_class, pred_inst, gt_class, gt_inst, labels: LabelSpace,
                   vpq_windows=DEFAULT_VPQ_WINDOWS,
                   mvc_windows=DEFAULT_MVC_WINDOWS,
                   vpq_stride: int = 1) -> EvalResult:
    """All metrics for one video."""
    per_k = vpq_per_k(pred_class, pred_inst, gt_class, gt_inst, vpq_windows, vpq_stride)
    stq_val, aq, sq = stq(pred_class, pred_inst, gt_class, gt_inst)
    return EvalResult(
        vpq_per_k=per_k,
        vpq_mean=float(np.mean(list(per_k.values()))),
        stq=stq_val,
        aq=aq,
        sq=sq,
        miou=miou(pred_class, gt_class),
        mvc_per_c=mvc_per_c(pred_class, gt_class, mvc_windows),
        per_class=per_class_table(pred_class, pred_inst, gt_class, gt_inst, labels),
    )


def aggregate_results(results) -> EvalResult:
    """Dataset-level result: plain mean of per-video scores; per-class rows
    average over the videos where the class appears."""
    results = list(results)
    if not results:
        raise ValueError("nothing to aggregate")
    ks = sorted({k for r in results for k in r.vpq_per_k})
    cs = sorted({c for r in results for c in r.mvc_per_c})
    per_k = {k: float(np.mean([r.vpq_per_k[k] for r in results if k in r.vpq_per_k]))
             for k in ks}
    per_c = {c: float(np.mean([r.mvc_per_c[c] for r in results if c in r.mvc_per_c]))
             for c in cs}
    class_rows: dict = {}
    for r in results:
        for row in r.per_class:
            class_rows.setdefault((row["class_id"], row["kind"]), []).append(row)
    table = [{
        "class_id": cid,
        "kind": kind,
        "sem_iou": float(np.mean([r["sem_iou"] for r in rows])),
        "pq": float(np.mean([r["pq"] for r in rows])),
    } for (cid, kind), rows in sorted(class_rows.items())]
    aq = float(np.mean([r.aq for r in results]))
    sq = float(np.mean([r.sq for r in results]))
    return EvalResult(
        vpq_per_k=per_k,
        vpq_mean=float(np.mean([r.vpq_mean for r in results])),
        # recombined so stq == sqrt(aq * sq) holds at every aggregation level
        stq=float(np.sqrt(aq * sq)),
        aq=aq,
        sq=sq,
        miou=float(np.mean([r.miou for r in results])),
        mvc_per_c=per_c,
        per_class=table,
    )
