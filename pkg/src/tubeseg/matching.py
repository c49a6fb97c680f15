"""Tube-level set-prediction supervision.

Predictions and ground-truth tubes are put in one-to-one correspondence by
minimizing a mask-based matching cost with the Hungarian algorithm; matched
pairs are then supervised with tube-level BCE + Dice mask losses and a
classification loss whose unmatched queries are pushed toward the no-object
slot. The matching cost itself is plain numpy (no gradients flow through the
assignment), while all losses are tape ops.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

NO_OBJECT_WEIGHT = 0.1  # down-weight for queries supervised toward the no-object slot
DICE_EPS = 1.0


@dataclass(frozen=True)
class LossWeights:
    lambda_cls: float = 2.0
    lambda_ce: float = 5.0
    lambda_dice: float = 5.0
    lambda_track: float = 1.0
    lambda_aux: float = 0.5

    def __post_init__(self):
        for name, v in self.__dict__.items():
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")


@dataclass(frozen=True)
class Assignment:
    """One-to-one query/ground-truth pairing; queries not listed predict no-object."""

    pairs: tuple  # ((query_index, gt_index), ...) sorted by query index
    num_queries: int

    def matched_queries(self):
        return [q for q, _ in self.pairs]

    def matched_gts(self):
        return [g for _, g in self.pairs]

    def unmatched_queries(self):
        taken = {q for q, _ in self.pairs}
        return [q for q in range(self.num_queries) if q not in taken]


def hungarian(cost: np.ndarray) -> Assignment:
    """Minimum-cost one-to-one assignment of queries (rows) to gts (cols).

    Shortest-augmenting-path algorithm with row/column potentials, O(n^3).
    Ties during augmentation resolve to the lowest index, so the result is
    deterministic. Every gt is matched whenever N >= G.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a 2-d matrix")
    if cost.size and not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix contains non-finite entries")
    n_q, n_g = cost.shape
    if n_q == 0 or n_g == 0:
        return Assignment(pairs=(), num_queries=n_q)

    # Solve with rows = smaller side so every row gets assigned.
    if n_q <= n_g:
        mat, transposed = cost, False
    else:
        mat, transposed = cost.T, True
    rows, cols = mat.shape

    INF = np.inf
    u = np.zeros(rows + 1)
    v = np.zeros(cols + 1)
    assigned_row = np.zeros(cols + 1, dtype=np.intp)  # 1-based; 0 = free
    way = np.zeros(cols + 1, dtype=np.intp)
    for i in range(1, rows + 1):
        assigned_row[0] = i
        j0 = 0
        minv = np.full(cols + 1, INF)
        used = np.zeros(cols + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = assigned_row[j0]
            delta = INF
            j1 = 0
            for j in range(1, cols + 1):
                if used[j]:
                    continue
                cur = mat[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(cols + 1):
                if used[j]:
                    u[assigned_row[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if assigned_row[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            assigned_row[j0] = assigned_row[j1]
            j0 = j1

    pairs = []
    for j in range(1, cols + 1):
        i = assigned_row[j]
        if i == 0:
            continue
        r, c = i - 1, j - 1  # row/col of the solved matrix
        pairs.append((c, r) if transposed else (r, c))
    pairs.sort()
    return Assignment(pairs=tuple(pairs), num_queries=n_q)


def downsample_mask_majority(mask: np.ndarray, factor: int) -> np.ndarray:
    """Pool a binary (n, H, W) mask to (n, H/f, W/f); a cell is set when a
    strict majority of its f*f pixels are set."""
    if factor == 1:
        return np.asarray(mask, dtype=bool)
    m = np.asarray(mask, dtype=np.int64)
    n, H, W = m.shape
    if H % factor or W % factor:
        raise ValueError(f"mask dims {H}x{W} not divisible by pooling factor {factor}")
    pooled = m.reshape(n, H // factor, factor, W // factor, factor).sum(axis=(2, 4))
    return pooled * 2 > factor * factor


def _bce_with_logits(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    # softplus(z) - z*t, elementwise, overflow-safe
    return np.maximum(logits, 0.0) + np.log1p(np.exp(-np.abs(logits))) - logits * targets


def matching_cost(class_logits: np.ndarray, mask_logits: np.ndarray,
                  gt_masks: np.ndarray, gt_classes: np.ndarray,
                  w: LossWeights) -> np.ndarray:
    """N x G matching cost: -lambda_cls * p(c_g) + lambda_ce * BCE + lambda_dice * Dice.

    `mask_logits` is (N, S) over the flattened tube at feature resolution and
    `gt_masks` is (G, S) binary, already majority-pooled to the same grid.
    """
    class_logits = np.asarray(class_logits, dtype=np.float64)
    mask_logits = np.asarray(mask_logits, dtype=np.float64)
    gt_masks = np.asarray(gt_masks, dtype=np.float64)
    N = class_logits.shape[0]
    G = gt_masks.shape[0]
    if G == 0:
        return np.zeros((N, 0))

    shift = class_logits.max(axis=1, keepdims=True)
    e = np.exp(class_logits - shift)
    probs = e / e.sum(axis=1, keepdims=True)
    cost_cls = -probs[:, np.asarray(gt_classes, dtype=np.intp)]

    S = mask_logits.shape[1]
    pos = _bce_with_logits(mask_logits, np.ones_like(mask_logits))   # contribution if target=1
    neg = _bce_with_logits(mask_logits, np.zeros_like(mask_logits))  # contribution if target=0
    cost_bce = (pos @ gt_masks.T + neg @ (1.0 - gt_masks).T) / S

    sig = 1.0 / (1.0 + np.exp(-np.clip(mask_logits, -500, 500)))
    inter = sig @ gt_masks.T
    denom = sig.sum(axis=1, keepdims=True) + gt_masks.sum(axis=1)[None, :]
    cost_dice = 1.0 - (2.0 * inter + DICE_EPS) / (denom + DICE_EPS)

    return w.lambda_cls * cost_cls + w.lambda_ce * cost_bce + w.lambda_dice * cost_dice


# ---------------------------------------------------------------------------
# differentiable losses
# ---------------------------------------------------------------------------

def tube_dice_loss(pred_prob: Tensor, gt_mask: np.ndarray) -> Tensor:
    """1 - (2*sum(p*g)+eps) / (sum(p)+sum(g)+eps) over the flattened tube."""
    g = np.asarray(gt_mask, dtype=np.float64).reshape(-1)
    p = ad.reshape(pred_prob, (-1,))
    if p.size != g.size:
        raise ValueError(f"prediction/target size mismatch: {p.size} vs {g.size}")
    inter = ad.tsum(ad.mul(p, Tensor(g)))
    denom = ad.add_scalar(ad.tsum(p), float(g.sum()))
    num = ad.add_scalar(ad.mul_scalar(inter, 2.0), DICE_EPS)
    return ad.add_scalar(-ad.div(num, ad.add_scalar(denom, DICE_EPS)), 1.0)


def tube_bce_loss(pred_logits: Tensor, gt_mask: np.ndarray) -> Tensor:
    """Mean binary cross-entropy with logits over the flattened tube."""
    g = np.asarray(gt_mask, dtype=np.float64).reshape(-1)
    z = ad.reshape(pred_logits, (-1,))
    if z.size != g.size:
        raise ValueError(f"prediction/target size mismatch: {z.size} vs {g.size}")
    return ad.tmean(ad.sub(ad.softplus(z), ad.mul(z, Tensor(g))))


def classification_loss(class_logits: Tensor, assignment: Assignment,
                        gt_classes: np.ndarray, num_classes: int) -> Tensor:
    """Weighted cross-entropy over queries; unmatched queries target the
    no-object slot (index num_classes) at weight NO_OBJECT_WEIGHT."""
    N = class_logits.shape[0]
    targets = np.full(N, num_classes, dtype=np.intp)
    weights = np.full(N, NO_OBJECT_WEIGHT)
    for q, g in assignment.pairs:
        targets[q] = int(gt_classes[g])
        weights[q] = 1.0
    log_probs = ad.sub(class_logits, ad.logsumexp(class_logits, axis=-1, keepdims=True))
    picked = ad.gather_pairs(log_probs, np.arange(N), targets)
    weighted = ad.mul(picked, Tensor(-weights))
    return ad.mul_scalar(ad.tsum(weighted), 1.0 / float(weights.sum()))


def stage_segmentation_loss(class_logits: Tensor, mask_logits: Tensor,
                            gt_masks: np.ndarray, gt_classes: np.ndarray,
                            assignment: Assignment, num_classes: int,
                            w: LossWeights) -> Tensor:
    """lambda-weighted classification + mask BCE + Dice for one decoder stage."""
    loss = ad.mul_scalar(
        classification_loss(class_logits, assignment, gt_classes, num_classes),
        w.lambda_cls)
    if assignment.pairs:
        qs = np.array(assignment.matched_queries(), dtype=np.intp)
        gs = np.array(assignment.matched_gts(), dtype=np.intp)
        flat = ad.reshape(mask_logits, (mask_logits.shape[0], -1))
        picked = ad.take_rows(flat, qs)
        targets = np.asarray(gt_masks, dtype=np.float64).reshape(len(gt_masks), -1)[gs]
        bce = ad.tmean(ad.sub(ad.softplus(picked), ad.mul(picked, Tensor(targets))))

        probs = ad.sigmoid(picked)
        inter = ad.tsum(ad.mul(probs, Tensor(targets)), axis=1)
        denom = ad.add(ad.tsum(probs, axis=1), Tensor(targets.sum(axis=1)))
        dice_terms = ad.add_scalar(
            -ad.div(ad.add_scalar(ad.mul_scalar(inter, 2.0), DICE_EPS),
                    ad.add_scalar(denom, DICE_EPS)), 1.0)
        dice = ad.tmean(dice_terms)
        loss = ad.add(loss, ad.add(ad.mul_scalar(bce, w.lambda_ce),
                                   ad.mul_scalar(dice, w.lambda_dice)))
    return loss


def match_stage(class_logits: Tensor, mask_logits: Tensor,
                gt_masks: np.ndarray, gt_classes: np.ndarray,
                w: LossWeights) -> Assignment:
    """Hungarian assignment for one stage's predictions (no gradient flow)."""
    flat = mask_logits.data.reshape(mask_logits.shape[0], -1)
    targets = np.asarray(gt_masks, dtype=np.float64).reshape(len(gt_masks), -1) if len(gt_masks) \
        else np.zeros((0, flat.shape[1]))
    cost = matching_cost(class_logits.data, flat, targets, gt_classes, w)
    return hungarian(cost)


def total_loss(stage_preds_per_subclip, gts_per_subclip, num_classes: int,
               w: LossWeights, mode: str = "VPS",
               track_loss: Tensor = None, aux_loss: Tensor = None) -> Tensor:
    """Full training objective: per-stage segmentation losses summed over
    decoder stages and averaged over subclips, plus the tracking terms.

    In VSS mode the contrastive and auxiliary tracking terms are dropped.
    """
    if mode not in ("VPS", "VIS", "VSS"):
        raise ValueError(f"unknown mode {mode!r}")
    pieces = []
    for stage_preds, gts in zip(stage_preds_per_subclip, gts_per_subclip):
        gt_masks = np.stack([t.mask.bits for t in gts]) if gts else np.zeros((0, 1))
        gt_classes = np.array([t.class_id for t in gts], dtype=np.intp)
        sub_total = None
        for pred in stage_preds:
            assignment = match_stage(pred.class_logits, pred.mask_logits,
                                     gt_masks, gt_classes, w)
            stage = stage_segmentation_loss(pred.class_logits, pred.mask_logits,
                                            gt_masks, gt_classes, assignment,
                                            num_classes, w)
            sub_total = stage if sub_total is None else ad.add(sub_total, stage)
        pieces.append(sub_total)
    loss = pieces[0]
    for p in pieces[1:]:
        loss = ad.add(loss, p)
    loss = ad.mul_scalar(loss, 1.0 / len(pieces))
    if mode != "VSS":
        if track_loss is not None:
            loss = ad.add(loss, ad.mul_scalar(track_loss, w.lambda_track))
        if aux_loss is not None:
            loss = ad.add(loss, ad.mul_scalar(aux_loss, w.lambda_aux))
    return loss
