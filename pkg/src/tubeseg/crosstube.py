"""Cross-tube relationship modeling.

Two subclips sampled from the same neighbourhood are segmented
independently; their global queries are then tied together two ways:

* a linking block propagates the earlier tube's queries into the later
  tube's via multi-head attention + feed-forward, and the linked queries
  feed a lightweight embedding head;
* a temporal contrastive loss over the embeddings pulls queries of the
  same entity together across the two tubes and pushes others apart,
  with positives/negatives assigned by tube-mask IoU against the
  spatial-temporal ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .decoder import xavier_uniform
from .types import TubeMask, tube_iou

# target labels produced by assign_contrastive_targets; non-negative values
# name the matched ground-truth index
NEGATIVE = -1
IGNORE = -2

COSINE_EPS = 1e-12


@dataclass(frozen=True)
class AssignConfig:
    """Tube-IoU thresholds for contrastive target assignment."""

    alpha_pos: float = 0.7
    alpha_neg: float = 0.3

    def __post_init__(self):
        if not (0.0 <= self.alpha_neg <= self.alpha_pos <= 1.0):
            raise ValueError(
                f"need 0 <= alpha_neg <= alpha_pos <= 1, got {self.alpha_neg}, {self.alpha_pos}")


@dataclass
class ContrastiveBatch:
    """One anchor embedding with its positive and negative targets."""

    anchor: Tensor
    positives: list
    negatives: list


def sample_subclip_pair(num_subclips: int, rng: np.random.Generator, radius: int = 1) -> tuple:
    """Uniformly pick an ordered pair (i, j), i != j, |i - j| <= radius."""
    if num_subclips < 2:
        raise ValueError("need at least two subclips to sample a pair")
    if radius < 1:
        raise ValueError("neighbourhood radius must be >= 1")
    pairs = [(i, j) for i in range(num_subclips) for j in range(num_subclips)
             if i != j and abs(i - j) <= radius]
    return pairs[rng.integers(len(pairs))]


class EmbeddingHead:
    """Small fully-connected stack mapping query channels to association
    embedding channels."""

    def __init__(self, channels: int, embed_channels: int = 32,
                 rng: np.random.Generator = None):
        rng = rng or np.random.default_rng(0)
        D, E = channels, embed_channels
        self.embed_channels = E
        self.params = {
            "fc1.weight": Tensor(xavier_uniform(rng, D, D), requires_grad=True),
            "fc1.bias": Tensor(np.zeros(D), requires_grad=True),
            "fc2.weight": Tensor(xavier_uniform(rng, E, D), requires_grad=True),
            "fc2.bias": Tensor(np.zeros(E), requires_grad=True),
        }

    def embed(self, queries: Tensor) -> Tensor:
        p = self.params
        h = ad.relu(ad.linear(queries, p["fc1.weight"], p["fc1.bias"]))
        return ad.linear(h, p["fc2.weight"], p["fc2.bias"])


class CrossTubeLinker:
    """Propagates one tube's queries into another via attention.

    Queries come from the later tube, keys/values from the earlier one;
    a feed-forward follows, with residual connections and layer norm
    around both sub-blocks. The output feeds the embedding head only.
    """

    def __init__(self, channels: int, num_heads: int = 2, rng: np.random.Generator = None):
        rng = rng or np.random.default_rng(0)
        if channels % num_heads:
            raise ValueError(f"channels {channels} not divisible by heads {num_heads}")
        D = channels
        self.num_heads = num_heads
        self.head_dim = D // num_heads
        self.params = {
            "query.weight": Tensor(xavier_uniform(rng, D, D), requires_grad=True),
            "query.bias": Tensor(np.zeros(D), requires_grad=True),
            "key.weight": Tensor(xavier_uniform(rng, D, D), requires_grad=True),
            "key.bias": Tensor(np.zeros(D), requires_grad=True),
            "value.weight": Tensor(xavier_uniform(rng, D, D), requires_grad=True),
            "value.bias": Tensor(np.zeros(D), requires_grad=True),
            "out.weight": Tensor(xavier_uniform(rng, D, D), requires_grad=True),
            "out.bias": Tensor(np.zeros(D), requires_grad=True),
            "ffn1.weight": Tensor(xavier_uniform(rng, 2 * D, D), requires_grad=True),
            "ffn1.bias": Tensor(np.zeros(2 * D), requires_grad=True),
            "ffn2.weight": Tensor(xavier_uniform(rng, D, 2 * D), requires_grad=True),
            "ffn2.bias": Tensor(np.zeros(D), requires_grad=True),
            "norm1.gain": Tensor(np.ones(D), requires_grad=True),
            "norm1.bias": Tensor(np.zeros(D), requires_grad=True),
            "norm2.gain": Tensor(np.ones(D), requires_grad=True),
            "norm2.bias": Tensor(np.zeros(D), requires_grad=True),
        }

    def attention(self, q_tube: Tensor, kv_tube: Tensor) -> Tensor:
        p = self.params
        q = ad.linear(q_tube, p["query.weight"], p["query.bias"])
        k = ad.linear(kv_tube, p["key.weight"], p["key.bias"])
        v = ad.linear(kv_tube, p["value.weight"], p["value.bias"])
        scale = 1.0 / np.sqrt(self.head_dim)
        heads = []
        for h in range(self.num_heads):
            lo, hi = h * self.head_dim, (h + 1) * self.head_dim
            qh = ad.slice_cols(q, lo, hi)
            kh = ad.slice_cols(k, lo, hi)
            vh = ad.slice_cols(v, lo, hi)
            scores = ad.mul_scalar(ad.matmul(qh, ad.transpose(kh)), scale)
            attn = ad.softmax(scores, axis=-1)
            heads.append(ad.matmul(attn, vh))
        merged = ad.concat(heads, axis=1)
        return ad.linear(merged, p["out.weight"], p["out.bias"])

    def link(self, q_later: Tensor, q_earlier: Tensor) -> Tensor:
        if q_later.shape != q_earlier.shape:
            raise ValueError(f"query sets differ in shape: {q_later.shape} vs {q_earlier.shape}")
        p = self.params
        x = ad.layernorm(ad.add(q_later, self.attention(q_later, q_earlier)),
                         p["norm1.gain"], p["norm1.bias"])
        p2 = ad.relu(ad.linear(x, p["ffn1.weight"], p["ffn1.bias"]))
        ffn = ad.linear(p2, p["ffn2.weight"], p["ffn2.bias"])
        return ad.layernorm(ad.add(x, ffn), p["norm2.gain"], p["norm2.bias"])


def cross_tube_link(linker: CrossTubeLinker, q_later: Tensor, q_earlier: Tensor) -> Tensor:
    return linker.link(q_later, q_earlier)


def embed(queries: Tensor, head: EmbeddingHead) -> Tensor:
    return head.embed(queries)


def assign_contrastive_targets(pred_tubes, gt_tubes, cfg: AssignConfig) -> list:
    """Label each predicted tube against the ground truth tubes.

    A query is positive for the ground-truth tube of highest IoU when that
    IoU reaches alpha_pos (ties resolve to the lowest gt index), negative
    when its best IoU stays below alpha_neg, and ignored in between.
    Returns one label per query: the gt index, NEGATIVE, or IGNORE.
    """
    labels = []
    for pred in pred_tubes:
        if not gt_tubes:
            labels.append(NEGATIVE)
            continue
        ious = np.array([tube_iou(pred, t.mask) for t in gt_tubes])
        best = int(np.argmax(ious))
        if ious[best] >= cfg.alpha_pos:
            labels.append(best)
        elif ious[best] < cfg.alpha_neg:
            labels.append(NEGATIVE)
        else:
            labels.append(IGNORE)
    return labels


def binarized_pred_tubes(mask_logits: Tensor, window: tuple) -> list:
    """Predicted tubes at feature resolution, thresholded at logit 0."""
    bits = mask_logits.data >= 0.0
    return [TubeMask(bits=bits[q], window=window) for q in range(bits.shape[0])]


def temporal_contrastive_loss(batch: ContrastiveBatch) -> Tensor:
    """Eq-style contrastive loss for one anchor, summed over its positives:
    -sum_{y+} log[ exp(x.y+) / (exp(x.y+) + sum_{y-} exp(x.y-)) ],
    with raw (unnormalized) dot products."""
    if not batch.positives:
        return Tensor(0.0)
    neg_dots = [ad.reshape(ad.dot(batch.anchor, y), (1,)) for y in batch.negatives]
    total = None
    for y_pos in batch.positives:
        s_pos = ad.reshape(ad.dot(batch.anchor, y_pos), (1,))
        stacked = ad.concat([s_pos] + neg_dots, axis=0) if neg_dots else s_pos
        term = ad.sub(ad.logsumexp(stacked, axis=0), ad.reshape(s_pos, ()))
        total = term if total is None else ad.add(total, term)
    return total


def mean_contrastive_loss(batches) -> Tensor:
    """Average of temporal_contrastive_loss over anchors that have at least
    one positive; zero when no anchor qualifies."""
    terms = [temporal_contrastive_loss(b) for b in batches if b.positives]
    if not terms:
        return Tensor(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.mul_scalar(total, 1.0 / len(terms))


def aux_cosine_loss(x: Tensor, y: Tensor, b: int) -> Tensor:
    """Squared gap between cosine similarity and the match indicator.

    Zero-norm inputs degrade to cosine 0 through a small-epsilon guard on
    the denominator rather than dividing by zero.
    """
    if b not in (0, 1):
        raise ValueError(f"match indicator must be 0 or 1, got {b}")
    num = ad.dot(x, y)
    denom = ad.clip_min(ad.mul(ad.sqrt(ad.tsum(ad.square(x))),
                               ad.sqrt(ad.tsum(ad.square(y)))), COSINE_EPS)
    return ad.square(ad.add_scalar(ad.div(num, denom), -float(b)))


def pair_track_losses(anchor_embeddings: Tensor, anchor_tracks: list,
                      target_embeddings: Tensor, target_labels: list,
                      target_tracks: list) -> tuple:
    """Contrastive + auxiliary losses for one subclip pair.

    `anchor_tracks` maps each anchor row to its ground-truth track id (only
    matched thing queries belong here). `target_labels` is the per-query
    IoU labelling of the paired subclip and `target_tracks[g]` the track id
    of its g-th ground-truth tube (None for stuff). For an anchor of track
    t, positives are target queries positive for t; negatives are target
    queries labelled NEGATIVE or positive for a different track; IGNORE
    rows take no part. The auxiliary cosine loss averages over the same
    anchor/target pairs with indicator 1 on same-track pairs.
    """
    track_terms = []
    aux_terms = []
    for row, track in enumerate(anchor_tracks):
        anchor = ad.take_rows(anchor_embeddings, [row])
        anchor = ad.reshape(anchor, (anchor.shape[1],))
        positives, negatives = [], []
        for q, label in enumerate(target_labels):
            if label == IGNORE:
                continue
            y = ad.reshape(ad.take_rows(target_embeddings, [q]), (anchor.shape[0],))
            same = label >= 0 and target_tracks[label] == track
            if same:
                positives.append(y)
            else:
                negatives.append(y)
            aux_terms.append(aux_cosine_loss(anchor, y, 1 if same else 0))
        if positives:
            track_terms.append(ContrastiveBatch(anchor=anchor, positives=positives,
                                                negatives=negatives))
    track_loss = mean_contrastive_loss(track_terms)
    if aux_terms:
        total = aux_terms[0]
        for t in aux_terms[1:]:
            total = ad.add(total, t)
        aux_loss = ad.mul_scalar(total, 1.0 / len(aux_terms))
    else:
        aux_loss = Tensor(0.0)
    return track_loss, aux_loss
