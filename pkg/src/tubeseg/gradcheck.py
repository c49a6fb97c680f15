"""Finite-difference verification of every differentiable building block:
the masked cross-attention stage, the contrastive and auxiliary losses, the
cross-tube linking block, the segmentation losses, and the fully composed
training objective on a tiny model. Used by the `gradcheck` CLI command and
by the acceptance suite.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import BIG_NEGATIVE, Tensor, backward, finite_difference_check, no_grad
from .crosstube import ContrastiveBatch, CrossTubeLinker, aux_cosine_loss, temporal_contrastive_loss
from .decoder import DecoderStage, masked_cross_attention
from .matching import (Assignment, LossWeights, classification_loss, total_loss,
                       tube_bce_loss, tube_dice_loss)
from .model import ModelConfig, TubeSegModel
from .types import TubeAnnotation, TubeMask

DEFAULT_TOLERANCE = 1e-4
DEFAULT_EPS = 1e-6


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    trials: int
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def param_gradient_error(loss_fn, param: Tensor, eps: float = DEFAULT_EPS) -> float:
    """Max relative error of d loss / d param against central differences.

    `loss_fn` rebuilds the loss graph from current parameter values; the
    parameter is bumped in place for the probes and restored afterwards.
    """
    param.grad = None
    loss = loss_fn()
    backward(loss)
    analytic = np.zeros_like(param.data) if param.grad is None else param.grad.copy()

    flat = param.data.reshape(-1)
    err = 0.0
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = loss_fn().item()
            flat[i] = orig - eps
            lo = loss_fn().item()
            flat[i] = orig
            fd = (hi - lo) / (2.0 * eps)
            a = analytic.reshape(-1)[i]
            err = max(err, abs(a - fd) / max(1.0, abs(a)))
    param.grad = None
    return err


def _scalar_probe(out: Tensor, weights: np.ndarray) -> Tensor:
    return ad.tsum(ad.mul(out, Tensor(weights)))


# -- individual checks -------------------------------------------------------

def check_attention_stage(trials: int, rng: np.random.Generator) -> float:
    """Masked cross attention (query path on even trials, token path on odd)."""
    worst = 0.0
    for trial in range(trials):
        N, D, S = 3, 6, 8
        stage = DecoderStage(rng, channels=D, ffn_hidden=2 * D)
        tokens = rng.normal(size=(S, D))
        queries = rng.normal(size=(N, D))
        mask = np.where(rng.random((N, S)) < 0.3, -BIG_NEGATIVE, 0.0)
        mask[trial % N] = -BIG_NEGATIVE  # exercise the all-masked fallback
        probe = rng.normal(size=(N, D))

        def run(q_t, tok_t):
            out = masked_cross_attention(q_t, stage.keys(tok_t), stage.values(tok_t),
                                         mask, stage.query_mlp)
            return _scalar_probe(out, probe)

        if trial % 2 == 0:
            f = lambda x: run(x, Tensor(tokens))
            worst = max(worst, finite_difference_check(f, Tensor(queries)))
        else:
            f = lambda x: run(Tensor(queries), x)
            worst = max(worst, finite_difference_check(f, Tensor(tokens)))
    return worst


def check_contrastive(trials: int, rng: np.random.Generator) -> float:
    worst = 0.0
    for trial in range(trials):
        E = 4
        n_pos = int(rng.integers(1, 3))
        n_neg = int(rng.integers(0, 4))
        targets = rng.normal(size=(n_pos + n_neg, E))
        anchor = rng.normal(size=E)

        def from_anchor(x):
            batch = ContrastiveBatch(
                anchor=x,
                positives=[Tensor(targets[i]) for i in range(n_pos)],
                negatives=[Tensor(targets[n_pos + i]) for i in range(n_neg)])
            return temporal_contrastive_loss(batch)

        def from_targets(x):
            batch = ContrastiveBatch(
                anchor=Tensor(anchor),
                positives=[ad.reshape(ad.take_rows(x, [i]), (E,)) for i in range(n_pos)],
                negatives=[ad.reshape(ad.take_rows(x, [n_pos + i]), (E,))
                           for i in range(n_neg)])
            return temporal_contrastive_loss(batch)

        if trial % 2 == 0:
            worst = max(worst, finite_difference_check(from_anchor, Tensor(anchor)))
        else:
            worst = max(worst, finite_difference_check(from_targets, Tensor(targets)))
    return worst


def check_aux_cosine(trials: int, rng: np.random.Generator) -> float:
    worst = 0.0
    for trial in range(trials):
        E = 5
        x = rng.normal(size=E) + np.sign(rng.normal(size=E)) * 0.2  # keep norms off zero
        y = rng.normal(size=E) + np.sign(rng.normal(size=E)) * 0.2
        b = trial % 2
        f = lambda t: aux_cosine_loss(t, Tensor(y), b)
        worst = max(worst, finite_difference_check(f, Tensor(x)))
        g = lambda t: aux_cosine_loss(Tensor(x), t, b)
        worst = max(worst, finite_difference_check(g, Tensor(y)))
    return worst


def check_cross_tube_link(trials: int, rng: np.random.Generator) -> float:
    worst = 0.0
    for trial in range(trials):
        N, D = 3, 8
        linker = CrossTubeLinker(D, num_heads=2, rng=rng)
        q_later = rng.normal(size=(N, D))
        q_earlier = rng.normal(size=(N, D))
        probe = rng.normal(size=(N, D))

        def run(late_t, early_t):
            return _scalar_probe(linker.link(late_t, early_t), probe)

        if trial % 2 == 0:
            f = lambda x: run(x, Tensor(q_earlier))
            worst = max(worst, finite_difference_check(f, Tensor(q_later)))
        else:
            f = lambda x: run(Tensor(q_later), x)
            worst = max(worst, finite_difference_check(f, Tensor(q_earlier)))
    return worst


def check_dice(trials: int, rng: np.random.Generator) -> float:
    worst = 0.0
    for _ in range(trials):
        shape = (2, 3, 3)
        logits = rng.normal(size=shape) * 2
        gt = (rng.random(shape) < 0.4).astype(float)
        f = lambda x: tube_dice_loss(ad.sigmoid(x), gt)
        worst = max(worst, finite_difference_check(f, Tensor(logits)))
    return worst


def check_bce(trials: int, rng: np.random.Generator) -> float:
    worst = 0.0
    for _ in range(trials):
        shape = (2, 3, 3)
        logits = rng.normal(size=shape) * 2
        gt = (rng.random(shape) < 0.4).astype(float)
        f = lambda x: tube_bce_loss(x, gt)
        worst = max(worst, finite_difference_check(f, Tensor(logits)))
    return worst


def check_classification(trials: int, rng: np.random.Generator) -> float:
    worst = 0.0
    for _ in range(trials):
        N, K = 5, 3
        logits = rng.normal(size=(N, K + 1))
        n_match = int(rng.integers(0, 4))
        queries = rng.permutation(N)[:n_match]
        gt_classes = rng.integers(0, K, size=n_match)
        assignment = Assignment(pairs=tuple(sorted((int(q), g) for g, q in enumerate(queries))),
                                num_queries=N)
        f = lambda x: classification_loss(x, assignment, gt_classes, K)
        worst = max(worst, finite_difference_check(f, Tensor(logits)))
    return worst


def _tiny_training_loss(model: TubeSegModel, rng: np.random.Generator):
    """A full composed objective on a tiny instance: two subclips, their
    per-stage matched segmentation losses, and the cross-tube terms."""
    from .crosstube import assign_contrastive_targets, binarized_pred_tubes, pair_track_losses
    from .crosstube import AssignConfig
    from .matching import match_stage

    cfg = model.config
    n = 2
    H = W = 4 * cfg.patch_size
    hp, wp = H // cfg.patch_size, W // cfg.patch_size
    frames_a = rng.random((n, H, W, 3))
    frames_b = rng.random((n, H, W, 3))

    def random_tubes(window):
        tubes = []
        for g, (cls, track) in enumerate(((1, 1), (0, 0))):  # one thing, one stuff
            bits = rng.random((n, hp, wp)) < 0.35
            tubes.append(TubeAnnotation(mask=TubeMask(bits=bits, window=window),
                                        class_id=cls, track_id=track))
        return tubes

    gt_a = random_tubes((0, n))
    gt_b = random_tubes((n, n))
    w = LossWeights()

    def loss_fn():
        preds_a = model.forward_subclip(frames_a)
        preds_b = model.forward_subclip(frames_b)
        emb_b = model.embed_queries(model.link_queries(preds_b[-1].queries,
                                                       preds_a[-1].queries))
        emb_a = model.embed_queries(preds_a[-1].queries)
        assignment = match_stage(preds_b[-1].class_logits, preds_b[-1].mask_logits,
                                 np.stack([t.mask.bits for t in gt_b]),
                                 np.array([t.class_id for t in gt_b], dtype=np.intp), w)
        rows, tracks = [], []
        for q, g in assignment.pairs:
            if not gt_b[g].is_stuff:
                rows.append(q)
                tracks.append(gt_b[g].track_id)
        anchors = ad.take_rows(emb_b, rows)
        labels = assign_contrastive_targets(
            binarized_pred_tubes(preds_a[-1].mask_logits, (0, n)), gt_a,
            AssignConfig(alpha_pos=0.5, alpha_neg=0.5))
        target_tracks = [None if t.is_stuff else t.track_id for t in gt_a]
        track_loss, aux_loss = pair_track_losses(anchors, tracks, emb_a,
                                                 labels, target_tracks)
        return total_loss([preds_a, preds_b], [gt_a, gt_b], cfg.num_classes, w,
                          mode="VPS", track_loss=track_loss, aux_loss=aux_loss)

    return loss_fn


def check_total_loss(trials: int, rng: np.random.Generator) -> float:
    """Composed objective vs finite differences, rotating through a
    representative parameter in every trial."""
    worst = 0.0
    for trial in range(trials):
        model = TubeSegModel(ModelConfig(num_classes=2, num_queries=4, channels=8,
                                         embed_channels=4, num_stages=2, patch_size=2),
                             seed=int(rng.integers(1 << 30)))
        loss_fn = _tiny_training_loss(model, rng)
        params = model.named_parameters()
        names = sorted(params)
        # spread trials over decoder, linker, and embedding parameters
        name = names[int(rng.integers(len(names)))]
        worst = max(worst, param_gradient_error(loss_fn, params[name]))
    return worst


CHECKS = (
    ("eq1_masked_attention_stage", check_attention_stage),
    ("eq2_temporal_contrastive", check_contrastive),
    ("eq3_aux_cosine", check_aux_cosine),
    ("eq4_cross_tube_link", check_cross_tube_link),
    ("dice_loss", check_dice),
    ("bce_loss", check_bce),
    ("classification_loss", check_classification),
    ("total_training_loss", check_total_loss),
)


def run_gradient_checks(trials: int = 20, tolerance: float = DEFAULT_TOLERANCE,
                        seed: int = 7) -> list:
    results = []
    for index, (name, fn) in enumerate(CHECKS):
        rng = np.random.default_rng(seed + 131 * index)
        t0 = time.perf_counter()
        err = fn(trials, rng)
        results.append(CheckResult(name=name, max_rel_err=err, trials=trials,
                                   tolerance=tolerance,
                                   seconds=time.perf_counter() - t0))
    return results
