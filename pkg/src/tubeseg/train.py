"""Training loop: per step, each sampled video contributes one subclip pair;
both subclips run the decoder, the per-stage segmentation losses are matched
and summed, and the pair feeds the cross-tube contrastive and auxiliary
losses through the linking block. Plain gradient descent with momentum and
cosine step-size decay keeps the run deterministic for a given seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward
from .config import RunConfig
from .crosstube import (assign_contrastive_targets, binarized_pred_tubes,
                        pair_track_losses, sample_subclip_pair)
from .dataio import DatasetBundle
from .matching import downsample_mask_majority, match_stage, total_loss
from .model import TubeSegModel
from .types import (TubeAnnotation, TubeMask, flatten_tube_annotations,
                    frame_instances_from_grids, split_into_subclips)


@dataclass
class SubclipSample:
    frames: np.ndarray
    window: tuple            # (start, n)
    gt_tubes: list           # TubeAnnotation at feature resolution


class MomentumSGD:
    """v = mu * v + g; p -= lr * v, with global-norm gradient clipping."""

    def __init__(self, params: dict, momentum: float = 0.9, clip_norm: float = 0.0):
        self.params = params
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.velocity = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, lr: float):
        scale = 1.0
        if self.clip_norm > 0:
            total = 0.0
            for p in self.params.values():
                if p.grad is not None:
                    total += float((p.grad * p.grad).sum())
            norm = np.sqrt(total)
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        for name, p in self.params.items():
            if p.grad is None:
                continue
            v = self.velocity[name]
            v *= self.momentum
            v += p.grad * scale
            p.data = p.data - lr * v


def cosine_lr(base: float, step: int, total: int) -> float:
    return base * 0.5 * (1.0 + np.cos(np.pi * step / max(1, total)))


def prepare_subclips(video, subclip_size: int, patch_size: int) -> list:
    """Cut one video into training subclips with feature-resolution gt tubes.

    Padded frames repeat the last real frame, so their annotations repeat
    too; ground-truth masks are majority-pooled to the decoder's grid.
    """
    subclips = split_into_subclips(video.clip, subclip_size)
    out = []
    for sc in subclips:
        start, n = sc.start_index, sc.window_size
        per_frame = []
        for local_t in range(n):
            t = min(start + local_t, video.clip.frame_count - 1)
            per_frame.append(frame_instances_from_grids(video.gt_class[t], video.gt_inst[t]))
        tubes = flatten_tube_annotations(per_frame, window=(start, n))
        pooled = []
        for tube in tubes:
            bits = downsample_mask_majority(tube.mask.bits, patch_size)
            pooled.append(TubeAnnotation(
                mask=TubeMask(bits=bits, window=(start, n)),
                class_id=tube.class_id, track_id=tube.track_id))
        out.append(SubclipSample(frames=sc.frames, window=(start, n), gt_tubes=pooled))
    return out


def _pair_losses(model: TubeSegModel, labels, early: SubclipSample, late: SubclipSample,
                 cfg: RunConfig):
    """Track + aux losses for one (earlier, later) subclip pair, plus the
    forwarded stage predictions of both subclips."""
    preds_early = model.forward_subclip(early.frames)
    preds_late = model.forward_subclip(late.frames)
    if cfg.mode == "VSS":
        return preds_early, preds_late, None, None

    q_early = preds_early[-1].queries
    q_late = preds_late[-1].queries
    linked = model.link_queries(q_late, q_early)
    emb_late = model.embed_queries(linked)
    emb_early = model.embed_queries(q_early)

    # anchors: matched thing queries of the later subclip
    w = cfg.loss_weights()
    gt_late = late.gt_tubes
    assignment = match_stage(preds_late[-1].class_logits, preds_late[-1].mask_logits,
                             np.stack([t.mask.bits for t in gt_late]) if gt_late else np.zeros((0, 1)),
                             np.array([t.class_id for t in gt_late], dtype=np.intp), w)
    anchor_rows, anchor_tracks = [], []
    for q, g in assignment.pairs:
        if not gt_late[g].is_stuff:
            anchor_rows.append(q)
            anchor_tracks.append(gt_late[g].track_id)
    if not anchor_rows:
        return preds_early, preds_late, Tensor(0.0), Tensor(0.0)

    anchors = ad.take_rows(emb_late, anchor_rows)

    # targets: every query of the earlier subclip, labelled by tube IoU
    pred_tubes = binarized_pred_tubes(preds_early[-1].mask_logits, early.window)
    target_labels = assign_contrastive_targets(pred_tubes, early.gt_tubes,
                                               cfg.assign_config())
    target_tracks = [None if t.is_stuff else t.track_id for t in early.gt_tubes]
    track_loss, aux_loss = pair_track_losses(anchors, anchor_tracks, emb_early,
                                             target_labels, target_tracks)
    return preds_early, preds_late, track_loss, aux_loss


def train_model(cfg: RunConfig, dataset: DatasetBundle):
    """Train a model on a dataset split; returns (model, history rows)."""
    labels = dataset.labels
    model = TubeSegModel(cfg.model_config(labels.num_classes), seed=cfg.seed)
    optimizer = MomentumSGD(model.named_parameters(), momentum=cfg.momentum,
                            clip_norm=cfg.clip_norm)
    rng = np.random.default_rng(cfg.seed + 1)
    w = cfg.loss_weights()

    per_video = [prepare_subclips(v, cfg.subclip_size, cfg.patch_size)
                 for v in dataset.videos]

    history = []
    for step in range(cfg.iterations):
        picks = rng.integers(len(per_video), size=cfg.batch_size)
        batch_loss = None
        batch_track = 0.0
        for vi in picks:
            subclips = per_video[vi]
            if len(subclips) >= 2:
                i, j = sample_subclip_pair(len(subclips), rng, cfg.neighborhood_radius)
                a, b = (i, j) if i < j else (j, i)
            else:
                a = b = 0  # single-subclip video: pair the subclip with itself
            preds_a, preds_b, track_loss, aux_loss = _pair_losses(
                model, labels, per_video[vi][a], per_video[vi][b], cfg)
            loss = total_loss([preds_a, preds_b],
                              [subclips[a].gt_tubes, subclips[b].gt_tubes],
                              labels.num_classes, w, mode=cfg.mode,
                              track_loss=track_loss, aux_loss=aux_loss)
            batch_loss = loss if batch_loss is None else ad.add(batch_loss, loss)
            if track_loss is not None:
                batch_track += track_loss.item()
        batch_loss = ad.mul_scalar(batch_loss, 1.0 / cfg.batch_size)

        model.zero_grads()
        backward(batch_loss)
        lr = cosine_lr(cfg.learning_rate, step, cfg.iterations)
        optimizer.step(lr)
        history.append({
            "step": step,
            "loss": batch_loss.item(),
            "track_loss": batch_track / cfg.batch_size,
            "lr": lr,
        })
    return model, history
