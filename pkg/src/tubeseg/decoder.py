"""Per-subclip tube segmenter.

A subclip is flattened into per-frame patch tokens by a linear patch
embedding (the desk-scale stand-in for a convolutional backbone). A fixed
set of learned global queries then runs several stages of masked cross
attention against the spatial-temporal tokens:

    Q' = softmax(M_prev + MLP(Q) K^T) V + Q

where M_prev is the binarized mask prediction of the previous stage. Each
query's mask logits over all frames of the window form one tube, so the
query index is the tracking identity within the subclip and no per-frame
association is needed. Every stage's predictions are kept for deep
supervision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import BIG_NEGATIVE, Tensor
from .types import SubClip


def xavier_uniform(rng: np.random.Generator, out_dim: int, in_dim: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (in_dim + out_dim))
    return rng.uniform(-bound, bound, size=(out_dim, in_dim))


@dataclass
class FeatureGrid:
    """Flattened spatial-temporal tokens plus their grid geometry."""

    tokens: Tensor  # (n * Hp * Wp, D)
    frames: int
    grid_h: int
    grid_w: int

    @property
    def positions(self) -> int:
        return self.frames * self.grid_h * self.grid_w


@dataclass
class StagePrediction:
    """One decoder stage's output set: classes, tube mask logits, queries."""

    class_logits: Tensor   # (N, num_classes + 1); last slot = no-object
    mask_logits: Tensor    # (N, n, Hp, Wp)
    queries: Tensor        # (N, D)


class DecoderStage:
    """Parameters of one masked cross-attention stage."""

    def __init__(self, rng: np.random.Generator, channels: int, ffn_hidden: int):
        D = channels
        self.params = {
            "qmlp1.weight": Tensor(xavier_uniform(rng, D, D), requires_grad=True),
            "qmlp1.bias": Tensor(np.zeros(D), requires_grad=True),
            "qmlp2.weight": Tensor(xavier_uniform(rng, D, D), requires_grad=True),
            "qmlp2.bias": Tensor(np.zeros(D), requires_grad=True),
            "key.weight": Tensor(xavier_uniform(rng, D, D), requires_grad=True),
            "key.bias": Tensor(np.zeros(D), requires_grad=True),
            "value.weight": Tensor(xavier_uniform(rng, D, D), requires_grad=True),
            "value.bias": Tensor(np.zeros(D), requires_grad=True),
            "ffn1.weight": Tensor(xavier_uniform(rng, ffn_hidden, D), requires_grad=True),
            "ffn1.bias": Tensor(np.zeros(ffn_hidden), requires_grad=True),
            "ffn2.weight": Tensor(xavier_uniform(rng, D, ffn_hidden), requires_grad=True),
            "ffn2.bias": Tensor(np.zeros(D), requires_grad=True),
            "norm.gain": Tensor(np.ones(D), requires_grad=True),
            "norm.bias": Tensor(np.zeros(D), requires_grad=True),
            "mask_proj.weight": Tensor(xavier_uniform(rng, D, D), requires_grad=True),
            "mask_proj.bias": Tensor(np.zeros(D), requires_grad=True),
        }

    def query_mlp(self, q: Tensor) -> Tensor:
        p = self.params
        h = ad.relu(ad.linear(q, p["qmlp1.weight"], p["qmlp1.bias"]))
        return ad.linear(h, p["qmlp2.weight"], p["qmlp2.bias"])

    def keys(self, tokens: Tensor) -> Tensor:
        return ad.linear(tokens, self.params["key.weight"], self.params["key.bias"])

    def values(self, tokens: Tensor) -> Tensor:
        return ad.linear(tokens, self.params["value.weight"], self.params["value.bias"])

    def feed_forward(self, q: Tensor) -> Tensor:
        p = self.params
        h = ad.relu(ad.linear(q, p["ffn1.weight"], p["ffn1.bias"]))
        out = ad.linear(h, p["ffn2.weight"], p["ffn2.bias"])
        return ad.layernorm(ad.add(q, out), p["norm.gain"], p["norm.bias"])

    def mask_embedding(self, q: Tensor) -> Tensor:
        return ad.linear(q, self.params["mask_proj.weight"], self.params["mask_proj.bias"])


def masked_cross_attention(queries: Tensor, keys: Tensor, values: Tensor,
                           attention_mask: np.ndarray, query_mlp) -> Tensor:
    """Single-head masked cross attention with the additive-residual form
    Q' = softmax(M + MLP(Q) K^T) V + Q. The mask is a constant of 0 /
    -BIG_NEGATIVE entries; fully masked rows fall back to free attention."""
    scores = ad.matmul(query_mlp(queries), ad.transpose(keys))
    if scores.shape != attention_mask.shape:
        raise ValueError(f"attention mask {attention_mask.shape} does not match scores {scores.shape}")
    attn = ad.masked_softmax(scores, attention_mask)
    return ad.add(ad.matmul(attn, values), queries)


def predict_tube_masks(queries: Tensor, feats: FeatureGrid, mask_embedding) -> Tensor:
    """Tube mask logits: inner product of projected queries with every
    spatial-temporal token, reshaped to (N, n, Hp, Wp)."""
    logits = ad.matmul(mask_embedding(queries), ad.transpose(feats.tokens))
    return ad.reshape(logits, (queries.shape[0], feats.frames, feats.grid_h, feats.grid_w))


def binarize_to_attention_mask(mask_logits: Tensor) -> np.ndarray:
    """Additive attention mask from mask logits: attend (0) where the
    sigmoid clears 0.5, i.e. where the logit is non-negative; block
    (-BIG_NEGATIVE) elsewhere. Rows that would block everything are
    replaced by free attention. Constant: no gradient flows through it."""
    N = mask_logits.shape[0]
    keep = (mask_logits.data.reshape(N, -1) >= 0.0)
    dead = ~keep.any(axis=1)
    keep[dead] = True
    return np.where(keep, 0.0, -BIG_NEGATIVE)


class TubeDecoder:
    """Backbone-free tube decoder: patch embedding, L stages of masked
    cross attention, shared classification head, per-stage mask heads."""

    def __init__(self, num_classes: int, num_queries: int = 16, channels: int = 64,
                 num_stages: int = 3, patch_size: int = 4, in_channels: int = 3,
                 rng: np.random.Generator = None):
        if num_stages < 1:
            raise ValueError("need at least one decoder stage")
        rng = rng or np.random.default_rng(0)
        self.num_classes = num_classes
        self.num_queries = num_queries
        self.channels = channels
        self.num_stages = num_stages
        self.patch_size = patch_size
        self.in_channels = in_channels

        D = channels
        patch_dim = patch_size * patch_size * in_channels
        self.patch_weight = Tensor(xavier_uniform(rng, D, patch_dim), requires_grad=True)
        self.patch_bias = Tensor(np.zeros(D), requires_grad=True)
        self.query_init = Tensor(rng.normal(0.0, 0.2, size=(num_queries, D)), requires_grad=True)
        self.stages = [DecoderStage(rng, D, 2 * D) for _ in range(num_stages)]
        self.class_weight = Tensor(xavier_uniform(rng, num_classes + 1, D), requires_grad=True)
        self.class_bias = Tensor(np.zeros(num_classes + 1), requires_grad=True)

    # -- parameters -----------------------------------------------------

    def named_parameters(self) -> dict:
        out = {
            "patch_embed.weight": self.patch_weight,
            "patch_embed.bias": self.patch_bias,
            "queries": self.query_init,
            "class_head.weight": self.class_weight,
            "class_head.bias": self.class_bias,
        }
        for i, stage in enumerate(self.stages):
            for name, p in stage.params.items():
                out[f"stage{i}.{name}"] = p
        return out

    # -- forward --------------------------------------------------------

    def extract_features(self, frames: np.ndarray) -> FeatureGrid:
        """Project non-overlapping P x P patches of each frame to D channels."""
        frames = np.asarray(frames, dtype=np.float64)
        n, H, W, ch = frames.shape
        P = self.patch_size
        if H % P or W % P:
            raise ValueError(f"frame size {H}x{W} not divisible by patch size {P}")
        if ch != self.in_channels:
            raise ValueError(f"expected {self.in_channels} channels, got {ch}")
        hp, wp = H // P, W // P
        patches = (frames.reshape(n, hp, P, wp, P, ch)
                          .transpose(0, 1, 3, 2, 4, 5)
                          .reshape(n * hp * wp, P * P * ch))
        tokens = ad.linear(Tensor(patches), self.patch_weight, self.patch_bias)
        return FeatureGrid(tokens=tokens, frames=n, grid_h=hp, grid_w=wp)

    def classify(self, queries: Tensor) -> Tensor:
        return ad.linear(queries, self.class_weight, self.class_bias)

    def forward(self, subclip) -> list:
        """Run all stages on a subclip; returns one StagePrediction per stage.

        Stage 0 attends freely (all-zero mask); stage l>0 attends inside the
        binarized mask prediction of stage l-1.
        """
        frames = subclip.frames if isinstance(subclip, SubClip) else np.asarray(subclip)
        feats = self.extract_features(frames)
        queries = self.query_init
        attention_mask = np.zeros((self.num_queries, feats.positions))
        predictions = []
        for stage in self.stages:
            keys = stage.keys(feats.tokens)
            values = stage.values(feats.tokens)
            queries = masked_cross_attention(queries, keys, values,
                                             attention_mask, stage.query_mlp)
            queries = stage.feed_forward(queries)
            mask_logits = predict_tube_masks(queries, feats, stage.mask_embedding)
            class_logits = self.classify(queries)
            predictions.append(StagePrediction(class_logits=class_logits,
                                               mask_logits=mask_logits,
                                               queries=queries))
            attention_mask = binarize_to_attention_mask(mask_logits)
        return predictions


def upsample_nearest(grid: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbour upsampling of the trailing two axes."""
    return np.repeat(np.repeat(grid, factor, axis=-2), factor, axis=-1)
