"""Model aggregate: tube decoder, cross-tube linker, embedding head.

Owns the flat parameter registry used by the optimizer and by checkpoint
serialization. Architecture hyperparameters live in ModelConfig so a
checkpoint can rebuild the exact same parameter set.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import Tensor
from .crosstube import CrossTubeLinker, EmbeddingHead
from .decoder import TubeDecoder


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int
    num_queries: int = 16
    channels: int = 64
    embed_channels: int = 32
    num_stages: int = 3
    patch_size: int = 4
    in_channels: int = 3
    link_heads: int = 2

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError("need at least one class")
        if self.num_queries < 1 or self.channels < 1 or self.num_stages < 1:
            raise ValueError("model dimensions must be positive")
        if self.channels % self.link_heads:
            raise ValueError("channels must divide evenly over link heads")


class TubeSegModel:
    """Trainable tube segmentation model for one label space."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.decoder = TubeDecoder(
            num_classes=config.num_classes,
            num_queries=config.num_queries,
            channels=config.channels,
            num_stages=config.num_stages,
            patch_size=config.patch_size,
            in_channels=config.in_channels,
            rng=rng,
        )
        self.linker = CrossTubeLinker(config.channels, num_heads=config.link_heads, rng=rng)
        self.embed_head = EmbeddingHead(config.channels, config.embed_channels, rng=rng)

    # -- parameter registry ----------------------------------------------

    def named_parameters(self) -> dict:
        out = {}
        for name, p in self.decoder.named_parameters().items():
            out[f"decoder.{name}"] = p
        for name, p in self.linker.params.items():
            out[f"linker.{name}"] = p
        for name, p in self.embed_head.params.items():
            out[f"embed.{name}"] = p
        return out

    def zero_grads(self):
        for p in self.named_parameters().values():
            p.grad = None

    def state_arrays(self) -> dict:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state(self, state: dict):
        """Install parameter arrays; any name or shape drift is an error
        that lists every offender."""
        params = self.named_parameters()
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        mismatched = sorted(
            name for name in set(params) & set(state)
            if tuple(state[name].shape) != tuple(params[name].data.shape))
        if missing or unexpected or mismatched:
            raise ValueError(
                "checkpoint does not match the model architecture; "
                f"missing={missing} unexpected={unexpected} shape_mismatch={mismatched}")
        for name, p in params.items():
            p.data = np.asarray(state[name], dtype=np.float64).copy()
            p.grad = None

    # -- forward passes ----------------------------------------------------

    def forward_subclip(self, subclip):
        return self.decoder.forward(subclip)

    def link_queries(self, q_later: Tensor, q_earlier: Tensor) -> Tensor:
        return self.linker.link(q_later, q_earlier)

    def embed_queries(self, queries: Tensor) -> Tensor:
        return self.embed_head.embed(queries)

    def config_dict(self) -> dict:
        return asdict(self.config)

    @staticmethod
    def from_config_dict(d: dict, seed: int = 0) -> "TubeSegModel":
        return TubeSegModel(ModelConfig(**d), seed=seed)
