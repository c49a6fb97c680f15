"""Run configuration shared by the CLI, the trainer, and the estimator.

One flat record covers model dimensions, the training subclip size, the
inference window, loss weights, assignment thresholds, tracker thresholds,
and the optimizer. Configs serialize to JSON whose keys mirror the field
names; every report embeds `config_hash()` so runs are attributable.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .crosstube import AssignConfig
from .matching import LossWeights
from .model import ModelConfig
from .tracker import MODES, InferenceConfig


@dataclass(frozen=True)
class RunConfig:
    mode: str = "VPS"
    # model dimensions
    num_queries: int = 16
    channels: int = 64
    embed_channels: int = 32
    decoder_stages: int = 3
    patch_size: int = 4
    # temporal windows
    subclip_size: int = 2     # training window n
    window: int = 6           # inference window W
    inference_overlap: int = 0
    # loss weights
    lambda_cls: float = 2.0
    lambda_ce: float = 5.0
    lambda_dice: float = 5.0
    lambda_track: float = 1.0
    lambda_aux: float = 0.5
    # contrastive target assignment
    alpha_pos: float = 0.7
    alpha_neg: float = 0.3
    neighborhood_radius: int = 1
    # tracker thresholds
    score_thresh: float = 0.3
    overlap_thresh: float = 0.8
    match_thresh: float = 0.5
    max_age: int = 2
    use_linked_queries: bool = True
    # optimizer
    learning_rate: float = 0.1
    momentum: float = 0.9
    clip_norm: float = 1.0   # global gradient-norm clip; 0 disables
    iterations: int = 500
    batch_size: int = 2
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.subclip_size < 1 or self.window < 1:
            raise ValueError("subclip size and window must be >= 1")
        if self.iterations < 1 or self.batch_size < 1:
            raise ValueError("iterations and batch size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.clip_norm < 0:
            raise ValueError("clip_norm must be >= 0")
        if self.neighborhood_radius < 1:
            raise ValueError("neighborhood radius must be >= 1")
        # constructing these validates their own invariants
        self.loss_weights()
        self.assign_config()
        self.inference_config()

    # -- views ------------------------------------------------------------

    def loss_weights(self) -> LossWeights:
        """Effective loss weights; VSS mode carries no tracking terms."""
        if self.mode == "VSS":
            return LossWeights(lambda_cls=self.lambda_cls, lambda_ce=self.lambda_ce,
                               lambda_dice=self.lambda_dice, lambda_track=0.0,
                               lambda_aux=0.0)
        return LossWeights(lambda_cls=self.lambda_cls, lambda_ce=self.lambda_ce,
                           lambda_dice=self.lambda_dice, lambda_track=self.lambda_track,
                           lambda_aux=self.lambda_aux)

    def assign_config(self) -> AssignConfig:
        return AssignConfig(alpha_pos=self.alpha_pos, alpha_neg=self.alpha_neg)

    def inference_config(self, window: int = None) -> InferenceConfig:
        return InferenceConfig(window=window or self.window,
                               score_thresh=self.score_thresh,
                               overlap_thresh=self.overlap_thresh,
                               match_thresh=self.match_thresh,
                               max_age=self.max_age,
                               mode=self.mode,
                               use_linked_queries=self.use_linked_queries,
                               overlap=self.inference_overlap)

    def model_config(self, num_classes: int) -> ModelConfig:
        return ModelConfig(num_classes=num_classes,
                           num_queries=self.num_queries,
                           channels=self.channels,
                           embed_channels=self.embed_channels,
                           num_stages=self.decoder_stages,
                           patch_size=self.patch_size)

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **changes) -> "RunConfig":
        d = self.to_dict()
        d.update(changes)
        return RunConfig.from_dict(d)
