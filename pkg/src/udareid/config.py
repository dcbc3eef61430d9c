"""Training configuration.

Defaults are the full-scale hyperparameters; :meth:`TrainConfig.toy`
gives the desk-scale preset used by the tests and scripts. Config files
are flat ``key: value`` YAML mirroring the field names.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .losses import LossWeights
from .preprocess import AugmentationPolicy

STAGE_EPOCHS = {"pretrain": 120, "finetune": 80}


@dataclass
class TrainConfig:
    stage: str = "pretrain"
    epochs: Optional[int] = None
    iters_per_epoch: Optional[int] = None  # None: one pass over the data (pretrain)
    base_lr: float = 3.5e-4
    lr_milestones: list = field(default_factory=lambda: [40, 70])
    lr_factor: float = 0.1
    warmup_epochs: Optional[int] = None
    weight_decay: float = 5e-4
    num_instances_p: int = 32  # identities per batch
    num_instances_k: int = 4  # images per identity
    eta: float = 0.999
    k_clusters: int = 900
    kmeans_minibatch: int = 256
    kmeans_iters: int = 100
    kappa: float = 1.0
    margin: float = 0.3
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.5
    delta: float = 0.5
    ecab_r: int = 4
    ecab_h: int = 5
    height: int = 256
    width: int = 128
    pad: int = 10
    flip_prob: float = 0.5
    color_dropout_prob: float = 0.4
    erase_prob: float = 0.5
    branch_feature: str = "student"  # features for the top/bottom softmax-triplet terms
    backbone: str = "toy"
    seed: int = 0

    def __post_init__(self):
        if self.stage not in STAGE_EPOCHS:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.epochs is None:
            self.epochs = STAGE_EPOCHS[self.stage]
        if self.iters_per_epoch is None and self.stage == "finetune":
            self.iters_per_epoch = 400
        if self.warmup_epochs is None:
            self.warmup_epochs = 10 if self.stage == "pretrain" else 0
        self.lr_milestones = [int(m) for m in self.lr_milestones]
        self.validate()

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.num_instances_p < 1 or self.num_instances_k < 1:
            raise ValueError("batch needs P >= 1 and K >= 1")
        if self.ecab_h < 1 or self.ecab_h % 2 == 0:
            raise ValueError("ecab_h must be odd")
        if not 0.0 <= self.eta < 1.0:
            raise ValueError("eta must lie in [0, 1)")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.height % 2 or self.width < 1:
            raise ValueError("height must be even")
        self.loss_weights()
        self.policy()

    @property
    def batch_size(self) -> int:
        return self.num_instances_p * self.num_instances_k

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.kappa, self.margin, self.alpha, self.beta, self.gamma, self.delta)

    def policy(self, stage: Optional[str] = None) -> AugmentationPolicy:
        return AugmentationPolicy(
            target_size=(self.height, self.width),
            pad=self.pad,
            flip_prob=self.flip_prob,
            color_dropout_prob=self.color_dropout_prob,
            erase_prob=self.erase_prob,
            stage=stage or self.stage,
        )

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 0-based epoch index."""
        if self.stage == "finetune":
            return self.base_lr
        if epoch < self.warmup_epochs:
            # linear from base_lr/10 up to base_lr
            return self.base_lr * (0.1 + 0.9 * epoch / self.warmup_epochs)
        lr = self.base_lr
        for m in self.lr_milestones:
            if epoch >= m:
                lr *= self.lr_factor
        return lr

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        data = yaml.safe_load(Path(path).read_text()) or {}
        return cls.from_dict(data)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))
        return path

    @classmethod
    def toy(cls, stage: str = "pretrain", **overrides) -> "TrainConfig":
        base = dict(
            stage=stage,
            height=64,
            width=32,
            pad=4,
            num_instances_p=8,
            num_instances_k=4,
            k_clusters=15,
            seed=7,
        )
        if stage == "pretrain":
            base.update(epochs=10, warmup_epochs=2, lr_milestones=[6, 8], base_lr=3.5e-3)
        else:
            base.update(epochs=5, iters_per_epoch=50, eta=0.995)
        base.update(overrides)
        return cls(**base)
