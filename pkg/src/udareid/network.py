"""Backbone, BN neck and classifier.

Downstream code only relies on :class:`BackboneOutput`: a non-negative
``C x Hf x Wf`` feature map with even ``Hf``, its spatial mean, the
batch-normalised neck vector and optional logits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F


class ShapeMismatch(ValueError):
    pass


class OddHeight(ValueError):
    pass


class NonFiniteActivation(FloatingPointError):
    def __init__(self, layer: str):
        super().__init__(f"non-finite activation after {layer}")
        self.layer = layer


class BatchNorm(nn.Module):
    """Batch norm over dim 1 with ``gamma``/``beta`` parameter names.

    ``shift=False`` drops the learnable offset (BNNeck style).
    """

    def __init__(self, num_features: int, momentum: float = 0.1, eps: float = 1e-5, shift: bool = True):
        super().__init__()
        self.num_features = num_features
        self.momentum = momentum
        self.eps = eps
        self.gamma = nn.Parameter(torch.ones(num_features))
        if shift:
            self.beta = nn.Parameter(torch.zeros(num_features))
        else:
            self.register_parameter("beta", None)
        self.register_buffer("running_mean", torch.zeros(num_features))
        self.register_buffer("running_var", torch.ones(num_features))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.batch_norm(
            x,
            self.running_mean,
            self.running_var,
            self.gamma,
            self.beta,
            training=self.training,
            momentum=self.momentum,
            eps=self.eps,
        )


class ConvBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn = BatchNorm(cout)
        nn.init.kaiming_normal_(self.conv.weight, mode="fan_out", nonlinearity="relu")

    def forward(self, x):
        return F.relu(self.bn(self.conv(x)))


class ToyBackbone(nn.Module):
    """Four conv-BN-ReLU blocks; overall stride 8 so a 64x32 input gives 8x4."""

    def __init__(self, widths: Sequence[int] = (16, 32, 48, 64), strides: Sequence[int] = (1, 2, 2, 2)):
        super().__init__()
        self.block_names = []
        cin = 3
        for i, (w, s) in enumerate(zip(widths, strides), start=1):
            name = f"block{i}"
            self.add_module(name, ConvBlock(cin, w, s))
            self.block_names.append(name)
            cin = w
        self.out_channels = cin
        self.stride = math.prod(strides)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for name in self.block_names:
            x = getattr(self, name)(x)
            if not torch.isfinite(x).all():
                raise NonFiniteActivation(f"backbone.{name}")
        return x


BACKBONES = {"toy": ToyBackbone}


@dataclass
class BackboneOutput:
    feature_map: torch.Tensor  # N x C x Hf x Wf
    pooled: torch.Tensor  # N x C
    neck: torch.Tensor  # N x C
    logits: Optional[torch.Tensor] = None  # N x M


class ReIDNet(nn.Module):
    """Backbone -> GAP -> BN neck -> bias-free classifier."""

    def __init__(self, num_classes: Optional[int] = None, backbone: str = "toy", input_size=(64, 32), **backbone_kw):
        super().__init__()
        if backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {backbone!r}; known: {sorted(BACKBONES)}")
        self.backbone_name = backbone
        self.input_size = tuple(input_size)
        self.backbone = BACKBONES[backbone](**backbone_kw)
        C = self.backbone.out_channels
        self.neck = nn.Module()
        self.neck.bn = BatchNorm(C, shift=False)
        self.classifier: Optional[nn.Linear] = None
        if num_classes is not None:
            self.reset_classifier(num_classes)

    @property
    def channels(self) -> int:
        return self.backbone.out_channels

    def reset_classifier(self, num_classes: int, generator: Optional[torch.Generator] = None) -> None:
        ref = self.neck.bn.gamma
        self.classifier = nn.Linear(self.channels, num_classes, bias=False).to(ref.device, ref.dtype)
        nn.init.normal_(self.classifier.weight, std=0.001, generator=generator)

    def forward(self, x: torch.Tensor) -> BackboneOutput:
        return forward_features(self, x)


def forward_features(net: ReIDNet, batch: torch.Tensor, mode: Optional[str] = None) -> BackboneOutput:
    """Run ``net`` on an ``N x 3 x H x W`` batch.

    ``mode`` ("train"/"eval") switches the module state first; ``None``
    keeps whatever state ``net`` is in.
    """
    if mode is not None:
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        net.train(mode == "train")
    if batch.ndim != 4 or batch.shape[1] != 3 or tuple(batch.shape[2:]) != net.input_size:
        raise ShapeMismatch(f"expected N x 3 x {net.input_size[0]} x {net.input_size[1]}, got {tuple(batch.shape)}")
    fmap = net.backbone(batch)
    if fmap.shape[2] % 2:
        raise OddHeight(f"feature map height {fmap.shape[2]} is odd")
    pooled = fmap.mean(dim=(2, 3))
    neck = net.neck.bn(pooled)
    if not torch.isfinite(neck).all():
        raise NonFiniteActivation("neck.bn")
    logits = net.classifier(neck) if net.classifier is not None else None
    return BackboneOutput(fmap, pooled, neck, logits)


def split_top_bottom(fmap: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Split along height (dim -2) into equal top and bottom halves."""
    h = fmap.shape[-2]
    if h % 2:
        raise OddHeight(f"cannot halve height {h}")
    return fmap[..., : h // 2, :], fmap[..., h // 2 :, :]


def gap(fmap: torch.Tensor) -> torch.Tensor:
    return fmap.mean(dim=(-2, -1))
