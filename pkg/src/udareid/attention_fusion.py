"""Channel attention (ECAB), ensemble fusion and bidirectional mean feature normalization."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn

from .network import BatchNorm, gap


class ChannelMismatch(ValueError):
    pass


class IndivisibleChannels(ValueError):
    pass


class ZeroMeanFeature(ValueError):
    pass


def ecab_widths(channels: int, hidden_layers: int = 5, rate: int = 4) -> list[int]:
    """Layer widths ``C, C/r, ..., C/r^k, C/r^k, ..., C/r, C`` with ``k = (h-1)/2``.

    Returns ``h + 1`` widths, i.e. ``h`` linear maps.
    """
    if hidden_layers < 1 or hidden_layers % 2 == 0:
        raise ValueError(f"hidden layer count must be odd and >= 1, got {hidden_layers}")
    if rate < 1:
        raise ValueError("rate must be >= 1")
    k = (hidden_layers - 1) // 2
    if channels % (rate**k):
        raise IndivisibleChannels(f"{channels} channels not divisible by {rate}^{k}")
    down = [channels // rate**i for i in range(k + 1)]
    return down + [down[-1]] + down[-2::-1] if k else [channels, channels]


@dataclass
class AttentionMap:
    psi: torch.Tensor  # N x C
    zeta_max: torch.Tensor
    zeta_avg: torch.Tensor
    zeta_sigma: torch.Tensor


class ECAB(nn.Module):
    """Shared-MLP channel attention over max- and average-pooled statistics.

    ``psi = (max + avg) * sigmoid(mlp(max) + mlp(avg))``.
    """

    def __init__(self, channels: int, hidden_layers: int = 5, rate: int = 4):
        super().__init__()
        self.channels = channels
        self.hidden_layers = hidden_layers
        self.rate = rate
        widths = ecab_widths(channels, hidden_layers, rate)
        self.layer_names = []
        for k, (cin, cout) in enumerate(zip(widths[:-1], widths[1:]), start=1):
            self.add_module(f"layer{k}", nn.Linear(cin, cout))
            self.layer_names.append(f"layer{k}")

    def mlp(self, v: torch.Tensor) -> torch.Tensor:
        last = len(self.layer_names) - 1
        for i, name in enumerate(self.layer_names):
            v = getattr(self, name)(v)
            if i < last:
                v = torch.relu(v)
        return v

    def attend(self, zeta: torch.Tensor) -> AttentionMap:
        if zeta.ndim == 3:
            return _squeeze(self.attend(zeta[None]))
        if zeta.shape[1] != self.channels:
            raise ChannelMismatch(f"expected {self.channels} channels, got {zeta.shape[1]}")
        zmax = zeta.amax(dim=(2, 3))
        zavg = zeta.mean(dim=(2, 3))
        zsig = torch.sigmoid(self.mlp(zmax) + self.mlp(zavg))
        return AttentionMap((zmax + zavg) * zsig, zmax, zavg, zsig)

    def forward(self, zeta: torch.Tensor) -> torch.Tensor:
        return self.attend(zeta).psi


def _squeeze(att: AttentionMap) -> AttentionMap:
    return AttentionMap(att.psi[0], att.zeta_max[0], att.zeta_avg[0], att.zeta_sigma[0])


def ecab(zeta: torch.Tensor, params: ECAB) -> AttentionMap:
    return params.attend(zeta)


@dataclass
class FusionBranchOutput:
    fused_map: torch.Tensor  # N x C x Hf x Wf
    theta: torch.Tensor  # N x C
    phi: Optional[torch.Tensor] = None  # N x C, unit norm
    psi: Optional[torch.Tensor] = None


def ensemble_fuse(zeta_local: torch.Tensor, tau_global: torch.Tensor, attention: ECAB, bn: BatchNorm) -> FusionBranchOutput:
    """Scale every channel of the teacher's global map by the student half's attention."""
    if zeta_local.shape[-3] != tau_global.shape[-3]:
        raise ChannelMismatch(f"student half has {zeta_local.shape[-3]} channels, teacher map {tau_global.shape[-3]}")
    psi = attention(zeta_local)
    fused = psi[..., :, None, None] * tau_global
    pooled = gap(fused)
    theta = bn(pooled) if pooled.ndim == 2 else bn(pooled[None])[0]
    return FusionBranchOutput(fused, theta, psi=psi)


def bmfn(feat: torch.Tensor, feat_flipped: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """L2-normalised mean of a feature and its flipped-image counterpart (last dim)."""
    if feat.shape != feat_flipped.shape:
        raise ValueError(f"shape mismatch {tuple(feat.shape)} vs {tuple(feat_flipped.shape)}")
    m = (feat + feat_flipped) / 2
    norm = m.norm(dim=-1, keepdim=True)
    if (norm < eps).any():
        raise ZeroMeanFeature("mean of feature pair is (numerically) zero")
    return m / norm


class EnsembleFusion(nn.Module):
    """Top and bottom fusion branches with separate ECAB and BN parameters.

    Parameter names look like ``ecab.top.layer{k}.weight`` and
    ``fusion.top.bn.gamma``.
    """

    BRANCHES = ("top", "bottom")

    def __init__(self, channels: int, hidden_layers: int = 5, rate: int = 4):
        super().__init__()
        self.ecab = nn.ModuleDict({b: ECAB(channels, hidden_layers, rate) for b in self.BRANCHES})
        self.fusion = nn.ModuleDict({b: nn.Module() for b in self.BRANCHES})
        for b in self.BRANCHES:
            self.fusion[b].bn = BatchNorm(channels)

    def branch(self, name: str, zeta_local: torch.Tensor, tau_global: torch.Tensor) -> FusionBranchOutput:
        return ensemble_fuse(zeta_local, tau_global, self.ecab[name], self.fusion[name].bn)

    def forward(self, halves: dict, tau_global: torch.Tensor) -> dict:
        return {b: self.branch(b, halves[b], tau_global) for b in self.BRANCHES}
