"""Teacher/student pair: initialisation, EMA updates and teacher-only embedding."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .attention_fusion import EnsembleFusion, bmfn
from .network import ReIDNet, forward_features, gap, split_top_bottom
from .preprocess import AugmentationPolicy, augment, hflip, to_batch


class StageMismatch(ValueError):
    pass


@dataclass
class NetworkPair:
    student: ReIDNet
    teacher: ReIDNet
    fusion: Optional[EnsembleFusion] = None
    eta: float = 0.999
    step: int = 0

    def __post_init__(self):
        check_eta(self.eta)
        s = {k: v.shape for k, v in self.student.state_dict().items()}
        t = {k: v.shape for k, v in self.teacher.state_dict().items()}
        if s != t:
            raise ValueError("student and teacher must have identical parameter names and shapes")
        for p in self.teacher.parameters():
            p.requires_grad_(False)


def check_eta(eta: float) -> float:
    if not 0.0 <= eta < 1.0:
        raise ValueError(f"eta must lie in [0, 1), got {eta}")
    return eta


def init_pair(pretrained, eta: float = 0.999, num_clusters: Optional[int] = None, ecab_h: int = 5, ecab_r: int = 4,
              seed: int = 0) -> NetworkPair:
    """Copy a pre-trained network into independent student and teacher copies.

    ``pretrained`` is a :class:`~udareid.checkpoint.Checkpoint` (stage
    must be ``pretrain``) or a bare :class:`ReIDNet`. With
    ``num_clusters`` the classifier is recreated with that many outputs,
    identically in both networks.
    """
    check_eta(eta)
    if isinstance(pretrained, ReIDNet):
        net = pretrained
    else:
        if pretrained.stage != "pretrain":
            raise StageMismatch(f"expected a pretrain checkpoint, got stage {pretrained.stage!r}")
        from .checkpoint import build_network

        net = build_network(pretrained)
    student = copy.deepcopy(net)
    gen = torch.Generator().manual_seed(seed)
    if num_clusters is not None:
        student.reset_classifier(num_clusters, generator=gen)
    teacher = copy.deepcopy(student)
    fusion = EnsembleFusion(student.channels, ecab_h, ecab_r)
    ref = student.neck.bn.gamma
    fusion.to(ref.device, ref.dtype)
    return NetworkPair(student, teacher, fusion, eta, 0)


@torch.no_grad()
def ema_update(pair: NetworkPair) -> NetworkPair:
    """``teacher <- eta * teacher + (1 - eta) * student``; BN running stats are copied."""
    eta = pair.eta
    s_params = dict(pair.student.named_parameters())
    for name, tp in pair.teacher.named_parameters():
        # lerp keeps teacher == student a fixed point and gives the student exactly at eta = 0
        tp.lerp_(s_params[name].detach(), 1.0 - eta)
    s_bufs = dict(pair.student.named_buffers())
    for name, tb in pair.teacher.named_buffers():
        tb.copy_(s_bufs[name])
    pair.step += 1
    return pair


@torch.no_grad()
def concat_features(net: ReIDNet, batch: torch.Tensor) -> torch.Tensor:
    """``[GAP(global); GAP(top); GAP(bottom)]`` from ``net``'s last feature map (N x 3C)."""
    out = forward_features(net, batch, mode="eval")
    top, bottom = split_top_bottom(out.feature_map)
    return torch.cat([out.pooled, gap(top), gap(bottom)], dim=1)


def _pixels(item):
    return getattr(item, "pixels", item)


@torch.no_grad()
def inference_embed_batch(net: ReIDNet, images: Sequence, policy: AugmentationPolicy,
                          batch_size: int = 128) -> torch.Tensor:
    """Unit-norm ``3C`` embeddings for a list of images (records or arrays).

    Originals and flips go through the network as separate, equally sized
    batches so that embedding an image and embedding its flip are
    bitwise identical.
    """
    if policy.stage != "eval":
        raise ValueError("inference needs an eval-stage policy")
    chunks = []
    for start in range(0, len(images), batch_size):
        part = [augment(_pixels(im), policy) for im in images[start : start + batch_size]]
        orig = concat_features(net, to_batch(part, policy).to(net.neck.bn.gamma.dtype))
        flip = concat_features(net, to_batch([hflip(p) for p in part], policy).to(net.neck.bn.gamma.dtype))
        chunks.append(bmfn(orig, flip))
    return torch.cat(chunks) if chunks else torch.zeros(0, 3 * net.channels)


def inference_embed(teacher: ReIDNet, image, policy: AugmentationPolicy) -> torch.Tensor:
    return inference_embed_batch(teacher, [image], policy)[0]


def parameter_checksum(module: torch.nn.Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.detach().cpu().numpy()).tobytes())
    return h.hexdigest()
