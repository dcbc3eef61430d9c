"""Identity, hard-mined triplet and softmax-triplet losses and their weighted totals."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F


class LabelOutOfRange(ValueError):
    pass


class DegenerateBatch(ValueError):
    pass


@dataclass
class LossWeights:
    kappa: float = 1.0
    margin: float = 0.3
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.5
    delta: float = 0.5

    def __post_init__(self):
        if self.margin < 0:
            raise ValueError("margin must be >= 0")
        for name in ("kappa", "alpha", "beta", "gamma", "delta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass
class MinedTriplets:
    anchor: torch.Tensor
    positive: torch.Tensor
    negative: torch.Tensor
    d_pos: torch.Tensor
    d_neg: torch.Tensor


def id_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    labels = torch.as_tensor(labels, dtype=torch.long, device=logits.device)
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise LabelOutOfRange(f"labels must lie in [0, {logits.shape[1]})")
    return F.cross_entropy(logits, labels)


def pairwise_distances(features: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    diff = features[:, None, :] - features[None, :, :]
    return (diff.pow(2).sum(-1) + eps).sqrt()


def mine_hard(features: torch.Tensor, labels: torch.Tensor, skip_invalid: bool = False) -> MinedTriplets:
    """Hardest positive (farthest same label) and hardest negative (nearest other label).

    Ties go to the lowest index. With ``skip_invalid`` anchors lacking a
    positive or negative are dropped instead of raising.
    """
    labels = torch.as_tensor(labels, device=features.device)
    n = features.shape[0]
    dist = pairwise_distances(features)
    same = labels[:, None] == labels[None, :]
    eye = torch.eye(n, dtype=torch.bool, device=features.device)
    pos_mask = same & ~eye
    neg_mask = ~same
    valid = pos_mask.any(1) & neg_mask.any(1)
    if not valid.all():
        if not skip_invalid or not valid.any():
            raise DegenerateBatch("some label has no positive or no negative in the batch")
    d = dist.detach()
    inf = torch.tensor(float("inf"), dtype=d.dtype, device=d.device)
    pos_idx = torch.where(pos_mask, d, -inf).argmax(1)
    neg_idx = torch.where(neg_mask, d, inf).argmin(1)
    anchor = torch.arange(n, device=features.device)[valid]
    pos_idx, neg_idx = pos_idx[valid], neg_idx[valid]
    return MinedTriplets(anchor, pos_idx, neg_idx, dist[anchor, pos_idx], dist[anchor, neg_idx])


def hard_triplet_loss(features: torch.Tensor, labels, margin: float = 0.3, skip_invalid: bool = False) -> torch.Tensor:
    t = mine_hard(features, labels, skip_invalid)
    return F.relu(t.d_pos - t.d_neg + margin).mean()


def softmax_triplet_loss(features: torch.Tensor, labels, skip_invalid: bool = False) -> torch.Tensor:
    """``-log(e^{d-} / (e^{d-} + e^{d+}))`` averaged over anchors, i.e. ``softplus(d+ - d-)``."""
    t = mine_hard(features, labels, skip_invalid)
    return F.softplus(t.d_pos - t.d_neg).mean()


def pretrain_total(id_term, triplet_term, w: LossWeights = LossWeights()):
    return id_term + w.kappa * triplet_term


def finetune_total(id_g, trip_g, trip_top, trip_bottom, w: LossWeights = LossWeights()):
    return w.alpha * id_g + w.beta * trip_g + w.gamma * trip_top + w.delta * trip_bottom
