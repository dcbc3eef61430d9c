"""Mini-batch K-means pseudo labels over the global / top / bottom feature views."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .attention_fusion import bmfn
from .network import forward_features, split_top_bottom
from .preprocess import AugmentationPolicy, augment, hflip, to_batch

VIEWS = ("global", "top", "bottom")

# pseudo-identity counts that worked best per adaptation direction
CLUSTER_PRESETS = {
    "market_to_cuhk": 900,
    "cuhk_to_market": 900,
    "market_to_msmt": 2500,
    "cuhk_to_msmt": 2500,
}


class TooFewPoints(ValueError):
    pass


class NonFiniteInput(ValueError):
    pass


class EmptyTargetSet(ValueError):
    pass


@dataclass
class ClusterConfig:
    K: int
    minibatch_size: int = 256
    max_iters: int = 100
    seed: int = 0
    n_init: int = 10
    tol: float = 1e-7

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.minibatch_size < 1 or self.max_iters < 0 or self.n_init < 1:
            raise ValueError("minibatch_size, max_iters and n_init must be positive")


@dataclass
class PseudoLabelAssignment:
    image_id: str
    label_global: int
    label_top: int
    label_bottom: int
    epoch: int = 0

    def label(self, view: str) -> int:
        return getattr(self, f"label_{view}")


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d = (points**2).sum(1)[:, None] - 2.0 * points @ centroids.T + (centroids**2).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_pp(points: np.ndarray, k: int, rng: np.random.Generator, local_trials: Optional[int] = None) -> np.ndarray:
    """Greedy k-means++ seeding.

    Each new centre is the best of ``local_trials`` D^2-sampled candidates
    (default ``2 + ln k``), judged by the resulting potential.
    """
    n = points.shape[0]
    trials = local_trials or 2 + int(np.log(k))
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    closest = _sq_dists(points, centroids[:1])[:, 0]
    for i in range(1, k):
        total = closest.sum()
        if total <= 0:
            cand = rng.integers(n, size=trials)
        else:
            cand = rng.choice(n, size=trials, p=closest / total)
        cand_d = np.minimum(closest[None, :], _sq_dists(points[cand], points))
        best = int(np.argmin(cand_d.sum(1)))
        centroids[i] = points[cand[best]]
        closest = cand_d[best]
    return centroids


def _final_assignment(points: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-centroid labels; empty clusters are moved onto the worst-served point."""
    k = centroids.shape[0]
    centroids = centroids.copy()
    for _ in range(k + 1):
        d = _sq_dists(points, centroids)
        labels = d.argmin(1)
        counts = np.bincount(labels, minlength=k)
        empty = np.flatnonzero(counts == 0)
        if not len(empty):
            break
        own = d[np.arange(len(points)), labels]
        # only points whose cluster has another member can donate
        movable = counts[labels] > 1
        if not movable.any():
            break
        far = int(np.argmax(np.where(movable, own, -1.0)))
        centroids[empty[0]] = points[far]
    return labels, centroids


def _compact(labels: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    used = np.unique(labels)
    remap = np.full(centroids.shape[0], -1)
    remap[used] = np.arange(len(used))
    return remap[labels], centroids[used]


def inertia(points: np.ndarray, labels: np.ndarray, centroids: np.ndarray) -> float:
    return float(((points - centroids[labels]) ** 2).sum())


def minibatch_kmeans(points, cfg: ClusterConfig) -> tuple[np.ndarray, np.ndarray]:
    """Cluster ``points`` (N x D) into at most ``cfg.K`` groups.

    k-means++ seeding, per-centroid ``1/count`` mini-batch updates, then one
    full nearest-centroid pass. ``n_init`` restarts keep the lowest
    quantisation error. Labels are contiguous from 0.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError("points must be N x D")
    n = points.shape[0]
    if n < cfg.K:
        raise TooFewPoints(f"{n} points for K={cfg.K}")
    if not np.isfinite(points).all():
        raise NonFiniteInput("points contain NaN or Inf")
    rng = np.random.default_rng(cfg.seed)
    bs = min(cfg.minibatch_size, n)
    best = None
    for _ in range(cfg.n_init):
        centroids = kmeans_pp(points, cfg.K, rng)
        counts = np.zeros(cfg.K)
        for _ in range(cfg.max_iters):
            idx = rng.choice(n, size=bs, replace=False) if bs < n else np.arange(n)
            batch = points[idx]
            assign = _sq_dists(batch, centroids).argmin(1)
            batch_counts = np.bincount(assign, minlength=cfg.K).astype(np.float64)
            sums = np.zeros_like(centroids)
            np.add.at(sums, assign, batch)
            hit = batch_counts > 0
            new_counts = counts + batch_counts
            prev = centroids.copy()
            centroids[hit] = (centroids[hit] * counts[hit, None] + sums[hit]) / new_counts[hit, None]
            counts = new_counts
            if np.max(np.abs(centroids - prev)) < cfg.tol:
                break
        labels, centroids = _final_assignment(points, centroids)
        err = inertia(points, labels, centroids)
        if best is None or err < best[0]:
            best = (err, labels, centroids)
    labels, centroids = _compact(best[1], best[2])
    return labels.astype(np.int64), centroids


# ---------------------------------------------------------------------------
# feature views


@torch.no_grad()
def extract_views(pair, images: Sequence, policy: AugmentationPolicy, batch_size: int = 128) -> dict[str, np.ndarray]:
    """BMFN-fused features for clustering.

    ``global``: student neck feature; ``top``/``bottom``: ensemble-fusion
    features of the student halves attending the teacher's global map.
    Everything runs in eval mode and leaves parameters untouched.
    """
    modes = [m.training for m in (pair.student, pair.teacher, pair.fusion)]
    pair.student.eval()
    pair.teacher.eval()
    pair.fusion.eval()
    dtype = pair.student.neck.bn.gamma.dtype
    out = {v: [] for v in VIEWS}
    try:
        for start in range(0, len(images), batch_size):
            part = [augment(getattr(im, "pixels", im), policy) for im in images[start : start + batch_size]]
            per_dir = []
            for pix in (part, [hflip(p) for p in part]):
                x = to_batch(pix, policy).to(dtype)
                s = forward_features(pair.student, x)
                t = forward_features(pair.teacher, x)
                top, bottom = split_top_bottom(s.feature_map)
                fused = pair.fusion({"top": top, "bottom": bottom}, t.feature_map)
                per_dir.append({"global": s.neck, "top": fused["top"].theta, "bottom": fused["bottom"].theta})
            for v in VIEWS:
                out[v].append(bmfn(per_dir[0][v], per_dir[1][v]).double().numpy())
    finally:
        for m, flag in zip((pair.student, pair.teacher, pair.fusion), modes):
            m.train(flag)
    return {v: np.concatenate(chunks) for v, chunks in out.items()}


def cluster_views(features: dict, cfg, epoch: int = 0) -> tuple[dict, dict]:
    """Run K-means on each view; returns (labels, centroids) keyed by view."""
    cfgs = cfg if isinstance(cfg, dict) else {v: cfg for v in VIEWS}
    labels, centroids = {}, {}
    for i, v in enumerate(VIEWS):
        c = cfgs[v]
        labels[v], centroids[v] = minibatch_kmeans(features[v], replace(c, seed=c.seed + 1000 * epoch + i))
    return labels, centroids


def assignments_from_labels(records: Sequence, labels: dict, epoch: int = 0) -> list[PseudoLabelAssignment]:
    return [
        PseudoLabelAssignment(
            getattr(rec, "image_id", str(i)),
            int(labels["global"][i]),
            int(labels["top"][i]),
            int(labels["bottom"][i]),
            epoch,
        )
        for i, rec in enumerate(records)
    ]


def generate_pseudo_labels(pair, target_train: Sequence, cfg, policy: AugmentationPolicy,
                           epoch: int = 0) -> list[PseudoLabelAssignment]:
    """Cluster each view independently; ``cfg`` is one ClusterConfig or a dict per view."""
    if len(target_train) == 0:
        raise EmptyTargetSet("no target training images")
    labels, _ = cluster_views(extract_views(pair, target_train, policy), cfg, epoch)
    return assignments_from_labels(target_train, labels, epoch)


def write_pseudo_labels(assignments: Sequence[PseudoLabelAssignment], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t")
        w.writerow(["image_id", "label_global", "label_top", "label_bottom"])
        for a in assignments:
            w.writerow([a.image_id, a.label_global, a.label_top, a.label_bottom])
    return path
