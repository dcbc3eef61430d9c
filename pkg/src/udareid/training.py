"""Pre-training on the labelled source set and teacher/student fine-tuning on the target set."""

from __future__ import annotations

import base64
import csv
import logging
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from . import checkpoint as ckpt_io
from .checkpoint import Checkpoint
from .config import TrainConfig
from .datamodel import ImageRecord, MissingIdentity, remap_identities, select
from .evalmetrics import evaluate_reid, metrics_record
from .losses import (
    DegenerateBatch,
    finetune_total,
    hard_triplet_loss,
    id_loss,
    pretrain_total,
    softmax_triplet_loss,
)
from .meanteacher import NetworkPair, StageMismatch, ema_update, inference_embed_batch, init_pair
from .network import ReIDNet, forward_features, gap, split_top_bottom
from .attention_fusion import bmfn
from .preprocess import augment, hflip, to_batch
from .pseudolabel import ClusterConfig, assignments_from_labels, cluster_views, extract_views, write_pseudo_labels

log = logging.getLogger(__name__)


class PKSampler:
    """Batches of ``p`` labels with ``k`` indices each.

    Labels with fewer than ``k`` members are sampled with replacement.
    """

    def __init__(self, labels: Sequence[int], p: int, k: int, rng: np.random.Generator):
        self.p, self.k, self.rng = p, k, rng
        self.groups: dict[int, np.ndarray] = {}
        labels = np.asarray(labels)
        for lab in np.unique(labels):
            self.groups[int(lab)] = np.flatnonzero(labels == lab)
        self.keys = np.array(sorted(self.groups))

    def sample(self) -> np.ndarray:
        p = min(self.p, len(self.keys))
        chosen = self.rng.choice(self.keys, size=p, replace=False)
        out = []
        for lab in chosen:
            members = self.groups[int(lab)]
            out.append(self.rng.choice(members, size=self.k, replace=len(members) < self.k))
        return np.concatenate(out)


def _seed_everything(seed: int) -> np.random.Generator:
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


def _rng_state(rng: np.random.Generator) -> dict:
    return {
        "numpy": rng.bit_generator.state,
        "torch": base64.b64encode(torch.get_rng_state().numpy().tobytes()).decode(),
    }


def _batch(records: Sequence[ImageRecord], idx, policy, rng) -> np.ndarray:
    return [augment(records[i].pixels, policy, rng) for i in idx]


class _CsvLog:
    def __init__(self, path: Optional[Path], header: Sequence[str]):
        self.fh = None
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            self.fh = open(path, "w", newline="")
            self.writer = csv.writer(self.fh)
            self.writer.writerow(header)

    def row(self, values):
        if self.fh is not None:
            self.writer.writerow(values)

    def close(self):
        if self.fh is not None:
            self.fh.close()


def _param_names(*named: tuple[str, torch.nn.Module]) -> dict:
    out = {}
    for prefix, module in named:
        for n, p in module.named_parameters():
            out[p] = f"{prefix}.{n}" if prefix else n
    return out


# ---------------------------------------------------------------------------
# pre-training


def pretrain(config: TrainConfig, source: Sequence[ImageRecord], out_dir=None,
             epoch_callback: Optional[Callable[[int, ReIDNet], dict]] = None) -> Checkpoint:
    """Supervised training with identity + hard triplet loss on PK batches.

    ``source`` is the assembled source training set. Writes a checkpoint
    and appends to ``pretrain_losses.csv`` per epoch when ``out_dir`` is given.
    """
    if config.stage != "pretrain":
        raise StageMismatch(f"pretrain needs a pretrain config, got {config.stage!r}")
    records = select(source, "train")
    for r in records:
        if r.identity is None:
            raise MissingIdentity(r.image_id)
    records, mapping = remap_identities(records)
    labels = np.array([r.identity for r in records])
    num_classes = len(mapping)

    rng = _seed_everything(config.seed)
    net = ReIDNet(num_classes, backbone=config.backbone, input_size=(config.height, config.width))
    opt = torch.optim.Adam(net.parameters(), lr=config.base_lr, weight_decay=config.weight_decay)
    sampler = PKSampler(labels, config.num_instances_p, config.num_instances_k, rng)
    policy = config.policy("pretrain")
    w = config.loss_weights()
    iters = config.iters_per_epoch or max(1, len(records) // config.batch_size)

    out = Path(out_dir) if out_dir is not None else None
    csv_log = _CsvLog(out / "pretrain_losses.csv" if out else None, ["epoch", "iter", "id", "triplet", "total", "lr"])
    history = []
    ckpt = None
    try:
        for epoch in range(config.epochs):
            lr = config.lr_at(epoch)
            for g in opt.param_groups:
                g["lr"] = lr
            net.train()
            totals = []
            for it in range(iters):
                idx = sampler.sample()
                x = to_batch(_batch(records, idx, policy, rng), policy)
                y = torch.from_numpy(labels[idx])
                try:
                    o = forward_features(net, x, "train")
                except FloatingPointError as exc:
                    raise FloatingPointError(f"epoch {epoch} iter {it}: {exc}") from exc
                l_id = id_loss(o.logits, y)
                l_tri = hard_triplet_loss(o.neck, y, w.margin)
                loss = pretrain_total(l_id, l_tri, w)
                if not torch.isfinite(loss):
                    raise FloatingPointError(f"epoch {epoch} iter {it}: non-finite loss")
                opt.zero_grad()
                loss.backward()
                opt.step()
                totals.append(loss.item())
                csv_log.row([epoch, it, l_id.item(), l_tri.item(), loss.item(), lr])
            entry = {"epoch": epoch, "loss": float(np.mean(totals)), "lr": lr}
            if epoch_callback is not None:
                entry.update(epoch_callback(epoch, net))
            history.append(entry)
            log.info("pretrain epoch %d loss %.4f lr %.2e", epoch, entry["loss"], lr)
            ckpt = _pretrain_checkpoint(config, net, opt, epoch, rng, history, num_classes)
            if out is not None:
                ckpt_io.save_checkpoint(ckpt, out / f"pretrain_e{epoch:03d}.ckpt")
    finally:
        csv_log.close()
    return ckpt


def _pretrain_checkpoint(config, net, opt, epoch, rng, history, num_classes) -> Checkpoint:
    arrays = ckpt_io.module_arrays(net)
    arrays.update(ckpt_io.optimizer_arrays(opt, _param_names(("", net))))
    return Checkpoint(
        stage="pretrain",
        epoch=epoch,
        arrays=arrays,
        config=config.to_dict(),
        config_hash=config.config_hash(),
        rng_state=_rng_state(rng),
        metric_history=list(history),
        meta={"num_classes": num_classes, "channels": net.channels},
    )


# ---------------------------------------------------------------------------
# fine-tuning


def _strip_labels(records: Sequence[ImageRecord]) -> list[ImageRecord]:
    # fine-tuning is unsupervised: only train-split pixels and cameras are kept
    return [r.replace(identity=None) for r in records if r.split == "train"]


def _reset_classifiers(pair: NetworkPair, num_classes: int, seed: int) -> None:
    gen = torch.Generator().manual_seed(seed)
    pair.student.reset_classifier(num_classes, generator=gen)
    pair.teacher.reset_classifier(num_classes)
    pair.teacher.classifier.load_state_dict(pair.student.classifier.state_dict())
    pair.teacher.classifier.weight.requires_grad_(False)


def _make_optimizer(config: TrainConfig, pair: NetworkPair, old: Optional[torch.optim.Optimizer]):
    params = list(pair.student.parameters()) + list(pair.fusion.parameters())
    opt = torch.optim.Adam(params, lr=config.base_lr, weight_decay=config.weight_decay)
    if old is not None:
        for p in params:
            if p in old.state:
                opt.state[p] = old.state[p]
    return opt


def finetune_step(pair: NetworkPair, opt, x: torch.Tensor, xf: torch.Tensor, y: dict, w,
                  branch_feature: str = "student") -> dict:
    """One student update on a batch and its flips, followed by the EMA update.

    ``y`` maps view name to a label tensor. Returns the loss components.
    """
    pair.student.train()
    pair.fusion.train()
    pair.teacher.train()
    s = forward_features(pair.student, x)
    sf = forward_features(pair.student, xf)
    with torch.no_grad():
        t = forward_features(pair.teacher, x)
        tf = forward_features(pair.teacher, xf)
    l_id = id_loss(s.logits, y["global"])
    l_tg = hard_triplet_loss(s.neck, y["global"], w.margin)
    halves = dict(zip(("top", "bottom"), split_top_bottom(s.feature_map)))
    halves_f = dict(zip(("top", "bottom"), split_top_bottom(sf.feature_map)))
    fused = pair.fusion(halves, t.feature_map)
    fused_f = pair.fusion(halves_f, tf.feature_map)
    branch = {}
    for b in ("top", "bottom"):
        if branch_feature == "fusion":
            feat = bmfn(fused[b].theta, fused_f[b].theta)
        else:
            feat = bmfn(gap(halves[b]), gap(halves_f[b]))
        branch[b] = softmax_triplet_loss(feat, y[b], skip_invalid=True)
    total = finetune_total(l_id, l_tg, branch["top"], branch["bottom"], w)
    if not torch.isfinite(total):
        raise FloatingPointError("non-finite fine-tuning loss")
    opt.zero_grad()
    total.backward()
    opt.step()
    ema_update(pair)
    return {
        "id_g": l_id.item(),
        "trip_g": l_tg.item(),
        "trip_top": branch["top"].item(),
        "trip_bottom": branch["bottom"].item(),
        "total": total.item(),
    }


def finetune(config: TrainConfig, pretrained: Checkpoint, target: Sequence[ImageRecord], out_dir=None,
             epoch_callback: Optional[Callable[[int, NetworkPair], dict]] = None) -> Checkpoint:
    """Re-cluster at each epoch start, then train the student and EMA the teacher."""
    if config.stage != "finetune":
        raise StageMismatch(f"finetune needs a finetune config, got {config.stage!r}")
    if pretrained.stage != "pretrain":
        raise StageMismatch(f"expected a pretrain checkpoint, got {pretrained.stage!r}")
    train = _strip_labels(target)
    rng = _seed_everything(config.seed)
    pair = init_pair(pretrained, config.eta, config.k_clusters, config.ecab_h, config.ecab_r, config.seed)
    eval_policy = config.policy("eval")
    policy = config.policy("finetune")
    w = config.loss_weights()
    out = Path(out_dir) if out_dir is not None else None
    csv_log = _CsvLog(
        out / "finetune_losses.csv" if out else None,
        ["epoch", "iter", "id_g", "trip_g", "trip_top", "trip_bottom", "total"],
    )
    opt = None
    history = []
    ckpt = None
    k = min(config.k_clusters, len(train))
    cluster_cfg = ClusterConfig(k, config.kmeans_minibatch, config.kmeans_iters, config.seed)
    try:
        for epoch in range(config.epochs):
            feats = extract_views(pair, train, eval_policy)
            labels, _ = cluster_views(feats, cluster_cfg, epoch)
            assignments = assignments_from_labels(train, labels, epoch)
            if out is not None:
                write_pseudo_labels(assignments, out / f"pseudo_labels_epoch{epoch}.tsv")
            y_all = {v: np.array([a.label(v) for a in assignments]) for v in ("global", "top", "bottom")}
            n_cls = int(y_all["global"].max()) + 1
            _reset_classifiers(pair, n_cls, config.seed + epoch)
            opt = _make_optimizer(config, pair, opt)
            sampler = PKSampler(y_all["global"], config.num_instances_p, config.num_instances_k, rng)
            totals, skipped = [], 0
            for it in range(config.iters_per_epoch):
                idx = sampler.sample()
                imgs = _batch(train, idx, policy, rng)
                x = to_batch(imgs, policy)
                xf = to_batch([hflip(im) for im in imgs], policy)
                y = {v: torch.from_numpy(y_all[v][idx]) for v in y_all}
                try:
                    parts = finetune_step(pair, opt, x, xf, y, w, config.branch_feature)
                except DegenerateBatch as exc:
                    skipped += 1
                    log.warning("epoch %d iter %d skipped: %s", epoch, it, exc)
                    continue
                totals.append(parts["total"])
                csv_log.row([epoch, it] + [parts[c] for c in ("id_g", "trip_g", "trip_top", "trip_bottom", "total")])
            entry = {
                "epoch": epoch,
                "loss": float(np.mean(totals)) if totals else float("nan"),
                "num_clusters": n_cls,
                "skipped_batches": skipped,
            }
            if epoch_callback is not None:
                entry.update(epoch_callback(epoch, pair))
            history.append(entry)
            log.info("finetune epoch %d loss %.4f clusters %d", epoch, entry["loss"], n_cls)
            ckpt = _finetune_checkpoint(config, pair, opt, epoch, rng, history, pretrained)
            if out is not None:
                ckpt_io.save_checkpoint(ckpt, out / f"finetune_e{epoch:03d}.ckpt")
    finally:
        csv_log.close()
    return ckpt


def _finetune_checkpoint(config, pair, opt, epoch, rng, history, pretrained) -> Checkpoint:
    arrays = {}
    arrays.update(ckpt_io.module_arrays(pair.student, "student"))
    arrays.update(ckpt_io.module_arrays(pair.teacher, "teacher"))
    arrays.update(ckpt_io.module_arrays(pair.fusion))
    names = _param_names(("student", pair.student), ("", pair.fusion))
    arrays.update(ckpt_io.optimizer_arrays(opt, names))
    return Checkpoint(
        stage="finetune",
        epoch=epoch,
        arrays=arrays,
        config=config.to_dict(),
        config_hash=config.config_hash(),
        rng_state=_rng_state(rng),
        metric_history=list(history),
        meta={
            "ema_step": pair.step,
            "eta": pair.eta,
            "pretrain_config_hash": pretrained.config_hash,
            "channels": pair.student.channels,
        },
    )


def restore_pair(ckpt: Checkpoint) -> NetworkPair:
    """Rebuild the student/teacher/fusion modules from a fine-tuning checkpoint."""
    from .attention_fusion import EnsembleFusion

    if ckpt.stage != "finetune":
        raise StageMismatch(f"expected a finetune checkpoint, got {ckpt.stage!r}")
    student = ckpt_io.build_network(ckpt, "student")
    teacher = ckpt_io.build_network(ckpt, "teacher")
    cfg = ckpt.config
    fusion = EnsembleFusion(student.channels, cfg.get("ecab_h", 5), cfg.get("ecab_r", 4))
    ckpt_io.load_module_arrays(fusion, {k: v for k, v in ckpt.arrays.items() if k.split(".")[0] in ("ecab", "fusion")})
    return NetworkPair(student, teacher, fusion, ckpt.meta.get("eta", cfg.get("eta", 0.999)), ckpt.meta.get("ema_step", 0))


def evaluation_network(ckpt: Checkpoint) -> ReIDNet:
    """The teacher for fine-tuning checkpoints, the single network otherwise."""
    if ckpt.stage == "finetune":
        return ckpt_io.build_network(ckpt, "teacher")
    return ckpt_io.build_network(ckpt)


# ---------------------------------------------------------------------------
# evaluation


def evaluate_model(net: ReIDNet, records: Sequence[ImageRecord], config: TrainConfig, config_hash: str = "") -> dict:
    """Teacher-style embedding of query and gallery, then mAP / CMC."""
    query = select(records, "query")
    gallery = select(records, "gallery")
    policy = config.policy("eval")
    qf = inference_embed_batch(net, query, policy).double().numpy()
    gf = inference_embed_batch(net, gallery, policy).double().numpy()
    res = evaluate_reid(
        qf,
        [r.identity for r in query],
        [r.camera_id for r in query],
        gf,
        [r.identity for r in gallery],
        [r.camera_id for r in gallery],
    )
    return metrics_record(res, len(query), len(gallery), config_hash or config.config_hash())
