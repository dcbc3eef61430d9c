"""Command line entry point: ``python -m udareid <command>``.

Without ``--config`` the toy preset for the relevant stage is used.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import checkpoint as ckpt_io
from .camstyle import assemble_full_training_set
from .config import TrainConfig
from .datamodel import read_manifest, save_dataset
from .evalmetrics import write_metrics
from .toydata import make_toy_data
from .training import evaluate_model, evaluation_network, finetune, pretrain

log = logging.getLogger("udareid")


def _config(args, stage: str) -> TrainConfig:
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig.toy(stage)
    if cfg.stage != stage:
        raise SystemExit(f"config stage is {cfg.stage!r}, command needs {stage!r}")
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def cmd_make_toy_data(args) -> None:
    seed = 7 if args.seed is None else args.seed
    src, tgt = make_toy_data(args.num_ids_source, args.num_ids_target, args.cams, args.images_per_id_cam,
                             (args.height, args.width), seed, args.out)
    print(src)
    print(tgt)


def cmd_assemble(args) -> None:
    records = read_manifest(args.manifest)
    out = save_dataset(assemble_full_training_set(records), args.out)
    print(out)


def cmd_pretrain(args) -> None:
    cfg = _config(args, "pretrain")
    out = Path(args.out)
    cfg.save(out / "config.yaml")
    ckpt = pretrain(cfg, read_manifest(args.manifest), out)
    print(out / f"pretrain_e{ckpt.epoch:03d}.ckpt")


def cmd_finetune(args) -> None:
    if not args.checkpoint:
        raise SystemExit("finetune needs --checkpoint (a pretrain checkpoint)")
    cfg = _config(args, "finetune")
    out = Path(args.out)
    cfg.save(out / "config.yaml")
    pretrained = ckpt_io.load_checkpoint(args.checkpoint)
    ckpt = finetune(cfg, pretrained, read_manifest(args.manifest), out)
    print(out / f"finetune_e{ckpt.epoch:03d}.ckpt")


def cmd_evaluate(args) -> None:
    if not args.checkpoint:
        raise SystemExit("evaluate needs --checkpoint")
    ckpt = ckpt_io.load_checkpoint(args.checkpoint)
    if args.config:
        cfg = TrainConfig.load(args.config)
    else:
        cfg = TrainConfig.from_dict(ckpt.config) if ckpt.config else TrainConfig.toy(ckpt.stage)
    net = evaluation_network(ckpt)
    record = evaluate_model(net, read_manifest(args.manifest), cfg, ckpt.config_hash)
    path = write_metrics(record, Path(args.out) / "metrics.json")
    print(path)
    for k in ("mAP", "rank1", "rank5", "rank10"):
        print(f"{k:>6}: {record[k]:.4f}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config (defaults to the toy preset)")
    common.add_argument("--out", default="runs", help="output directory")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--checkpoint", help="input checkpoint")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="udareid", description="Toy-scale UDA person re-identification.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-toy-data", parents=[common], help="render the synthetic source/target domains")
    p.add_argument("--num-ids-source", type=int, default=40)
    p.add_argument("--num-ids-target", type=int, default=30)
    p.add_argument("--cams", type=int, default=4)
    p.add_argument("--images-per-id-cam", type=int, default=3)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=32)
    p.set_defaults(func=cmd_make_toy_data)

    for name, func, text in [
        ("assemble", cmd_assemble, "add camera-style copies to a source manifest"),
        ("pretrain", cmd_pretrain, "supervised pre-training on an assembled source manifest"),
        ("finetune", cmd_finetune, "teacher/student fine-tuning on a target manifest"),
        ("evaluate", cmd_evaluate, "mAP / CMC on a manifest's query and gallery, writes metrics.json"),
    ]:
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--manifest", required=True, help="dataset manifest (manifest.tsv)")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
