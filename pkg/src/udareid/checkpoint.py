"""Checkpoint container.

Layout: magic ``COREUDA1`` (8 bytes), a little-endian uint64 manifest
length, the JSON manifest, then raw row-major little-endian float32
payloads. Manifest ``arrays`` entries give name, shape, dtype and byte
offset relative to the start of the payload.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

MAGIC = b"COREUDA1"
FORMAT_VERSION = 1
_LEN = struct.Struct("<Q")
_DTYPE = np.dtype("<f4")


class CorruptFile(ValueError):
    pass


class VersionMismatch(ValueError):
    pass


@dataclass
class Checkpoint:
    stage: str
    epoch: int
    arrays: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    config_hash: str = ""
    rng_state: dict = field(default_factory=dict)
    metric_history: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def subset(self, prefix: str) -> dict[str, np.ndarray]:
        """Arrays under ``prefix.`` with the prefix stripped."""
        p = prefix + "."
        return {k[len(p) :]: v for k, v in self.arrays.items() if k.startswith(p)}


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, blobs, offset = [], [], 0
    for name, arr in ckpt.arrays.items():
        data = np.ascontiguousarray(arr, dtype=_DTYPE)
        raw = data.tobytes(order="C")
        entries.append({"name": name, "shape": list(data.shape), "dtype": "float32", "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": ckpt.format_version,
        "stage": ckpt.stage,
        "epoch": ckpt.epoch,
        "config": ckpt.config,
        "config_hash": ckpt.config_hash,
        "rng_state": ckpt.rng_state,
        "metric_history": ckpt.metric_history,
        "meta": ckpt.meta,
        "arrays": entries,
    }
    head = json.dumps(manifest, sort_keys=True).encode()
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_LEN.pack(len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)
    return path


def read_manifest(buf: bytes) -> tuple[dict, int]:
    """Parse the header of a serialized checkpoint; returns (manifest, payload start)."""
    if len(buf) < len(MAGIC) + _LEN.size or buf[: len(MAGIC)] != MAGIC:
        raise CorruptFile("bad magic bytes")
    (n,) = _LEN.unpack_from(buf, len(MAGIC))
    start = len(MAGIC) + _LEN.size
    if start + n > len(buf):
        raise CorruptFile("truncated manifest")
    try:
        manifest = json.loads(buf[start : start + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFile(f"unreadable manifest: {exc}") from exc
    return manifest, start + n


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    manifest, base = read_manifest(buf)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise VersionMismatch(f"format version {manifest.get('format_version')} != {FORMAT_VERSION}")
    arrays = {}
    for e in manifest["arrays"]:
        lo = base + e["offset"]
        hi = lo + e["nbytes"]
        if hi > len(buf):
            raise CorruptFile(f"payload of {e['name']!r} is truncated")
        arr = np.frombuffer(buf, dtype=_DTYPE, count=e["nbytes"] // 4, offset=lo)
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(np.float32)
    return Checkpoint(
        stage=manifest["stage"],
        epoch=manifest["epoch"],
        arrays=arrays,
        config=manifest.get("config", {}),
        config_hash=manifest.get("config_hash", ""),
        rng_state=manifest.get("rng_state", {}),
        metric_history=manifest.get("metric_history", []),
        meta=manifest.get("meta", {}),
        format_version=manifest["format_version"],
    )


def checkpoint_roundtrip(path) -> Checkpoint:
    return load_checkpoint(path)


# ---------------------------------------------------------------------------
# module <-> arrays


def module_arrays(module: torch.nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    p = prefix + "." if prefix else ""
    return {p + k: v.detach().cpu().numpy().astype(np.float32) for k, v in module.state_dict().items()}


def load_module_arrays(module: torch.nn.Module, arrays: dict[str, np.ndarray]) -> None:
    state = module.state_dict()
    missing = set(state) - set(arrays)
    extra = set(arrays) - set(state)
    if missing or extra:
        raise KeyError(f"parameter mismatch; missing={sorted(missing)} unexpected={sorted(extra)}")
    for k, v in arrays.items():
        if tuple(state[k].shape) != tuple(v.shape):
            raise ValueError(f"shape mismatch for {k}: {tuple(state[k].shape)} vs {tuple(v.shape)}")
    module.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in arrays.items()})


def optimizer_arrays(opt: torch.optim.Optimizer, names: dict, prefix: str = "optim") -> dict[str, np.ndarray]:
    """Adam moment buffers keyed by parameter name (``names`` maps param -> name)."""
    out = {}
    for p, st in opt.state.items():
        if p not in names:
            continue
        for key, val in st.items():
            if torch.is_tensor(val):
                out[f"{prefix}.{names[p]}.{key}"] = val.detach().cpu().numpy().astype(np.float32)
    return out


def load_optimizer_arrays(opt: torch.optim.Optimizer, named_params: dict, arrays: dict, prefix: str = "optim") -> None:
    p = prefix + "."
    for key, arr in arrays.items():
        if not key.startswith(p):
            continue
        pname, slot = key[len(p) :].rsplit(".", 1)
        if pname not in named_params:
            continue
        param = named_params[pname]
        opt.state[param][slot] = torch.from_numpy(np.array(arr)).to(param.dtype if slot != "step" else torch.float32)


def build_network(ckpt: Checkpoint, prefix: str = ""):
    """Instantiate a :class:`ReIDNet` from checkpoint arrays (optionally under ``prefix``)."""
    from .network import ReIDNet

    arrays = ckpt.subset(prefix) if prefix else {k: v for k, v in ckpt.arrays.items() if "." in k and k.split(".")[0] in ("backbone", "neck", "classifier")}
    cls_w = arrays.get("classifier.weight")
    cfg = ckpt.config
    net = ReIDNet(
        num_classes=None if cls_w is None else cls_w.shape[0],
        backbone=cfg.get("backbone", "toy"),
        input_size=(cfg.get("height", 64), cfg.get("width", 32)),
    )
    load_module_arrays(net, arrays)
    return net
