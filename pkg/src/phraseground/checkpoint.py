"""Checkpoint container: one self-describing binary file holding every
parameter tensor, batchnorm running statistics, Adam state, the exact run
config (plus its sha256), and the per-epoch metrics.

Layout (version 1):

    bytes 0..7    magic b"PGCKPT1\\n"
    bytes 8..11   little-endian uint32, length L of the header JSON
    bytes 12..12+L  header JSON, canonical (sorted keys, compact separators)
    remainder     the arrays' raw bytes, little-endian float64, row-major,
                  back to back in header order

The header's "arrays" list gives name, shape and byte offset (relative to
the start of the data section) for every tensor.  Serialization is fully
deterministic, so identical state produces identical bytes and a
save -> load -> save round trip is bit-exact.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .model import ModelConfig, ModelParams
from .optim import AdamState

MAGIC = b"PGCKPT1\n"
VERSION = 1


def config_sha256(config: dict) -> str:
    return hashlib.sha256(
        json.dumps(config, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _state_arrays(model: ModelParams, adam: AdamState) -> dict:
    arrays = dict(model.named())
    for bn, prefix in ((model.bn_h, "bn_h"), (model.bn_v, "bn_v")):
        if bn is not None:
            arrays[f"{prefix}.running_mean"] = bn.running_mean
            arrays[f"{prefix}.running_var"] = bn.running_var
    for name, arr in adam.m.items():
        arrays[f"adam.m.{name}"] = arr
    for name, arr in adam.v.items():
        arrays[f"adam.v.{name}"] = arr
    return arrays


def save_checkpoint(path, model: ModelParams, adam: AdamState, config: dict,
                    metrics: list) -> Path:
    """Write the full training state to `path`; see the module docstring."""
    arrays = _state_arrays(model, adam)
    entries, offset = [], 0
    for name, arr in arrays.items():
        entries.append({"name": name, "offset": offset, "shape": list(arr.shape)})
        offset += arr.size * 8
    header = {
        "adam": {"beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps, "t": adam.t},
        "arrays": entries,
        "config": config,
        "config_sha256": config_sha256(config),
        "metrics": metrics,
        "model_config": vars(model.config),
        "version": VERSION,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return path


@dataclass
class Checkpoint:
    model: ModelParams
    adam: AdamState
    config: dict
    metrics: list
    config_sha256: str


def load_checkpoint(path) -> Checkpoint:
    """Reconstruct the exact saved state; values round-trip bit-for-bit."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: cannot read checkpoint ({exc})") from exc
    if raw[:len(MAGIC)] != MAGIC:
        raise DataError(f"{path}: not a checkpoint file (bad magic)")
    try:
        (hlen,) = struct.unpack("<I", raw[len(MAGIC):len(MAGIC) + 4])
        header = json.loads(raw[len(MAGIC) + 4:len(MAGIC) + 4 + hlen])
        if header["version"] != VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {header['version']}")
        data = raw[len(MAGIC) + 4 + hlen:]
        arrays = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape)) if shape else 1
            start = entry["offset"]
            arrays[entry["name"]] = np.frombuffer(
                data, dtype="<f8", count=n, offset=start).reshape(shape).copy()
        model_config = ModelConfig(**header["model_config"])
    except DataError:
        raise
    except (KeyError, TypeError, ValueError, struct.error, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: malformed checkpoint ({exc})") from exc

    model = ModelParams.initialize(model_config, seed=0)
    for name, arr in model.named().items():
        if name not in arrays:
            raise DataError(f"{path}: checkpoint is missing parameter {name}")
        if arrays[name].shape != arr.shape:
            raise DataError(f"{path}: parameter {name} has shape {arrays[name].shape}, "
                            f"expected {arr.shape}")
        arr[...] = arrays[name]
    for bn, prefix in ((model.bn_h, "bn_h"), (model.bn_v, "bn_v")):
        if bn is not None:
            bn.running_mean = arrays[f"{prefix}.running_mean"]
            bn.running_var = arrays[f"{prefix}.running_var"]
    a = header["adam"]
    adam = AdamState(
        m={name: arrays[f"adam.m.{name}"] for name in model.named()},
        v={name: arrays[f"adam.v.{name}"] for name in model.named()},
        t=int(a["t"]), beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"])
    return Checkpoint(model, adam, header["config"], header["metrics"],
                      header["config_sha256"])
