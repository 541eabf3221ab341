"""Versioned checkpoint files: JSON header + little-endian float64 blob.

Round-tripping is bit-exact (float64 in, float64 out). A version mismatch
refuses to load.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PVCK"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def config_hash(config_obj) -> str:
    blob = json.dumps(config_obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _collect_arrays(model, optimizer=None) -> dict[str, np.ndarray]:
    arrays = dict(model.named_tensors().items())
    arrays = {name: p.data for name, p in arrays.items()}
    arrays["bank.prototypes"] = model.bank.prototypes
    arrays["bank.assignment_counts"] = model.bank.assignment_counts.astype(np.float64)
    if optimizer is not None:
        for i, (m, v) in enumerate(zip(optimizer.m, optimizer.v)):
            arrays[f"adamw.m.{i}"] = m
            arrays[f"adamw.v.{i}"] = v
    return arrays


def save_checkpoint(path: str | Path, model, optimizer=None, extra: dict | None = None):
    arrays = _collect_arrays(model, optimizer)
    entries = []
    offset = 0
    blobs = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset,
                        "count": int(arr.size)})
        blobs.append(arr.tobytes())
        offset += arr.size
    header = {
        "format_version": FORMAT_VERSION,
        "tensors": entries,
        "bank_gamma": model.bank.gamma,
        "adamw_step_count": optimizer.step_count if optimizer is not None else None,
        "config_hash": config_hash(_model_config_view(model)),
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    with Path(path).open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for b in blobs:
            fh.write(b)


def _model_config_view(model) -> dict:
    cfg = model.config
    return {
        "n_classes": cfg.n_classes, "bank_size": cfg.bank_size,
        "gamma": cfg.gamma, "heads": cfg.heads, "proposals": cfg.proposals,
        "group_radius": cfg.group_radius, "nms_iou": cfg.nms_iou,
        "assignment": cfg.assignment, "soft_temperature": cfg.soft_temperature,
        "attention_residual": cfg.attention_residual,
        "attention_scaling": cfg.attention_scaling,
        "bank_self_learning": cfg.bank_self_learning,
        "anchor_size": [float(v) for v in model.anchor_size],
        "feature_dim": cfg.backbone.feature_dim,
    }


def read_header(path: str | Path) -> dict:
    with Path(path).open("rb") as fh:
        if fh.read(4) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: format version {version}, "
                                  f"expected {FORMAT_VERSION}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(hlen))


def load_checkpoint(path: str | Path, model, optimizer=None,
                    strict_config: bool = True) -> dict:
    """Restore model (and optionally optimizer) state in place; returns the
    header."""
    path = Path(path)
    header = read_header(path)
    with path.open("rb") as fh:
        fh.seek(4 + 4 + 8 + len(json.dumps(header, sort_keys=True).encode()))
        blob = fh.read()
    data = np.frombuffer(blob, dtype="<f8")

    if strict_config and header["config_hash"] != config_hash(_model_config_view(model)):
        raise CheckpointError(f"{path}: config hash mismatch "
                              f"({header['config_hash']})")

    arrays = {}
    for e in header["tensors"]:
        arr = data[e["offset"]:e["offset"] + e["count"]].reshape(e["shape"])
        arrays[e["name"]] = arr

    for name, p in model.named_tensors().items():
        if name not in arrays:
            raise CheckpointError(f"{path}: missing tensor {name!r}")
        p.data = arrays[name].astype(np.float64).copy()
    model.bank.prototypes = arrays["bank.prototypes"].astype(np.float64).copy()
    model.bank.assignment_counts = arrays["bank.assignment_counts"].astype(np.int64).copy()
    model.bank.gamma = float(header["bank_gamma"])

    if optimizer is not None:
        if header["adamw_step_count"] is None:
            raise CheckpointError(f"{path}: checkpoint has no optimizer state")
        optimizer.step_count = int(header["adamw_step_count"])
        optimizer.m = [arrays[f"adamw.m.{i}"].astype(np.float64).copy()
                       for i in range(len(optimizer.params))]
        optimizer.v = [arrays[f"adamw.v.{i}"].astype(np.float64).copy()
                       for i in range(len(optimizer.params))]
    return header
