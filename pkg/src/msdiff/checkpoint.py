"""Single-file checkpoints: length-prefixed JSON header, then raw float64 data.

Layout: 8-byte little-endian header length, the JSON header (format version,
config echo, step, rng state, ordered parameter table with byte offsets),
then every parameter as little-endian float64 in table order.  Loading a
checkpoint back restores bit-identical forward passes.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from .config import RunConfig, build_model
from .errors import CheckpointError
from .model import Model
from .optim import ParamStore

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    config: RunConfig
    step: int
    rng_state: dict
    params: dict[str, np.ndarray]


def save_checkpoint(path: str, store: ParamStore, config: RunConfig,
                    step: int, rng_state: dict) -> None:
    table = []
    blobs = []
    offset = 0
    for name, tensor in store.items():
        data = np.ascontiguousarray(tensor.data, dtype="<f8").tobytes()
        table.append({"name": name, "shape": list(tensor.shape), "offset": offset})
        blobs.append(data)
        offset += len(data)
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": config.to_dict(),
        "step": int(step),
        "rng_state": rng_state,
        "params": table,
    }
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc.strerror}") from exc
    if len(raw) < 8:
        raise CheckpointError(f"{path}: truncated before the header length")
    (header_len,) = struct.unpack("<Q", raw[:8])
    if 8 + header_len > len(raw):
        raise CheckpointError(f"{path}: truncated inside the header "
                              f"(need {header_len} bytes)")
    try:
        header = json.loads(raw[8:8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from exc
    version = header.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"{path}: checkpoint format_version {version!r}, "
                              f"this build reads {CHECKPOINT_FORMAT_VERSION}")
    blob = raw[8 + header_len:]
    params: dict[str, np.ndarray] = {}
    expected_offset = 0
    for meta in header.get("params", []):
        name, shape = meta["name"], tuple(meta["shape"])
        if meta["offset"] != expected_offset:
            raise CheckpointError(f"{path}: parameter {name!r} offset "
                                  f"{meta['offset']} != cumulative {expected_offset}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * 8 if shape else 8
        if expected_offset + nbytes > len(blob):
            raise CheckpointError(f"{path}: truncated inside parameter {name!r}")
        flat = np.frombuffer(blob, dtype="<f8", count=nbytes // 8,
                             offset=expected_offset)
        params[name] = flat.reshape(shape).astype(np.float64)
        expected_offset += nbytes
    if expected_offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - expected_offset} trailing bytes "
                              "after the last parameter")
    return Checkpoint(config=RunConfig.from_dict(header["config"]),
                      step=int(header["step"]), rng_state=header["rng_state"],
                      params=params)


def apply_checkpoint(ckpt: Checkpoint, store: ParamStore) -> None:
    names = set(store.names())
    saved = set(ckpt.params)
    if names != saved:
        missing = sorted(names - saved)
        extra = sorted(saved - names)
        raise CheckpointError("parameter names do not match the model: "
                              f"missing {missing[:3]}, unexpected {extra[:3]}")
    for name in store.names():
        tensor = store[name]
        if ckpt.params[name].shape != tensor.shape:
            raise CheckpointError(f"parameter {name!r} has shape "
                                  f"{ckpt.params[name].shape}, expected {tensor.shape}")
        tensor.data[...] = ckpt.params[name]


def load_model(path: str) -> tuple[Model, Checkpoint]:
    """Rebuild the model a checkpoint describes and restore its weights."""
    ckpt = load_checkpoint(path)
    model = build_model(ckpt.config)
    apply_checkpoint(ckpt, model.store)
    return model, ckpt
