"""Versioned binary checkpoint container.

Layout: 4 magic bytes, u32 format version, u32 header length, UTF-8 JSON
header, then raw little-endian float32 tensor data in manifest order.  The
header carries the model config, optional optimizer hyperparameters and step
count, the iteration counter, the loss history length, and a manifest of
{name, shape, role} entries describing every payload tensor.  Roles:

  param    trainable tensor
  buffer   fixed tensor (high-pass kernel banks)
  moment1  Adam first moment, same name as its parameter
  moment2  Adam second moment
  history  recorded per-phase training losses

Data is always serialized as float32 regardless of the in-memory dtype, so a
float32 model round-trips bit-exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .network import CoarseToFineModel, ModelConfig

MAGIC = b"FLOC"
VERSION = 1


@dataclass
class CheckpointData:
    model_config: dict
    params: dict
    buffers: dict
    moments1: dict
    moments2: dict
    optimizer: Optional[dict]        # lr/beta1/beta2/eps/step_count
    iteration: int
    loss_history: list
    sat_config: Optional[dict] = None


def _manifest_entry(name, arr, role):
    return {"name": name, "shape": list(arr.shape), "role": role}


def save_checkpoint(path, model: CoarseToFineModel, optimizer=None,
                    iteration: int = 0, loss_history=(), sat_config=None):
    """Write the model (and optional Adam state / loop counters) to ``path``."""
    tensors = []
    manifest = []
    for name, t in model.parameters():
        manifest.append(_manifest_entry(name, t.data, "param"))
        tensors.append(t.data)
    for name, t in model.buffers():
        manifest.append(_manifest_entry(name, t.data, "buffer"))
        tensors.append(t.data)
    opt_header = None
    if optimizer is not None:
        for name, _ in model.parameters():
            manifest.append(_manifest_entry(name, optimizer.m[name], "moment1"))
            tensors.append(optimizer.m[name])
        for name, _ in model.parameters():
            manifest.append(_manifest_entry(name, optimizer.v[name], "moment2"))
            tensors.append(optimizer.v[name])
        opt_header = {"lr": optimizer.lr, "beta1": optimizer.beta1,
                      "beta2": optimizer.beta2, "eps": optimizer.eps,
                      "step_count": optimizer.step_count}
    history = np.asarray(list(loss_history), dtype=np.float32)
    manifest.append(_manifest_entry("loss_history", history, "history"))
    tensors.append(history)

    header = {
        "model_config": model.cfg.to_dict(),
        "optimizer": opt_header,
        "iteration": int(iteration),
        "manifest": manifest,
    }
    if sat_config is not None:
        header["sat_config"] = sat_config
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(blob)))
        f.write(blob)
        for arr in tensors:
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> CheckpointData:
    """Read a checkpoint, validating magic, version, and payload length."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    version, header_len = struct.unpack("<II", raw[4:12])
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version} "
                         f"(expected {VERSION})")
    if len(raw) < 12 + header_len:
        raise ValueError(f"{path}: truncated checkpoint header")
    header = json.loads(raw[12:12 + header_len].decode("utf-8"))

    out = CheckpointData(model_config=header["model_config"], params={},
                         buffers={}, moments1={}, moments2={},
                         optimizer=header.get("optimizer"),
                         iteration=header.get("iteration", 0),
                         loss_history=[],
                         sat_config=header.get("sat_config"))
    offset = 12 + header_len
    for entry in header["manifest"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * 4
        if offset + nbytes > len(raw):
            raise ValueError(f"{path}: truncated checkpoint payload at "
                             f"tensor {entry['name']!r}")
        arr = np.frombuffer(raw, dtype="<f4", count=count,
                            offset=offset).reshape(shape).copy()
        offset += nbytes
        role = entry["role"]
        if role == "param":
            out.params[entry["name"]] = arr
        elif role == "buffer":
            out.buffers[entry["name"]] = arr
        elif role == "moment1":
            out.moments1[entry["name"]] = arr
        elif role == "moment2":
            out.moments2[entry["name"]] = arr
        elif role == "history":
            out.loss_history = arr.astype(float).tolist()
        else:
            raise ValueError(f"{path}: unknown manifest role {role!r}")
    return out


def restore_model(ckpt: CheckpointData) -> CoarseToFineModel:
    """Build a model from a checkpoint's config and load its tensors."""
    cfg = ModelConfig.from_dict(ckpt.model_config)
    model = CoarseToFineModel(cfg, seed=0)
    dtype = cfg.np_dtype
    names = set()
    for name, t in model.parameters():
        if name not in ckpt.params:
            raise ValueError(f"checkpoint missing parameter {name!r}")
        if tuple(ckpt.params[name].shape) != t.shape:
            raise ValueError(f"checkpoint shape mismatch for {name!r}: "
                             f"{ckpt.params[name].shape} vs {t.shape}")
        t.data[...] = ckpt.params[name].astype(dtype)
        names.add(name)
    extra = set(ckpt.params) - names
    if extra:
        raise ValueError(f"checkpoint has unknown parameters: {sorted(extra)}")
    for name, t in model.buffers():
        if name in ckpt.buffers:
            t.data[...] = ckpt.buffers[name].astype(dtype)
    return model
