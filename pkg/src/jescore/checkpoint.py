"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    b"JESM" | u32 version | u64 header length | JSON header | tensor payload

The header holds the architecture, training config, iteration, a metrics
snapshot and an index of named tensors (dtype, shape, byte offset into the
payload, byte length). Model parameters are stored as ``model.<name>`` and
AdamW moments as ``optim.exp_avg.<name>`` / ``optim.exp_avg_sq.<name>``.
Headers are serialized with sorted keys so save -> load -> save is
byte-identical.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .gradresnet import ArchConfig
from .joint import JointModel
from .trainer import OptimizerState, TrainConfig

MAGIC = b"JESM"
VERSION = 1
_DTYPES = {"f32": "<f4", "f64": "<f8"}
_TORCH_TO_CODE = {torch.float32: "f32", torch.float64: "f64"}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    arch: dict
    num_classes: int
    iteration: int = 0
    train: Optional[dict] = None
    metrics: Optional[dict] = None
    optimizer_step: int = 0
    tensors: dict = field(default_factory=dict)  # name -> numpy array, insertion-ordered

    def model(self) -> JointModel:
        from .gradresnet import FeatureNet

        cfg = ArchConfig.from_dict(self.arch)
        model = JointModel(FeatureNet(cfg), self.num_classes)
        params = dict(model.named_parameters())
        wanted = {f"model.{k}" for k in params}
        stored = {k for k in self.tensors if k.startswith("model.")}
        if wanted != stored:
            raise CheckpointError(f"parameter mismatch: missing {sorted(wanted - stored)}, "
                                  f"unexpected {sorted(stored - wanted)}")
        dtype = torch.float64 if self.tensors[next(iter(sorted(wanted)))].dtype == np.float64 else torch.float32
        model.to(dtype)
        with torch.no_grad():
            for k, p in params.items():
                p.copy_(torch.from_numpy(np.array(self.tensors[f"model.{k}"])))
        return model

    def train_config(self) -> Optional[TrainConfig]:
        return None if self.train is None else TrainConfig.from_dict(self.train)

    def optimizer_state(self) -> OptimizerState:
        state = OptimizerState(step=self.optimizer_step)
        for key, arr in self.tensors.items():
            for slot in ("exp_avg_sq", "exp_avg"):
                prefix = f"optim.{slot}."
                if key.startswith(prefix):
                    getattr(state, slot)[key[len(prefix):]] = torch.from_numpy(np.array(arr))
                    break
        return state


def from_training(model: JointModel, cfg: Optional[TrainConfig] = None,
                  state: Optional[OptimizerState] = None, iteration: int = 0,
                  metrics: Optional[dict] = None) -> Checkpoint:
    if metrics is not None:
        # wall-clock time would make otherwise identical reruns differ byte-wise
        metrics = {k: v for k, v in metrics.items() if k != "wall_time"}
    tensors = {}
    for name, p in model.named_parameters():
        tensors[f"model.{name}"] = p.detach().cpu().numpy().copy()
    if state is not None:
        for slot in ("exp_avg", "exp_avg_sq"):
            for name, t in getattr(state, slot).items():
                tensors[f"optim.{slot}.{name}"] = t.detach().cpu().numpy().copy()
    return Checkpoint(arch=model.config.to_dict(), num_classes=model.num_classes,
                      iteration=int(iteration), train=None if cfg is None else cfg.to_dict(),
                      metrics=metrics, optimizer_step=0 if state is None else state.step,
                      tensors=tensors)


def to_bytes(ckpt: Checkpoint) -> bytes:
    index, blobs, offset = [], [], 0
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        code = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        index.append({"name": name, "dtype": code, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "arch": ckpt.arch,
        "num_classes": ckpt.num_classes,
        "iteration": ckpt.iteration,
        "train": ckpt.train,
        "metrics": ckpt.metrics,
        "optimizer": {"step": ckpt.optimizer_step},
        "tensors": index,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<IQ", VERSION, len(hbytes)) + hbytes + b"".join(blobs)


def from_bytes(raw: bytes) -> Checkpoint:
    if raw[:4] != MAGIC:
        raise CheckpointError("not a JESM checkpoint")
    if len(raw) < 16:
        raise CheckpointError("truncated header")
    version, hlen = struct.unpack("<IQ", raw[4:16])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[16:16 + hlen])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt header: {exc}") from exc
    payload = raw[16 + hlen:]
    try:
        return _decode(header, payload)
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed header: {exc!r}") from exc


def _decode(header: dict, payload: bytes) -> Checkpoint:
    tensors = {}
    seen = set()
    for entry in header["tensors"]:
        name = entry["name"]
        if name in seen:
            raise CheckpointError(f"tensor {name} indexed twice")
        seen.add(name)
        start, n = entry["offset"], entry["nbytes"]
        if start + n > len(payload):
            raise CheckpointError(f"tensor {name} runs past the payload")
        arr = np.frombuffer(payload[start:start + n], dtype=_DTYPES[entry["dtype"]])
        tensors[name] = arr.reshape(entry["shape"]).astype(arr.dtype.newbyteorder("="))
    return Checkpoint(arch=header["arch"], num_classes=header["num_classes"],
                      iteration=header["iteration"], train=header["train"], metrics=header["metrics"],
                      optimizer_step=header["optimizer"]["step"], tensors=tensors)


def save_checkpoint(path, model: JointModel, cfg: Optional[TrainConfig] = None,
                    state: Optional[OptimizerState] = None, iteration: int = 0,
                    metrics: Optional[dict] = None) -> Path:
    path = Path(path)
    path.write_bytes(to_bytes(from_training(model, cfg, state, iteration, metrics)))
    return path


def load_checkpoint(path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return from_bytes(raw)
