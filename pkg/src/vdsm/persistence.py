"""Binary checkpoints.

Layout (integers little-endian)::

    b"VDSM"                     magic
    u32                         format version (1)
    u32 n, n bytes              JSON header: config, stage, epoch, joint flag,
                                anneal state, optimizer hyperparameters,
                                trainable parameter order, metric history
    u32                         number of tensor records
    per record:
      u16 n, n bytes            UTF-8 name ("param/<p>", "adam/<p>/exp_avg",
                                "adam/<p>/exp_avg_sq", "adam/<p>/step")
      u8 ndim, ndim x u32       shape
      f32 x prod(shape)         data
    u32 n, n bytes              torch RNG state (empty when absent)

Serialization is deterministic: saving the same state twice gives identical
bytes.
"""
from __future__ import annotations

import io
import json
import os
import struct
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import torch

from .config import TrainConfig
from .model import VDSM
from .schedules import PRETRAIN, SEQUENCE, AnnealState
from .trainer import INIT, ModelState, make_optimizer

MAGIC = b"VDSM"
VERSION = 1


class CheckpointError(ValueError):
    pass


class NotACheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


def _tensor_records(state: ModelState) -> Dict[str, torch.Tensor]:
    records = {f"param/{n}": p.detach() for n, p in state.model.named_parameters()}
    if state.optimizer is not None:
        params = dict(state.model.named_parameters())
        for name in state.trainable:
            st = state.optimizer.state.get(params[name], {})
            for key in ("exp_avg", "exp_avg_sq", "step"):
                if key in st:
                    records[f"adam/{name}/{key}"] = torch.as_tensor(st[key]).detach()
    return records


def _header(state: ModelState) -> dict:
    opt = None
    if state.optimizer is not None:
        g = state.optimizer.param_groups[0]
        opt = {"lr": g["lr"], "betas": list(g["betas"]), "eps": g["eps"]}
    return {
        "config": state.config.to_dict(),
        "stage": state.stage,
        "epoch": state.epoch,
        "joint": state.joint,
        "anneal": state.anneal.to_dict() if state.anneal else None,
        "optimizer": opt,
        "trainable": state.trainable,
        "history": state.history,
    }


def dumps_checkpoint(state: ModelState) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    header = json.dumps(_header(state), sort_keys=True, separators=(",", ":")).encode()
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    records = _tensor_records(state)
    buf.write(struct.pack("<I", len(records)))
    for name, t in records.items():
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", t.dim()))
        buf.write(struct.pack(f"<{t.dim()}I", *t.shape))
        buf.write(t.to(torch.float32).contiguous().numpy().astype("<f4").tobytes())
    rng = b"" if state.rng_state is None else bytes(state.rng_state.numpy().tobytes())
    buf.write(struct.pack("<I", len(rng)))
    buf.write(rng)
    return buf.getvalue()


def save_checkpoint(state: ModelState, path) -> None:
    """Write atomically: a partial file never replaces a good checkpoint."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps_checkpoint(state))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, raw: bytes, source: str):
        self.raw, self.pos, self.source = raw, 0, source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise TruncatedCheckpointError(f"{self.source}: checkpoint is truncated")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _apply_freeze(state: ModelState) -> None:
    model = state.model
    if state.stage == PRETRAIN:
        for n, p in model.named_parameters():
            p.requires_grad_(n.startswith(("encoder.", "bank.")))
    elif state.stage == SEQUENCE and not state.joint:
        model.apply_stage_two_freeze()
    else:
        model.unfreeze()


def loads_checkpoint(raw: bytes, config: Optional[TrainConfig] = None, source: str = "<bytes>") -> ModelState:
    r = _Reader(raw, source)
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise NotACheckpointError(f"{source}: not a checkpoint (bad magic)")
    r.take(4)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointVersionError(f"{source}: checkpoint version {version}, expected {VERSION}")
    (hlen,) = r.unpack("<I")
    try:
        header = json.loads(r.take(hlen).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: corrupt header: {exc}") from None
    saved_config = TrainConfig.from_dict(header["config"])
    config = config or saved_config

    records: Dict[str, np.ndarray] = {}
    (count,) = r.unpack("<I")
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        n = int(np.prod(shape)) if ndim else 1
        records[name] = np.frombuffer(r.take(4 * n), "<f4").reshape(shape)
    (rlen,) = r.unpack("<I")
    rng = r.take(rlen)
    if r.pos != len(raw):
        raise CheckpointError(f"{source}: {len(raw) - r.pos} trailing bytes after checkpoint")

    model = VDSM(config)
    with torch.no_grad():
        for name, p in model.named_parameters():
            key = f"param/{name}"
            if key not in records:
                raise CheckpointShapeError(f"{source}: missing tensor {name!r}")
            data = records.pop(key)
            if tuple(data.shape) != tuple(p.shape):
                raise CheckpointShapeError(
                    f"{source}: tensor {name!r} has shape {tuple(data.shape)}, config expects {tuple(p.shape)}"
                )
            p.copy_(torch.from_numpy(data.copy()))
    stray = [k for k in records if k.startswith("param/")]
    if stray:
        raise CheckpointShapeError(f"{source}: unexpected tensor {stray[0][6:]!r}")

    anneal = AnnealState(**header["anneal"]) if header["anneal"] else None
    state = ModelState(
        config, model, anneal=anneal, stage=header["stage"], epoch=header["epoch"],
        joint=header["joint"], history=header["history"],
        rng_state=torch.from_numpy(np.frombuffer(rng, np.uint8).copy()) if rng else None,
    )
    _apply_freeze(state)
    if header["optimizer"] is not None:
        make_optimizer(state, header["trainable"])
        g = state.optimizer.param_groups[0]
        g["lr"] = header["optimizer"]["lr"]
        g["betas"] = tuple(header["optimizer"]["betas"])
        g["eps"] = header["optimizer"]["eps"]
        params = dict(model.named_parameters())
        for name in state.trainable:
            keys = {k: f"adam/{name}/{k}" for k in ("exp_avg", "exp_avg_sq", "step")}
            if all(v in records for v in keys.values()):
                state.optimizer.state[params[name]] = {
                    k: torch.from_numpy(records[v].copy()) for k, v in keys.items()
                }
    return state


def load_checkpoint(path, config: Optional[TrainConfig] = None) -> ModelState:
    """Read a checkpoint; with ``config`` the tensors are validated against it."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    return loads_checkpoint(path.read_bytes(), config, str(path))


__all__ = [
    "CheckpointError", "NotACheckpointError", "CheckpointVersionError", "CheckpointShapeError",
    "TruncatedCheckpointError", "save_checkpoint", "load_checkpoint", "dumps_checkpoint",
    "loads_checkpoint", "INIT",
]
