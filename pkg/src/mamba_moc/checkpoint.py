"""Binary checkpoint format.

Little-endian layout::

    b"MMOC" | u32 version | u32 tensor count
    per tensor: u16 name length | UTF-8 name | u8 rank | u32 dims[rank] | float32 payload
    u32 blob length | UTF-8 JSON blob

The JSON blob holds ``{"config": ..., "optimizer": ...}``. Optimizer moment
buffers travel as extra tensors named ``optim.m.<i>`` and ``optim.v.<i>``.
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .errors import CompatibilityError, FormatError

MAGIC = b"MMOC"
VERSION = 1
_OPT_PREFIX = "optim."


@dataclass
class Checkpoint:
    tensors: "OrderedDict[str, np.ndarray]"
    config: dict | None = None
    optimizer: dict | None = None
    extra: dict = field(default_factory=dict)

    def model_tensors(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, t) for n, t in self.tensors.items() if not n.startswith(_OPT_PREFIX))


def encode(tensors: dict[str, np.ndarray], meta: dict) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF or arr.ndim > 0xFF:
            raise FormatError(f"tensor {name!r} cannot be stored (name or rank too large)")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(blob)))
    parts.append(blob)
    return b"".join(parts)


def decode(data: bytes) -> tuple["OrderedDict[str, np.ndarray]", dict]:
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"checkpoint truncated at byte {pos}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise FormatError("not a checkpoint: bad magic")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    tensors = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        try:
            name = take(name_len).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not valid UTF-8") from None
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(shape)) if rank else 1
        tensors[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    (blob_len,) = struct.unpack("<I", take(4))
    try:
        meta = json.loads(take(blob_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"checkpoint config blob is malformed ({exc})") from None
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes after checkpoint")
    return tensors, meta


def save_checkpoint(path, model, optimizer=None, config: dict | None = None) -> None:
    """Write model parameters (and optionally AdamW state) to ``path``."""
    tensors = OrderedDict(model.state_dict())
    if config is None and getattr(model, "config", None) is not None:
        config = model.config.to_dict()
    meta = {"config": config, "optimizer": None}
    if optimizer is not None:
        st = optimizer.state
        meta["optimizer"] = {"lr": st.lr, "weight_decay": st.weight_decay, "beta1": st.beta1,
                             "beta2": st.beta2, "eps": st.eps, "step": st.step}
        for i, (m, v) in enumerate(zip(st.m, st.v)):
            tensors[f"{_OPT_PREFIX}m.{i}"] = m
            tensors[f"{_OPT_PREFIX}v.{i}"] = v
    with open(path, "wb") as fh:
        fh.write(encode(tensors, meta))


def read_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        tensors, meta = decode(fh.read())
    if not isinstance(meta, dict):
        raise FormatError("checkpoint config blob must be a JSON object")
    return Checkpoint(tensors, meta.get("config"), meta.get("optimizer"),
                      {k: v for k, v in meta.items() if k not in ("config", "optimizer")})


def load_checkpoint(path, model=None, optimizer=None) -> Checkpoint:
    """Read ``path`` and, when given, load it into ``model`` and ``optimizer``."""
    ckpt = read_checkpoint(path)
    if model is not None:
        model.load_state_dict(ckpt.model_tensors())
    if optimizer is not None:
        if ckpt.optimizer is None:
            raise CompatibilityError("checkpoint holds no optimizer state")
        st = optimizer.state
        n = len(optimizer.params)
        m, v = [], []
        for i, p in enumerate(optimizer.params):
            try:
                mi, vi = ckpt.tensors[f"{_OPT_PREFIX}m.{i}"], ckpt.tensors[f"{_OPT_PREFIX}v.{i}"]
            except KeyError:
                if ckpt.optimizer.get("step", 0) == 0:
                    break
                raise CompatibilityError(f"optimizer moment {i} missing for {n} parameters") from None
            if mi.shape != p.shape or vi.shape != p.shape:
                raise CompatibilityError(f"optimizer moment {i} has shape {mi.shape}, expected {p.shape}")
            m.append(mi.astype(p.dtype))
            v.append(vi.astype(p.dtype))
        for key in ("lr", "weight_decay", "beta1", "beta2", "eps", "step"):
            setattr(st, key, ckpt.optimizer[key])
        st.m, st.v = m, v
    return ckpt


def model_from_checkpoint(path):
    """Build a MambaMOC from the stored config and load its weights."""
    from .model import MambaMOC, ModelConfig

    ckpt = read_checkpoint(path)
    if ckpt.config is None:
        raise CompatibilityError("checkpoint carries no model config")
    model = MambaMOC(ModelConfig.from_dict(ckpt.config), 0)
    model.load_state_dict(ckpt.model_tensors())
    return model, ckpt
