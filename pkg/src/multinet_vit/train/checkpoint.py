"""Binary checkpoint format.

Layout::

    8 bytes   magic  b"MNVITCK\\0"
    u32 LE    format version
    u64 LE    header length in bytes
    ...       UTF-8 JSON header (sorted keys)
    ...       payload: raw little-endian IEEE-754 arrays, back to back

The header lists every tensor with its name, shape, dtype and byte offset
into the payload.  Optimizer moments are stored as ordinary tensors named
``optim.m.<param>`` / ``optim.v.<param>``.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..tensor import ShapeError

MAGIC = b"MNVITCK\x00"
FORMAT_VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8"}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: "OrderedDict[str, np.ndarray]"
    model: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    optimizer_step: int | None = None
    extra: dict = field(default_factory=dict)

    def params(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v) for k, v in self.tensors.items() if not k.startswith("optim."))

    def optimizer_state(self) -> dict | None:
        if self.optimizer_step is None:
            return None
        m = OrderedDict((k[len("optim.m."):], v) for k, v in self.tensors.items() if k.startswith("optim.m."))
        v = OrderedDict((k[len("optim.v."):], a) for k, a in self.tensors.items() if k.startswith("optim.v."))
        return {"t": self.optimizer_step, "m": m, "v": v}


def encode(ckpt: Checkpoint) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, array in ckpt.tensors.items():
        dtype = np.dtype(array.dtype).name
        if dtype not in _DTYPES:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {dtype}")
        raw = np.ascontiguousarray(array, dtype=_DTYPES[dtype]).tobytes()
        entries.append({"name": name, "shape": list(array.shape), "dtype": dtype, "offset": offset,
                        "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "model": ckpt.model,
        "config": ckpt.config,
        "optimizer_step": ckpt.optimizer_step,
        "extra": ckpt.extra,
        "tensors": entries,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", FORMAT_VERSION) + struct.pack("<Q", len(blob)) + blob + b"".join(chunks)


def decode(data: bytes) -> Checkpoint:
    if len(data) < 20 or data[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", data[8:12])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    (hlen,) = struct.unpack("<Q", data[12:20])
    header = json.loads(data[20:20 + hlen].decode("utf-8"))
    payload = memoryview(data)[20 + hlen:]
    tensors = OrderedDict()
    end = 0
    for e in header["tensors"]:
        name = e["name"]
        if name in tensors:
            raise CheckpointError(f"tensor {name!r} listed twice")
        if e["offset"] < end:
            raise CheckpointError(f"tensor {name!r} overlaps the previous tensor")
        end = e["offset"] + e["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"tensor {name!r} runs past the end of the payload")
        array = np.frombuffer(payload[e["offset"]:end], dtype=_DTYPES[e["dtype"]])
        tensors[name] = array.reshape(e["shape"]).astype(e["dtype"])
    return Checkpoint(tensors, header.get("model", {}), header.get("config", {}), header.get("optimizer_step"),
                      header.get("extra", {}))


def save_checkpoint(path, model, optimizer=None, config: dict | None = None, extra: dict | None = None) -> Path:
    tensors = OrderedDict(model.state_dict())
    step = None
    if optimizer is not None:
        state = optimizer.state_dict()
        step = state["t"]
        for name, array in state["m"].items():
            tensors["optim.m." + name] = array
        for name, array in state["v"].items():
            tensors["optim.v." + name] = array
    spec = getattr(model, "spec", None)
    ckpt = Checkpoint(tensors, spec.to_dict() if spec is not None else {}, config or {}, step, extra or {})
    path = Path(path)
    path.write_bytes(encode(ckpt))
    return path


def read_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode(data)


def load_checkpoint(path, model=None, optimizer=None, prefix: str | None = None, strict: bool = True):
    """Read a checkpoint and, when ``model`` is given, copy its parameters in.

    ``prefix`` restricts loading to tensors whose names start with it (for
    example ``"branch_b.vgg."``) and implies non-strict loading; everything
    else keeps its current values.  Returns the :class:`Checkpoint`, with the
    names actually loaded in ``extra["loaded"]``.
    """
    ckpt = read_checkpoint(path)
    if model is None:
        return ckpt
    params = ckpt.params()
    if prefix is not None:
        params = OrderedDict((k, v) for k, v in params.items() if k.startswith(prefix))
        strict = False
    model_params = dict(model.named_parameters())
    mismatched = [f"{name} {tuple(array.shape)} vs {model_params[name].shape}" for name, array in params.items()
                  if name in model_params and tuple(array.shape) != model_params[name].shape]
    missing = sorted(set(model_params) - set(params)) if strict else []
    unexpected = sorted(set(params) - set(model_params)) if strict else []
    problems = []
    for label, names in (("shape mismatch", mismatched), ("missing", missing), ("unexpected", unexpected)):
        if names:
            more = f" (+{len(names) - 5} more)" if len(names) > 5 else ""
            problems.append(f"{label}: {', '.join(names[:5])}{more}")
    if mismatched:
        raise ShapeError("checkpoint does not fit the model; " + "; ".join(problems))
    if problems:
        raise CheckpointError("architecture mismatch; " + "; ".join(problems))
    loaded = model.load_state_dict(params, strict=False)
    if optimizer is not None and ckpt.optimizer_state() is not None:
        optimizer.load_state_dict(ckpt.optimizer_state())
    ckpt.extra = {**ckpt.extra, "loaded": loaded}
    return ckpt
