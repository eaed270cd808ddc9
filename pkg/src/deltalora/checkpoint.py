"""Binary checkpoint container.

Layout::

    u64 little-endian  N
    N bytes            UTF-8 JSON header, right-padded with spaces so that
                       8 + N is a multiple of 64
    payload            float64 little-endian tensors, row-major, back to back

The header is ``{"format_version": "1", "meta": {...}, "tensors": [...]}``
where each tensor entry is ``{"name", "rows", "cols", "offset"}`` and
``offset`` counts bytes from the start of the payload. Vectors are stored as
``1 x n``.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .fileio import atomic_write_bytes, dumps
from .optim import AdamWState, TrainConfig
from .trainer import TrainState, init_state

FORMAT_VERSION = "1"
ALIGN = 64


class CheckpointError(ValueError):
    pass


def encode(tensors: dict[str, np.ndarray], meta: dict) -> bytes:
    table = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        m = np.asarray(arr, dtype="<f8")
        m = m.reshape(1, -1) if m.ndim == 1 else m
        if m.ndim != 2:
            raise CheckpointError(f"tensor {name} must be 1-D or 2-D")
        table.append({"name": name, "rows": m.shape[0], "cols": m.shape[1], "offset": offset})
        raw = np.ascontiguousarray(m).tobytes()
        chunks.append(raw)
        offset += len(raw)
    header = dumps({"format_version": FORMAT_VERSION, "meta": meta, "tensors": table}).encode("utf-8")
    pad = (-(8 + len(header))) % ALIGN
    header += b" " * pad
    return struct.pack("<Q", len(header)) + header + b"".join(chunks)


def decode(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(data) < 8:
        raise CheckpointError("truncated checkpoint")
    (n,) = struct.unpack("<Q", data[:8])
    if 8 + n > len(data):
        raise CheckpointError("header length exceeds file size")
    header = json.loads(data[8 : 8 + n].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('format_version')!r}")
    payload = data[8 + n :]
    tensors = {}
    expected = 0
    for entry in header["tensors"]:
        rows, cols, off = entry["rows"], entry["cols"], entry["offset"]
        size = rows * cols * 8
        if off != expected or off + size > len(payload):
            raise CheckpointError(f"inconsistent offset for tensor {entry['name']}")
        flat = np.frombuffer(payload, dtype="<f8", count=rows * cols, offset=off)
        tensors[entry["name"]] = flat.reshape(rows, cols).astype(np.float64)
        expected = off + size
    if expected != len(payload):
        raise CheckpointError("payload length does not match tensor table")
    return tensors, header["meta"]


def save(path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    atomic_write_bytes(path, encode(tensors, meta))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        return decode(f.read())


def tensor_digest(path) -> str:
    """SHA-256 over the tensor table and payload; ignores the metadata block."""
    with open(path, "rb") as f:
        data = f.read()
    (n,) = struct.unpack("<Q", data[:8])
    header = json.loads(data[8 : 8 + n].decode("utf-8"))
    h = hashlib.sha256(dumps(header["tensors"]).encode("utf-8"))
    h.update(data[8 + n :])
    return h.hexdigest()


# -- training state ---------------------------------------------------------


def state_tensors(state: TrainState) -> dict[str, np.ndarray]:
    out = {}
    tensors = state.model.tensors()
    for name in sorted(tensors):
        out[f"model/{name}"] = tensors[name]
    for name in sorted(state.opt):
        out[f"opt/{name}/m"] = state.opt[name].m
        out[f"opt/{name}/v"] = state.opt[name].v
    return out


def save_state(path, state: TrainState, config_echo: dict) -> None:
    meta = {
        "step": state.t,
        "opt_steps": {n: s.t for n, s in sorted(state.opt.items())},
        "config": config_echo,
    }
    save(path, state_tensors(state), meta)


def restore_state(path, task, cfg: TrainConfig) -> TrainState:
    """Rebuild a training state for ``cfg`` and overwrite it from a checkpoint."""
    tensors, meta = load(path)
    state = init_state(task, cfg)
    live = state.model.tensors()
    expected = {f"model/{n}" for n in live} | {f"opt/{n}/{k}" for n in state.opt for k in "mv"}
    if set(tensors) != expected:
        missing = sorted(expected - set(tensors))
        extra = sorted(set(tensors) - expected)
        raise CheckpointError(f"checkpoint does not match config: missing {missing}, unexpected {extra}")
    for name, arr in live.items():
        arr[...] = tensors[f"model/{name}"].reshape(arr.shape)
    for name, st in state.opt.items():
        shape = st.m.shape
        state.opt[name] = AdamWState(
            tensors[f"opt/{name}/m"].reshape(shape),
            tensors[f"opt/{name}/v"].reshape(shape),
            int(meta["opt_steps"][name]),
            cfg.beta1, cfg.beta2, cfg.eps,
        )
    state.t = int(meta["step"])
    return state

