"""Self-describing binary checkpoints.

Layout (little-endian)::

    b"ASEG" | u32 version | u32 len + config text (utf-8) | u64 step | u32 count
    count x ( u32 len + name | u8 rank | rank x u64 extent | float32 payload )

Tensor names are parameter names, batch-norm buffer names, and
``adam.m.<param>`` / ``adam.v.<param>`` moments when optimizer state is saved.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import model_config_from_text, model_config_to_text
from .model import ModelConfig, ModelParams, buffer_shapes, parameter_shapes
from .training import AdamState

MAGIC = b"ASEG"
VERSION = 1
_ADAM_M = "adam.m."
_ADAM_V = "adam.v."


class CheckpointError(ValueError):
    """Malformed, truncated or inconsistent checkpoint."""


@dataclass
class Checkpoint:
    config: ModelConfig
    params: ModelParams
    adam: AdamState | None = None
    step: int = 0


def _encode_tensor(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def checkpoint_bytes(params: ModelParams, adam: AdamState | None = None, step: int = 0) -> bytes:
    params.validate()
    text = model_config_to_text(params.config).encode("utf-8")
    entries = [(n, t.data) for n, t in params.tensors.items()]
    entries += list(params.buffers.items())
    if adam is not None:
        for name in params.tensors:
            if name in adam.m:
                entries.append((_ADAM_M + name, adam.m[name]))
                entries.append((_ADAM_V + name, adam.v[name]))
    out = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(text)), text,
           struct.pack("<Q", step), struct.pack("<I", len(entries))]
    out += [_encode_tensor(n, a) for n, a in entries]
    return b"".join(out)


def save_checkpoint(params: ModelParams, path, adam: AdamState | None = None, step: int = 0) -> None:
    """Write atomically: the payload goes to a sibling temp file, then is renamed."""
    payload = checkpoint_bytes(params, adam, step)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(payload)
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc.strerror}") from exc


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint reading {what} at byte {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def parse_checkpoint(data: bytes, dtype="float32") -> Checkpoint:
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("bad magic: not an ASEG checkpoint")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (text_len,) = r.unpack("<I", "config length")
    try:
        config = model_config_from_text(r.take(text_len, "config").decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"invalid embedded config: {exc}") from None
    (step,) = r.unpack("<Q", "step counter")
    (count,) = r.unpack("<I", "tensor count")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<I", "name length")
        name = r.take(name_len, "name").decode("utf-8")
        (rank,) = r.unpack("<B", f"rank of {name}")
        shape = r.unpack(f"<{rank}Q", f"extents of {name}")
        n = int(np.prod(shape)) if rank else 1
        payload = r.take(4 * n, f"payload of {name}")
        if name in arrays:
            raise CheckpointError(f"duplicate tensor {name}")
        arrays[name] = np.frombuffer(payload, dtype="<f4").reshape(shape)
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after last tensor")

    p_shapes = parameter_shapes(config)
    b_shapes = buffer_shapes(config)
    expected = {**p_shapes, **b_shapes}
    for name, shape in expected.items():
        if name not in arrays:
            raise CheckpointError(f"missing tensor {name}")
        if arrays[name].shape != tuple(shape):
            raise CheckpointError(f"{name}: stored shape {arrays[name].shape}, config implies {tuple(shape)}")
    adam_names = [n for n in arrays if n not in expected]
    for name in adam_names:
        base = name[len(_ADAM_M):] if name.startswith((_ADAM_M, _ADAM_V)) else None
        if base not in p_shapes or arrays[name].shape != tuple(p_shapes[base]):
            raise CheckpointError(f"unexpected tensor {name}")

    dt = np.dtype(dtype)
    params = ModelParams(
        config,
        {n: _tensor(arrays[n], dt) for n in p_shapes},
        {n: arrays[n].astype(dt) for n in b_shapes},
    )
    adam = None
    if adam_names:
        adam = AdamState(t=step)
        for name in p_shapes:
            if _ADAM_M + name in arrays:
                adam.m[name] = arrays[_ADAM_M + name].astype(dt)
                adam.v[name] = arrays[_ADAM_V + name].astype(dt)
    return Checkpoint(config, params, adam, step)


def _tensor(arr: np.ndarray, dt: np.dtype):
    from .autodiff import Tensor

    return Tensor(arr.astype(dt), requires_grad=True)


def load_checkpoint(path, dtype="float32") -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    return parse_checkpoint(data, dtype)
