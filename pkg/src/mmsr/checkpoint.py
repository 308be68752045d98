"""Binary checkpoint persistence.

Layout (all integers little-endian, see docs/formats.md):

    magic "MMHC" | u32 version | u32 json_len | spec JSON (utf-8)
    | u64 step | u32 n_params | n_params * record | u32 n_opt | n_opt * record

where record = u32 name_len | name utf-8 | u32 ndim | ndim * u32 dims
| float32 little-endian payload.  Parameters are always stored as float32, so
a save/load round trip of float32 training state is bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .layers import ParamSet
from .autodiff import Tensor
from .networks import ModelSpec

__all__ = [
    "CheckpointError",
    "CorruptCheckpointError",
    "UnsupportedVersionError",
    "Checkpoint",
    "save_checkpoint",
    "load_checkpoint",
]

MAGIC = b"MMHC"
VERSION = 1


class CheckpointError(Exception):
    """Base class for checkpoint persistence failures."""


class CorruptCheckpointError(CheckpointError):
    """Bad magic, truncated file, or inconsistent record lengths."""


class UnsupportedVersionError(CheckpointError):
    """Format version this build does not understand."""


@dataclass
class Checkpoint:
    spec: ModelSpec
    params: dict[str, np.ndarray]
    step: int = 0
    optimizer_state: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_paramset(cls, spec: ModelSpec, params: ParamSet, step: int = 0,
                      optimizer_state: dict | None = None) -> "Checkpoint":
        return cls(
            spec=spec,
            params={name: t.data for name, t in params.items()},
            step=step,
            optimizer_state=dict(optimizer_state or {}),
        )

    def to_paramset(self, dtype=np.float32) -> ParamSet:
        ps = ParamSet()
        for name in sorted(self.params):
            ps.add(name, Tensor(self.params[name].astype(dtype), requires_grad=True))
        return ps


def _write_record(chunks: list[bytes], name: str, arr: np.ndarray) -> None:
    nb = name.encode("utf-8")
    chunks.append(struct.pack("<I", len(nb)))
    chunks.append(nb)
    chunks.append(struct.pack("<I", arr.ndim))
    chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    spec_json = json.dumps(ckpt.spec.to_dict()).encode("utf-8")
    chunks: list[bytes] = [MAGIC, struct.pack("<I", VERSION)]
    chunks.append(struct.pack("<I", len(spec_json)))
    chunks.append(spec_json)
    chunks.append(struct.pack("<Q", ckpt.step))
    chunks.append(struct.pack("<I", len(ckpt.params)))
    for name in sorted(ckpt.params):
        _write_record(chunks, name, ckpt.params[name])
    chunks.append(struct.pack("<I", len(ckpt.optimizer_state)))
    for name in sorted(ckpt.optimizer_state):
        _write_record(chunks, name, ckpt.optimizer_state[name])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes, label: str):
        self.buf = buf
        self.pos = 0
        self.label = label

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptCheckpointError(f"corrupt checkpoint {self.label}: truncated")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def record(self) -> tuple[str, np.ndarray]:
        name = self.take(self.u32()).decode("utf-8")
        ndim = self.u32()
        if ndim > 8:
            raise CorruptCheckpointError(
                f"corrupt checkpoint {self.label}: implausible rank {ndim}"
            )
        shape = struct.unpack(f"<{ndim}I", self.take(4 * ndim))
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        arr = np.frombuffer(self.take(4 * count), dtype="<f4").reshape(shape)
        return name, arr.copy()


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    r = _Reader(path.read_bytes(), str(path))
    if r.take(4) != MAGIC:
        raise CorruptCheckpointError(f"corrupt checkpoint {path}: bad magic")
    version = r.u32()
    if version != VERSION:
        raise UnsupportedVersionError(
            f"unsupported checkpoint version {version} in {path} (expected {VERSION})"
        )
    try:
        spec = ModelSpec.from_dict(json.loads(r.take(r.u32()).decode("utf-8")))
    except (ValueError, KeyError) as e:
        raise CorruptCheckpointError(f"corrupt checkpoint {path}: bad spec block ({e})") from e
    step = r.u64()
    params = dict(r.record() for _ in range(r.u32()))
    opt = dict(r.record() for _ in range(r.u32()))
    if r.pos != len(r.buf):
        raise CorruptCheckpointError(f"corrupt checkpoint {path}: {len(r.buf) - r.pos} trailing bytes")
    return Checkpoint(spec=spec, params=params, step=step, optimizer_state=opt)
