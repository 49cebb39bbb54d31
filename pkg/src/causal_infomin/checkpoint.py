"""Checkpoint container and its on-disk format.

File layout (all integers little-endian)::

    b"CIMCKPT\\0"                      8-byte magic
    uint32 format_version
    uint64 header_length
    header                             canonical JSON: kind, config, metrics,
                                       and an ordered tensor table
                                       [name, dtype, shape, offset, nbytes]
    payload                            raw tensor bytes, in table order
    32-byte SHA-256 of everything above

Header JSON is written with sorted keys and fixed separators, and floats are
emitted with 17 significant digits, so save -> load -> save reproduces the
same bytes.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import CorruptFileError, UnsupportedVersionError

CHECKPOINT_VERSION = 1
MAGIC = b"CIMCKPT\0"


def format_float(x: float) -> str:
    if math.isnan(x) or math.isinf(x):
        return json.dumps(x)
    return format(x, ".17g")


def canonical_json(obj) -> str:
    """JSON with sorted keys and 17-significant-digit floats."""

    def enc(o):
        if isinstance(o, bool) or o is None:
            return json.dumps(o)
        if isinstance(o, (int, np.integer)):
            return str(int(o))
        if isinstance(o, (float, np.floating)):
            s = format_float(float(o))
            return s
        if isinstance(o, str):
            return json.dumps(o)
        if isinstance(o, dict):
            return "{" + ",".join(f"{json.dumps(str(k))}:{enc(v)}" for k, v in sorted(o.items(), key=lambda kv: str(kv[0]))) + "}"
        if isinstance(o, (list, tuple)):
            return "[" + ",".join(enc(v) for v in o) + "]"
        if isinstance(o, np.ndarray):
            return enc(o.tolist())
        raise TypeError(f"cannot serialize {type(o).__name__}")

    return enc(obj)


@dataclass
class ModelCheckpoint:
    kind: str
    arrays: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    config: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    @classmethod
    def from_modules(cls, kind: str, modules: dict[str, torch.nn.Module], config=None, metrics=None):
        arrays = OrderedDict()
        for prefix, module in modules.items():
            for name, tensor in module.state_dict().items():
                arrays[f"{prefix}.{name}"] = tensor.detach().cpu().numpy().copy()
        return cls(kind, arrays, dict(config or {}), dict(metrics or {}))

    def load_into(self, prefix: str, module: torch.nn.Module) -> None:
        state = OrderedDict(
            (name[len(prefix) + 1:], torch.from_numpy(arr.copy()))
            for name, arr in self.arrays.items()
            if name.startswith(prefix + ".")
        )
        module.load_state_dict(state)

    def to_bytes(self) -> bytes:
        table, offset, chunks = [], 0, []
        for name, arr in self.arrays.items():
            a = np.ascontiguousarray(arr)
            dt = a.dtype.newbyteorder("<") if a.dtype.byteorder == ">" else a.dtype
            raw = a.astype(dt, copy=False).tobytes()
            table.append([name, dt.str, list(a.shape), offset, len(raw)])
            chunks.append(raw)
            offset += len(raw)
        header = canonical_json({"kind": self.kind, "config": self.config, "metrics": self.metrics, "tensors": table})
        hb = header.encode("utf-8")
        body = MAGIC + struct.pack("<IQ", self.version, len(hb)) + hb + b"".join(chunks)
        return body + hashlib.sha256(body).digest()

    @classmethod
    def from_bytes(cls, data: bytes) -> "ModelCheckpoint":
        if len(data) < len(MAGIC) + 12 + 32 or not data.startswith(MAGIC):
            raise CorruptFileError("not a checkpoint file or truncated header")
        version, hlen = struct.unpack_from("<IQ", data, len(MAGIC))
        if version != CHECKPOINT_VERSION:
            raise UnsupportedVersionError(f"checkpoint format version {version} not supported (expected {CHECKPOINT_VERSION})")
        body, digest = data[:-32], data[-32:]
        if hashlib.sha256(body).digest() != digest:
            raise CorruptFileError("checkpoint checksum mismatch (truncated or corrupted file)")
        start = len(MAGIC) + 12
        try:
            header = json.loads(body[start:start + hlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CorruptFileError(f"unreadable checkpoint header: {exc}") from exc
        payload = body[start + hlen:]
        arrays = OrderedDict()
        for name, dt, shape, off, nbytes in header["tensors"]:
            if off + nbytes > len(payload):
                raise CorruptFileError(f"tensor {name} extends past end of file")
            arrays[name] = np.frombuffer(payload[off:off + nbytes], dtype=np.dtype(dt)).reshape(shape).copy()
        return cls(header["kind"], arrays, header["config"], header["metrics"], version)

    def equals(self, other: "ModelCheckpoint") -> bool:
        return self.to_bytes() == other.to_bytes()


def save_checkpoint(ckpt: ModelCheckpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(ckpt.to_bytes())
    return path


def load_checkpoint(path) -> ModelCheckpoint:
    return ModelCheckpoint.from_bytes(Path(path).read_bytes())
