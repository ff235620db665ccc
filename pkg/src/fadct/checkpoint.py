"""Binary checkpoint format: named tensors plus a config snapshot.

Layout (all integers little-endian):

    magic   4 bytes  b"FADC"
    version u32      format version (currently 1)
    config  u32 length + UTF-8 text (flat key = value lines)
    count   u32      number of named tensors
    per tensor:
        name    u32 length + UTF-8
        dtype   u8   0 = float64, 1 = float32
        rank    u32
        extents u32 * rank
        data    raw little-endian values, row-major

float64 checkpoints round-trip bit-exactly; float32 is an opt-in compact
encoding and loses precision on save.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"FADC"
VERSION = 1
_DTYPES = {0: "<f8", 1: "<f4"}
_TAGS = {"f64": 0, "f32": 1}


class FormatError(ValueError):
    """Corrupt or incompatible checkpoint file."""


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf = buf
        self.path = path
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.path}: truncated {what} at byte offset {self.pos} "
                              f"(wanted {n} bytes, file has {len(self.buf) - self.pos})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]


def save_checkpoint(path, tensors: dict[str, np.ndarray], config_text: str,
                    dtype: str = "f64") -> None:
    if dtype not in _TAGS:
        raise FormatError(f"unsupported checkpoint dtype {dtype!r}")
    tag = _TAGS[dtype]
    np_dtype = _DTYPES[tag]
    parts = [MAGIC, struct.pack("<I", VERSION)]
    cfg = config_text.encode("utf-8")
    parts.append(struct.pack("<I", len(cfg)))
    parts.append(cfg)
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", tag))
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=np_dtype).tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[str, dict[str, np.ndarray]]:
    """Returns (config text, name -> float64 array)."""
    r = _Reader(Path(path).read_bytes(), path)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte offset 0 "
                          f"(expected {MAGIC!r})")
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"{path}: format version {version} is not supported "
                          f"(this build reads version {VERSION})")
    cfg_len = r.u32("config length")
    config_text = r.take(cfg_len, "config").decode("utf-8")
    count = r.u32("tensor count")
    tensors: dict[str, np.ndarray] = {}
    for i in range(count):
        name_len = r.u32(f"tensor {i} name length")
        name = r.take(name_len, f"tensor {i} name").decode("utf-8")
        tag = r.u8(f"tensor {name!r} dtype")
        if tag not in _DTYPES:
            raise FormatError(f"{path}: unknown dtype tag {tag} for tensor {name!r} "
                              f"at byte offset {r.pos - 1}")
        rank = r.u32(f"tensor {name!r} rank")
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank, f"tensor {name!r} extents"))
        itemsize = 8 if tag == 0 else 4
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        raw = r.take(n * itemsize, f"tensor {name!r} data")
        arr = np.frombuffer(raw, dtype=_DTYPES[tag]).reshape(shape)
        tensors[name] = arr.astype(np.float64)
    if r.pos != len(r.buf):
        raise FormatError(f"{path}: {len(r.buf) - r.pos} trailing bytes at offset {r.pos}")
    return config_text, tensors
