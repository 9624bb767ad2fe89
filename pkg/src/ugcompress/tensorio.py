"""Binary container shared by checkpoints and compressed caches.

Layout (all integers little-endian)::

    magic line            b"UGCKPT1\\n" or b"UGCACHE1\\n"
    u32 header length     followed by UTF-8 ``key=value`` lines
    u32 tensor count
    per tensor:
        u16 name length, UTF-8 name
        u8 dtype code (0 = f32, 1 = f64, 2 = i64)
        u8 trainable flag
        u8 rank, rank x u32 extents
        raw little-endian values, row-major
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO

import numpy as np
import torch

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {torch.float32: 0, torch.float64: 1, torch.int64: 2}
_TORCH = {0: torch.float32, 1: torch.float64, 2: torch.int64}


class FormatError(ValueError):
    pass


@dataclass
class StoredTensor:
    name: str
    tensor: torch.Tensor
    trainable: bool = False


def dumps(magic: str, header: dict[str, str], tensors: list[StoredTensor]) -> bytes:
    buf = io.BytesIO()
    buf.write(magic.encode() + b"\n")
    head = "".join(f"{k}={v}\n" for k, v in header.items()).encode()
    buf.write(struct.pack("<I", len(head)))
    buf.write(head)
    buf.write(struct.pack("<I", len(tensors)))
    for st in tensors:
        t = st.tensor.detach().cpu().contiguous()
        if t.dtype not in _CODES:
            raise FormatError(f"unsupported dtype {t.dtype} for {st.name}")
        code = _CODES[t.dtype]
        name = st.name.encode()
        buf.write(struct.pack("<H", len(name)))
        buf.write(name)
        buf.write(struct.pack("<BBB", code, int(st.trainable), t.dim()))
        buf.write(struct.pack(f"<{t.dim()}I", *t.shape))
        buf.write(t.numpy().astype(_DTYPES[code], copy=False).tobytes())
    return buf.getvalue()


def loads(data: bytes, magic: str) -> tuple[dict[str, str], list[StoredTensor]]:
    f = io.BytesIO(data)
    line = f.readline()
    if line != magic.encode() + b"\n":
        raise FormatError(f"bad magic {line[:16]!r}, expected {magic!r}")
    try:
        (hlen,) = struct.unpack("<I", f.read(4))
        header = {}
        for ln in f.read(hlen).decode().splitlines():
            key, _, value = ln.partition("=")
            header[key] = value
        (count,) = struct.unpack("<I", f.read(4))
        tensors = []
        for _ in range(count):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode()
            code, trainable, rank = struct.unpack("<BBB", f.read(3))
            shape = struct.unpack(f"<{rank}I", f.read(4 * rank))
            dt = _DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            raw = f.read(nbytes)
            if len(raw) != nbytes:
                raise FormatError(f"truncated data for tensor {name}")
            arr = np.frombuffer(raw, dtype=dt).reshape(shape).copy()
            tensors.append(StoredTensor(name, torch.from_numpy(arr).to(_TORCH[code]), bool(trainable)))
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise FormatError(f"corrupt container: {exc}") from exc
    if f.read(1):
        raise FormatError("trailing bytes after last tensor")
    return header, tensors


def save(path: str | Path | BinaryIO, magic: str, header: dict[str, str], tensors: list[StoredTensor]) -> None:
    data = dumps(magic, header, tensors)
    if hasattr(path, "write"):
        path.write(data)
    else:
        Path(path).write_bytes(data)


def load(path: str | Path, magic: str) -> tuple[dict[str, str], list[StoredTensor]]:
    return loads(Path(path).read_bytes(), magic)
