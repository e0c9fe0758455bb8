"""Versioned binary checkpoints: model config + architecture document + named tensors.

Layout (all integers little-endian)::

    b"SKCK" | u32 version | u32 header_len | header (UTF-8 JSON) | u32 n_tensors
    per tensor: u16 name_len | name | u8 dtype tag | u8 ndim | u32 dims[ndim] | payload

The JSON header carries the model config and, for distilled models, the
architecture document text, which together determine the parameter shapes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .archspec import ArchitectureSpec
from .blocks import Model, UNetSpec, build_model, distill_model
from .tensor import Rng

MAGIC = b"SKCK"
VERSION = 1
DTYPES = {1: np.dtype("<f8"), 2: np.dtype("<f4")}
DTYPE_TAGS = {v: k for k, v in DTYPES.items()}


class CheckpointFormatError(ValueError):
    pass


def dumps(model: Model, arch: ArchitectureSpec | None = None, extra: dict | None = None) -> bytes:
    header = {"model": model.config(), "arch": arch.dumps() if arch is not None else None,
              "extra": extra or {}}
    hb = json.dumps(header, sort_keys=True).encode()
    out = [MAGIC, struct.pack("<II", VERSION, len(hb)), hb]
    params = list(model.named_parameters())
    out.append(struct.pack("<I", len(params)))
    for name, p in params:
        nb = name.encode()
        arr = p.data.astype("<f8", order="C")  # keeps 0-d shapes, unlike ascontiguousarray
        out.append(struct.pack("<H", len(nb)) + nb)
        out.append(struct.pack("<BB", DTYPE_TAGS[arr.dtype], arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointFormatError("truncated checkpoint")
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def parse(buf: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise CheckpointFormatError("bad checkpoint magic")
    version, hlen = r.unpack("<II")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    header = json.loads(r.take(hlen).decode())
    (n,) = r.unpack("<I")
    tensors = {}
    for _ in range(n):
        (nl,) = r.unpack("<H")
        name = r.take(nl).decode()
        tag, ndim = r.unpack("<BB")
        if tag not in DTYPES:
            raise CheckpointFormatError(f"unknown dtype tag {tag} for {name}")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        dt = DTYPES[tag]
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(r.take(count * dt.itemsize), dtype=dt).reshape(shape)
        tensors[name] = arr.astype(np.float64)
    if r.pos != len(buf):
        raise CheckpointFormatError("trailing bytes after checkpoint payload")
    return header, tensors


def loads(buf: bytes) -> tuple[Model, ArchitectureSpec | None, dict]:
    header, tensors = parse(buf)
    cfg = header["model"]
    spec = UNetSpec(**cfg["spec"])
    model = build_model(spec, cfg["variant"], Rng(0), **cfg["sk_options"])
    arch = ArchitectureSpec.loads(header["arch"]) if header.get("arch") else None
    if cfg.get("distilled"):
        model, arch = distill_model(model, arch)
    model.load_state_dict(tensors)
    return model, arch, header.get("extra", {})


def save(path, model: Model, arch: ArchitectureSpec | None = None, extra: dict | None = None) -> None:
    Path(path).write_bytes(dumps(model, arch, extra))


def load(path) -> tuple[Model, ArchitectureSpec | None, dict]:
    return loads(Path(path).read_bytes())
