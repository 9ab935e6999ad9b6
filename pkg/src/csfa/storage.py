"""Versioned little-endian binary container for a prototype bank, the extractor
that produced it and (optionally) the linear head used by the fine-tune variant.

Layout (all integers unsigned little-endian unless noted)::

    magic  b"CSFA"          version u16
    bank   d u32, n u32, tau f64, alpha f64,
           n x (id i64, origin u8, d x f64)
    model  flag u8; if 1: layers u32, layers x (kind u8, in u32, out u32), size u64, size x f64
    head   flag u8; if 1: rows u32, d u32, rows x id i64, rows*d x f64 weight, rows x f64 bias
"""
from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .errors import ArgumentError
from .numerics import LAYER_KINDS, LayerSpec, ModelParams
from .prototypes import BASE, NOVEL, RAW_NOVEL, PrototypeBank
from .training import LinearHead

MAGIC = b"CSFA"
VERSION = 1
_ORIGINS = (BASE, NOVEL, RAW_NOVEL)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise ArgumentError("model file is truncated")
        out = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return out if len(out) > 1 else out[0]

    def floats(self, count: int) -> np.ndarray:
        size = 8 * count
        if self.pos + size > len(self.data):
            raise ArgumentError("model file is truncated")
        arr = np.frombuffer(self.data, dtype="<f8", count=count, offset=self.pos).astype(np.float64)
        self.pos += size
        return arr


def _f8(arr) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def encode(bank: PrototypeBank, params: ModelParams | None = None, head: LinearHead | None = None) -> bytes:
    parts = [MAGIC, struct.pack("<H", VERSION),
             struct.pack("<IIdd", bank.dim, len(bank), bank.tau, bank.alpha)]
    for cid, origin in zip(bank.class_ids, bank.origins):
        parts += [struct.pack("<qB", cid, _ORIGINS.index(origin)), _f8(bank.vector(cid))]
    if params is None:
        parts.append(b"\x00")
    else:
        parts.append(b"\x01" + struct.pack("<I", len(params.layers)))
        for layer in params.layers:
            parts.append(struct.pack("<BII", LAYER_KINDS.index(layer.kind), layer.in_dim, layer.out_dim))
        parts += [struct.pack("<Q", params.size), _f8(params.theta)]
    if head is None:
        parts.append(b"\x00")
    else:
        rows, d = head.weight.shape
        parts += [b"\x01", struct.pack("<II", rows, d), np.asarray(head.class_ids, dtype="<i8").tobytes(),
                  _f8(head.weight), _f8(head.bias)]
    return b"".join(parts)


def decode(data: bytes):
    """Inverse of :func:`encode`; returns ``(bank, params or None, head or None)``."""
    if data[:4] != MAGIC:
        raise ArgumentError("not a model file (bad magic bytes)")
    r = _Reader(data)
    r.pos = 4
    version = r.take("<H")
    if version != VERSION:
        raise ArgumentError(f"unsupported model file version {version}")
    d, n, tau, alpha = r.take("<IIdd")
    bank = PrototypeBank(d, tau, alpha)
    for _ in range(n):
        cid, code = r.take("<qB")
        if code >= len(_ORIGINS):
            raise ArgumentError(f"unknown origin code {code}")
        bank.add(cid, r.floats(d), _ORIGINS[code])
    params = head = None
    if r.take("<B"):
        layers = []
        for _ in range(r.take("<I")):
            code, i, o = r.take("<BII")
            if code >= len(LAYER_KINDS):
                raise ArgumentError(f"unknown layer code {code}")
            layers.append(LayerSpec(LAYER_KINDS[code], i, o))
        params = ModelParams(r.floats(r.take("<Q")), tuple(layers))
    if r.take("<B"):
        rows, dh = r.take("<II")
        ids = np.frombuffer(r.data, dtype="<i8", count=rows, offset=r.pos).astype(np.int64)
        r.pos += 8 * rows
        head = LinearHead(r.floats(rows * dh).reshape(rows, dh), r.floats(rows), ids)
    if r.pos != len(data):
        raise ArgumentError("trailing bytes after model payload")
    return bank, params, head


def save_model(path, bank: PrototypeBank, params: ModelParams | None = None, head: LinearHead | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(bank, params, head))
    os.replace(tmp, path)
    return path


def load_model(path):
    return decode(Path(path).read_bytes())
