"""Versioned binary checkpoint for a trained model.

Layout: magic "RPFCKPT", format version (u32 LE), a u32 flags word
(bit 0: probed head present, bit 1: prototype bank present), then the
shape table and row-major little-endian float64 blocks for the live
extractor, live head, frozen extractor, probed head, and prototype bank.
A JSON sidecar carries the config hash and seed. Loading an unknown
magic or version fails loudly rather than guessing.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from . import nn
from .losses import PrototypeBank

MAGIC = b"RPFCKPT"
VERSION = 1

_FLAG_HLP = 1
_FLAG_BANK = 2


class CheckpointFormatError(ValueError):
    """File is not a readable checkpoint of a supported version."""


def config_hash(config: dict) -> str:
    return hashlib.sha256(
        json.dumps(config, sort_keys=True).encode("utf-8")).hexdigest()


def _pack_u32(*vals: int) -> bytes:
    return struct.pack("<" + "I" * len(vals), *vals)


def _write_mlp(out: list[bytes], p: nn.MlpParams) -> None:
    out.append(_pack_u32(len(p.weights)))
    for w in p.weights:
        out.append(_pack_u32(w.shape[0], w.shape[1]))
    act = p.activation.encode("ascii")
    out.append(_pack_u32(len(act)))
    out.append(act)
    for w, b in zip(p.weights, p.biases):
        out.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        out.append(np.ascontiguousarray(b, dtype="<f8").tobytes())


def _write_head(out: list[bytes], h: nn.HeadParams) -> None:
    out.append(_pack_u32(h.weight.shape[0], h.weight.shape[1]))
    out.append(np.ascontiguousarray(h.weight, dtype="<f8").tobytes())
    out.append(np.ascontiguousarray(h.bias, dtype="<f8").tobytes())


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointFormatError("checkpoint truncated")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, count: int = 1):
        vals = struct.unpack("<" + "I" * count, self.take(4 * count))
        return vals[0] if count == 1 else vals

    def f64_block(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        arr = np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64)
        return arr.reshape(shape)


def _read_mlp(r: _Reader) -> nn.MlpParams:
    n_layers = r.u32()
    if n_layers == 0 or n_layers > 64:
        raise CheckpointFormatError(f"implausible layer count {n_layers}")
    shapes = [r.u32(2) for _ in range(n_layers)]
    act = r.take(r.u32()).decode("ascii")
    weights, biases = [], []
    for out_dim, in_dim in shapes:
        weights.append(r.f64_block((out_dim, in_dim)))
        biases.append(r.f64_block((out_dim,)))
    return nn.MlpParams(weights, biases, act)


def _read_head(r: _Reader) -> nn.HeadParams:
    c, d = r.u32(2)
    return nn.HeadParams(r.f64_block((c, d)), r.f64_block((c,)))


def save_checkpoint(path: Path, state: nn.ModelState,
                    bank: PrototypeBank | None, config: dict,
                    seed: int) -> None:
    flags = 0
    if state.h_lp is not None:
        flags |= _FLAG_HLP
    if bank is not None:
        flags |= _FLAG_BANK
    out: list[bytes] = [MAGIC, _pack_u32(VERSION), _pack_u32(flags)]
    _write_mlp(out, state.f)
    _write_head(out, state.h)
    _write_mlp(out, state.f0)
    if state.h_lp is not None:
        _write_head(out, state.h_lp)
    if bank is not None:
        out.append(_pack_u32(bank.P.shape[0], bank.P.shape[1]))
        out.append(np.ascontiguousarray(bank.P, dtype="<f8").tobytes())
        out.append(np.ascontiguousarray(bank.counts,
                                        dtype="<i8").tobytes())
    path = Path(path)
    path.write_bytes(b"".join(out))
    sidecar = {"config_hash": config_hash(config), "seed": seed,
               "version": VERSION}
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path: Path):
    """Returns (state, bank, sidecar dict). Frozen pieces come back
    read-only."""
    path = Path(path)
    blob = path.read_bytes()
    r = _Reader(blob)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointFormatError("bad magic: not a checkpoint file")
    version = r.u32()
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    flags = r.u32()
    f = _read_mlp(r)
    h = _read_head(r)
    f0 = _read_mlp(r).frozen_copy()
    state = nn.ModelState(f=f, h=h, f0=f0)
    if flags & _FLAG_HLP:
        state.h_lp = _read_head(r).frozen_copy()
    bank = None
    if flags & _FLAG_BANK:
        c, d = r.u32(2)
        p = r.f64_block((c, d))
        counts = np.frombuffer(r.take(8 * c), dtype="<i8").astype(np.int64)
        bank = PrototypeBank(p, counts)
    if r.pos != len(blob):
        raise CheckpointFormatError("trailing bytes after checkpoint payload")
    sidecar_path = path.with_suffix(path.suffix + ".json")
    sidecar = (json.loads(sidecar_path.read_text())
               if sidecar_path.exists() else {})
    return state, bank, sidecar
