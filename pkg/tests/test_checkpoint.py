"""Checkpoint format checks: bitwise round trip, corruption rejection."""

import numpy as np
import pytest

from rpf import checkpoint, nn
from rpf.losses import PrototypeBank
from rpf.rng import substream


def make_state(seed=5):
    f = nn.init_mlp(6, (8, 4), seed, activation="tanh")
    h = nn.init_head(5, 4, seed)
    state = nn.ModelState(f=f, h=h, f0=nn.init_mlp(6, (8, 4), seed + 1,
                                                   activation="tanh").frozen_copy())
    state.set_probe_snapshot(nn.init_head(5, 4, seed + 2))
    rng = substream(seed, "bank")
    bank = PrototypeBank(rng.normal(size=(5, 4)),
                         rng.integers(1, 50, size=5).astype(np.int64))
    return state, bank


def test_round_trip_bitwise(tmp_path):
    state, bank = make_state()
    p = tmp_path / "model.rpfckpt"
    cfg = {"epochs": 3, "lr": 0.001}
    checkpoint.save_checkpoint(p, state, bank, cfg, seed=99)
    back, bank2, sidecar = checkpoint.load_checkpoint(p)

    assert back.f.checksum() == state.f.checksum()
    assert back.h.checksum() == state.h.checksum()
    assert back.f0.checksum() == state.f0.checksum()
    assert back.h_lp.checksum() == state.h_lp.checksum()
    assert bank2.checksum() == bank.checksum()
    np.testing.assert_array_equal(bank2.counts, bank.counts)
    assert back.f.activation == "tanh"
    assert sidecar["seed"] == 99
    assert sidecar["config_hash"] == checkpoint.config_hash(cfg)

    # frozen pieces come back frozen, live ones stay writable
    with pytest.raises(ValueError):
        back.f0.weights[0][0, 0] = 1.0
    back.f.weights[0][0, 0] += 1.0


def test_save_is_deterministic(tmp_path):
    state, bank = make_state()
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    checkpoint.save_checkpoint(a, state, bank, {"x": 1}, seed=1)
    checkpoint.save_checkpoint(b, state, bank, {"x": 1}, seed=1)
    assert a.read_bytes() == b.read_bytes()
    assert (a.with_suffix(".ckpt.json").read_bytes() ==
            b.with_suffix(".ckpt.json").read_bytes())


def test_optional_pieces_absent(tmp_path):
    state, _ = make_state()
    state.h_lp = None
    p = tmp_path / "bare.rpfckpt"
    checkpoint.save_checkpoint(p, state, None, {}, seed=0)
    back, bank, _ = checkpoint.load_checkpoint(p)
    assert back.h_lp is None and bank is None


def test_bad_magic_rejected(tmp_path):
    p = tmp_path / "junk.rpfckpt"
    p.write_bytes(b"NOTANCKPT" + b"\x00" * 32)
    with pytest.raises(checkpoint.CheckpointFormatError, match="magic"):
        checkpoint.load_checkpoint(p)


def test_bad_version_rejected(tmp_path):
    state, bank = make_state()
    p = tmp_path / "model.rpfckpt"
    checkpoint.save_checkpoint(p, state, bank, {}, seed=0)
    blob = bytearray(p.read_bytes())
    blob[len(checkpoint.MAGIC)] = 250  # bump version field
    p.write_bytes(bytes(blob))
    with pytest.raises(checkpoint.CheckpointFormatError, match="version"):
        checkpoint.load_checkpoint(p)


def test_truncation_rejected(tmp_path):
    state, bank = make_state()
    p = tmp_path / "model.rpfckpt"
    checkpoint.save_checkpoint(p, state, bank, {}, seed=0)
    p.write_bytes(p.read_bytes()[:-16])
    with pytest.raises(checkpoint.CheckpointFormatError, match="truncated"):
        checkpoint.load_checkpoint(p)


def test_trailing_garbage_rejected(tmp_path):
    state, bank = make_state()
    p = tmp_path / "model.rpfckpt"
    checkpoint.save_checkpoint(p, state, bank, {}, seed=0)
    p.write_bytes(p.read_bytes() + b"extra")
    with pytest.raises(checkpoint.CheckpointFormatError, match="trailing"):
        checkpoint.load_checkpoint(p)
