import struct

import numpy as np
import pytest

from csmamba import checkpoint as CK
from csmamba.checkpoint import (BadMagicError, CheckpointError, TruncatedError,
                                VersionMismatchError, checkpoint_load, checkpoint_save)
from csmamba.model import ModelConfig, build_model
from csmamba.params import iter_named

CFG = ModelConfig(channels=8, state_dim=4, blocks_per_group=1, groups=2, cib_reduction=4)


def test_save_load_save_byte_identical(tmp_path):
    state = build_model(CFG, seed=5)
    checkpoint_save(state, CFG, tmp_path / "a.ckpt")
    loaded, cfg = checkpoint_load(tmp_path / "a.ckpt")
    assert cfg == CFG
    checkpoint_save(loaded, cfg, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_loaded_tensors_equal_originals(tmp_path):
    state = build_model(CFG, seed=6)
    checkpoint_save(state, CFG, tmp_path / "a.ckpt")
    loaded, _ = checkpoint_load(tmp_path / "a.ckpt")
    for (na, a), (nb, b) in zip(iter_named(state), iter_named(loaded)):
        assert na == nb and a.dtype == b.dtype and np.array_equal(a.data, b.data)


@pytest.mark.parametrize("flags", [
    dict(disable_cib=True), dict(uniform_bands=True), dict(share_directions=True),
    dict(no_band_split=True, no_channel_split=True), dict(band_edges=(0, 20, 257)),
])
def test_ablation_flags_round_trip(tmp_path, flags):
    cfg = ModelConfig(channels=4, state_dim=2, blocks_per_group=1, groups=1, **flags)
    state = build_model(cfg, seed=1)
    checkpoint_save(state, cfg, tmp_path / "f.ckpt")
    loaded, got = checkpoint_load(tmp_path / "f.ckpt")
    assert got == cfg
    assert CK.to_bytes(loaded) == CK.to_bytes(state)


def test_float64_round_trip():
    state = build_model(ModelConfig.tiny(), seed=2, dtype=np.float64)
    loaded, _ = CK.from_bytes(CK.to_bytes(state))
    assert loaded.encoder_w.dtype == np.float64
    assert CK.to_bytes(loaded) == CK.to_bytes(state)


def test_header_layout():
    buf = CK.to_bytes(build_model(ModelConfig.tiny()))
    assert buf[:4] == b"CSMB"
    assert struct.unpack("<I", buf[4:8]) == (1,)
    (doc_len,) = struct.unpack("<Q", buf[8:16])
    assert ModelConfig.from_dict(__import__("json").loads(buf[16:16 + doc_len])) == ModelConfig.tiny()


def test_config_mismatch_on_save(tmp_path):
    with pytest.raises(CheckpointError):
        checkpoint_save(build_model(CFG), ModelConfig.tiny(), tmp_path / "x.ckpt")


def test_bad_magic():
    buf = CK.to_bytes(build_model(ModelConfig.tiny()))
    with pytest.raises(BadMagicError):
        CK.from_bytes(b"XXXX" + buf[4:])


def test_version_mismatch():
    buf = CK.to_bytes(build_model(ModelConfig.tiny()))
    with pytest.raises(VersionMismatchError, match="version 7"):
        CK.from_bytes(buf[:4] + struct.pack("<I", 7) + buf[8:])


@pytest.mark.parametrize("cut", [6, 20, 400, -1])
def test_truncated(cut):
    buf = CK.to_bytes(build_model(ModelConfig.tiny()))
    with pytest.raises(TruncatedError):
        CK.from_bytes(buf[:cut])


def test_trailing_bytes_rejected():
    buf = CK.to_bytes(build_model(ModelConfig.tiny()))
    with pytest.raises(CheckpointError, match="trailing"):
        CK.from_bytes(buf + b"\0")
