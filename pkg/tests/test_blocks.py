import numpy as np
import pytest

from csmamba import blocks as BL
from csmamba import tensor as T
from csmamba.blocks import BandLayout, LayoutError
from csmamba.gradcheck import grad_check
from csmamba.model import ModelConfig, _init_tprb
from csmamba.params import parameters
from csmamba.tensor import Tensor

C, N = 4, 2


def rnd(*shape, seed=0):
    return Tensor(np.random.default_rng(seed).normal(size=shape))


# --- BandLayout ------------------------------------------------------------


def test_default_layout_edges_and_widths():
    lay = BandLayout.default(257)
    assert lay.edges == (0, 7, 65, 129, 257)
    assert lay.widths == [7, 58, 64, 128]
    assert str(lay) == "[0,7) [7,65) [65,129) [129,257)"


def test_band_of_half_open():
    lay = BandLayout.default(257)
    assert lay.band_of(6) == 0 and lay.band_of(7) == 1
    assert lay.band_of(64) == 1 and lay.band_of(65) == 2 and lay.band_of(256) == 3


def test_partition_histogram():
    lay = BandLayout.default(257)
    hist = np.bincount([lay.band_of(i) for i in range(257)], minlength=4)
    assert hist.tolist() == [7, 58, 64, 128] and hist.sum() == 257


def test_uniform_layout():
    assert BandLayout.uniform(257).edges == (0, 65, 129, 193, 257)


def test_invalid_layouts_rejected():
    for edges in [(1, 7, 257), (0, 7, 7, 257), (0, 65, 7, 257)]:
        with pytest.raises(LayoutError):
            BandLayout(edges)


def test_band_split_bins_mismatch():
    lay = BandLayout.default(257)
    w = [rnd(C, C, 3) for _ in range(4)]
    b = [Tensor(np.zeros(C)) for _ in range(4)]
    with pytest.raises(LayoutError):
        BL.band_split_apply(rnd(2 * 250, C, 5), lay, w, b)


def test_band_split_identical_convs_equal_shared_conv():
    lay = BandLayout.default(257)
    w, bias = rnd(C, C, 3, seed=1), rnd(C, seed=2)
    q = rnd(257, C, 6, seed=3)
    got = BL.band_split_apply(q, lay, [w] * 4, [bias] * 4).data
    want = T.conv1d(q, w, bias, padding=1).data
    assert np.allclose(got, want, rtol=1e-12)


# --- BSB -------------------------------------------------------------------


def _bsb(seed=0, f=9):
    lay = BandLayout.default(f)
    return BL.init_bsb(C, N, lay.num_bands, 3, seed, "bsb", np.float64), lay


def test_bsb_zero_input_zero_output():
    p, lay = _bsb()
    assert np.all(BL.bsb_forward(p, Tensor(np.zeros((2 * 9, C, 5))), lay).data == 0)


def test_bsb_zero_gate_gives_output_bias():
    p, lay = _bsb()
    p.gate_w = Tensor(np.zeros((C, C)))
    p.out_b = Tensor(np.array([1.0, -2.0, 0.5, 3.0]))
    out = BL.bsb_forward(p, rnd(9, C, 5, seed=4), lay).data
    assert np.allclose(out, p.out_b.data[None, :, None], rtol=0, atol=1e-15)


def test_bsb_band_weight_sharing_probe():
    p, lay = _bsb(seed=5)
    row = np.random.default_rng(6).normal(size=(C, 7))
    q = Tensor(np.broadcast_to(row, (9, C, 7)).copy())
    out = BL.bsb_forward(p, q, lay).data
    for i in range(9):
        for j in range(9):
            same = lay.band_of(i) == lay.band_of(j)
            assert np.array_equal(out[i], out[j]) == same


def test_bsb_gradcheck():
    p, lay = _bsb(seed=7)
    q = rnd(2 * 9, C, 6, seed=8)
    w = np.random.default_rng(9).normal(size=q.shape)
    rep = grad_check(lambda *_: T.tsum(BL.bsb_forward(p, q, lay) * w), [q] + parameters(p))
    assert rep.passed, rep.max_rel_err


# --- SRB -------------------------------------------------------------------


def test_srb_frame_permutation_equivariance():
    p = BL.init_srb(C, N, 3, 0, "srb", np.float64)
    k = rnd(6, C, 9, seed=1)
    perm = np.random.default_rng(2).permutation(6)
    a = BL.srb_forward(p, Tensor(k.data[perm])).data
    b = BL.srb_forward(p, k).data[perm]
    assert np.array_equal(a, b)


def test_srb_identity_split_kernel_is_noop():
    p = BL.init_srb(C, N, 3, 0, "srb", np.float64)
    ident = np.zeros((C, 1, 3))
    ident[:, 0, 1] = 1.0
    p.split_w, p.split_b = Tensor(ident), Tensor(np.zeros(C))
    q = BL.init_srb(C, N, 3, 0, "srb", np.float64, channel_split=False)
    k = rnd(3, C, 9, seed=3)
    assert np.allclose(BL.srb_forward(p, k).data, BL.srb_forward(q, k).data, rtol=1e-13, atol=1e-15)


def test_srb_gradcheck():
    p = BL.init_srb(C, N, 3, 1, "srb", np.float64)
    k = rnd(4, C, 9, seed=4)
    w = np.random.default_rng(5).normal(size=k.shape)
    rep = grad_check(lambda *_: T.tsum(BL.srb_forward(p, k) * w), [k] + parameters(p))
    assert rep.passed, rep.max_rel_err


# --- CIB -------------------------------------------------------------------


def test_cib_zero_weights_halves_input():
    p = BL.init_cib(C, 2, 0, "cib", np.float64)
    for name in ("fc1_w", "fc1_b", "fc2_w", "fc2_b"):
        setattr(p, name, Tensor(np.zeros_like(getattr(p, name).data)))
    z = rnd(2, C, 3, 5)
    assert np.array_equal(BL.cib_forward(p, z).data, 0.5 * z.data)


def test_cib_uniform_positive_channel_scaling():
    p = BL.init_cib(C, 2, 1, "cib", np.float64)
    z = rnd(2, C, 3, 5, seed=6)
    ratio = BL.cib_forward(p, z).data / z.data
    assert np.allclose(ratio, ratio[:, :, :1, :1], rtol=1e-13)
    assert np.all((ratio > 0) & (ratio < 1))


def test_cib_reduction_must_divide():
    with pytest.raises(ValueError):
        BL.init_cib(6, 4, 0, "cib")


def test_cib_gradcheck():
    p = BL.init_cib(C, 2, 2, "cib", np.float64)
    z = rnd(2, C, 3, 5, seed=7)
    w = np.random.default_rng(8).normal(size=z.shape)
    assert grad_check(lambda *_: T.tsum(BL.cib_forward(p, z) * w), [z] + parameters(p)).passed


# --- TPRB ------------------------------------------------------------------


def _tprb(f=9, **kw):
    cfg = ModelConfig.tiny(channels=C, state_dim=N, cib_reduction=2, **kw)
    return _init_tprb(cfg, 3, "tprb", np.float64)


def test_tprb_zero_gains_is_identity():
    p = _tprb()
    p.alpha, p.beta, p.gamma = (Tensor(np.array(0.0)) for _ in range(3))
    z = rnd(1, C, 6, 9)
    assert np.array_equal(BL.tprb_forward(p, z, BandLayout.default(9)).data, z.data)


@pytest.mark.parametrize("t", [8, 63])
def test_tprb_shape_preserved_full_band(t):
    cfg = ModelConfig.tiny(channels=C, state_dim=N, cib_reduction=2, fft_size=512, hop=256)
    p = _init_tprb(cfg, 0, "tprb", np.float32)
    z = Tensor(np.random.default_rng(t).normal(size=(1, C, t, 257)).astype(np.float32))
    assert BL.tprb_forward(p, z, cfg.layout, "sequential").shape == (1, C, t, 257)


def test_tprb_gradcheck_tiny():
    p = _tprb(residual_init=0.7)
    z = rnd(1, C, 6, 9, seed=9)
    w = np.random.default_rng(10).normal(size=z.shape)
    rep = grad_check(lambda *_: T.tsum(BL.tprb_forward(p, z, BandLayout.default(9)) * w),
                     [z] + parameters(p), max_coords=6)
    assert rep.passed, rep.max_rel_err
