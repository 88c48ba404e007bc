import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from csmamba.metrics import SI_SNR_CAP_DB, MetricReport, si_snr, si_snri

from oracles import si_snr_direct


def sig(n, seed):
    return np.random.default_rng(seed).normal(size=n)


def test_scaled_copy_hits_the_cap():
    r = sig(1000, 0)
    assert si_snr(2.0 * r, r) == SI_SNR_CAP_DB


def test_orthogonal_equal_power_noise_is_zero_db():
    r = np.sin(np.arange(1000) * 2 * np.pi * 5 / 1000)
    n = np.cos(np.arange(1000) * 2 * np.pi * 5 / 1000)
    assert si_snr(r + n, r) == pytest.approx(0.0, abs=1e-9)


def test_matches_direct_formula_oracle():
    for seed in range(50):
        r = sig(4000, seed)
        e = r + sig(4000, seed + 1000) * np.random.default_rng(seed).uniform(0.1, 3)
        assert abs(si_snr(e, r) - si_snr_direct(e, r)) < 1e-6


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(1e-3, 1e3), st.floats(-10, 10))
def test_scale_and_offset_invariance(seed, scale, offset):
    r, n = sig(512, seed), sig(512, seed + 1)
    e = r + 0.7 * n
    assert si_snr(scale * e + offset, r) == pytest.approx(si_snr(e, r), abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_identity_system_improvement_is_exactly_zero(seed):
    r = sig(512, seed)
    noisy = r + sig(512, seed + 1)
    assert si_snri(noisy, noisy, r) == 0.0


def test_lower_clamp_for_orthogonal_estimate():
    r = np.sin(np.arange(1000) * 2 * np.pi * 5 / 1000)
    e = np.cos(np.arange(1000) * 2 * np.pi * 5 / 1000)
    assert si_snr(e, r) == -SI_SNR_CAP_DB


def test_errors():
    with pytest.raises(ValueError, match="length"):
        si_snr(np.ones(3), np.ones(4))
    with pytest.raises(ValueError, match="zero"):
        si_snr(sig(10, 1), np.full(10, 3.0))


def test_report_means_and_per_file_improvement():
    rep = MetricReport()
    r = sig(800, 2)
    noisy = r + sig(800, 3)
    rep.add("a", r, noisy, r)
    rep.add("b", noisy, noisy, r)
    assert rep.files[0].si_snri == SI_SNR_CAP_DB - si_snr(noisy, r)
    assert rep.files[1].si_snri == 0.0
    assert rep.mean_si_snri == pytest.approx((rep.files[0].si_snri + 0.0) / 2)
    assert np.isnan(MetricReport().mean_si_snri)
