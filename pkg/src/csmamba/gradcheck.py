"""Central-difference gradient checking and the built-in check suite."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tape, Tensor


@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    per_input: list[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err < self.tol)


def _sup(x: np.ndarray) -> float:
    return float(np.abs(x).max(initial=0.0))


def grad_check(function: Callable[..., Tensor], point: Sequence[Tensor], h: float = 1e-5,
               tol: float = 1e-6, max_coords: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare tape gradients of a scalar ``function(*point)`` with central differences.

    ``point`` entries are perturbed in place (their ``data`` is rebound and
    restored).  ``max_coords`` limits each input to a random subset of
    coordinates, which keeps checks over large parameter sets affordable.

    Errors are sup-norm differences relative to the largest gradient entry
    over all inputs, so an input whose gradient is tiny next to the others is
    judged on the scale of the whole gradient rather than on its own roundoff.
    """
    point = list(point)
    for t in point:
        t.requires_grad = True
    with Tape() as tape:
        out = function(*point)
    analytic = tape.backward(out, wrt=point)
    rng = np.random.default_rng(seed)
    diffs, scale = [], 1e-8
    for t, g in zip(point, analytic):
        base = t.data
        size = base.size
        coords = np.arange(size)
        if max_coords is not None and size > max_coords:
            coords = np.sort(rng.choice(size, max_coords, replace=False))
        numeric = np.empty(len(coords))
        try:
            for j, c in enumerate(coords):
                vals = []
                for step in (h, -h):
                    pert = base.copy().reshape(-1)
                    pert[c] += step
                    t.data = pert.reshape(base.shape)
                    with T.no_grad():
                        vals.append(float(function(*point).data))
                numeric[j] = (vals[0] - vals[1]) / (2 * h)
        finally:
            t.data = base
        g = np.asarray(g, dtype=np.float64).reshape(-1)
        scale = max(scale, _sup(g), _sup(numeric))
        diffs.append(_sup(g[coords] - numeric))
    errs = [d / scale for d in diffs]
    return GradCheckReport(max(errs) if errs else 0.0, tol, errs)


# ---------------------------------------------------------------------------
# Suite
# ---------------------------------------------------------------------------


@dataclass
class Case:
    name: str
    build: Callable[[np.random.Generator, np.dtype], tuple[Callable[..., Tensor], list[Tensor]]]
    max_coords: int | None = None


def _weighted(fn, shape_out_rng):
    """Turn a tensor-valued function into a scalar with a fixed random weighting."""
    cache = {}

    def scalar(*args):
        out = fn(*args)
        if "w" not in cache:
            cache["w"] = shape_out_rng.normal(size=out.shape).astype(out.dtype)
        return T.tsum(out * cache["w"])

    return scalar


def _t(rng, shape, dtype, lo=None, hi=None):
    if lo is not None:
        return Tensor(rng.uniform(lo, hi, shape).astype(dtype))
    return Tensor(rng.normal(size=shape).astype(dtype))


def _loss_is_smooth(est: np.ndarray, ref: np.ndarray, lcfg, margin: float = 0.02) -> bool:
    """True when ``(est, ref)`` sits away from the loss's non-smooth spots.

    Near-zero spectral bins give the log magnitude a curvature that central
    differences cannot resolve, and equal samples or magnitudes sit on an
    absolute-value kink.
    """
    from . import dsp
    from .losses import magnitude

    if np.abs(est - ref).min() < 1e-3:
        return False
    with T.no_grad():
        for scfg in lcfg.resolutions():
            me = magnitude(dsp.stft_tensor(Tensor(est), scfg), lcfg.mag_floor).data
            mr = magnitude(dsp.stft_tensor(Tensor(ref), scfg), lcfg.mag_floor).data
            if me.min() < margin * np.median(me) or np.abs(np.log(mr / me)).min() < 1e-3:
                return False
    return True


def primitive_cases() -> list[Case]:
    def unary(name, f, lo=None, hi=None, shape=(3, 4)):
        return Case(name, lambda r, d: (_weighted(f, r), [_t(r, shape, d, lo, hi)]))

    def binary(name, f, sa, sb):
        return Case(name, lambda r, d: (_weighted(f, r), [_t(r, sa, d), _t(r, sb, d, 0.5, 2.0)]))

    from .ssm import linear_scan, zoh_phi

    cases = [
        binary("add", T.add, (3, 4), (4,)),
        binary("sub", T.sub, (2, 3, 4), (3, 1)),
        binary("mul", T.mul, (3, 4), (3, 4)),
        binary("div", T.div, (3, 4), (1, 4)),
        binary("matmul", T.matmul, (2, 3, 4), (4, 5)),
        unary("neg", T.neg),
        unary("power", lambda x: T.power(x, 3.0)),
        unary("sum", lambda x: T.tsum(x, axis=1, keepdims=True)),
        unary("mean", lambda x: T.mean(x, axis=(0, 2)), shape=(2, 3, 4)),
        unary("exp", T.exp),
        unary("log", T.log, 0.5, 3.0),
        unary("sqrt", T.sqrt, 0.5, 3.0),
        unary("abs", T.tabs, 0.2, 2.0),
        unary("tanh", T.tanh),
        unary("sigmoid", T.sigmoid),
        unary("silu", T.silu),
        unary("softplus", lambda x: T.softplus(x * 15.0)),
        unary("relu", T.relu, 0.1, 2.0),
        unary("clamp_min", lambda x: T.clamp_min(x, 0.0), 0.1, 2.0),
        unary("reshape", lambda x: T.reshape(x, (4, 3))),
        unary("transpose", lambda x: T.transpose(x, (2, 0, 1)), shape=(2, 3, 4)),
        unary("flip", lambda x: T.flip(x, 1)),
        unary("getitem", lambda x: x[1:, ::2]),
        unary("gather_last", lambda x: T.gather_last(x, np.array([[0, 1, 3], [3, 2, 2]]))),
        unary("scatter_add_last", lambda x: T.scatter_add_last(x, np.array([0, 2, 2, 1]), 5)),
        unary("rfft", T.rfft, shape=(2, 8)),
        unary("irfft", lambda y: T.irfft(y, 8), shape=(2, 5, 2)),
        Case("concat", lambda r, d: (_weighted(lambda a, b: T.concat([a, b], 1), r),
                                     [_t(r, (2, 3), d), _t(r, (2, 2), d)])),
        Case("stack", lambda r, d: (_weighted(lambda a, b: T.stack([a, b], 0), r),
                                    [_t(r, (2, 3), d), _t(r, (2, 3), d)])),
        Case("prelu", lambda r, d: (_weighted(lambda x, s: T.prelu(x, s, 1), r),
                                    [_t(r, (2, 3, 4), d), _t(r, (3,), d, 0.1, 0.5)])),
        Case("layer_norm", lambda r, d: (_weighted(lambda x, g, b: T.layer_norm(x, 1, g, b), r),
                                         [_t(r, (2, 5, 3), d), _t(r, (5,), d), _t(r, (5,), d)])),
        Case("conv1d", lambda r, d: (_weighted(lambda x, w, b: T.conv1d(x, w, b, padding=1), r),
                                     [_t(r, (2, 3, 7), d), _t(r, (4, 3, 3), d), _t(r, (4,), d)])),
        Case("conv1d_depthwise",
             lambda r, d: (_weighted(lambda x, w, b: T.conv1d(x, w, b, groups=3, padding=1), r),
                           [_t(r, (2, 3, 7), d), _t(r, (3, 1, 3), d), _t(r, (3,), d)])),
        Case("conv2d", lambda r, d: (_weighted(lambda x, w, b: T.conv2d(x, w, b, padding=1), r),
                                     [_t(r, (2, 2, 4, 5), d), _t(r, (3, 2, 3, 3), d), _t(r, (3,), d)])),
        Case("zoh_phi", lambda r, d: (_weighted(zoh_phi, r),
                                      [_t(r, (5, 3), d, 0.01, 1.0), _t(r, (3, 2), d, -3.0, -0.1)])),
        Case("linear_scan_sequential",
             lambda r, d: (_weighted(lambda a, b: linear_scan(a, b, 0, "sequential"), r),
                           [_t(r, (6, 2, 3), d, 0.1, 0.95), _t(r, (6, 2, 3), d)])),
        Case("linear_scan_parallel",
             lambda r, d: (_weighted(lambda a, b: linear_scan(a, b, 0, "parallel"), r),
                           [_t(r, (7, 2, 3), d, 0.1, 0.95), _t(r, (7, 2, 3), d)])),
    ]
    return cases


def _model_case(name, factory, max_coords=None) -> Case:
    def build(rng, dtype):
        fn, point = factory(rng, dtype)
        return fn, point

    return Case(name, build, max_coords)


def composite_cases(scale: str = "tiny") -> list[Case]:
    """SSM, blocks, full TPRB, whole model and the training loss."""
    from . import blocks as BL
    from . import dsp
    from . import losses
    from . import model as M
    from .params import parameters
    from .ssm import bissm_forward, init_ssm, ssm_forward

    c, n, t, f = (4, 2, 6, 9) if scale == "tiny" else (8, 4, 12, 17)
    fft = 16 if scale == "tiny" else 32
    layout = BL.BandLayout.default(f)
    seed = 7

    def ssm_case(rng, dtype):
        p = init_ssm(c, n, seed, "s", dtype)
        x = _t(rng, (2, c, t), dtype)
        return _weighted(lambda x_, *_: ssm_forward(p, x_), rng), [x] + parameters(p)

    def bissm_case(rng, dtype):
        pf, pb = init_ssm(c, n, seed, "f", dtype), init_ssm(c, n, seed, "b", dtype)
        x = _t(rng, (2, c, t), dtype)
        return (_weighted(lambda x_, *_: bissm_forward(pf, pb, x_), rng),
                [x] + parameters(pf) + parameters(pb))

    def bsb_case(rng, dtype):
        p = BL.init_bsb(c, n, layout.num_bands, 3, seed, "bsb", dtype)
        q = _t(rng, (2 * f, c, t), dtype)
        return _weighted(lambda q_, *_: BL.bsb_forward(p, q_, layout), rng), [q] + parameters(p)

    def srb_case(rng, dtype):
        p = BL.init_srb(c, n, 3, seed, "srb", dtype)
        k = _t(rng, (2 * t, c, f), dtype)
        return _weighted(lambda k_, *_: BL.srb_forward(p, k_), rng), [k] + parameters(p)

    def cib_case(rng, dtype):
        p = BL.init_cib(c, 2, seed, "cib", dtype)
        z = _t(rng, (2, c, t, f), dtype)
        return _weighted(lambda z_, *_: BL.cib_forward(p, z_), rng), [z] + parameters(p)

    def tprb_case(rng, dtype):
        cfg = M.ModelConfig.tiny(channels=c, state_dim=n, fft_size=fft, hop=fft // 2,
                                 cib_reduction=2, residual_init=0.7)
        p = M._init_tprb(cfg, seed, "tprb", dtype)
        z = _t(rng, (1, c, t, f), dtype)
        return (_weighted(lambda z_, *_: BL.tprb_forward(p, z_, layout), rng),
                [z] + parameters(p))

    def model_case(rng, dtype):
        cfg = M.ModelConfig.tiny(channels=c, state_dim=n, fft_size=fft, hop=fft // 2,
                                 blocks_per_group=2, cib_reduction=2, residual_init=0.7)
        state = M.build_model(cfg, seed, dtype)
        lcfg = losses.LossConfig(fft_sizes=(16, 32), hops=(4, 8), win_lengths=(12, 24))
        while True:
            clean = _t(rng, (2, fft * 4), dtype)
            noisy = Tensor(clean.data + 0.3 * rng.normal(size=clean.shape).astype(dtype))
            with T.no_grad():
                est = M.enhance_tensor(state, noisy).data
            if _loss_is_smooth(est, clean.data, lcfg):
                break

        def fn(*_):
            est = M.enhance_tensor(state, noisy)
            return losses.total_loss(est, clean, lcfg)

        return fn, parameters(state)

    def stft_case(rng, dtype):
        cfg = dsp.StftConfig(fft, fft // 2)
        x = _t(rng, (2, 3 * fft + 3), dtype)
        return (_weighted(lambda x_: dsp.istft_tensor(dsp.stft_tensor(x_, cfg) * 1.5, cfg, x_.shape[-1]), rng),
                [x])

    def mrstft_case(rng, dtype):
        lcfg = losses.LossConfig(fft_sizes=(16, 32), hops=(4, 8), win_lengths=(12, 24))
        while True:
            est, ref = _t(rng, (2, 70), dtype), _t(rng, (2, 70), dtype)
            if _loss_is_smooth(est.data, ref.data, lcfg):
                break
        return (lambda e: losses.mr_stft_loss(e, ref, lcfg)), [est]

    coords = None if scale == "tiny" else 6
    return [
        _model_case("stft_istft", stft_case),
        _model_case("mr_stft_loss", mrstft_case),
        _model_case("ssm_forward", ssm_case, coords),
        _model_case("bissm_forward", bissm_case, coords),
        _model_case("bsb_forward", bsb_case, coords),
        _model_case("srb_forward", srb_case, coords),
        _model_case("cib_forward", cib_case, coords),
        _model_case("tprb_forward", tprb_case, coords),
        _model_case("model_total_loss", model_case, 4),
    ]


def run_suite(scale: str = "tiny", precision: int = 64, points: int = 1, seed: int = 0,
              echo: Callable[[str], None] | None = None) -> list[tuple[str, float, bool]]:
    """Run every case; returns ``(name, worst relative error, passed)`` rows."""
    dtype = np.float64 if precision == 64 else np.float32
    h, tol = (1e-5, 1e-6) if precision == 64 else (1e-2, 1e-3)
    rows = []
    for case in primitive_cases() + composite_cases(scale):
        worst = 0.0
        start = time.perf_counter()
        for k in range(points):
            rng = np.random.default_rng([seed, k])
            fn, point = case.build(rng, dtype)
            rep = grad_check(fn, point, h=h, tol=tol, max_coords=case.max_coords, seed=seed + k)
            worst = max(worst, rep.max_rel_err)
        ok = worst < tol
        rows.append((case.name, worst, ok))
        if echo is not None:
            echo(f"{case.name:<24} worst_rel_err={worst:.3e}  {'ok' if ok else 'FAIL'}"
                 f"  ({time.perf_counter() - start:.2f}s)")
    return rows
