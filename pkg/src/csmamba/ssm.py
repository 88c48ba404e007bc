"""Selective state-space layer: ZOH discretization, linear-recurrence scans and
the bidirectional wrapper.

Sequences are handled channel-last internally (``[..., T, C]``); the public
``[..., C, T]`` entry points transpose on the way in and out.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import params as P
from . import tensor as T
from .tensor import ShapeError, Tensor

SERIES_THRESHOLD = 1e-4


class StabilityError(ValueError):
    """State matrix has a non-negative entry."""


@dataclass
class SSMParams:
    A_log: Tensor  # [C, n]; A = -exp(A_log)
    D: Tensor  # [C]
    W_B: Tensor  # [C, n]
    W_C: Tensor  # [C, n]
    W_delta: Tensor  # [C, C]
    delta_bias: Tensor  # [C]

    @property
    def channels(self) -> int:
        return self.A_log.shape[0]

    @property
    def state_dim(self) -> int:
        return self.A_log.shape[1]

    @property
    def A(self) -> Tensor:
        return -T.exp(self.A_log)


def init_ssm(channels: int, state_dim: int, seed: int, prefix: str, dtype=np.float32,
             dt_min: float = 1e-3, dt_max: float = 1e-1) -> SSMParams:
    """S4D-real ramp ``A = -(1..n)``; step sizes start log-uniform in ``[dt_min, dt_max]``."""
    a_log = np.log(np.tile(np.arange(1, state_dim + 1, dtype=np.float64), (channels, 1)))
    u = T.Rng(seed, f"{prefix}.delta_bias").uniform(size=channels)
    dt = np.exp(np.log(dt_min) + u * (np.log(dt_max) - np.log(dt_min)))
    inv_softplus = dt + np.log(-np.expm1(-dt))
    std = channels ** -0.5
    return SSMParams(
        A_log=Tensor(a_log.astype(dtype), requires_grad=True),
        D=P.constant((channels,), 1.0, dtype),
        W_B=P.normal(f"{prefix}.W_B", (channels, state_dim), std, seed, dtype),
        W_C=P.normal(f"{prefix}.W_C", (channels, state_dim), std, seed, dtype),
        W_delta=P.normal(f"{prefix}.W_delta", (channels, channels), std, seed, dtype),
        delta_bias=Tensor(inv_softplus.astype(dtype), requires_grad=True),
    )


@dataclass
class DiscretizedSSM:
    a_bar: Tensor  # [..., T, C, n]
    b_bar: Tensor  # [..., T, C, n]


# ---------------------------------------------------------------------------
# Discretization
# ---------------------------------------------------------------------------


def zoh_phi(delta: Tensor, a: Tensor) -> Tensor:
    """``(exp(delta*a) - 1) / a`` broadcast to ``[..., C, n]``.

    Below ``|delta*a| < 1e-4`` the two-term series ``delta*(1 + delta*a/2)`` is
    used instead of the quotient.
    """
    d = delta.data[..., None]
    av = a.data
    z = d * av
    small = np.abs(z) < SERIES_THRESHOLD
    em1 = np.expm1(z)
    with np.errstate(divide="ignore", invalid="ignore"):
        closed = em1 / av
    phi = np.where(small, d * (1 + z / 2), closed)

    def vjp(g):
        ez = em1 + 1
        d_delta = np.where(small, 1 + z, ez)
        with np.errstate(divide="ignore", invalid="ignore"):
            d_a = np.where(small, d * d / 2, (d * ez - closed) / av)
        gd = (g * d_delta).sum(axis=-1) if delta.requires_grad else None
        ga = T._unbroadcast(g * d_a, a.shape) if a.requires_grad else None
        return gd, ga

    return T.record("zoh_phi", (delta, a), phi.astype(delta.dtype), vjp)


def discretize_zoh(a: Tensor, b_t: Tensor, delta_t: Tensor) -> DiscretizedSSM:
    """Zero-order hold for a diagonal state matrix.

    ``a``: ``[C, n]`` (strictly negative), ``b_t``: ``[..., T, n]``,
    ``delta_t``: ``[..., T, C]`` (positive).
    """
    if np.any(a.data >= 0):
        raise StabilityError("state matrix entries must be strictly negative")
    if b_t.shape[:-1] != delta_t.shape[:-1]:
        raise ShapeError(f"b_t {b_t.shape} and delta_t {delta_t.shape} disagree on leading dims")
    if delta_t.shape[-1] != a.shape[0] or b_t.shape[-1] != a.shape[1]:
        raise ShapeError(f"a {a.shape} does not match b_t {b_t.shape} / delta_t {delta_t.shape}")
    d = delta_t.reshape(delta_t.shape + (1,))
    a_bar = T.exp(d * a)
    b = b_t.reshape(b_t.shape[:-1] + (1, b_t.shape[-1]))
    return DiscretizedSSM(a_bar, zoh_phi(delta_t, a) * b)


# ---------------------------------------------------------------------------
# Scans of h_t = a_t * h_{t-1} + b_t with h_0 = 0, along axis 0
# ---------------------------------------------------------------------------


def scan_sequential(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    h = np.empty_like(b)
    h[0] = b[0]
    for t in range(1, b.shape[0]):
        h[t] = a[t] * h[t - 1] + b[t]
    return h


def scan_parallel(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Work-efficient up-sweep/down-sweep scan.

    Elements are affine maps ``h -> a*h + b`` composed with
    ``(a1, b1) then (a2, b2) = (a1*a2, a2*b1 + b2)``; lengths are padded to a
    power of two with the identity ``(1, 0)``.  The reduction tree is fixed, so
    results do not depend on anything but the inputs.
    """
    n = b.shape[0]
    if n == 1:
        return b.copy()
    size = 1 << (n - 1).bit_length()
    A = np.ones((size,) + a.shape[1:], dtype=a.dtype)
    B = np.zeros((size,) + b.shape[1:], dtype=b.dtype)
    A[:n] = a
    B[:n] = b
    d = 1
    while d < size:
        left, right = slice(d - 1, size, 2 * d), slice(2 * d - 1, size, 2 * d)
        B[right] = A[right] * B[left] + B[right]
        A[right] = A[left] * A[right]
        d *= 2
    A[-1] = 1
    B[-1] = 0
    d = size // 2
    while d >= 1:
        left, right = slice(d - 1, size, 2 * d), slice(2 * d - 1, size, 2 * d)
        pa, pb = A[right].copy(), B[right].copy()
        la, lb = A[left].copy(), B[left].copy()
        A[left], B[left] = pa, pb
        A[right] = pa * la
        B[right] = la * pb + lb
        d //= 2
    # B now holds the exclusive prefix, i.e. h_{t-1}
    return a * B[:n] + b


_SCANS = {"sequential": scan_sequential, "parallel": scan_parallel}


def linear_scan(a: Tensor, b: Tensor, axis: int = -3, method: str = "parallel") -> Tensor:
    """Differentiable first-order linear recurrence along ``axis``.

    The adjoint is the same recurrence run backwards:
    ``lam_t = g_t + a_{t+1} * lam_{t+1}``, ``db_t = lam_t``, ``da_t = lam_t * h_{t-1}``.
    """
    if a.shape != b.shape:
        raise ShapeError(f"scan operands differ in shape: {a.shape} vs {b.shape}")
    scan = _SCANS[method]
    am = np.moveaxis(a.data, axis, 0)
    h = scan(am, np.moveaxis(b.data, axis, 0))

    def vjp(g):
        gm = np.moveaxis(g, axis, 0)
        a_next = np.concatenate([am[1:], np.ones_like(am[:1])])
        lam = scan(a_next[::-1], gm[::-1])[::-1]
        ga = np.zeros_like(lam)
        ga[1:] = lam[1:] * h[:-1]
        return np.moveaxis(ga, 0, axis), np.moveaxis(lam, 0, axis)

    return T.record(f"linear_scan_{method}", (a, b), np.moveaxis(h, 0, axis), vjp)


def _scan_readout(disc: DiscretizedSSM, c_t: Tensor, d: Tensor, x: Tensor, method: str) -> Tensor:
    # x: [..., C, T] -> y: [..., C, T]
    nd = x.ndim
    xt = T.transpose(x, tuple(range(nd - 2)) + (nd - 1, nd - 2))
    if disc.a_bar.shape[:-1] != xt.shape:
        raise ShapeError(f"discretized shape {disc.a_bar.shape} does not match input {x.shape}")
    y = _readout(disc, c_t, d, xt, method)
    return T.transpose(y, tuple(range(nd - 2)) + (nd - 1, nd - 2))


def _readout(disc, c_t, d, xt, method):
    bx = disc.b_bar * xt.reshape(xt.shape + (1,))
    h = linear_scan(disc.a_bar, bx, axis=-3, method=method)
    c = c_t.reshape(c_t.shape[:-1] + (1, c_t.shape[-1]))
    return T.tsum(h * c, axis=-1) + xt * d


def selective_scan_seq(disc: DiscretizedSSM, c_t: Tensor, d: Tensor, x: Tensor) -> Tensor:
    """Left-to-right recurrence ``y_t = <c_t, h_t> + d * x_t`` for ``x: [..., C, T]``."""
    return _scan_readout(disc, c_t, d, x, "sequential")


def selective_scan_parallel(disc: DiscretizedSSM, c_t: Tensor, d: Tensor, x: Tensor) -> Tensor:
    """Same contract as :func:`selective_scan_seq`, evaluated with the tree scan."""
    return _scan_readout(disc, c_t, d, x, "parallel")


# ---------------------------------------------------------------------------
# Full selective layer
# ---------------------------------------------------------------------------


def ssm_channels_last(params: SSMParams, x: Tensor, method: str = "parallel") -> Tensor:
    """Selective SSM over axis -2 of ``x: [..., T, C]``."""
    if x.shape[-1] != params.channels:
        raise ShapeError(f"input has {x.shape[-1]} channels, SSM expects {params.channels}")
    delta = T.softplus(T.matmul(x, params.W_delta) + params.delta_bias)
    b_t = T.matmul(x, params.W_B)
    c_t = T.matmul(x, params.W_C)
    disc = discretize_zoh(params.A, b_t, delta)
    return _readout(disc, c_t, params.D, x, method)


def bissm_channels_last(p_fwd: SSMParams, p_bwd: SSMParams, x: Tensor,
                        method: str = "parallel") -> Tensor:
    fwd = ssm_channels_last(p_fwd, x, method)
    bwd = ssm_channels_last(p_bwd, T.flip(x, -2), method)
    return fwd + T.flip(bwd, -2)


def _to_last(x: Tensor) -> Tensor:
    nd = x.ndim
    return T.transpose(x, tuple(range(nd - 2)) + (nd - 1, nd - 2))


def ssm_forward(params: SSMParams, x: Tensor, method: str = "parallel") -> Tensor:
    """Selective SSM on ``x: [..., C, T]``."""
    return _to_last(ssm_channels_last(params, _to_last(x), method))


def bissm_forward(p_fwd: SSMParams, p_bwd: SSMParams, x: Tensor, method: str = "parallel") -> Tensor:
    """``SSM_fwd(x) + flip(SSM_bwd(flip(x)))`` along time, for ``x: [..., C, T]``."""
    return _to_last(bissm_channels_last(p_fwd, p_bwd, _to_last(x), method))
