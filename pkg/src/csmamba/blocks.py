"""Band split, spectrum restoration and channel integrating blocks, and the
triple-path residual block that chains them.

Layouts:
    BSB input   ``[B*F, C, T]``  (rows ordered batch-major, frequency-minor)
    SRB input   ``[B*T, C, F]``
    TPRB / CIB  ``[B, C, T, F]``
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import params as P
from . import tensor as T
from .ssm import SSMParams, bissm_channels_last, init_ssm
from .tensor import ShapeError, Tensor

DEFAULT_EDGES = (0, 7, 65, 129, 257)


class LayoutError(ValueError):
    """Band layout does not match the frequency axis."""


@dataclass(frozen=True)
class BandLayout:
    """Half-open frequency intervals ``[edges[i], edges[i+1])``."""

    edges: tuple[int, ...]

    def __post_init__(self):
        e = tuple(int(v) for v in self.edges)
        object.__setattr__(self, "edges", e)
        if len(e) < 2 or e[0] != 0 or any(b <= a for a, b in zip(e, e[1:])):
            raise LayoutError(f"band edges must start at 0 and increase strictly: {e}")

    @classmethod
    def default(cls, bins: int = 257) -> "BandLayout":
        """The four uneven bands, rescaled when ``bins != 257``."""
        if bins == 257:
            return cls(DEFAULT_EDGES)
        edges = [0]
        for e in DEFAULT_EDGES[1:-1]:
            edges.append(max(int(np.floor(e * bins / 257 + 0.5)), edges[-1] + 1))
        edges.append(bins)
        return cls(tuple(edges))

    @classmethod
    def uniform(cls, bins: int = 257, bands: int = 4) -> "BandLayout":
        """Equal-width bands after the DC bin: ``[0,65) [65,129) [129,193) [193,257)``."""
        inner = [1 + i * (bins - 1) // bands for i in range(1, bands)]
        return cls((0, *inner, bins))

    @classmethod
    def single(cls, bins: int = 257) -> "BandLayout":
        return cls((0, bins))

    @property
    def bins(self) -> int:
        return self.edges[-1]

    @property
    def num_bands(self) -> int:
        return len(self.edges) - 1

    @property
    def widths(self) -> list[int]:
        return [b - a for a, b in zip(self.edges, self.edges[1:])]

    def band_of(self, bin_index: int) -> int:
        if not 0 <= bin_index < self.bins:
            raise LayoutError(f"bin {bin_index} outside [0, {self.bins})")
        return int(np.searchsorted(self.edges, bin_index, side="right")) - 1

    def __str__(self) -> str:
        return " ".join(f"[{a},{b})" for a, b in zip(self.edges, self.edges[1:]))


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------


@dataclass
class BSBParams:
    norm_gain: Tensor
    norm_bias: Tensor
    band_w: list[Tensor]  # per band, [C, C, k_b]
    band_b: list[Tensor]
    gate_w: Tensor
    gate_b: Tensor
    ssm_fwd: SSMParams
    ssm_bwd: SSMParams
    out_w: Tensor
    out_b: Tensor


@dataclass
class SRBParams:
    norm_gain: Tensor
    norm_bias: Tensor
    in_w: Tensor
    in_b: Tensor
    split_w: Tensor | None  # depthwise [C, 1, k_s]; None disables the channel split
    split_b: Tensor | None
    ssm_fwd: SSMParams
    ssm_bwd: SSMParams
    gate_w: Tensor
    gate_b: Tensor
    out_w: Tensor
    out_b: Tensor


@dataclass
class CIBParams:
    fc1_w: Tensor  # [C, C/r]
    fc1_b: Tensor
    fc2_w: Tensor  # [C/r, C]
    fc2_b: Tensor

    @property
    def reduction(self) -> int:
        return self.fc1_w.shape[0] // self.fc1_w.shape[1]


@dataclass
class TPRBParams:
    bsb: BSBParams | None
    srb: SRBParams | None
    cib: CIBParams | None
    alpha: Tensor
    beta: Tensor
    gamma: Tensor


def _linear(prefix, c_in, c_out, seed, dtype):
    return (P.normal(f"{prefix}_w", (c_in, c_out), c_in ** -0.5, seed, dtype),
            P.constant((c_out,), 0.0, dtype))


def _bissm(prefix, c, n, seed, dtype, share):
    fwd = init_ssm(c, n, seed, f"{prefix}.ssm_fwd", dtype)
    return fwd, fwd if share else init_ssm(c, n, seed, f"{prefix}.ssm_bwd", dtype)


def init_bsb(c, n, num_bands, k, seed, prefix, dtype=np.float32, share=False) -> BSBParams:
    std = (c * k) ** -0.5
    gate_w, gate_b = _linear(f"{prefix}.gate", c, c, seed, dtype)
    out_w, out_b = _linear(f"{prefix}.out", c, c, seed, dtype)
    fwd, bwd = _bissm(prefix, c, n, seed, dtype, share)
    return BSBParams(
        norm_gain=P.constant((c,), 1.0, dtype),
        norm_bias=P.constant((c,), 0.0, dtype),
        band_w=[P.normal(f"{prefix}.band_w.{i}", (c, c, k), std, seed, dtype) for i in range(num_bands)],
        band_b=[P.constant((c,), 0.0, dtype) for _ in range(num_bands)],
        gate_w=gate_w, gate_b=gate_b, ssm_fwd=fwd, ssm_bwd=bwd, out_w=out_w, out_b=out_b,
    )


def init_srb(c, n, k, seed, prefix, dtype=np.float32, share=False, channel_split=True) -> SRBParams:
    in_w, in_b = _linear(f"{prefix}.in", c, c, seed, dtype)
    gate_w, gate_b = _linear(f"{prefix}.gate", c, c, seed, dtype)
    out_w, out_b = _linear(f"{prefix}.out", c, c, seed, dtype)
    fwd, bwd = _bissm(prefix, c, n, seed, dtype, share)
    split_w = split_b = None
    if channel_split:
        split_w = P.normal(f"{prefix}.split_w", (c, 1, k), k ** -0.5, seed, dtype)
        split_b = P.constant((c,), 0.0, dtype)
    return SRBParams(
        norm_gain=P.constant((c,), 1.0, dtype), norm_bias=P.constant((c,), 0.0, dtype),
        in_w=in_w, in_b=in_b, split_w=split_w, split_b=split_b, ssm_fwd=fwd, ssm_bwd=bwd,
        gate_w=gate_w, gate_b=gate_b, out_w=out_w, out_b=out_b,
    )


def init_cib(c, reduction, seed, prefix, dtype=np.float32) -> CIBParams:
    if c % reduction:
        raise ValueError(f"channels {c} not divisible by cib_reduction {reduction}")
    fc1_w, fc1_b = _linear(f"{prefix}.fc1", c, c // reduction, seed, dtype)
    fc2_w, fc2_b = _linear(f"{prefix}.fc2", c // reduction, c, seed, dtype)
    return CIBParams(fc1_w, fc1_b, fc2_w, fc2_b)


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------


def _swap_last(x: Tensor) -> Tensor:
    nd = x.ndim
    return T.transpose(x, tuple(range(nd - 2)) + (nd - 1, nd - 2))


def band_split_apply(q: Tensor, layout: BandLayout, band_w, band_b) -> Tensor:
    """Run band ``i``'s time convolution on the rows whose frequency is in band ``i``.

    ``q: [B*F, C, T]`` with ``F == layout.bins``; shape is preserved.
    """
    rows, c, t = q.shape
    f = layout.bins
    if rows % f:
        raise LayoutError(f"{rows} rows is not a multiple of {f} frequency bins")
    if len(band_w) != layout.num_bands:
        raise LayoutError(f"{len(band_w)} band convolutions for {layout.num_bands} bands")
    b = rows // f
    x = q.reshape(b, f, c, t)
    parts = []
    for (lo, hi), w, bias in zip(zip(layout.edges, layout.edges[1:]), band_w, band_b):
        seg = x[:, lo:hi].reshape(b * (hi - lo), c, t)
        k = w.shape[-1]
        y = T.conv1d(seg, w, bias, padding=k // 2)
        parts.append(y.reshape(b, hi - lo, c, t))
    out = parts[0] if len(parts) == 1 else T.concat(parts, axis=1)
    return out.reshape(rows, c, t)


def bsb_forward(p: BSBParams, q: Tensor, layout: BandLayout, method: str = "parallel") -> Tensor:
    """Norm, per-band convolution, Bi-SSM over time, SiLU gate, output projection."""
    x = _swap_last(q)  # [BF, T, C]
    xn = T.layer_norm(x, -1, p.norm_gain, p.norm_bias)
    xc = _swap_last(band_split_apply(_swap_last(xn), layout, p.band_w, p.band_b))
    s = bissm_channels_last(p.ssm_fwd, p.ssm_bwd, xc, method)
    gate = T.silu(T.linear(xn, p.gate_w, p.gate_b))
    return _swap_last(T.linear(s * gate, p.out_w, p.out_b))


def srb_forward(p: SRBParams, k: Tensor, method: str = "parallel") -> Tensor:
    """Frame-wise block over frequency: norm, projection, depthwise split, Bi-SSM, gate, projection."""
    x = _swap_last(k)  # [BT, F, C]
    xn = T.layer_norm(x, -1, p.norm_gain, p.norm_bias)
    u = T.linear(xn, p.in_w, p.in_b)
    if p.split_w is not None:
        c, ks = p.split_w.shape[0], p.split_w.shape[-1]
        u = _swap_last(T.conv1d(_swap_last(u), p.split_w, p.split_b, groups=c, padding=ks // 2))
    s = bissm_channels_last(p.ssm_fwd, p.ssm_bwd, u, method)
    gate = T.silu(T.linear(xn, p.gate_w, p.gate_b))
    return _swap_last(T.linear(s * gate, p.out_w, p.out_b))


def cib_forward(p: CIBParams, z: Tensor) -> Tensor:
    """Squeeze over (T, F), bottleneck, sigmoid channel weights."""
    b, c = z.shape[:2]
    s = T.mean(z, axis=(2, 3))
    h = T.relu(T.linear(s, p.fc1_w, p.fc1_b))
    w = T.sigmoid(T.linear(h, p.fc2_w, p.fc2_b))
    return z * w.reshape(b, c, 1, 1)


def to_q(z: Tensor) -> Tensor:
    b, c, t, f = z.shape
    return T.transpose(z, (0, 3, 1, 2)).reshape(b * f, c, t)


def from_q(q: Tensor, b: int, f: int) -> Tensor:
    _, c, t = q.shape
    return T.transpose(q.reshape(b, f, c, t), (0, 2, 3, 1))


def to_k(z: Tensor) -> Tensor:
    b, c, t, f = z.shape
    return T.transpose(z, (0, 2, 1, 3)).reshape(b * t, c, f)


def from_k(k: Tensor, b: int, t: int) -> Tensor:
    _, c, f = k.shape
    return T.transpose(k.reshape(b, t, c, f), (0, 2, 1, 3))


def tprb_forward(p: TPRBParams, z: Tensor, layout: BandLayout, method: str = "parallel") -> Tensor:
    """Residual chain over the time path, frequency path and channel path."""
    if z.ndim != 4:
        raise ShapeError(f"TPRB expects [B, C, T, F], got {z.shape}")
    b, c, t, f = z.shape
    x = z
    if p.bsb is not None:
        x = x + p.alpha * from_q(bsb_forward(p.bsb, to_q(x), layout, method), b, f)
    if p.srb is not None:
        x = x + p.beta * from_k(srb_forward(p.srb, to_k(x), method), b, t)
    if p.cib is not None:
        x = x + p.gamma * cib_forward(p.cib, x)
    return x
