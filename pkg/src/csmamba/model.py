"""End-to-end enhancement network: encoder, grouped TPRB backbone, feature
mask, decoder, and the STFT wrapper around them."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from . import dsp
from . import params as P
from . import tensor as T
from .blocks import (BandLayout, LayoutError, TPRBParams, init_bsb, init_cib, init_srb,
                     tprb_forward)
from .tensor import ShapeError, Tensor


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class ModelConfig:
    channels: int = 56
    state_dim: int = 16
    blocks_per_group: int = 5  # N
    groups: int = 4  # L
    band_edges: tuple[int, ...] | None = None  # None: the default uneven split for `bins`
    band_kernel: int = 3
    srb_kernel: int = 3
    cib_reduction: int = 4
    fft_size: int = 512
    hop: int = 256
    residual_init: float = 0.1
    share_directions: bool = False
    scan: str = "sequential"
    disable_bsb: bool = False
    disable_srb: bool = False
    disable_cib: bool = False
    uniform_bands: bool = False
    no_band_split: bool = False
    no_channel_split: bool = False

    def __post_init__(self):
        if self.band_edges is not None:
            self.band_edges = tuple(int(e) for e in self.band_edges)
        for key in ("channels", "state_dim", "blocks_per_group", "groups", "band_kernel",
                    "srb_kernel", "cib_reduction"):
            v = getattr(self, key)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                raise ConfigError(key, f"must be a positive integer, got {v!r}")
        for key in ("band_kernel", "srb_kernel"):
            if getattr(self, key) % 2 == 0:
                raise ConfigError(key, "must be odd for same padding")
        if self.channels % self.cib_reduction:
            raise ConfigError("cib_reduction",
                              f"channels={self.channels} not divisible by {self.cib_reduction}")
        if self.scan not in ("sequential", "parallel"):
            raise ConfigError("scan", f"must be 'sequential' or 'parallel', got {self.scan!r}")
        try:
            self.stft
        except ValueError as exc:
            raise ConfigError("fft_size", str(exc)) from None
        try:
            layout = self.layout
        except LayoutError as exc:
            raise ConfigError("band_edges", str(exc)) from None
        if layout.bins != self.bins:
            raise ConfigError("band_edges", f"last edge {layout.bins} != {self.bins} bins")

    @property
    def bins(self) -> int:
        return self.fft_size // 2 + 1

    @property
    def stft(self) -> dsp.StftConfig:
        return dsp.StftConfig(self.fft_size, self.hop, "hamming")

    @property
    def layout(self) -> BandLayout:
        if self.no_band_split:
            return BandLayout.single(self.bins)
        if self.uniform_bands:
            return BandLayout.uniform(self.bins)
        if self.band_edges is not None:
            return BandLayout(self.band_edges)
        return BandLayout.default(self.bins)

    @property
    def total_blocks(self) -> int:
        return self.blocks_per_group * self.groups

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if d["band_edges"] is not None:
            d["band_edges"] = list(d["band_edges"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        for key in d:
            if key not in known:
                raise ConfigError(key, "unknown model config key")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        """Gradient-check scale: C=4, n=2, one block, 9 frequency bins."""
        base = dict(channels=4, state_dim=2, blocks_per_group=1, groups=1, fft_size=16, hop=8)
        base.update(overrides)
        return cls(**base)


@dataclass
class GroupParams:
    blocks: list[TPRBParams]
    conv_w: Tensor  # [C, C, 3, 3]
    conv_b: Tensor


@dataclass
class ModelState:
    config: ModelConfig = field(repr=False)
    encoder_w: Tensor
    encoder_b: Tensor
    encoder_slope: Tensor
    groups: list[GroupParams]
    mask_w1: Tensor
    mask_b1: Tensor
    mask_slope: Tensor
    mask_w2: Tensor
    mask_b2: Tensor
    decoder_w: Tensor
    decoder_b: Tensor

    @property
    def dtype(self):
        return self.encoder_w.dtype


def _init_tprb(cfg: ModelConfig, seed: int, prefix: str, dtype) -> TPRBParams:
    c, n = cfg.channels, cfg.state_dim
    share = cfg.share_directions
    bsb = None if cfg.disable_bsb else init_bsb(
        c, n, cfg.layout.num_bands, cfg.band_kernel, seed, f"{prefix}.bsb", dtype, share)
    srb = None if cfg.disable_srb else init_srb(
        c, n, cfg.srb_kernel, seed, f"{prefix}.srb", dtype, share,
        channel_split=not cfg.no_channel_split)
    cib = None if cfg.disable_cib else init_cib(c, cfg.cib_reduction, seed, f"{prefix}.cib", dtype)
    gain = cfg.residual_init
    return TPRBParams(bsb, srb, cib, P.constant((), gain, dtype), P.constant((), gain, dtype),
                      P.constant((), gain, dtype))


def build_model(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelState:
    c = cfg.channels
    groups = []
    for g in range(cfg.groups):
        prefix = f"groups.{g}"
        blocks = [_init_tprb(cfg, seed, f"{prefix}.blocks.{i}", dtype)
                  for i in range(cfg.blocks_per_group)]
        groups.append(GroupParams(
            blocks,
            P.normal(f"{prefix}.conv_w", (c, c, 3, 3), (9 * c) ** -0.5, seed, dtype),
            P.constant((c,), 0.0, dtype)))
    return ModelState(
        config=cfg,
        encoder_w=P.normal("encoder_w", (c, 2, 3, 3), 18 ** -0.5, seed, dtype),
        encoder_b=P.constant((c,), 0.0, dtype),
        encoder_slope=P.constant((c,), 0.25, dtype),
        groups=groups,
        mask_w1=P.normal("mask_w1", (c, c), c ** -0.5, seed, dtype),
        mask_b1=P.constant((c,), 0.0, dtype),
        mask_slope=P.constant((c,), 0.25, dtype),
        mask_w2=P.normal("mask_w2", (c, c), c ** -0.5, seed, dtype),
        mask_b2=P.constant((c,), 1.0, dtype),  # start near a pass-through mask
        decoder_w=P.normal("decoder_w", (2, c, 3, 3), (9 * c) ** -0.5, seed, dtype),
        decoder_b=P.constant((2,), 0.0, dtype),
    )


# ---------------------------------------------------------------------------
# Forward stages, all on [B, channels, T, F]
# ---------------------------------------------------------------------------


def encoder_forward(state: ModelState, x: Tensor) -> Tensor:
    cfg = state.config
    if x.ndim != 4 or x.shape[1] != 2:
        raise ShapeError(f"encoder expects [B, 2, T, F], got {x.shape}")
    if x.shape[-1] != cfg.bins:
        raise ShapeError(f"encoder expects {cfg.bins} frequency bins, got {x.shape[-1]}")
    y = T.conv2d(x, state.encoder_w, state.encoder_b, padding=1)
    return T.prelu(y, state.encoder_slope, axis=1)


def backbone_forward(state: ModelState, fe: Tensor) -> Tensor:
    cfg = state.config
    layout = cfg.layout
    x = fe
    for group in state.groups:
        y = x
        for block in group.blocks:
            y = tprb_forward(block, y, layout, cfg.scan)
        x = x + T.conv2d(y, group.conv_w, group.conv_b, padding=1)
    return x


def mask_head(state: ModelState, backbone_out: Tensor) -> Tensor:
    h = T.transpose(backbone_out, (0, 2, 3, 1))
    h = T.prelu(T.linear(h, state.mask_w1, state.mask_b1), state.mask_slope, axis=-1)
    m = T.linear(h, state.mask_w2, state.mask_b2)
    return T.transpose(m, (0, 3, 1, 2))


def mask_apply(state: ModelState, backbone_out: Tensor, fe: Tensor) -> Tensor:
    if backbone_out.shape != fe.shape:
        raise ShapeError(f"mask input {backbone_out.shape} vs features {fe.shape}")
    return mask_head(state, backbone_out) * fe


def decoder_forward(state: ModelState, masked: Tensor) -> Tensor:
    return T.conv2d(masked, state.decoder_w, state.decoder_b, padding=1)


def spectrum_forward(state: ModelState, x: Tensor) -> Tensor:
    """``[B, 2, T, F]`` noisy real/imag planes -> estimated planes."""
    fe = encoder_forward(state, x)
    return decoder_forward(state, mask_apply(state, backbone_forward(state, fe), fe))


def enhance_tensor(state: ModelState, noisy: Tensor) -> Tensor:
    """Differentiable waveform-to-waveform pass for ``noisy: [B, len]``."""
    cfg = state.config.stft
    length = noisy.shape[-1]
    spec = dsp.stft_tensor(noisy, cfg)  # [B, T, F, 2]
    x = T.transpose(spec, (0, 3, 1, 2))  # real/imag as input channels: [B, 2, T, F]
    y = spectrum_forward(state, x)
    return dsp.istft_tensor(T.transpose(y, (0, 2, 3, 1)), cfg, length)


def enhance(state: ModelState, clip: dsp.AudioClip) -> dsp.AudioClip:
    if clip.sample_rate != dsp.SAMPLE_RATE:
        raise ValueError(f"unsupported sample rate: {clip.sample_rate}")
    samples = clip.samples.data.astype(state.dtype).reshape(1, -1)
    with T.no_grad():
        out = enhance_tensor(state, Tensor(samples))
    return dsp.AudioClip(Tensor(out.data.reshape(-1)), clip.sample_rate)


# ---------------------------------------------------------------------------
# Accounting
# ---------------------------------------------------------------------------


def count_params(state: ModelState) -> int:
    return P.count(state)


def conv2d_macs(c_in: int, c_out: int, k: int, frames: int, bins: int) -> int:
    return c_in * c_out * k * k * frames * bins


def _ssm_macs(c: int, n: int) -> int:
    # projections to delta/B/C, discretization (delta*A, phi*B, *x), state update, readout, skip
    return c * c + 2 * c * n + 3 * c * n + c * n + c * n + c


def flops_breakdown(cfg: ModelConfig, frames: int) -> dict[str, int]:
    """Multiply-accumulates per stage for ``frames`` STFT frames.

    Only work that scales with the number of time-frequency positions is
    counted; the CIB bottleneck (about C*C/2 MACs per clip, independent of
    length) and the STFT/iSTFT are left out, which keeps the total exactly
    proportional to ``frames``.
    """
    c, n, f = cfg.channels, cfg.state_dim, cfg.bins
    pos = frames * f
    bi = 2 * _ssm_macs(c, n)
    per_block = 0
    if not cfg.disable_bsb:
        per_block += (c * c * cfg.band_kernel + 2 * c * c + bi) * pos
    if not cfg.disable_srb:
        split = 0 if cfg.no_channel_split else c * cfg.srb_kernel
        per_block += (3 * c * c + split + bi) * pos
    if not cfg.disable_cib:
        per_block += c * pos
    per_block += 3 * c * pos
    return {
        "encoder": conv2d_macs(2, c, 3, frames, f),
        "tprb": per_block * cfg.total_blocks,
        "group_conv": conv2d_macs(c, c, 3, frames, f) * cfg.groups,
        "mask": (2 * c * c + c) * pos,
        "decoder": conv2d_macs(c, 2, 3, frames, f),
    }


def count_flops(cfg: ModelConfig, duration_s: float) -> float:
    """Analytic MAC count for ``duration_s`` seconds of 16 kHz audio.

    Uses the steady frame rate ``sample_rate / hop`` rather than the framed
    count ``len // hop + 1``, so the result is exactly linear in duration.
    """
    if duration_s <= 0:
        raise ValueError("duration must be positive")
    per_frame = sum(flops_breakdown(cfg, 1).values())
    return per_frame * duration_s * dsp.SAMPLE_RATE / cfg.hop
