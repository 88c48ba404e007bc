"""Time-domain L1 plus multi-resolution STFT loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .dsp import AudioClip, StftConfig, stft_tensor
from .tensor import ShapeError, Tensor


class DegenerateReferenceError(ValueError):
    """The reference signal is all zeros."""


@dataclass(frozen=True)
class LossConfig:
    fft_sizes: tuple[int, ...] = (512, 1024, 2048)
    hops: tuple[int, ...] = (50, 120, 240)
    win_lengths: tuple[int, ...] = (240, 600, 1200)
    time_weight: float = 1.0
    spec_weight: float = 1.0
    mag_floor: float = 1e-7

    def __post_init__(self):
        for key in ("fft_sizes", "hops", "win_lengths"):
            object.__setattr__(self, key, tuple(int(v) for v in getattr(self, key)))
        if not len(self.fft_sizes) == len(self.hops) == len(self.win_lengths):
            raise ValueError("fft_sizes, hops and win_lengths must be index-aligned")
        for n, w in zip(self.fft_sizes, self.win_lengths):
            if w > n:
                raise ValueError(f"win_length {w} exceeds fft_size {n}")

    def resolutions(self) -> list[StftConfig]:
        return [StftConfig(n, h, "hann", w)
                for n, h, w in zip(self.fft_sizes, self.hops, self.win_lengths)]


def _samples(x) -> Tensor:
    return x.samples if isinstance(x, AudioClip) else T.as_tensor(x)


def l1_time_loss(est, ref) -> Tensor:
    est, ref = _samples(est), _samples(ref)
    if est.shape != ref.shape:
        raise ShapeError(f"length mismatch: {est.shape} vs {ref.shape}")
    return T.mean(T.tabs(est - ref))


def magnitude(spec: Tensor, floor: float) -> Tensor:
    """``|S|`` from a ``[..., 2]`` real/imag tensor, floored at ``floor``."""
    power = T.tsum(spec * spec, axis=-1)
    return T.sqrt(T.clamp_min(power, floor * floor))


def mr_stft_terms(est, ref, cfg: LossConfig = LossConfig()) -> list[tuple[Tensor, Tensor]]:
    """Per resolution: (spectral convergence, mean log-magnitude L1).

    Spectral convergence is computed per signal and averaged over leading
    (batch) dimensions.
    """
    est, ref = _samples(est), _samples(ref)
    if est.shape != ref.shape:
        raise ShapeError(f"length mismatch: {est.shape} vs {ref.shape}")
    if est.shape[-1] < max(cfg.fft_sizes):
        raise ShapeError(f"signals of {est.shape[-1]} samples shorter than fft size {max(cfg.fft_sizes)}")
    ref_rows = ref.data.reshape(-1, ref.shape[-1])
    if np.any(np.all(ref_rows == 0, axis=-1)):
        raise DegenerateReferenceError("reference signal is all zeros")
    terms = []
    for scfg in cfg.resolutions():
        with T.no_grad():
            mr = magnitude(stft_tensor(Tensor(ref.data), scfg), cfg.mag_floor)
        me = magnitude(stft_tensor(est, scfg), cfg.mag_floor)
        sc = T.mean(T.norm(mr - me, axis=(-2, -1)) / T.norm(mr, axis=(-2, -1)))
        logmag = T.mean(T.tabs(T.log(mr) - T.log(me)))
        terms.append((sc, logmag))
    return terms


def mr_stft_loss(est, ref, cfg: LossConfig = LossConfig()) -> Tensor:
    terms = mr_stft_terms(est, ref, cfg)
    total = terms[0][0] + terms[0][1]
    for sc, lm in terms[1:]:
        total = total + sc + lm
    return total / len(terms)


def total_loss(est, ref, cfg: LossConfig = LossConfig()) -> Tensor:
    loss = cfg.time_weight * l1_time_loss(est, ref)
    if cfg.spec_weight:
        loss = loss + cfg.spec_weight * mr_stft_loss(est, ref, cfg)
    return loss
