"""Synthetic speech-like mixtures for desk-scale training.

Targets are harmonic tones with a wandering pitch and a syllable-rate
amplitude envelope; interferers are white or pink noise mixed at a drawn SNR.
Every pair is a pure function of ``(seed, index)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dsp import SAMPLE_RATE, AudioClip
from .tensor import Rng, Tensor

_DATA_STREAM = 1 << 40  # keeps data streams clear of parameter streams
HEADROOM = 0.99


@dataclass(frozen=True)
class SynthMixConfig:
    f0_range: tuple[float, float] = (90.0, 300.0)
    harmonics: tuple[int, int] = (8, 16)
    envelope_rate_hz: float = 4.0
    noise: str = "white"
    snr_range_db: tuple[float, float] = (-5.0, 5.0)
    clip_seconds: float = 1.0
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.snr_range_db
        if not -20 <= lo <= hi <= 20:
            raise ValueError(f"snr_range_db must lie within [-20, 20], got {self.snr_range_db}")
        if self.clip_seconds < 0.25:
            raise ValueError("clip_seconds must be at least 0.25")
        if self.noise not in ("white", "pink"):
            raise ValueError(f"noise must be 'white' or 'pink', got {self.noise!r}")
        if not 0 < self.f0_range[0] <= self.f0_range[1]:
            raise ValueError(f"bad f0_range {self.f0_range}")
        if not 1 <= self.harmonics[0] <= self.harmonics[1]:
            raise ValueError(f"bad harmonics range {self.harmonics}")

    @property
    def length(self) -> int:
        return int(round(self.clip_seconds * SAMPLE_RATE))


def _smooth_curve(rng: Rng, length: int, rate_hz: float, lo: float, hi: float) -> np.ndarray:
    """Piecewise-linear random curve through control points spaced at ``rate_hz``."""
    n_ctrl = max(2, int(np.ceil(length / SAMPLE_RATE * rate_hz)) + 2)
    ctrl = rng.uniform(lo, hi, n_ctrl)
    return np.interp(np.linspace(0, n_ctrl - 1, length), np.arange(n_ctrl), ctrl)


def pink_noise(rng: Rng, length: int) -> np.ndarray:
    spec = np.fft.rfft(rng.normal((length,)))
    f = np.arange(spec.size, dtype=np.float64)
    f[0] = 1.0
    return np.fft.irfft(spec / np.sqrt(f), n=length)


def _samples(x) -> np.ndarray:
    if isinstance(x, AudioClip):
        x = x.samples
    if isinstance(x, Tensor):
        x = x.data
    return np.asarray(x, dtype=np.float64)


def mix_at_snr(clean, noise, snr_db: float) -> AudioClip:
    """Scale ``noise`` so that ``10*log10(P_clean / P_noise) == snr_db`` and add it."""
    c, n = _samples(clean), _samples(noise)
    if c.shape != n.shape:
        raise ValueError(f"length mismatch: {c.shape} vs {n.shape}")
    pc, pn = np.mean(c * c), np.mean(n * n)
    if pc <= 0 or pn <= 0:
        raise ValueError("clean and noise must both have positive power")
    gain = np.sqrt(pc / (pn * 10.0 ** (snr_db / 10.0)))
    return AudioClip(Tensor(c + gain * n, dtype=np.float64))


def harmonic_target(rng: Rng, cfg: SynthMixConfig) -> np.ndarray:
    length = cfg.length
    f0_lo, f0_hi = cfg.f0_range
    log_f0 = _smooth_curve(rng, length, 6.0, np.log(f0_lo), np.log(f0_hi))
    f0 = np.exp(log_f0)
    phase = 2 * np.pi * np.cumsum(f0) / SAMPLE_RATE
    n_harm = int(rng.generator.integers(cfg.harmonics[0], cfg.harmonics[1] + 1))
    out = np.zeros(length)
    for k in range(1, n_harm + 1):
        amp = rng.uniform(0.5, 1.0) / k
        audible = k * f0 < 0.45 * SAMPLE_RATE
        out += audible * amp * np.sin(k * phase + rng.uniform(0, 2 * np.pi))
    env = np.clip(_smooth_curve(rng, length, cfg.envelope_rate_hz, -0.3, 1.0), 0.05, None)
    width = SAMPLE_RATE // 50
    env = np.convolve(env, np.ones(width) / width, mode="same")
    out *= env
    return out * (0.9 / np.max(np.abs(out)))


def synth_pair(cfg: SynthMixConfig, index: int) -> tuple[AudioClip, AudioClip, float]:
    """Deterministic ``(clean, noisy, snr_db)`` for ``index``."""
    rng = Rng(cfg.seed, _DATA_STREAM + int(index))
    clean = harmonic_target(rng, cfg)
    noise = rng.normal((cfg.length,)) if cfg.noise == "white" else pink_noise(rng, cfg.length)
    snr = float(rng.uniform(*cfg.snr_range_db))
    noisy = _samples(mix_at_snr(clean, noise, snr))
    peak = max(np.max(np.abs(noisy)), np.max(np.abs(clean)))
    if peak > HEADROOM:
        clean, noisy = clean * (HEADROOM / peak), noisy * (HEADROOM / peak)
    return (AudioClip(Tensor(clean.astype(np.float32))),
            AudioClip(Tensor(noisy.astype(np.float32))), snr)


def make_set(cfg: SynthMixConfig, indices) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack pairs into ``clean [N, len]``, ``noisy [N, len]``, ``snr [N]`` arrays."""
    pairs = [synth_pair(cfg, i) for i in indices]
    clean = np.stack([p[0].samples.data for p in pairs])
    noisy = np.stack([p[1].samples.data for p in pairs])
    return clean, noisy, np.array([p[2] for p in pairs])
