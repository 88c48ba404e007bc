"""STFT analysis/synthesis, real/imaginary packing and WAV I/O."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

SAMPLE_RATE = 16000


class WavFormatError(ValueError):
    """A WAV file uses a layout this package does not read."""


@dataclass(frozen=True)
class StftConfig:
    """Framing parameters.

    ``win_length`` shorter than ``fft_size`` gives a window zero-padded on both
    sides to ``fft_size``.  ``window`` is ``"hamming"`` (model front end) or
    ``"hann"`` (loss side); both are the periodic variants.
    """

    fft_size: int = 512
    hop: int = 256
    window: str = "hamming"
    win_length: int | None = None
    centered: bool = True

    def __post_init__(self):
        n = self.fft_size
        if n < 2 or n & (n - 1):
            raise ValueError(f"fft_size must be a power of two, got {n}")
        if not 0 < self.hop <= n:
            raise ValueError(f"hop must be in (0, fft_size], got {self.hop}")
        if self.window not in ("hamming", "hann"):
            raise ValueError(f"unknown window {self.window!r}")
        if self.win_length is not None and not 0 < self.win_length <= n:
            raise ValueError(f"win_length must be in (0, fft_size], got {self.win_length}")

    @property
    def bins(self) -> int:
        return self.fft_size // 2 + 1

    def window_array(self, dtype=np.float64) -> np.ndarray:
        m = self.win_length or self.fft_size
        k = np.arange(m)
        if self.window == "hamming":
            w = 0.54 - 0.46 * np.cos(2 * np.pi * k / m)
        else:
            w = 0.5 - 0.5 * np.cos(2 * np.pi * k / m)
        left = (self.fft_size - m) // 2
        out = np.zeros(self.fft_size)
        out[left:left + m] = w
        return out.astype(dtype)

    def num_frames(self, length: int) -> int:
        if self.centered:
            return length // self.hop + 1
        if length < self.fft_size:
            raise ShapeError(f"signal of {length} samples shorter than one frame")
        return 1 + (length - self.fft_size) // self.hop


@dataclass
class ComplexSpectrum:
    real: Tensor  # [..., frames, bins]
    imag: Tensor

    @property
    def frames(self) -> int:
        return self.real.shape[-2]

    @property
    def bins(self) -> int:
        return self.real.shape[-1]


@dataclass
class AudioClip:
    samples: Tensor
    sample_rate: int = SAMPLE_RATE

    def __len__(self) -> int:
        return self.samples.shape[-1]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


def _reflect(pos: np.ndarray, length: int) -> np.ndarray:
    if length == 1:
        return np.zeros_like(pos)
    period = 2 * (length - 1)
    m = np.mod(pos, period)
    return np.where(m >= length, period - m, m)


def frame_index(length: int, cfg: StftConfig) -> np.ndarray:
    """Sample index of every ``(frame, tap)``, reflect padding folded in."""
    frames = cfg.num_frames(length)
    pos = np.arange(frames)[:, None] * cfg.hop + np.arange(cfg.fft_size)[None, :]
    if cfg.centered:
        pos = _reflect(pos - cfg.fft_size // 2, length)
    return pos


def stft_tensor(x: Tensor, cfg: StftConfig) -> Tensor:
    """``[..., len] -> [..., frames, bins, 2]`` (last axis: real, imag)."""
    if x.shape[-1] < 1:
        raise ShapeError("stft of an empty signal")
    frames = T.gather_last(x, frame_index(x.shape[-1], cfg))
    return T.rfft(frames * cfg.window_array(x.dtype))


def wola_denominator(cfg: StftConfig, frames: int) -> np.ndarray:
    """Sum of squared synthesis windows over the padded signal span."""
    w2 = cfg.window_array() ** 2
    out = np.zeros((frames - 1) * cfg.hop + cfg.fft_size)
    for f in range(frames):
        out[f * cfg.hop:f * cfg.hop + cfg.fft_size] += w2
    return out


def istft_tensor(spec: Tensor, cfg: StftConfig, out_len: int) -> Tensor:
    """Weighted overlap-add inverse of :func:`stft_tensor`, trimmed to ``out_len``."""
    frames, bins = spec.shape[-3], spec.shape[-2]
    if bins != cfg.bins:
        raise ShapeError(f"spectrum has {bins} bins, config expects {cfg.bins}")
    n = cfg.fft_size
    span = (frames - 1) * cfg.hop + n
    start = n // 2 if cfg.centered else 0
    if out_len > span - start:
        raise ShapeError(f"out_len {out_len} exceeds the {span - start} samples covered by {frames} frames")
    seg = T.irfft(spec, n) * cfg.window_array(spec.dtype)
    pos = np.arange(frames)[:, None] * cfg.hop + np.arange(n)[None, :]
    ola = T.scatter_add_last(seg, pos, span)
    den = wola_denominator(cfg, frames)
    inv = np.where(den > 1e-10, 1.0 / np.maximum(den, 1e-10), 0.0).astype(spec.dtype)
    return (ola * inv)[..., start:start + out_len]


def stft(clip: AudioClip, cfg: StftConfig = StftConfig()) -> ComplexSpectrum:
    if clip.sample_rate != SAMPLE_RATE:
        raise ValueError(f"unsupported sample rate: {clip.sample_rate} (expected {SAMPLE_RATE})")
    spec = stft_tensor(clip.samples, cfg)
    return ComplexSpectrum(spec[..., 0], spec[..., 1])


def istft(spec: ComplexSpectrum, cfg: StftConfig, out_len: int) -> AudioClip:
    packed = T.stack([spec.real, spec.imag], axis=-1)
    return AudioClip(istft_tensor(packed, cfg, out_len))


def pack_ri(spec: ComplexSpectrum) -> Tensor:
    """``[(B,) frames, bins]`` pair -> ``[B, bins, frames, 2]``."""
    x = T.stack([spec.real, spec.imag], axis=-1)
    if x.ndim == 3:
        x = x.reshape((1,) + x.shape)
    return T.transpose(x, (0, 2, 1, 3))


def unpack_ri(x: Tensor) -> ComplexSpectrum:
    """``[B, bins, frames, 2]`` -> spectrum with ``[B, frames, bins]`` parts."""
    if x.ndim != 4 or x.shape[-1] != 2:
        raise ShapeError(f"expected [B, bins, frames, 2], got {x.shape}")
    y = T.transpose(x, (0, 2, 1, 3))
    return ComplexSpectrum(y[..., 0], y[..., 1])


# ---------------------------------------------------------------------------
# WAV
# ---------------------------------------------------------------------------

_PCM, _FLOAT = 1, 3


def wav_read(path) -> AudioClip:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise WavFormatError(f"{path}: not a RIFF/WAVE file")
    pos, fmt, data = 12, None, None
    while pos + 8 <= len(raw):
        cid, size = raw[pos:pos + 4], struct.unpack_from("<I", raw, pos + 4)[0]
        body = raw[pos + 8:pos + 8 + size]
        if cid == b"fmt ":
            if len(body) < 16:
                raise WavFormatError(f"{path}: truncated fmt chunk")
            fmt = struct.unpack_from("<HHIIHH", body)
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None or data is None:
        raise WavFormatError(f"{path}: missing {'fmt' if fmt is None else 'data'} chunk")
    codec, channels, rate, _, _, bits = fmt
    if codec not in (_PCM, _FLOAT):
        raise WavFormatError(f"{path}: unsupported codec: format tag {codec}")
    if channels != 1:
        raise WavFormatError(f"{path}: unsupported channel count: {channels}")
    if rate != SAMPLE_RATE:
        raise WavFormatError(f"{path}: unsupported sample rate: {rate}")
    if codec == _PCM and bits == 16:
        samples = np.frombuffer(data[: len(data) // 2 * 2], dtype="<i2").astype(np.float32) / 32768.0
    elif codec == _FLOAT and bits == 32:
        samples = np.frombuffer(data[: len(data) // 4 * 4], dtype="<f4").astype(np.float32)
    else:
        raise WavFormatError(f"{path}: unsupported bits per sample: {bits} for format tag {codec}")
    return AudioClip(Tensor(samples.astype(np.float32)), rate)


def quantize_pcm16(samples: np.ndarray) -> np.ndarray:
    """Scale by 32768, round half away from zero, clamp to the int16 range."""
    v = np.asarray(samples, dtype=np.float64) * 32768.0
    v = np.sign(v) * np.floor(np.abs(v) + 0.5)
    return np.clip(v, -32768, 32767).astype("<i2")


def wav_write(path, clip: AudioClip, codec: str = "pcm16") -> None:
    if clip.sample_rate != SAMPLE_RATE:
        raise WavFormatError(f"unsupported sample rate: {clip.sample_rate}")
    samples = np.asarray(clip.samples.data).reshape(-1)
    if codec == "pcm16":
        payload, tag, bits = quantize_pcm16(samples).tobytes(), _PCM, 16
    elif codec == "float32":
        payload, tag, bits = samples.astype("<f4").tobytes(), _FLOAT, 32
    else:
        raise WavFormatError(f"unsupported codec: {codec}")
    block = bits // 8
    fmt = struct.pack("<HHIIHH", tag, 1, SAMPLE_RATE, SAMPLE_RATE * block, block, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt
    body += b"data" + struct.pack("<I", len(payload)) + payload
    if len(payload) & 1:
        body += b"\x00"
    Path(path).write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)
