"""Scale-invariant SNR and its improvement over the unprocessed input."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dsp import AudioClip
from .tensor import Tensor

SI_SNR_CAP_DB = 60.0


def _vec(x) -> np.ndarray:
    if isinstance(x, AudioClip):
        x = x.samples
    if isinstance(x, Tensor):
        x = x.data
    return np.asarray(x, dtype=np.float64).reshape(-1)


def si_snr(est, ref) -> float:
    """SI-SNR in dB, clamped to ``[-60, +60]``.

    Both signals are made zero-mean and the estimate is projected onto the
    reference; the cap keeps exact (or exactly rescaled) matches finite.
    """
    e, r = _vec(est), _vec(ref)
    if e.shape != r.shape:
        raise ValueError(f"length mismatch: {e.size} vs {r.size}")
    e = e - e.mean()
    r = r - r.mean()
    rr = np.dot(r, r)
    if rr == 0:
        raise ValueError("reference is zero after mean removal")
    target = (np.dot(e, r) / rr) * r
    noise = e - target
    tt, nn = np.dot(target, target), np.dot(noise, noise)
    if nn <= tt * 10 ** (-SI_SNR_CAP_DB / 10):
        return SI_SNR_CAP_DB
    if tt <= nn * 10 ** (-SI_SNR_CAP_DB / 10):
        return -SI_SNR_CAP_DB
    return float(10 * np.log10(tt / nn))


def si_snri(enhanced, noisy, ref) -> float:
    return si_snr(enhanced, ref) - si_snr(noisy, ref)


@dataclass
class FileMetric:
    name: str
    si_snr: float
    si_snr_noisy: float

    @property
    def si_snri(self) -> float:
        return self.si_snr - self.si_snr_noisy


@dataclass
class MetricReport:
    files: list[FileMetric] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)

    def add(self, name: str, enhanced, noisy, ref) -> FileMetric:
        m = FileMetric(name, si_snr(enhanced, ref), si_snr(noisy, ref))
        self.files.append(m)
        return m

    @property
    def mean_si_snr(self) -> float:
        return float(np.mean([f.si_snr for f in self.files])) if self.files else float("nan")

    @property
    def mean_si_snri(self) -> float:
        return float(np.mean([f.si_snri for f in self.files])) if self.files else float("nan")
