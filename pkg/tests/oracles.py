"""Slow, obviously-correct reference implementations used only by the tests.

Nothing here imports the package: every oracle is written from the defining
formula with plain loops, 64-bit floats or arbitrary precision.
"""

from __future__ import annotations

import math

import mpmath
import numpy as np


def matmul_loops(a, b):
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for p in range(k):
                s += float(a[i, p]) * float(b[p, j])
            out[i, j] = s
    return out


def conv1d_loops(x, w, bias, groups, padding):
    bsz, cin, t = x.shape
    cout, cpg, k = w.shape
    opg = cout // groups
    t_out = t + 2 * padding - k + 1
    out = np.zeros((bsz, cout, t_out))
    for b in range(bsz):
        for o in range(cout):
            g = o // opg
            for s in range(t_out):
                acc = 0.0 if bias is None else float(bias[o])
                for ci in range(cpg):
                    for j in range(k):
                        pos = s + j - padding
                        if 0 <= pos < t:
                            acc += float(w[o, ci, j]) * float(x[b, g * cpg + ci, pos])
                out[b, o, s] = acc
    return out


def conv2d_loops(x, w, bias, padding):
    bsz, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ho, wo = h + 2 * padding - kh + 1, wd + 2 * padding - kw + 1
    out = np.zeros((bsz, cout, ho, wo))
    for b in range(bsz):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if bias is None else float(bias[o])
                    for c in range(cin):
                        for di in range(kh):
                            for dj in range(kw):
                                y, z = i + di - padding, j + dj - padding
                                if 0 <= y < h and 0 <= z < wd:
                                    acc += float(w[o, c, di, dj]) * float(x[b, c, y, z])
                    out[b, o, i, j] = acc
    return out


def dft_matrix(n):
    """Rows are the direct DFT kernels for bins 0..n/2."""
    k = np.arange(n // 2 + 1)[:, None]
    t = np.arange(n)[None, :]
    return np.exp(-2j * np.pi * ((k * t) % n) / n)


def dft_real(frame):
    """Direct O(n^2) DFT, bins 0..n/2."""
    return dft_matrix(len(frame)) @ np.asarray(frame, dtype=np.float64)


def periodic_window(kind, length, fft_size):
    k = np.arange(length)
    a = 0.54 if kind == "hamming" else 0.5
    w = a - (1 - a) * np.cos(2 * np.pi * k / length)
    out = np.zeros(fft_size)
    left = (fft_size - length) // 2
    out[left:left + length] = w
    return out


def stft_direct(x, fft_size, hop, window):
    """Centered STFT: reflect-pad by fft_size/2, frame, window, direct DFT."""
    pad = fft_size // 2
    xp = np.pad(np.asarray(x, dtype=np.float64), pad, mode="reflect")
    frames = len(x) // hop + 1
    kernel = dft_matrix(fft_size)
    return np.stack([kernel @ (xp[f * hop:f * hop + fft_size] * window) for f in range(frames)])


def mr_stft_direct(est, ref, fft_sizes, hops, wins, floor=1e-7):
    total = 0.0
    for n, h, w in zip(fft_sizes, hops, wins):
        win = periodic_window("hann", w, n)
        sc, lm = [], []
        for e, r in zip(np.atleast_2d(est), np.atleast_2d(ref)):
            me = np.maximum(np.abs(stft_direct(e, n, h, win)), floor)
            mr = np.maximum(np.abs(stft_direct(r, n, h, win)), floor)
            sc.append(np.sqrt(((mr - me) ** 2).sum()) / np.sqrt((mr ** 2).sum()))
            lm.append(np.abs(np.log(mr) - np.log(me)))
        total += np.mean(sc) + np.mean(np.concatenate([v.ravel() for v in lm]))
    return total / len(fft_sizes)


def zoh_closed(a, delta):
    """(exp(delta*a), (exp(delta*a) - 1) / a) at 40 significant digits."""
    with mpmath.workdps(40):
        a_m, d_m = mpmath.mpf(float(a)), mpmath.mpf(float(delta))
        e = mpmath.exp(d_m * a_m)
        return float(e), float((e - 1) / a_m)


def scan_unrolled(a_bar, b_bar_x, c_t, d, x):
    """y[c, t] for h_t = a_t h_{t-1} + b_t, y_t = <c_t, h_t> + d x_t; a_bar etc. [T, C, n]."""
    t_len, ch, n = a_bar.shape
    y = np.zeros((ch, t_len))
    for c in range(ch):
        h = [0.0] * n
        for t in range(t_len):
            for i in range(n):
                h[i] = float(a_bar[t, c, i]) * h[i] + float(b_bar_x[t, c, i])
            y[c, t] = math.fsum(h[i] * float(c_t[t, i]) for i in range(n)) + float(d[c]) * float(x[c, t])
    return y


def adam_unrolled(w0, grad_fn, steps, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    w, m, v = float(w0), 0.0, 0.0
    trace = []
    for t in range(1, steps + 1):
        g = grad_fn(w)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        w = w - lr * mhat / (math.sqrt(vhat) + eps)
        trace.append(w)
    return trace


def si_snr_direct(est, ref):
    e = [float(v) for v in est]
    r = [float(v) for v in ref]
    me, mr = math.fsum(e) / len(e), math.fsum(r) / len(r)
    e = [v - me for v in e]
    r = [v - mr for v in r]
    scale = math.fsum(x * y for x, y in zip(e, r)) / math.fsum(y * y for y in r)
    target = [scale * y for y in r]
    noise = [x - s for x, s in zip(e, target)]
    return 10 * math.log10(math.fsum(s * s for s in target) / math.fsum(v * v for v in noise))
