"""Adam with a plateau-halving learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Tensor


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class OptimState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 5
    factor: float = 0.5
    step: int = 0
    best: float = math.inf
    bad_epochs: int = 0
    m: list[np.ndarray] = field(default_factory=list, repr=False)
    v: list[np.ndarray] = field(default_factory=list, repr=False)


def adam_step(optim: OptimState, params: Sequence[Tensor], grads: Sequence[np.ndarray],
              names: Sequence[str] | None = None) -> None:
    """Bias-corrected Adam update, applied by rebinding each parameter's data."""
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            label = names[i] if names is not None else f"#{i}"
            raise NonFiniteGradientError(f"non-finite gradient for parameter {label}")
    if not optim.m:
        optim.m = [np.zeros_like(p.data) for p in params]
        optim.v = [np.zeros_like(p.data) for p in params]
    optim.step += 1
    b1, b2 = optim.beta1, optim.beta2
    c1 = 1 - b1 ** optim.step
    c2 = 1 - b2 ** optim.step
    for p, g, m, v in zip(params, grads, optim.m, optim.v):
        g = g.astype(p.dtype, copy=False)
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = optim.lr * (m / c1) / (np.sqrt(v / c2) + optim.eps)
        p.data = (p.data - update).astype(p.dtype)


def lr_plateau_update(optim: OptimState, val_loss: float) -> bool:
    """Record a validation loss; halve the rate after ``patience`` non-improving epochs.

    Returns True when the rate was reduced.
    """
    if val_loss < optim.best:
        optim.best = val_loss
        optim.bad_epochs = 0
        return False
    optim.bad_epochs += 1
    if optim.bad_epochs >= optim.patience:
        optim.lr *= optim.factor
        optim.bad_epochs = 0
        return True
    return False
