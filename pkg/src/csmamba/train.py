"""Training loop over synthetic mixtures with plateau halving and best-checkpointing."""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .checkpoint import checkpoint_save
from .data import SynthMixConfig, make_set
from .losses import LossConfig, total_loss
from .model import ConfigError, ModelConfig, ModelState, build_model, enhance_tensor
from .optim import NonFiniteGradientError, OptimState, adam_step, lr_plateau_update
from .params import iter_named
from .tensor import Rng, Tape, Tensor

BEST_CKPT = "best.ckpt"
REPORT = "report.jsonl"
SUMMARY = "summary.json"


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: SynthMixConfig = field(default_factory=SynthMixConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    epochs: int = 10
    batch_size: int = 4
    train_size: int = 64
    val_size: int = 8
    lr: float = 1e-3
    patience: int = 5
    seed: int = 0

    def __post_init__(self):
        for key in ("epochs", "batch_size", "train_size", "val_size", "patience"):
            if int(getattr(self, key)) < 1:
                raise ConfigError(key, "must be a positive integer")
        if not self.lr > 0:
            raise ConfigError("lr", "must be positive")

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(self.train_size / self.batch_size)

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["model"] = self.model.to_dict()
        out["data"] = asdict(self.data)
        out["loss"] = asdict(self.loss)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        for key in d:
            if key not in known:
                raise ConfigError(key, "unknown training config key")
        kw = dict(d)
        kw["model"] = ModelConfig.from_dict(d.get("model", {}))
        kw["data"] = _sub(SynthMixConfig, d.get("data", {}), "data")
        kw["loss"] = _sub(LossConfig, d.get("loss", {}), "loss")
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _sub(kind, d: dict, prefix: str):
    known = {f.name for f in fields(kind)}
    for key in d:
        if key not in known:
            raise ConfigError(f"{prefix}.{key}", "unknown config key")
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    try:
        return kind(**kw)
    except ValueError as exc:
        raise ConfigError(prefix, str(exc)) from exc


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class TrainReport:
    initial_val_loss: float
    epochs: list[EpochRecord] = field(default_factory=list)
    best_val_loss: float = math.inf
    best_epoch: int = 0
    steps: int = 0
    seconds: float = 0.0
    aborted: str | None = None

    @property
    def final_val_loss(self) -> float:
        return self.epochs[-1].val_loss if self.epochs else self.initial_val_loss

    def summary(self) -> dict:
        return {
            "initial_val_loss": self.initial_val_loss,
            "final_val_loss": self.final_val_loss,
            "best_val_loss": self.best_val_loss,
            "best_epoch": self.best_epoch,
            "epochs": len(self.epochs),
            "steps": self.steps,
            "seconds": round(self.seconds, 3),
            "aborted": self.aborted,
        }


def evaluate_loss(state: ModelState, clean: np.ndarray, noisy: np.ndarray, cfg: LossConfig,
                  batch_size: int) -> float:
    """Mean loss over ``clean``/``noisy`` rows, batch by batch in index order."""
    total, count = 0.0, 0
    with T.no_grad():
        for lo in range(0, len(clean), batch_size):
            c = Tensor(clean[lo:lo + batch_size])
            est = enhance_tensor(state, Tensor(noisy[lo:lo + batch_size]))
            total += float(total_loss(est, c, cfg).data) * len(c.data)
            count += len(c.data)
    return total / count


def _save_atomic(state: ModelState, path: Path) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    checkpoint_save(state, state.config, tmp)
    os.replace(tmp, path)


def train_loop(state: ModelState, optim: OptimState, cfg: TrainConfig, out_dir=None,
               echo: Callable[[str], None] | None = None) -> TrainReport:
    """Train ``state`` in place.

    The validation loss is measured before the first step and after every
    epoch; each epoch feeds :func:`lr_plateau_update` and the best state is
    checkpointed to ``out_dir/best.ckpt``.  A non-finite loss or gradient
    stops training with the last good checkpoint left untouched.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / REPORT).write_text("")
    start = time.perf_counter()
    train_idx = np.arange(cfg.train_size)
    clean_tr, noisy_tr, _ = make_set(cfg.data, train_idx)
    clean_va, noisy_va, _ = make_set(cfg.data, np.arange(cfg.train_size, cfg.train_size + cfg.val_size))

    named = list(iter_named(state))
    names = [n for n, _ in named]
    params = [t for _, t in named]

    report = TrainReport(evaluate_loss(state, clean_va, noisy_va, cfg.loss, cfg.batch_size))
    report.best_val_loss = report.initial_val_loss
    if out is not None:
        _save_atomic(state, out / BEST_CKPT)
    if echo:
        echo(f"epoch 0  val_loss={report.initial_val_loss:.4f}")

    for epoch in range(1, cfg.epochs + 1):
        order = Rng(cfg.seed, f"shuffle/{epoch}").generator.permutation(train_idx)
        losses = []
        for lo in range(0, len(order), cfg.batch_size):
            rows = order[lo:lo + cfg.batch_size]
            for p in params:
                p.requires_grad = True
            with Tape() as tape:
                est = enhance_tensor(state, Tensor(noisy_tr[rows]))
                loss = total_loss(est, Tensor(clean_tr[rows]), cfg.loss)
            value = float(loss.data)
            if not math.isfinite(value):
                report.aborted = f"non-finite loss at epoch {epoch}, step {report.steps + 1}"
                break
            grads = tape.backward(loss, wrt=params)
            try:
                adam_step(optim, params, grads, names)
            except NonFiniteGradientError as exc:
                report.aborted = f"{exc} at epoch {epoch}, step {report.steps + 1}"
                break
            losses.append(value)
            report.steps += 1
        if report.aborted:
            break
        val = evaluate_loss(state, clean_va, noisy_va, cfg.loss, cfg.batch_size)
        if not math.isfinite(val):
            report.aborted = f"non-finite validation loss at epoch {epoch}"
            break
        lr_used = optim.lr
        rec = EpochRecord(epoch, float(np.mean(losses)), val, lr_used)
        report.epochs.append(rec)
        if val < report.best_val_loss:
            report.best_val_loss, report.best_epoch = val, epoch
            if out is not None:
                _save_atomic(state, out / BEST_CKPT)
        lr_plateau_update(optim, val)
        if out is not None:
            with open(out / REPORT, "a") as fh:
                fh.write(json.dumps(asdict(rec)) + "\n")
        if echo:
            echo(f"epoch {epoch}  train_loss={rec.train_loss:.4f}  val_loss={val:.4f}  lr={lr_used:g}")

    report.seconds = time.perf_counter() - start
    if out is not None:
        (out / SUMMARY).write_text(json.dumps(report.summary(), indent=2, sort_keys=True) + "\n")
    return report


HELDOUT_OFFSET = 1_000_000  # held-out indices never overlap train/val indices


def heldout_si_snri(state: ModelState, cfg: TrainConfig, count: int = 32, snr_db: float = 0.0):
    """Mean SI-SNRi of ``state`` over ``count`` fresh mixtures at ``snr_db``."""
    from dataclasses import replace

    from .metrics import MetricReport

    data = replace(cfg.data, snr_range_db=(snr_db, snr_db))
    clean, noisy, _ = make_set(data, np.arange(HELDOUT_OFFSET, HELDOUT_OFFSET + count))
    report = MetricReport()
    with T.no_grad():
        for lo in range(0, count, cfg.batch_size):
            est = enhance_tensor(state, Tensor(noisy[lo:lo + cfg.batch_size])).data
            for j, row in enumerate(est):
                i = lo + j
                report.add(f"heldout_{i:03d}", row, noisy[i], clean[i])
    return report


def train(cfg: TrainConfig, out_dir=None, echo=None) -> tuple[ModelState, TrainReport]:
    """Build a fresh model from ``cfg`` and train it."""
    state = build_model(cfg.model, seed=cfg.seed)
    optim = OptimState(lr=cfg.lr, patience=cfg.patience)
    return state, train_loop(state, optim, cfg, out_dir, echo)
