"""``csmamba`` command line: enhance, train, eval, info, gradcheck.

Exit codes: 0 success, 1 a check or run failed, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import dsp
from .checkpoint import CheckpointError, checkpoint_load
from .metrics import SI_SNR_CAP_DB, MetricReport
from .model import ConfigError, ModelConfig, build_model, count_flops, count_params, enhance

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
THREADS_ENV = "CSMAMBA_THREADS"
FAULT_ENV = "CSMAMBA_INJECT_FAULT"


class InputError(Exception):
    """Bad user input; reported on stderr with exit code 2."""


def _err(msg: str) -> None:
    print(f"csmamba: error: {msg}", file=sys.stderr)


def _thread_limit(flag: int | None):
    raw = os.environ.get(THREADS_ENV)
    if raw:
        try:
            flag = int(raw)
        except ValueError:
            raise InputError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    n = 1 if flag is None else flag
    if n < 1:
        raise InputError(f"thread count must be positive, got {n}")
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return nullcontext()
    return threadpool_limits(limits=n)


def _load_checkpoint(path: str):
    if not Path(path).is_file():
        raise InputError(f"checkpoint not found: {path}")
    try:
        return checkpoint_load(path)
    except CheckpointError as exc:
        raise InputError(f"{path}: {exc}") from None


def _read_wav(path) -> dsp.AudioClip:
    if not Path(path).is_file():
        raise InputError(f"input not found: {path}")
    try:
        return dsp.wav_read(path)
    except dsp.WavFormatError as exc:
        raise InputError(str(exc)) from None


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_enhance(args) -> int:
    state, _ = _load_checkpoint(args.checkpoint)
    clip = _read_wav(args.input)
    if len(clip) < state.config.fft_size:
        raise InputError(f"{args.input}: {len(clip)} samples is shorter than one frame "
                         f"({state.config.fft_size})")
    start = time.perf_counter()
    out = enhance(state, clip)
    elapsed = time.perf_counter() - start
    dsp.wav_write(args.output, out)
    duration = len(clip) / clip.sample_rate
    print(f"duration {duration:.3f} s  processing {elapsed:.3f} s  "
          f"realtime factor {elapsed / duration:.3f}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import TrainConfig, heldout_si_snri, train
    from .plotting import training_curves

    try:
        cfg = TrainConfig.load(args.config)
    except FileNotFoundError:
        raise InputError(f"config not found: {args.config}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{args.config}: not valid JSON ({exc})") from None
    if args.seed is not None:
        from dataclasses import replace
        cfg = replace(cfg, seed=args.seed)
    out = Path(args.out)
    print(f"training {cfg.total_steps} steps "
          f"({cfg.epochs} epochs x {cfg.steps_per_epoch} batches of {cfg.batch_size})", flush=True)
    state, report = train(cfg, out, echo=lambda s: print(s, flush=True))
    training_curves(report, out / "training_curves.png")
    summary = report.summary()
    if not report.aborted:
        metrics = heldout_si_snri(state, cfg)
        summary["heldout_si_snri_db"] = metrics.mean_si_snri
        summary["heldout_files"] = len(metrics.files)
        from .plotting import si_snri_histogram
        si_snri_histogram([f.si_snri for f in metrics.files], out / "heldout_si_snri.png",
                          "held-out SI-SNRi at 0 dB input")
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    if report.aborted:
        _err(f"training aborted: {report.aborted}; last good checkpoint kept in {out}")
        return EXIT_FAIL
    return EXIT_OK


def _collect(path: Path) -> dict[str, Path]:
    if path.is_file():
        return {path.stem: path}
    if path.is_dir():
        return {p.stem: p for p in sorted(path.glob("*.wav"))}
    raise InputError(f"not found: {path}")


def cmd_eval(args) -> int:
    clean_files, noisy_files = _collect(Path(args.clean)), _collect(Path(args.noisy))
    if Path(args.clean).is_file() and Path(args.noisy).is_file():
        noisy_files = {next(iter(clean_files)): next(iter(noisy_files.values()))}
    state = _load_checkpoint(args.checkpoint)[0] if args.checkpoint else None
    report = MetricReport()
    for stem in sorted(set(clean_files) | set(noisy_files)):
        if stem not in clean_files or stem not in noisy_files:
            report.skipped.append(stem)
            print(f"warning: {stem}: no matching file in the other directory, skipped", file=sys.stderr)
            continue
        clean, noisy = _read_wav(clean_files[stem]), _read_wav(noisy_files[stem])
        if len(clean) != len(noisy):
            report.skipped.append(stem)
            print(f"warning: {stem}: length mismatch ({len(clean)} vs {len(noisy)}), skipped",
                  file=sys.stderr)
            continue
        enhanced = enhance(state, noisy) if state is not None else noisy
        m = report.add(stem, enhanced, noisy, clean)
        print(json.dumps({"file": stem, "si_snr_db": m.si_snr, "si_snr_noisy_db": m.si_snr_noisy,
                          "si_snri_db": m.si_snri, "pesq": None, "stoi": None}))
    print(json.dumps({"summary": "clip-mean", "files": len(report.files),
                      "skipped": len(report.skipped), "mean_si_snr_db": report.mean_si_snr,
                      "mean_si_snri_db": report.mean_si_snri}))
    _print_table(report, sys.stderr)
    if args.plot and report.files:
        from .plotting import si_snri_histogram
        si_snri_histogram([f.si_snri for f in report.files], args.plot)
    if not report.files:
        _err("no evaluable file pairs")
        return EXIT_USAGE
    return EXIT_OK


def _print_table(report: MetricReport, stream) -> None:
    width = max([4] + [len(f.name) for f in report.files])
    head = f"{'file':<{width}}  {'SI-SNR':>8}  {'SI-SNRi':>8}  {'PESQ':>6}  {'STOI':>6}"
    print(head, file=stream)
    print("-" * len(head), file=stream)
    for f in report.files:
        print(f"{f.name:<{width}}  {f.si_snr:8.2f}  {f.si_snri:8.2f}  {'':>6}  {'':>6}", file=stream)
    print("-" * len(head), file=stream)
    print(f"{'mean':<{width}}  {report.mean_si_snr:8.2f}  {report.mean_si_snri:8.2f}  "
          f"{'':>6}  {'':>6}", file=stream)
    print(f"{len(report.files)} files scored, {len(report.skipped)} skipped", file=stream)


def _model_config_from(path: str) -> ModelConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise InputError(f"config not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: not valid JSON ({exc})") from None
    if "model" in doc:  # a training config
        from .train import TrainConfig
        return TrainConfig.from_dict(doc).model
    return ModelConfig.from_dict(doc)


def cmd_info(args) -> int:
    if args.checkpoint:
        state, cfg = _load_checkpoint(args.checkpoint)
    else:
        cfg = _model_config_from(args.config) if args.config else ModelConfig()
        state = build_model(cfg, seed=0)
    macs = count_flops(cfg, 1.0)
    print(f"parameters      {count_params(state):,}")
    print(f"MACs per second {macs:,.0f} ({macs / 1e9:.2f} G)")
    print(f"band layout     {cfg.layout}")
    print("config")
    for key, value in cfg.to_dict().items():
        print(f"  {key:<18} {value}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite
    from .tensor import inject_adjoint_fault

    faults = [f for f in os.environ.get(FAULT_ENV, "").split(",") if f]
    start = time.perf_counter()
    with inject_adjoint_fault(*faults):
        rows = run_suite(args.scale, args.precision, echo=print)
    failed = [(name, err) for name, err, ok in rows if not ok]
    print(f"{len(rows) - len(failed)}/{len(rows)} passed in {time.perf_counter() - start:.1f}s")
    for name, err in failed:
        _err(f"gradient check failed for {name}: relative error {err:.3e}")
    return EXIT_FAIL if failed else EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="csmamba",
        description="Band-split selective state-space speech enhancement at desk scale.",
        epilog=f"Exit codes: 0 success, 1 check/run failure, 2 usage or input error. "
               f"{THREADS_ENV} overrides --threads (default 1).")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def threads(p):
        p.add_argument("--threads", type=int, default=None, help="worker threads for BLAS (default 1)")

    p = sub.add_parser("enhance", help="enhance a 16 kHz mono WAV file")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--checkpoint", required=True)
    threads(p)
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("train", help="train on synthetic mixtures from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="directory for checkpoints, report and figures")
    p.add_argument("--seed", type=int, default=None)
    threads(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser(
        "eval", help="SI-SNR / SI-SNRi over files paired by stem",
        description=f"Scores enhanced audio against clean references.  Files are paired by "
                    f"stem.  SI-SNR is capped at +/-{SI_SNR_CAP_DB:g} dB so exact matches stay "
                    f"finite.  JSON records go to stdout, the aligned table to stderr.  "
                    f"Without --checkpoint the noisy files are scored as-is.")
    p.add_argument("--clean", required=True)
    p.add_argument("--noisy", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--plot", default=None, metavar="PNG", help="write a per-file SI-SNRi histogram")
    threads(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("info", help="parameter count, MACs per second and band layout")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--checkpoint")
    g.add_argument("--config")
    p.set_defaults(func=cmd_info)

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    p.add_argument("--scale", choices=("tiny", "small"), default="tiny")
    p.add_argument("--precision", type=int, choices=(32, 64), default=64)
    threads(p)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        with _thread_limit(getattr(args, "threads", None)):
            return args.func(args)
    except InputError as exc:
        _err(str(exc))
    except ConfigError as exc:
        _err(f"invalid config key {exc.key!r}: {exc}")
    except (ValueError, OSError) as exc:
        _err(str(exc))
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
