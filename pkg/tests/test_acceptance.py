"""Acceptance criteria 1-10.  Each test prints one PASS/FAIL line with its measurements."""

import contextlib
import json
import time
from importlib.resources import files

import numpy as np
import pytest

from csmamba import cli, dsp, ssm
from csmamba.blocks import BandLayout
from csmamba.checkpoint import checkpoint_load, checkpoint_save, to_bytes
from csmamba.data import SynthMixConfig
from csmamba.dsp import AudioClip, StftConfig
from csmamba.metrics import si_snr, si_snri
from csmamba.model import ModelConfig, build_model, count_flops, count_params, enhance
from csmamba.ssm import discretize_zoh, init_ssm
from csmamba.tensor import Tensor
from csmamba.train import TrainConfig, train

from oracles import si_snr_direct, zoh_closed

TINY_CONFIG = files("csmamba") / "configs" / "tiny.json"


@pytest.fixture
def criterion(capsys):
    @contextlib.contextmanager
    def run(number, title):
        notes = []
        start = time.perf_counter()
        try:
            yield notes
        except BaseException as exc:
            line = f"criterion {number:2d} FAIL  {title}: {type(exc).__name__}: {exc}"
            ok = False
            raise
        else:
            line = f"criterion {number:2d} PASS  {title}: " + "; ".join(notes)
            ok = True
        finally:
            with capsys.disabled():
                print(f"\n{line}  [{time.perf_counter() - start:.1f}s]", flush=True)
        assert ok
    return run


def rel(a, b):
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-30))


# 1 -------------------------------------------------------------------------


def test_c01_scan_equivalence(criterion):
    with criterion(1, "parallel scan == sequential scan (32-bit, rel 1e-5, 1000 cases, < 30 s)") as notes:
        rng = np.random.default_rng(2024)
        forced = [1, 63, 257]
        worst, start = 0.0, time.perf_counter()
        lengths = []
        for i in range(1000):
            t = forced[i] if i < len(forced) else int(rng.integers(1, 300))
            c, n = int(rng.integers(1, 9)), int(rng.integers(1, 17))
            a = (-rng.uniform(0.05, 4.0, (c, n))).astype(np.float32)
            b_t = rng.normal(size=(t, n)).astype(np.float32)
            delta = rng.uniform(1e-3, 0.5, (t, c)).astype(np.float32)
            disc = discretize_zoh(Tensor(a), Tensor(b_t), Tensor(delta))
            c_t = Tensor(rng.normal(size=(t, n)).astype(np.float32))
            d = Tensor(rng.normal(size=c).astype(np.float32))
            x = Tensor(rng.normal(size=(c, t)).astype(np.float32))
            ys = ssm.selective_scan_seq(disc, c_t, d, x).data
            yp = ssm.selective_scan_parallel(disc, c_t, d, x).data
            worst = max(worst, rel(yp.astype(np.float64), ys.astype(np.float64)))
            lengths.append(t)
        elapsed = time.perf_counter() - start
        notes += [f"worst rel {worst:.2e}", f"T range {min(lengths)}..{max(lengths)}", f"{elapsed:.1f}s"]
        assert {1, 63, 257} <= set(lengths)
        assert worst < 1e-5
        assert elapsed < 30


# 2 -------------------------------------------------------------------------


def test_c02_zoh_correctness(criterion):
    with criterion(2, "ZOH vs 64-bit closed form (rel 1e-7, 10^4 points incl. |da| < 1e-4 seam)") as notes:
        rng = np.random.default_rng(7)
        a = -np.exp(rng.uniform(-3, 1.5, 10_000))
        z = np.concatenate([10 ** rng.uniform(-7, 1, 5000), 10 ** rng.uniform(-4.3, -3.7, 5000)])
        delta = z / -a
        want = np.array([zoh_closed(ai, di) for ai, di in zip(a, delta)])
        disc = discretize_zoh(Tensor(a[:, None]), Tensor(np.ones((1, 1))), Tensor(delta[None, :]))
        err_a = np.max(np.abs(disc.a_bar.data[0, :, 0] - want[:, 0]) / want[:, 0])
        err_b = np.max(np.abs(disc.b_bar.data[0, :, 0] - want[:, 1]) / want[:, 1])
        below = int(np.sum(z < 1e-4))
        notes += [f"a_bar rel {err_a:.2e}", f"b_bar rel {err_b:.2e}", f"{below} points below the seam"]
        assert below > 1000 and 10_000 - below > 1000
        assert err_a < 1e-7 and err_b < 1e-7


# 3 -------------------------------------------------------------------------


def test_c03_bissm_equivariance(criterion):
    with criterion(3, "bissm_{f,b}(flip x) == flip(bissm_{b,f}(x)) (rel 1e-6, 100 cases)") as notes:
        rng = np.random.default_rng(3)
        worst = 0.0
        for i in range(100):
            c, n, t = int(rng.integers(1, 7)), int(rng.integers(1, 9)), int(rng.integers(1, 80))
            pf = init_ssm(c, n, 2 * i, "f", np.float64)
            pb = init_ssm(c, n, 2 * i + 1, "b", np.float64)
            x = Tensor(rng.normal(size=(c, t)))
            lhs = ssm.bissm_forward(pf, pb, Tensor(x.data[:, ::-1].copy())).data
            rhs = ssm.bissm_forward(pb, pf, x).data[:, ::-1]
            worst = max(worst, rel(lhs, rhs))
        notes.append(f"worst rel {worst:.2e}")
        assert worst < 1e-6


# 4 -------------------------------------------------------------------------


def test_c04_gradient_suite(criterion, capsys):
    with criterion(4, "gradient suite (64-bit, h 1e-5, tol 1e-6); gradcheck exits 0 in < 60 s") as notes:
        start = time.perf_counter()
        code = cli.main(["gradcheck", "--scale", "tiny", "--precision", "64"])
        elapsed = time.perf_counter() - start
        out = capsys.readouterr().out
        rows = [l.split() for l in out.splitlines() if "worst_rel_err=" in l]
        names = {r[0] for r in rows}
        worst = max(float(r[1].split("=")[1]) for r in rows)
        notes += [f"exit {code}", f"{len(rows)} cases", f"worst {worst:.2e}", f"{elapsed:.1f}s"]
        assert {"tprb_forward", "bsb_forward", "srb_forward", "cib_forward", "model_total_loss"} <= names
        assert code == 0 and all(r[2] == "ok" for r in rows)
        assert elapsed < 60


# 5 -------------------------------------------------------------------------


def test_c05_stft_fidelity(criterion):
    with criterion(5, "istft(stft(x)) rel RMS < 1e-6 on 1 s noise; frame count exact") as notes:
        cfg = StftConfig()
        x = np.random.default_rng(5).uniform(-1, 1, 16000)
        y = dsp.istft(dsp.stft(AudioClip(Tensor(x)), cfg), cfg, len(x)).samples.data
        err = float(np.sqrt(np.mean((y - x) ** 2) / np.mean(x ** 2)))
        lengths = list(range(1, 2049)) + list(range(2049, 64001, 997))
        bad = [n for n in lengths
               if dsp.stft_tensor(Tensor(np.ones(n)), cfg).shape[-3] != n // cfg.hop + 1]
        notes += [f"rel RMS {err:.2e}", f"{len(lengths)} lengths, {len(bad)} frame-count mismatches"]
        assert err < 1e-6 and not bad


# 6 -------------------------------------------------------------------------


def test_c06_band_layout(criterion):
    with criterion(6, "bins 0-256 partition 7/58/64/128; uniform split changes layout and runs") as notes:
        lay = BandLayout.default(257)
        owner = [lay.band_of(i) for i in range(257)]
        widths = np.bincount(owner).tolist()
        uni = ModelConfig(channels=4, state_dim=2, blocks_per_group=1, groups=1, uniform_bands=True)
        x = np.random.default_rng(6).uniform(-0.5, 0.5, 4000).astype(np.float32)
        y = enhance(build_model(uni), AudioClip(Tensor(x))).samples.data
        notes += [f"widths {widths}", f"default {lay}", f"uniform {uni.layout}"]
        assert widths == [7, 58, 64, 128] and owner == sorted(owner)
        assert str(lay) == "[0,7) [7,65) [65,129) [129,257)"
        assert uni.layout != lay
        assert y.shape == x.shape and np.all(np.isfinite(y))


# 7 -------------------------------------------------------------------------


def test_c07_sizing(criterion):
    with criterion(7, "default params within 10% of 1.73M; tiny == hand count; MACs linear in duration") as notes:
        n_default = count_params(build_model(ModelConfig()))
        c, n, r, k = 4, 2, 4, 3
        ssm_p = 3 * c * n + c * c + 2 * c
        tprb = (2 * c + 4 * (c * c * k + c) + 2 * (c * c + c) + 2 * ssm_p) \
            + (2 * c + (c * c + c) + (c * k + c) + 2 * ssm_p + 2 * (c * c + c)) \
            + (2 * (c * (c // r)) + c // r + c) + 3
        hand = (2 * c * 9 + 2 * c) + tprb + (c * c * 9 + c) + (2 * (c * c + c) + c) + (2 * c * 9 + 2)
        tiny = count_params(build_model(ModelConfig(channels=4, state_dim=2, blocks_per_group=1, groups=1)))
        cfg = ModelConfig()
        one = count_flops(cfg, 1.0)
        ratios = [count_flops(cfg, s) / (one * s) for s in (0.1, 0.5, 2.0, 4.0, 60.0)]
        notes += [f"default {n_default:,} ({(n_default - 1.73e6) / 1.73e6:+.1%})",
                  f"tiny {tiny} vs hand {hand}", f"{one / 1e9:.2f} GMACs/s",
                  f"max linearity dev {max(abs(q - 1) for q in ratios):.1e}"]
        assert abs(n_default - 1.73e6) <= 0.10 * 1.73e6
        assert tiny == hand
        assert all(abs(q - 1) < 1e-12 for q in ratios)


# 8 -------------------------------------------------------------------------


def test_c08_desk_scale_training(criterion, tmp_path):
    with criterion(8, "tiny config: 200 steps < 10 min, val <= 0.5 x initial, held-out SI-SNRi > 0 dB") as notes:
        cfg = TrainConfig.load(TINY_CONFIG)
        code = cli.main(["train", "--config", str(TINY_CONFIG), "--out", str(tmp_path)])
        summary = json.loads((tmp_path / "summary.json").read_text())
        ratio = summary["final_val_loss"] / summary["initial_val_loss"]
        notes += [f"exit {code}", f"{summary['steps']} steps in {summary['seconds']:.0f}s",
                  f"val {summary['initial_val_loss']:.3f} -> {summary['final_val_loss']:.3f} "
                  f"(ratio {ratio:.3f})",
                  f"held-out SI-SNRi {summary['heldout_si_snri_db']:+.2f} dB "
                  f"over {summary['heldout_files']} clips"]
        assert code == 0 and cfg.total_steps == summary["steps"] >= 200
        assert summary["seconds"] < 600
        assert ratio <= 0.5
        assert summary["heldout_files"] == 32 and summary["heldout_si_snri_db"] > 0


# 9 -------------------------------------------------------------------------


def test_c09_determinism_and_persistence(criterion, tmp_path):
    with criterion(9, "fixed seed: identical checkpoints and audio; save-load-save byte-identical") as notes:
        cfg = TrainConfig(
            model=ModelConfig(channels=4, state_dim=2, blocks_per_group=1, groups=1, cib_reduction=2),
            data=SynthMixConfig(clip_seconds=0.25), epochs=2, batch_size=2, train_size=4,
            val_size=2, lr=0.01, seed=11)
        train(cfg, tmp_path / "a")
        train(cfg, tmp_path / "b")
        ckpt_a = (tmp_path / "a" / "best.ckpt").read_bytes()
        same_ckpt = ckpt_a == (tmp_path / "b" / "best.ckpt").read_bytes()
        clip = AudioClip(Tensor(np.random.default_rng(9).uniform(-0.5, 0.5, 6000).astype(np.float32)))
        out_a = enhance(checkpoint_load(tmp_path / "a" / "best.ckpt")[0], clip).samples.data
        out_b = enhance(checkpoint_load(tmp_path / "b" / "best.ckpt")[0], clip).samples.data
        state, mcfg = checkpoint_load(tmp_path / "a" / "best.ckpt")
        checkpoint_save(state, mcfg, tmp_path / "again.ckpt")
        resaved = (tmp_path / "again.ckpt").read_bytes() == ckpt_a
        notes += [f"checkpoints identical {same_ckpt}", f"audio identical {np.array_equal(out_a, out_b)}",
                  f"resave identical {resaved}", f"{len(ckpt_a)} bytes"]
        assert same_ckpt and np.array_equal(out_a, out_b) and resaved
        assert to_bytes(state) == ckpt_a


# 10 ------------------------------------------------------------------------


def test_c10_metric_sanity(criterion):
    with criterion(10, "identity SI-SNRi == 0 exactly; si_snr vs 64-bit oracle < 1e-6 dB") as notes:
        rng = np.random.default_rng(10)
        worst, nonzero = 0.0, 0
        for _ in range(200):
            n = int(rng.integers(64, 4000))
            ref = rng.normal(size=n)
            noisy = ref * rng.uniform(0.1, 2) + rng.normal(size=n) * rng.uniform(0.1, 3)
            nonzero += si_snri(noisy, noisy, ref) != 0.0
            worst = max(worst, abs(si_snr(noisy, ref) - si_snr_direct(noisy, ref)))
        notes += [f"identity non-zero count {nonzero}", f"worst oracle gap {worst:.2e} dB"]
        assert nonzero == 0 and worst < 1e-6
