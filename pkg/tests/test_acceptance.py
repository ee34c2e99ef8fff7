"""Acceptance suite: every criterion at its stated tolerance, one printed
pass/fail line each.  Run with ``pytest tests/test_acceptance.py -v -s``.

The desk-scale overfit protocol is pinned here: 16 synthetic 64x64 samples
(seed 7), the toy backbone, 200 iterations of momentum SGD at lr0 5e-3
under the polynomial schedule, combined loss with lambda 1.
"""

import contextlib
import json
import math
import time

import numpy as np
import pytest
import torch

from minetlab import losses, metrics
from minetlab.backbone import BackboneConfig
from minetlab.data import synth_generate
from minetlab.net import MINet, ModelConfig, build_baseline
from minetlab.train import TrainConfig, evaluate_checkpoint, poly_lr, train, write_log_csv

OVERFIT_SEED = 7
OVERFIT_ITERATIONS = 200
OVERFIT_LR0 = 5e-3
EPS = 1e-7


@contextlib.contextmanager
def criterion(number, name):
    details = {}
    try:
        yield details
    except AssertionError:
        print(f"[acceptance] criterion {number} ({name}): FAIL {details}")
        raise
    print(f"[acceptance] criterion {number} ({name}): PASS {details}")


def fd_oracle(fn, x, step):
    """Independent central-difference gradient used only by this suite."""
    grad = np.zeros(x.size)
    flat = x.reshape(-1)
    for i in range(x.size):
        orig = flat[i].item()
        flat[i] = orig + step
        hi = float(fn(x))
        flat[i] = orig - step
        lo = float(fn(x))
        flat[i] = orig
        grad[i] = (hi - lo) / (2.0 * step)
    return grad.reshape(x.shape)


# ---------------------------------------------------------------- criterion 1

def test_criterion_1_gradient_correctness():
    with criterion(1, "analytic gradients vs finite differences") as d:
        start = time.time()
        gen = torch.Generator().manual_seed(0)
        worst_b = worst_c = 0.0
        for _ in range(20):
            P = torch.rand((8, 8), generator=gen, dtype=torch.float64) * 0.98 + 0.01
            G = (torch.rand((8, 8), generator=gen, dtype=torch.float64) < 0.5).double()
            G[0, 0], G[0, 1] = 1.0, 0.0

            analytic = losses.bcel_grad_analytic(P, G, reduction="sum").numpy()
            numeric = fd_oracle(
                lambda arr: losses.bcel(torch.from_numpy(arr), G, "sum"),
                P.numpy().copy(), 1e-5,
            )
            rel = np.abs(analytic - numeric) / np.maximum(
                np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12
            )
            worst_b = max(worst_b, float(rel.max()))

            analytic = losses.cel_grad_analytic(P, G).numpy()
            numeric = fd_oracle(
                lambda arr: losses.cel(torch.from_numpy(arr), G),
                P.numpy().copy(), 1e-5,
            )
            rel = np.abs(analytic - numeric) / np.maximum(
                np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12
            )
            worst_c = max(worst_c, float(rel.max()))
        elapsed = time.time() - start
        d.update(bcel_max_rel=f"{worst_b:.2e}", cel_max_rel=f"{worst_c:.2e}",
                 seconds=f"{elapsed:.1f}")
        assert worst_b < 1e-4
        assert worst_c < 1e-4
        assert elapsed < 10.0


# ---------------------------------------------------------------- criterion 2

def test_criterion_2_cel_extremes():
    with criterion(2, "region-consistency loss extremes") as d:
        P = torch.zeros((4, 4), dtype=torch.float64)
        G = torch.zeros((4, 4), dtype=torch.float64)
        P[0, :2] = 0.8
        G[3, 2:] = 1.0
        disjoint = float(losses.cel(P, G))
        assert disjoint == 1.0

        gen = torch.Generator().manual_seed(1)
        G2 = (torch.rand((8, 8), generator=gen) < 0.5).double()
        G2[0, 0] = 1.0
        perfect = float(losses.cel(G2.clamp(EPS, 1 - EPS), G2))
        assert perfect < 4 * EPS

        hand = float(
            losses.cel(
                torch.tensor([0.5, 0.5, 0.5, 0.5], dtype=torch.float64),
                torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=torch.float64),
            )
        )
        assert abs(hand - 2.0 / 3.0) <= 1e-12
        d.update(disjoint=disjoint, perfect=f"{perfect:.2e}", hand=hand)


# ---------------------------------------------------------------- criterion 3

def test_criterion_3_intra_class_gradient_constancy():
    with criterion(3, "intra-class gradient constancy") as d:
        worst_spread = 0.0
        worst_gap = 0.0
        for seed in range(10):
            gen = torch.Generator().manual_seed(seed)
            P = torch.rand((8, 8), generator=gen, dtype=torch.float64) * 0.98 + 0.01
            G = (torch.rand((8, 8), generator=gen, dtype=torch.float64) < 0.5).double()
            G[0, 0], G[0, 1] = 1.0, 0.0
            grad = losses.cel_grad_analytic(P, G)
            fg, bg = grad[G == 1], grad[G == 0]
            worst_spread = max(
                worst_spread, float(fg.max() - fg.min()), float(bg.max() - bg.min())
            )
            gap = float(bg.mean() - fg.mean()) - 2.0 / float((P + G).sum())
            worst_gap = max(worst_gap, abs(gap))
        d.update(spread=f"{worst_spread:.2e}", gap_err=f"{worst_gap:.2e}")
        assert worst_spread < 1e-12
        assert worst_gap <= 1e-12


# ---------------------------------------------------------------- criterion 4

def test_criterion_4_shape_topology_suite():
    with criterion(4, "shape/topology at 320x320 vgg16-style") as d:
        start = time.time()
        torch.manual_seed(0)
        model = MINet(ModelConfig(backbone=BackboneConfig.vgg16_style())).eval()
        with torch.no_grad():
            pred, state = model.forward_with_state(torch.rand(1, 3, 320, 320))
        elapsed = time.time() - start
        sizes = [t.shape[-1] for t in state.aim]
        channels = [t.shape[1] for t in state.aim]
        d.update(sizes=sizes, channels=channels, seconds=f"{elapsed:.1f}")
        assert sizes == [320, 160, 80, 40, 20]
        assert channels == [32, 64, 64, 64, 64]
        assert state.add[4] is state.aim[4] and torch.equal(state.add[4], state.aim[4])
        for add, sim in zip(state.add, state.sim):
            assert sim.shape == add.shape
        assert pred.shape == (1, 1, 320, 320)
        assert 0.0 < float(pred.min()) and float(pred.max()) < 1.0
        assert elapsed < 60.0


# ------------------------------------------------------- overfit fixtures (5, 6, 8)

@pytest.fixture(scope="module")
def overfit_dataset():
    return synth_generate(16, image_size=(64, 64), seed=OVERFIT_SEED)


@pytest.fixture(scope="module")
def overfit_run(overfit_dataset):
    torch.manual_seed(OVERFIT_SEED)
    model = MINet(ModelConfig())
    cfg = TrainConfig(
        iterations=OVERFIT_ITERATIONS, seed=OVERFIT_SEED, lr0=OVERFIT_LR0,
        lambda_cel=1.0, checkpoint_every=0,
    )
    start = time.time()
    result = train(model, overfit_dataset, cfg, validate=False)
    elapsed = time.time() - start
    report = evaluate_checkpoint(result.model, overfit_dataset)
    return result, report, elapsed


@pytest.fixture(scope="module")
def baseline_run(overfit_dataset):
    torch.manual_seed(OVERFIT_SEED)
    model = build_baseline(ModelConfig())
    cfg = TrainConfig(
        iterations=OVERFIT_ITERATIONS, seed=OVERFIT_SEED, lr0=OVERFIT_LR0,
        lambda_cel=0.0, checkpoint_every=0,
    )
    result = train(model, overfit_dataset, cfg, validate=False)
    report = evaluate_checkpoint(result.model, overfit_dataset)
    return result, report


# ---------------------------------------------------------------- criterion 5

def test_criterion_5_overfit_experiment(overfit_run):
    with criterion(5, "overfit on 16 synthetic samples") as d:
        result, report, elapsed = overfit_run
        first = sum(r["total"] for r in result.log_rows[:20]) / 20.0
        last = sum(r["total"] for r in result.log_rows[-20:]) / 20.0
        d.update(
            f_avg=f"{report.f_avg:.4f}", mae=f"{report.mae:.4f}",
            loss=f"{first:.3f}->{last:.3f}", seconds=f"{elapsed:.0f}",
        )
        assert report.f_avg >= 0.9
        assert report.mae <= 0.05
        assert last < first
        assert elapsed < 900.0


# ---------------------------------------------------------------- criterion 6

def test_criterion_6_ablation_ordering(overfit_run, baseline_run):
    with criterion(6, "ablation ordering full vs baseline") as d:
        _, full_report, _ = overfit_run
        _, base_report = baseline_run
        d.update(full=f"{full_report.f_avg:.4f}", baseline=f"{base_report.f_avg:.4f}")
        assert full_report.f_avg >= base_report.f_avg


# ---------------------------------------------------------------- criterion 7

def test_criterion_7_metric_oracle_equivalence():
    with criterion(7, "metric oracle equivalence") as d:
        start = time.time()
        cfg = metrics.MetricConfig()
        thresholds = cfg.thresholds
        rng = np.random.default_rng(0)
        beta_sq = cfg.beta_sq
        checked = 0
        for code in range(512):
            gt = np.array([(code >> k) & 1 for k in range(9)], dtype=np.float64).reshape(3, 3)
            gt_bool = gt.astype(bool)
            n_fg = int(gt.sum())
            preds = rng.random((64, 3, 3))
            for pred in preds:
                tp, fp, got_fg, _ = metrics.threshold_counts(pred, gt, thresholds)
                positive = pred.reshape(1, 9) > thresholds.reshape(-1, 1)
                otp = (positive & gt_bool.reshape(1, 9)).sum(axis=1)
                ofp = (positive & ~gt_bool.reshape(1, 9)).sum(axis=1)
                assert np.array_equal(tp, otp) and np.array_equal(fp, ofp)
                assert got_fg == n_fg

                p, r = metrics.precision_recall(tp, fp, n_fg)
                pos = otp + ofp
                op = np.where(pos == 0, 1.0, otp / np.where(pos == 0, 1, pos))
                orr = np.ones(256) if n_fg == 0 else otp / n_fg
                assert np.array_equal(p, op) and np.array_equal(r, orr)

                f_impl = metrics.f_measure(p, r, cfg)
                denom = beta_sq * op + orr
                of = np.where(denom == 0, 0.0, (1.0 + beta_sq) * op * orr / np.where(denom == 0, 1.0, denom))
                assert np.array_equal(f_impl, of)

                mae_impl = metrics.mae_single(pred, gt)
                mae_oracle = sum(abs(a - b) for a, b in zip(pred.ravel(), gt.ravel())) / 9.0
                assert abs(mae_impl - mae_oracle) <= 1e-12
                checked += 1

        # perfect-prediction report maxes every metric and zeroes the error
        gts = []
        for seed in range(3):
            local = np.random.default_rng(seed)
            gt = np.zeros((16, 16))
            r0, c0 = local.integers(3, 8, size=2)
            gt[r0 : r0 + 6, c0 : c0 + 6] = 1.0
            gts.append(gt)
        report = metrics.evaluate_pairs([g.copy() for g in gts], gts)
        elapsed = time.time() - start
        d.update(cases=checked, f_max=report.f_max, mae=report.mae,
                 e_m=report.e_m, seconds=f"{elapsed:.0f}")
        assert report.f_max == 1.0 and report.f_avg == 1.0 and report.mae == 0.0
        assert report.e_m == 1.0
        assert abs(report.s_m - 1.0) < 1e-6 and abs(report.f_w - 1.0) < 1e-6
        assert elapsed < 60.0


# ---------------------------------------------------------------- criterion 8

def test_criterion_8_poly_schedule(overfit_run):
    with criterion(8, "polynomial schedule checkpoints") as d:
        result, _, _ = overfit_run
        T = OVERFIT_ITERATIONS
        lr_start = result.log_rows[0]["lr"]
        lr_mid = result.log_rows[T // 2]["lr"]
        lr_end = result.state.current_lr
        d.update(lr0=lr_start, mid=lr_mid, end=lr_end)
        assert abs(lr_start - OVERFIT_LR0) <= 1e-12
        assert abs(lr_mid - OVERFIT_LR0 * 0.5**0.9) <= 1e-12
        assert abs(lr_end - 0.0) <= 1e-12
        # and the function itself at the spec's reference values
        assert poly_lr(0, T, 1e-3, 0.9) == 1e-3
        assert abs(poly_lr(T // 2, T, 1e-3, 0.9) - 1e-3 * 0.5**0.9) <= 1e-12
        assert poly_lr(T, T, 1e-3, 0.9) == 0.0
        for row in result.log_rows:
            assert row["lr"] == poly_lr(row["iteration"], T, OVERFIT_LR0, 0.9)


# ---------------------------------------------------------------- criterion 9

def test_criterion_9_determinism(tmp_path, monkeypatch):
    with criterion(9, "byte-identical reruns") as d:
        torch.set_num_threads(1)

        def small_run():
            ds = synth_generate(8, image_size=(32, 32), seed=3)
            torch.manual_seed(3)
            model = MINet(ModelConfig())
            cfg = TrainConfig(iterations=10, seed=3, lr0=OVERFIT_LR0, checkpoint_every=0)
            return train(model, ds, cfg, validate=False).log_rows

        log_a = tmp_path / "a.csv"
        log_b = tmp_path / "b.csv"
        write_log_csv(log_a, small_run())
        write_log_csv(log_b, small_run())
        assert log_a.read_bytes() == log_b.read_bytes()

        preds = tmp_path / "preds"
        gts = tmp_path / "gts"
        preds.mkdir()
        gts.mkdir()
        from minetlab.imgio import save_gray_png

        rng = np.random.default_rng(5)
        for i in range(6):
            gt = np.zeros((24, 24))
            gt[4:15, 6:18] = 1.0
            save_gray_png(gts / f"i{i}.png", gt)
            save_gray_png(preds / f"i{i}.png", np.clip(gt + rng.normal(0, 0.2, gt.shape), 0, 1))

        monkeypatch.setenv("MINETLAB_THREADS", "1")
        metrics.evaluate_dataset(preds, gts, report_path=tmp_path / "r1.json")
        monkeypatch.setenv("MINETLAB_THREADS", "4")
        metrics.evaluate_dataset(preds, gts, report_path=tmp_path / "r4.json")
        r1 = (tmp_path / "r1.json").read_bytes()
        r4 = (tmp_path / "r4.json").read_bytes()
        d.update(log_bytes=len(log_a.read_bytes()), report_bytes=len(r1))
        assert r1 == r4
        report = json.loads(r1)
        assert set(report) == {"f_max", "f_avg", "f_w", "e_m", "s_m", "mae"}
