import json
import math

import numpy as np
import pytest

from minetlab import metrics
from minetlab.errors import ConfigError, DataError
from minetlab.imgio import save_gray_png

CFG = metrics.MetricConfig()
EPS = float(np.spacing(1.0))

rng = np.random.default_rng(1234)


# ------------------------------------------------------------------ oracles

def counts_oracle(pred, gt, thresholds):
    """Brute-force pixel counting: one boolean comparison per threshold."""
    gt = gt.astype(bool)
    tps, fps = [], []
    for t in thresholds:
        positive = pred > t
        tps.append(int(np.count_nonzero(positive & gt)))
        fps.append(int(np.count_nonzero(positive & ~gt)))
    return np.array(tps), np.array(fps)


def pr_oracle(tp, fp, n_fg):
    precision = np.array([1.0 if tp[i] + fp[i] == 0 else tp[i] / (tp[i] + fp[i]) for i in range(len(tp))])
    recall = np.array([1.0 if n_fg == 0 else tp[i] / n_fg for i in range(len(tp))])
    return precision, recall


def f_oracle(p, r, beta_sq=0.3):
    denom = beta_sq * p + r
    return 0.0 if denom == 0 else (1.0 + beta_sq) * p * r / denom


def mae_oracle(pred, gt):
    acc = 0.0
    for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        acc += abs(p - g)
    return acc / pred.size


def e_oracle(pred_binary, gt):
    """Pixelwise enhanced-alignment score (full matrices, no count tricks)."""
    gt = gt.astype(np.float64)
    fm = pred_binary.astype(np.float64)
    if gt.sum() == 0:
        enhanced = 1.0 - fm
    elif gt.sum() == gt.size:
        enhanced = fm
    else:
        dfm = fm - fm.mean()
        dgt = gt - gt.mean()
        align = 2.0 * dgt * dfm / (dgt**2 + dfm**2 + EPS)
        enhanced = (align + 1.0) ** 2 / 4.0
    return float(np.clip(enhanced.sum() / (gt.size - 1 + EPS), 0.0, 1.0))


def s_oracle(pred, gt, alpha=0.5):
    """Plain-loop reimplementation of the structure measure."""
    gt = gt.astype(bool)
    y = gt.mean()
    if y == 0:
        return min(max(1.0 - pred.mean(), 0.0), 1.0)
    if y == 1:
        return min(max(float(pred.mean()), 0.0), 1.0)

    def object_score(vals):
        if len(vals) == 0:
            return 0.0
        x = sum(vals) / len(vals)
        if len(vals) > 1:
            var = sum((v - x) ** 2 for v in vals) / (len(vals) - 1)
            sigma = math.sqrt(var)
        else:
            sigma = 0.0
        return 2.0 * x / (x * x + 1.0 + sigma + EPS)

    fg_vals = [float(v) for v in pred[gt]]
    bg_vals = [float(1.0 - v) for v in pred[~gt]]
    s_o = y * object_score(fg_vals) + (1 - y) * object_score(bg_vals)

    rows, cols = gt.shape
    total = gt.sum()
    xs = sum((c + 1) * gt[:, c].sum() for c in range(cols)) / total
    ys = sum((r + 1) * gt[r, :].sum() for r in range(rows)) / total
    X = int(math.floor(xs + 0.5))
    Y = int(math.floor(ys + 0.5))

    def ssim(p, g):
        n = p.size
        if n == 0:
            return 0.0
        p = p.ravel().tolist()
        g = g.ravel().tolist()
        x = sum(p) / n
        yv = sum(g) / n
        sx = sum((v - x) ** 2 for v in p) / (n - 1 + EPS)
        sy = sum((v - yv) ** 2 for v in g) / (n - 1 + EPS)
        sxy = sum((a - x) * (b - yv) for a, b in zip(p, g)) / (n - 1 + EPS)
        aleph = 4 * x * yv * sxy
        beth = (x * x + yv * yv) * (sx + sy)
        if aleph != 0:
            return aleph / (beth + EPS)
        if beth == 0:
            return 1.0
        return 0.0

    gtf = gt.astype(np.float64)
    area = rows * cols
    w = [X * Y / area, (cols - X) * Y / area, X * (rows - Y) / area]
    w.append(1.0 - sum(w))
    q = [
        ssim(pred[:Y, :X], gtf[:Y, :X]),
        ssim(pred[:Y, X:], gtf[:Y, X:]),
        ssim(pred[Y:, :X], gtf[Y:, :X]),
        ssim(pred[Y:, X:], gtf[Y:, X:]),
    ]
    s_r = sum(wi * qi for wi, qi in zip(w, q))
    return min(max(alpha * s_o + (1 - alpha) * s_r, 0.0), 1.0)


# -------------------------------------------------------------------- PR / F

def test_threshold_counts_match_pixel_counting():
    for _ in range(5):
        pred = rng.random((4, 4))
        gt = rng.random((4, 4)) < 0.5
        tp, fp, n_fg, n_bg = metrics.threshold_counts(pred, gt, CFG.thresholds)
        otp, ofp = counts_oracle(pred, gt, CFG.thresholds)
        assert np.array_equal(tp, otp)
        assert np.array_equal(fp, ofp)
        assert n_fg == int(gt.sum()) and n_bg == int((~gt).sum())


def test_exhaustive_small_grids_match_oracle():
    thresholds = CFG.thresholds
    for code in range(0, 512, 7):  # subsample of all 3x3 masks; full sweep in acceptance
        gt = np.array([(code >> k) & 1 for k in range(9)], dtype=np.float64).reshape(3, 3)
        for _ in range(4):
            pred = rng.random((3, 3))
            tp, fp, n_fg, _ = metrics.threshold_counts(pred, gt, thresholds)
            otp, ofp = counts_oracle(pred, gt, thresholds)
            assert np.array_equal(tp, otp) and np.array_equal(fp, ofp)
            p, r = metrics.precision_recall(tp, fp, n_fg)
            op, orr = pr_oracle(otp, ofp, int(gt.sum()))
            assert np.array_equal(p, op) and np.array_equal(r, orr)
            assert abs(mae_oracle(pred, gt) - metrics.mae_single(pred, gt)) <= 1e-12


def test_perfect_prediction_curve():
    gt = (rng.random((6, 6)) < 0.4).astype(np.float64)
    gt[0, 0] = 1.0
    curve = metrics.pr_curve([gt], [gt])
    assert all(p == 1.0 and r == 1.0 for p, r in curve)
    assert metrics.f_max([gt], [gt]) == 1.0


def test_inverted_prediction_has_zero_recall():
    gt = (rng.random((6, 6)) < 0.4).astype(np.float64)
    gt[0, 0] = 1.0
    curve = metrics.pr_curve([1.0 - gt], [gt])
    assert all(r == 0.0 for _, r in curve)


def test_f_measure_identities():
    for r in (0.0, 0.25, 0.7, 1.0):
        assert math.isclose(metrics.f_measure(r, r), r, abs_tol=1e-15)
    assert metrics.f_measure(1.0, 0.0) == 0.0
    expected = 1.3 * 0.8 * 0.5 / (0.3 * 0.8 + 0.5)
    assert math.isclose(metrics.f_measure(0.8, 0.5), expected, rel_tol=1e-15)
    assert math.isclose(expected, 0.52 / 0.74, rel_tol=1e-12)


def test_f_avg_cases():
    gt = np.zeros((4, 4))
    gt[1:3, 1:3] = 1.0  # mean 0.25 < 0.5
    assert metrics.f_avg([gt.copy()], [gt]) == 1.0

    ones = np.ones((4, 4))
    expected_p = gt.sum() / gt.size
    expected = f_oracle(expected_p, 1.0)
    assert math.isclose(metrics.f_avg([ones], [gt]), expected, rel_tol=1e-12)

    zeros = np.zeros((4, 4))
    cfg = metrics.MetricConfig(normalize_predictions=False)
    assert metrics.evaluate_pairs([zeros], [gt], cfg).f_avg == 0.0


def test_mae_extremes():
    gt = (rng.random((5, 5)) < 0.5).astype(np.float64)
    assert metrics.mae([gt], [gt]) == 0.0
    assert metrics.mae([1.0 - gt], [gt]) == 1.0


# ------------------------------------------------------------------ S-measure

def test_s_measure_self_similarity():
    gt = np.zeros((8, 8))
    gt[2:6, 3:7] = 1.0
    assert abs(metrics.s_measure(gt, gt) - 1.0) < 1e-6


def test_s_measure_degenerate_background():
    empty = np.zeros((6, 6))
    assert metrics.s_measure(np.zeros((6, 6)), empty) == 1.0
    assert metrics.s_measure(np.ones((6, 6)), empty) == 0.0


def test_s_measure_alpha_blend_strictly_between():
    gt = np.zeros((8, 8))
    gt[1:5, 1:4] = 1.0
    pred = rng.random((8, 8)) * 0.5
    pred[1:5, 1:4] += 0.5
    s_obj = metrics.s_measure(pred, gt, metrics.MetricConfig(alpha=1.0))
    s_reg = metrics.s_measure(pred, gt, metrics.MetricConfig(alpha=0.0))
    s_mid = metrics.s_measure(pred, gt)
    lo, hi = sorted((s_obj, s_reg))
    assert lo < s_mid < hi


def test_s_measure_matches_loop_oracle():
    for seed in range(6):
        local = np.random.default_rng(seed)
        gt = (local.random((8, 8)) < 0.4).astype(np.float64)
        gt[4, 4] = 1.0
        gt[0, 0] = 0.0
        pred = local.random((8, 8))
        assert abs(metrics.s_measure(pred, gt) - s_oracle(pred, gt)) < 1e-12


# ------------------------------------------------------------------ E-measure

def test_e_measure_perfect_binary():
    gt = np.zeros((8, 8))
    gt[2:5, 2:5] = 1.0
    assert metrics.e_measure(gt, gt) == 1.0


def test_e_measure_inverted_below_half():
    gt = np.zeros((8, 8))
    gt[2:5, 2:5] = 1.0
    assert metrics.e_measure(1.0 - gt, gt) < 0.5


def test_e_measure_constant_mean_prediction_intermediate():
    gt = np.zeros((8, 8))
    gt[2:5, 2:5] = 1.0
    pred = np.full((8, 8), float(gt.mean()))
    value = metrics.e_measure(pred, gt, metrics.MetricConfig(normalize_predictions=False))
    assert 0.0 < value < 1.0


def test_e_measure_counts_form_matches_pixelwise_oracle():
    thresholds = CFG.thresholds
    for seed in range(4):
        local = np.random.default_rng(seed)
        gt = (local.random((4, 4)) < 0.5).astype(np.float64)
        pred = local.random((4, 4))
        tp, fp, n_fg, n_bg = metrics.threshold_counts(pred, gt, thresholds)
        ours = metrics._e_score_from_counts(tp, fp, n_fg, 16)
        for k in (0, 63, 128, 255):
            assert abs(ours[k] - e_oracle(pred > thresholds[k], gt)) < 1e-12


# ----------------------------------------------------------- weighted F-measure

def test_weighted_f_extremes():
    gt = np.zeros((16, 16))
    gt[5:10, 6:12] = 1.0  # >= 3 px margin keeps the blur kernel inside
    assert metrics.weighted_f_measure(gt, gt) > 1.0 - 1e-6
    assert metrics.weighted_f_measure(1.0 - gt, gt) < 1e-6
    assert metrics.weighted_f_measure(np.ones((16, 16)), np.zeros((16, 16))) == 0.0


def test_weighted_f_near_error_scores_higher():
    gt = np.zeros((16, 16))
    gt[6:10, 6:10] = 1.0
    near = gt.copy()
    near[10, 10] = 1.0  # false positive adjacent to the object
    far = gt.copy()
    far[15, 15] = 1.0  # false positive far away
    assert metrics.weighted_f_measure(near, gt) > metrics.weighted_f_measure(far, gt)


# ------------------------------------------------------------------ aggregate

def test_metric_ranges_random_inputs():
    for seed in range(5):
        local = np.random.default_rng(seed)
        gt = (local.random((8, 8)) < 0.5).astype(np.float64)
        gt[3, 3] = 1.0
        gt[0, 0] = 0.0
        pred = local.random((8, 8))
        report = metrics.evaluate_pairs([pred], [gt])
        for key, value in report.summary().items():
            assert 0.0 <= value <= 1.0, key


def test_perfect_report_maximal():
    gts = []
    for seed in range(3):
        local = np.random.default_rng(seed)
        gt = np.zeros((16, 16))
        r, c = local.integers(4, 9, size=2)
        gt[r : r + 5, c : c + 5] = 1.0
        gts.append(gt)
    report = metrics.evaluate_pairs([g.copy() for g in gts], gts)
    assert report.f_max == 1.0
    assert report.f_avg == 1.0
    assert report.mae == 0.0
    assert report.e_m == 1.0
    assert abs(report.s_m - 1.0) < 1e-6
    assert abs(report.f_w - 1.0) < 1e-6


def test_degrading_perfect_prediction_is_monotone():
    gt = np.zeros((8, 8))
    gt[2:6, 2:6] = 1.0
    pred = gt.copy()
    f_values, mae_values = [], []
    flips = [(0, 0), (7, 7), (2, 2), (3, 3), (0, 7)]
    cfg = metrics.MetricConfig(normalize_predictions=False)
    for flip in [None] + flips:
        if flip is not None:
            pred[flip] = 1.0 - pred[flip]
        f_values.append(metrics.f_max([pred.copy()], [gt], cfg))
        mae_values.append(metrics.mae([pred.copy()], [gt]))
    assert all(a >= b - 1e-12 for a, b in zip(f_values, f_values[1:]))
    assert all(a <= b + 1e-12 for a, b in zip(mae_values, mae_values[1:]))


def test_fmax_dominates_curve_and_adaptive_for_binary():
    gt = np.zeros((8, 8))
    gt[2:6, 2:6] = 1.0
    pred = gt.copy()
    pred[0:2, 0:2] = 1.0  # imperfect binary prediction
    report = metrics.evaluate_pairs([pred], [gt], metrics.MetricConfig(normalize_predictions=False))
    assert all(report.f_max >= f - 1e-12 for f in report.fm_curve)
    assert report.f_max >= report.f_avg - 1e-12


def test_evaluate_pairs_deterministic_across_workers(monkeypatch):
    local = np.random.default_rng(7)
    preds = [local.random((8, 8)) for _ in range(6)]
    gts = [(local.random((8, 8)) < 0.5).astype(np.float64) for _ in range(6)]
    for g in gts:
        g[4, 4] = 1.0
    serial = metrics.evaluate_pairs(preds, gts)
    monkeypatch.setenv("MINETLAB_THREADS", "4")
    threaded = metrics.evaluate_pairs(preds, gts)
    assert json.dumps(serial.summary(), sort_keys=True) == json.dumps(
        threaded.summary(), sort_keys=True
    )


def test_metric_config_validation():
    with pytest.raises(ConfigError):
        metrics.MetricConfig(beta_sq=0.0)
    with pytest.raises(ConfigError):
        metrics.MetricConfig(alpha=1.5)
    with pytest.raises(ConfigError):
        metrics.MetricConfig(threshold_count=1)


def test_evaluate_dataset_roundtrip(tmp_path):
    pred_dir = tmp_path / "preds"
    gt_dir = tmp_path / "gts"
    pred_dir.mkdir()
    gt_dir.mkdir()
    for i in range(3):
        gt = np.zeros((16, 16))
        gt[4:9, 5:11] = 1.0
        save_gray_png(gt_dir / f"img{i}.png", gt)
        save_gray_png(pred_dir / f"img{i}.png", gt)
    report = metrics.evaluate_dataset(
        pred_dir,
        gt_dir,
        report_path=tmp_path / "report.json",
        per_image_path=tmp_path / "per_image.csv",
        curve_path=tmp_path / "curves.csv",
    )
    assert report.f_max == 1.0 and report.mae == 0.0
    payload = json.loads((tmp_path / "report.json").read_text())
    assert set(payload.keys()) == {"f_max", "f_avg", "f_w", "e_m", "s_m", "mae"}
    assert (tmp_path / "per_image.csv").read_text().count("\n") == 4  # header + 3 rows

    metrics.evaluate_dataset(pred_dir, gt_dir, report_path=tmp_path / "report2.json")
    assert (tmp_path / "report.json").read_bytes() == (tmp_path / "report2.json").read_bytes()


def test_evaluate_dataset_requires_matches(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    a.mkdir()
    b.mkdir()
    save_gray_png(a / "x.png", np.zeros((4, 4)))
    save_gray_png(b / "y.png", np.zeros((4, 4)))
    with pytest.raises(DataError):
        metrics.evaluate_dataset(a, b)
