"""Saliency evaluation suite: PR / F-measure curves, adaptive F, MAE,
structure measure, enhanced-alignment measure and the distance-weighted
F-measure, plus directory-level report generation.

Conventions, fixed package-wide so oracle tests can count pixels the same
way:

* predictions are real maps in [0, 1]; masks are strictly binary;
* thresholds sit at the midpoints of the 256 quantization cells of the
  8-bit code range, t_k = (k + 0.5) / 256, and a pixel is positive when
  ``pred > t``.  No 8-bit code value ever coincides with a threshold, so
  binary predictions binarize identically at every threshold;
* precision of an empty positive set is 1; recall of an empty-foreground
  mask is 1 (both vacuous);
* the adaptive threshold is ``min(2 * mean(pred), 1 - 1/255)``;
* per-image scores are aggregated in sorted-id order, so reports do not
  depend on worker scheduling.

The structure / enhanced-alignment / weighted-F internals follow the
reference evaluation semantics of their source toolboxes (centroid-split
region similarity, demeaned alignment matrix, distance-weighted errors)
and are validated against independent small-case reimplementations in the
test suite.
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError
from .imgio import list_stems, load_gray, load_mask

_EPS = float(np.spacing(1.0))  # 2.22e-16

#: adaptive thresholds are clamped one 8-bit code step below the maximum
ADAPTIVE_CLAMP = 1.0 - 1.0 / 255.0


@dataclass(frozen=True)
class MetricConfig:
    beta_sq: float = 0.3
    alpha: float = 0.5
    threshold_count: int = 256
    adaptive_factor: float = 2.0
    wf_beta_sq: float = 1.0
    normalize_predictions: bool = True

    def __post_init__(self):
        if self.beta_sq <= 0:
            raise ConfigError(f"beta_sq must be > 0, got {self.beta_sq}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.threshold_count < 2:
            raise ConfigError(f"threshold_count must be >= 2, got {self.threshold_count}")

    @property
    def thresholds(self) -> np.ndarray:
        k = np.arange(self.threshold_count, dtype=np.float64)
        return (k + 0.5) / self.threshold_count


@dataclass
class MetricReport:
    f_max: float
    f_avg: float
    f_w: float
    e_m: float
    s_m: float
    mae: float
    pr_curve: list = field(default_factory=list)  # (precision, recall) pairs
    fm_curve: list = field(default_factory=list)
    per_image: list = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "f_max": self.f_max,
            "f_avg": self.f_avg,
            "f_w": self.f_w,
            "e_m": self.e_m,
            "s_m": self.s_m,
            "mae": self.mae,
        }


def normalize_prediction(pred: np.ndarray) -> np.ndarray:
    """Exact per-image min-max rescale to [0, 1]; constant maps pass through."""
    pred = np.asarray(pred, dtype=np.float64)
    lo, hi = pred.min(), pred.max()
    if hi > lo:
        return (pred - lo) / (hi - lo)
    return pred


def _check_image_pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DataError(f"prediction shape {pred.shape} != mask shape {gt.shape}")
    if not np.all((gt == 0) | (gt == 1)):
        raise DataError("mask must be binary")
    if pred.min() < 0 or pred.max() > 1:
        raise DataError("prediction values must lie in [0, 1]")
    return pred, gt.astype(bool)


def threshold_counts(pred, gt, thresholds):
    """True/false positive counts of ``pred > t`` for every threshold.

    Sorting + binary search, one pass per image; the brute-force oracle in
    the tests recounts pixels per threshold instead.
    """
    pred, gt = _check_image_pair(pred, gt)
    fg = np.sort(pred[gt].ravel())
    bg = np.sort(pred[~gt].ravel())
    tp = fg.size - np.searchsorted(fg, thresholds, side="right")
    fp = bg.size - np.searchsorted(bg, thresholds, side="right")
    return tp.astype(np.int64), fp.astype(np.int64), int(fg.size), int(bg.size)


def precision_recall(tp, fp, n_fg):
    """Precision/recall with the vacuous-1 conventions for empty sets."""
    tp = np.asarray(tp, dtype=np.float64)
    fp = np.asarray(fp, dtype=np.float64)
    pos = tp + fp
    precision = np.where(pos == 0, 1.0, tp / np.where(pos == 0, 1.0, pos))
    if n_fg == 0:
        recall = np.ones_like(tp)
    else:
        recall = tp / n_fg
    return precision, recall


def f_measure(precision, recall, cfg: MetricConfig = MetricConfig()):
    """Weighted harmonic mean (1+b2)*P*R / (b2*P + R); 0 when the denominator is 0."""
    precision = np.asarray(precision, dtype=np.float64)
    recall = np.asarray(recall, dtype=np.float64)
    denom = cfg.beta_sq * precision + recall
    num = (1.0 + cfg.beta_sq) * precision * recall
    out = np.where(denom == 0, 0.0, num / np.where(denom == 0, 1.0, denom))
    return float(out) if out.ndim == 0 else out


def pr_curve(preds, gts, cfg: MetricConfig = MetricConfig()):
    """Dataset PR curve: per-threshold precision/recall averaged over images."""
    thresholds = cfg.thresholds
    ps, rs = [], []
    for pred, gt in zip(preds, gts):
        tp, fp, n_fg, _ = threshold_counts(pred, gt, thresholds)
        p, r = precision_recall(tp, fp, n_fg)
        ps.append(p)
        rs.append(r)
    p_mean = np.mean(ps, axis=0)
    r_mean = np.mean(rs, axis=0)
    return list(zip(p_mean.tolist(), r_mean.tolist()))


def fm_curve(preds, gts, cfg: MetricConfig = MetricConfig()):
    curve = pr_curve(preds, gts, cfg)
    p = np.array([c[0] for c in curve])
    r = np.array([c[1] for c in curve])
    return f_measure(p, r, cfg)


def f_max(preds, gts, cfg: MetricConfig = MetricConfig()) -> float:
    return float(np.max(fm_curve(preds, gts, cfg)))


def adaptive_threshold(pred, cfg: MetricConfig = MetricConfig()) -> float:
    return min(cfg.adaptive_factor * float(np.mean(pred)), ADAPTIVE_CLAMP)


def f_adaptive_single(pred, gt, cfg: MetricConfig = MetricConfig()) -> float:
    """F at the per-image adaptive threshold."""
    pred, gt = _check_image_pair(pred, gt)
    tau = adaptive_threshold(pred, cfg)
    tp = int(np.count_nonzero((pred > tau) & gt))
    fp = int(np.count_nonzero((pred > tau) & ~gt))
    p, r = precision_recall(np.array([tp]), np.array([fp]), int(gt.sum()))
    return float(f_measure(p, r, cfg)[0])


def f_avg(preds, gts, cfg: MetricConfig = MetricConfig()) -> float:
    return float(np.mean([f_adaptive_single(p, g, cfg) for p, g in zip(preds, gts)]))


def mae_single(pred, gt) -> float:
    # exact compensated summation keeps reports schedule-independent
    pred, gt = _check_image_pair(pred, gt)
    return math.fsum(np.abs(pred - gt.astype(np.float64)).ravel().tolist()) / pred.size


def mae(preds, gts) -> float:
    return float(np.mean([mae_single(p, g) for p, g in zip(preds, gts)]))


# ------------------------------------------------------------- structure measure

def _matlab_round(v: float) -> int:
    # MATLAB rounds halves away from zero; numpy rounds halves to even
    return int(np.floor(v + 0.5))


def _object_score(values: np.ndarray) -> float:
    if values.size == 0:
        return 0.0
    x = float(values.mean())
    sigma = float(values.std(ddof=1)) if values.size > 1 else 0.0
    return 2.0 * x / (x * x + 1.0 + sigma + _EPS)


def _s_object(pred, gt):
    u = float(gt.mean())
    o_fg = _object_score(pred[gt])
    o_bg = _object_score(1.0 - pred[~gt])
    return u * o_fg + (1.0 - u) * o_bg


def _centroid(gt) -> tuple:
    rows, cols = gt.shape
    total = gt.sum()
    if total == 0:
        return _matlab_round(cols / 2.0), _matlab_round(rows / 2.0)
    i = np.arange(1, cols + 1, dtype=np.float64)
    j = np.arange(1, rows + 1, dtype=np.float64)
    x = _matlab_round(float((gt.sum(axis=0) * i).sum() / total))
    y = _matlab_round(float((gt.sum(axis=1) * j).sum() / total))
    return x, y


def _region_ssim(pred, gt):
    n = pred.size
    if n == 0:
        return 0.0
    x = float(pred.mean())
    y = float(gt.mean())
    sigma_x = float(((pred - x) ** 2).sum() / (n - 1 + _EPS))
    sigma_y = float(((gt - y) ** 2).sum() / (n - 1 + _EPS))
    sigma_xy = float(((pred - x) * (gt - y)).sum() / (n - 1 + _EPS))
    aleph = 4.0 * x * y * sigma_xy
    beth = (x * x + y * y) * (sigma_x + sigma_y)
    if aleph != 0.0:
        return aleph / (beth + _EPS)
    if beth == 0.0:
        return 1.0
    return 0.0


def _s_region(pred, gt):
    rows, cols = gt.shape
    x, y = _centroid(gt)
    area = float(rows * cols)
    gt_f = gt.astype(np.float64)
    w1 = (x * y) / area
    w2 = ((cols - x) * y) / area
    w3 = (x * (rows - y)) / area
    w4 = 1.0 - w1 - w2 - w3
    parts = (
        (w1, pred[:y, :x], gt_f[:y, :x]),
        (w2, pred[:y, x:], gt_f[:y, x:]),
        (w3, pred[y:, :x], gt_f[y:, :x]),
        (w4, pred[y:, x:], gt_f[y:, x:]),
    )
    return sum(w * _region_ssim(p, g) for w, p, g in parts)


def s_measure(pred, gt, cfg: MetricConfig = MetricConfig()) -> float:
    """Structure similarity: alpha-blend of object- and region-aware terms."""
    pred, gt = _check_image_pair(pred, gt)
    y = float(gt.mean())
    if y == 0.0:
        score = 1.0 - float(pred.mean())
    elif y == 1.0:
        score = float(pred.mean())
    else:
        score = cfg.alpha * _s_object(pred, gt) + (1.0 - cfg.alpha) * _s_region(pred, gt)
    return float(np.clip(score, 0.0, 1.0))


# ---------------------------------------------------- enhanced-alignment measure

def _e_score_from_counts(tp, fp, n_fg, n_px):
    """Alignment score of a binarized map given its confusion counts.

    Binary maps make the demeaned alignment matrix piecewise constant over
    the four confusion cells, so the pixel sum collapses to a weighted sum
    of four values.
    """
    tp = np.asarray(tp, dtype=np.float64)
    fp = np.asarray(fp, dtype=np.float64)
    pos = tp + fp
    n_bg = n_px - n_fg
    if n_fg == 0:
        enhanced_sum = n_px - pos
    elif n_fg == n_px:
        enhanced_sum = pos
    else:
        fn = n_fg - tp
        tn = n_bg - fp
        mu_fm = pos / n_px
        mu_gt = n_fg / n_px
        a_fg, a_bg = 1.0 - mu_fm, -mu_fm
        b_fg, b_bg = 1.0 - mu_gt, -mu_gt
        enhanced_sum = 0.0
        for a, b, count in ((a_fg, b_fg, tp), (a_fg, b_bg, fp), (a_bg, b_fg, fn), (a_bg, b_bg, tn)):
            align = 2.0 * a * b / (a * a + b * b + _EPS)
            enhanced_sum = enhanced_sum + count * (align + 1.0) ** 2 / 4.0
    return np.clip(enhanced_sum / (n_px - 1 + _EPS), 0.0, 1.0)


def e_measure_stats(pred, gt, cfg: MetricConfig = MetricConfig()) -> dict:
    """Mean / max over the threshold sweep plus the adaptive-threshold score."""
    pred, gt = _check_image_pair(pred, gt)
    thresholds = cfg.thresholds
    tp, fp, n_fg, n_bg = threshold_counts(pred, gt, thresholds)
    curve = _e_score_from_counts(tp, fp, n_fg, n_fg + n_bg)
    tau = adaptive_threshold(pred, cfg)
    tp_a = int(np.count_nonzero((pred > tau) & gt))
    fp_a = int(np.count_nonzero((pred > tau) & ~gt))
    adaptive = float(_e_score_from_counts(np.array([tp_a]), np.array([fp_a]), n_fg, gt.size)[0])
    return {
        "mean": float(curve.mean()),
        "max": float(curve.max()),
        "adaptive": adaptive,
        "curve": curve,
    }


def e_measure(pred, gt, cfg: MetricConfig = MetricConfig()) -> float:
    """Reported value: mean of the enhanced-alignment score over the sweep."""
    return e_measure_stats(pred, gt, cfg)["mean"]


# ---------------------------------------------------------- weighted F-measure

def _matlab_gaussian(shape=(7, 7), sigma=5.0):
    m, n = [(s - 1) / 2.0 for s in shape]
    y, x = np.ogrid[-m : m + 1, -n : n + 1]
    h = np.exp(-(x * x + y * y) / (2.0 * sigma * sigma))
    h[h < np.finfo(np.float64).eps * h.max()] = 0.0
    return h / h.sum()


def weighted_f_measure(pred, gt, cfg: MetricConfig = MetricConfig()) -> float:
    """Distance-weighted F: errors near the object count less than far ones.

    Follows the reference pipeline: copy each background error from its
    nearest foreground pixel, blur with a 7x7 sigma-5 Gaussian, keep the
    pointwise minimum on the foreground, and scale background errors by
    2 - exp(ln(0.5)/5 * d) with d the distance to the object.
    """
    pred, gt = _check_image_pair(pred, gt)
    if not gt.any():
        return 0.0
    err = np.abs(pred - gt.astype(np.float64))
    dist, (ir, ic) = ndimage.distance_transform_edt(~gt, return_indices=True)
    bg = ~gt
    err_t = err.copy()
    err_t[bg] = err[ir[bg], ic[bg]]
    blurred = ndimage.correlate(err_t, _matlab_gaussian(), mode="constant", cval=0.0)
    min_err = err.copy()
    swap = gt & (blurred < err)
    min_err[swap] = blurred[swap]
    importance = np.ones_like(err)
    importance[bg] = 2.0 - np.exp(np.log(0.5) / 5.0 * dist[bg])
    weighted_err = min_err * importance
    n_fg = float(gt.sum())
    tpw = n_fg - float(weighted_err[gt].sum())
    fpw = float(weighted_err[bg].sum())
    recall = 1.0 - float(weighted_err[gt].mean())
    precision = tpw / (_EPS + tpw + fpw)
    score = (
        (1.0 + cfg.wf_beta_sq)
        * precision
        * recall
        / (_EPS + cfg.wf_beta_sq * precision + recall)
    )
    return float(np.clip(score, 0.0, 1.0))


# ------------------------------------------------------------------ aggregation

def _image_record(item):
    image_id, pred, gt, cfg = item
    e_stats = e_measure_stats(pred, gt, cfg)
    return {
        "id": image_id,
        "mae": mae_single(pred, gt),
        "s_measure": s_measure(pred, gt, cfg),
        "e_mean": e_stats["mean"],
        "e_max": e_stats["max"],
        "e_adaptive": e_stats["adaptive"],
        "f_adaptive": f_adaptive_single(pred, gt, cfg),
        "weighted_f": weighted_f_measure(pred, gt, cfg),
    }


def _worker_count() -> int:
    raw = os.environ.get("MINETLAB_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def evaluate_pairs(preds, gts, cfg: MetricConfig = MetricConfig(), ids=None) -> MetricReport:
    """Full six-metric report for in-memory prediction/mask pairs.

    Per-image work may run on several threads (MINETLAB_THREADS); results
    are reduced in input order so the report is schedule-independent.
    """
    preds = [np.asarray(p, dtype=np.float64) for p in preds]
    if cfg.normalize_predictions:
        preds = [normalize_prediction(p) for p in preds]
    gts = [np.asarray(g) for g in gts]
    if len(preds) != len(gts) or not preds:
        raise DataError(f"need equal nonzero counts, got {len(preds)} preds / {len(gts)} masks")
    if ids is None:
        ids = [str(i) for i in range(len(preds))]

    items = list(zip(ids, preds, gts, [cfg] * len(preds)))
    workers = _worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_image_record, items))
    else:
        records = [_image_record(item) for item in items]

    curve = pr_curve(preds, gts, cfg)
    fcurve = fm_curve(preds, gts, cfg)
    return MetricReport(
        f_max=float(np.max(fcurve)),
        f_avg=float(np.mean([r["f_adaptive"] for r in records])),
        f_w=float(np.mean([r["weighted_f"] for r in records])),
        e_m=float(np.mean([r["e_mean"] for r in records])),
        s_m=float(np.mean([r["s_measure"] for r in records])),
        mae=float(np.mean([r["mae"] for r in records])),
        pr_curve=curve,
        fm_curve=fcurve.tolist(),
        per_image=records,
    )


def evaluate_dataset(
    pred_dir,
    gt_dir,
    cfg: MetricConfig = MetricConfig(),
    report_path=None,
    per_image_path=None,
    curve_path=None,
) -> MetricReport:
    """Evaluate matching-stem image pairs from two directories.

    Predictions are read as 8-bit grayscale, masks binarized at half code
    value.  Raises DataError when the stem intersection is empty;
    unreadable files are reported per file.
    """
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    pred_stems = list_stems(pred_dir)
    gt_stems = list_stems(gt_dir)
    common = sorted(set(pred_stems) & set(gt_stems))
    if not common:
        raise DataError(
            f"no matching filenames between {pred_dir} and {gt_dir} "
            f"({len(pred_stems)} predictions, {len(gt_stems)} masks)"
        )
    unmatched = sorted(set(pred_stems) ^ set(gt_stems))

    preds, gts, ids, failures = [], [], [], []
    for stem in common:
        try:
            preds.append(load_gray(pred_stems[stem]))
            gts.append(load_mask(gt_stems[stem]))
            ids.append(stem)
        except Exception as exc:  # unreadable image: report per file
            failures.append(f"{stem}: {exc}")
    if failures:
        raise DataError("unreadable files: " + "; ".join(failures))
    if not preds:
        raise DataError("all matched files failed to load")

    report = evaluate_pairs(preds, gts, cfg, ids=ids)
    if unmatched:
        report.per_image.append({"id": "__unmatched__", "files": unmatched})

    if report_path is not None:
        write_report_json(report, report_path)
    if per_image_path is not None:
        write_per_image_csv(report, per_image_path)
    if curve_path is not None:
        write_curve_csv(report, cfg, curve_path)
    return report


def write_report_json(report: MetricReport, path):
    payload = json.dumps(report.summary(), sort_keys=True, indent=2)
    Path(path).write_text(payload + "\n")


def write_per_image_csv(report: MetricReport, path):
    fields = ["id", "mae", "s_measure", "e_mean", "e_max", "e_adaptive", "f_adaptive", "weighted_f"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for rec in report.per_image:
            if rec.get("id") == "__unmatched__":
                continue
            writer.writerow([rec["id"]] + [repr(rec[f]) for f in fields[1:]])


def write_curve_csv(report: MetricReport, cfg: MetricConfig, path):
    thresholds = cfg.thresholds
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "precision", "recall", "f_measure"])
        for t, (p, r), f in zip(thresholds, report.pr_curve, report.fm_curve):
            writer.writerow([repr(float(t)), repr(p), repr(r), repr(f)])
