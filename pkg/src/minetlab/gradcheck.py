"""Numeric verification of the analytic loss gradients.

Central finite differences of the loss values are compared against the
closed-form per-pixel derivatives on random inputs, in double precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from . import losses


def finite_difference_grad(fn, x: torch.Tensor, step: float = 1e-5) -> torch.Tensor:
    """Central-difference gradient of a scalar function, elementwise in x."""
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + step
        hi = float(fn(x))
        flat[i] = orig - step
        lo = float(fn(x))
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def max_relative_error(analytic: torch.Tensor, numeric: torch.Tensor):
    """Worst relative deviation and its flat index."""
    scale = torch.maximum(analytic.abs(), numeric.abs()).clamp_min(1e-12)
    rel = (analytic - numeric).abs() / scale
    idx = int(rel.argmax())
    return float(rel.reshape(-1)[idx]), idx


@dataclass
class GradCheckReport:
    bcel_max_rel_err: float
    cel_max_rel_err: float
    bcel_worst: dict
    cel_worst: dict
    fg_spread: float
    bg_spread: float
    class_gap_err: float
    tolerance: float
    cases: int
    corrupted: bool = False
    notes: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return (
            self.bcel_max_rel_err < self.tolerance
            and self.cel_max_rel_err < self.tolerance
        )


def run_gradient_check(
    size: int = 8,
    seed: int = 0,
    tolerance: float = 1e-4,
    cases: int = 20,
    step: float = 1e-5,
    corrupt: bool = False,
) -> GradCheckReport:
    """Check both analytic loss gradients on ``cases`` random size x size images.

    ``corrupt`` is a test hook that perturbs the analytic value so the check
    must fail (negative control).
    """
    gen = torch.Generator().manual_seed(seed)
    bcel_err = cel_err = 0.0
    bcel_worst = cel_worst = {}
    fg_spread = bg_spread = gap_err = 0.0
    for case in range(cases):
        P = torch.rand((size, size), generator=gen, dtype=torch.float64) * 0.98 + 0.01
        G = (torch.rand((size, size), generator=gen, dtype=torch.float64) < 0.5).double()
        if G.sum() == 0:
            G[0, 0] = 1.0
        if G.sum() == G.numel():
            G[0, 0] = 0.0

        analytic_b = losses.bcel_grad_analytic(P, G, reduction="sum")
        numeric_b = finite_difference_grad(lambda x: losses.bcel(x, G, reduction="sum"), P, step)
        if corrupt:
            analytic_b = analytic_b * 1.01 + 0.05
        err, idx = max_relative_error(analytic_b, numeric_b)
        if err > bcel_err:
            bcel_err = err
            bcel_worst = _worst(case, idx, size, analytic_b, numeric_b)

        analytic_c = losses.cel_grad_analytic(P, G)
        numeric_c = finite_difference_grad(lambda x: losses.cel(x, G), P, step)
        if corrupt:
            analytic_c = analytic_c * 1.01 + 0.05
        err, idx = max_relative_error(analytic_c, numeric_c)
        if err > cel_err:
            cel_err = err
            cel_worst = _worst(case, idx, size, analytic_c, numeric_c)

        fg = analytic_c[G == 1]
        bg = analytic_c[G == 0]
        fg_spread = max(fg_spread, float(fg.max() - fg.min()))
        bg_spread = max(bg_spread, float(bg.max() - bg.min()))
        expected_gap = 2.0 / float((P + G).sum())
        gap_err = max(gap_err, abs(float(bg.mean() - fg.mean()) - expected_gap))

    return GradCheckReport(
        bcel_max_rel_err=bcel_err,
        cel_max_rel_err=cel_err,
        bcel_worst=bcel_worst,
        cel_worst=cel_worst,
        fg_spread=fg_spread,
        bg_spread=bg_spread,
        class_gap_err=gap_err,
        tolerance=tolerance,
        cases=cases,
        corrupted=corrupt,
    )


def _worst(case, flat_idx, size, analytic, numeric):
    return {
        "case": case,
        "pixel": (flat_idx // size, flat_idx % size),
        "analytic": float(analytic.reshape(-1)[flat_idx]),
        "numeric": float(numeric.reshape(-1)[flat_idx]),
    }
