"""Training objectives: per-pixel binary cross entropy and the region
consistency loss, with closed-form per-pixel gradients for both.

The consistency loss of a prediction P against a binary mask G is the region
ratio (FP + FN) / (FP + 2*TP + FN) = sum(p + g - 2*p*g) / sum(p + g).  It is
bounded in [0, 1], reaches 1 exactly when the support of P is disjoint from
the foreground of G, and its per-pixel gradient

    (1 - 2*g) / sum(p + g)  -  sum(p + g - 2*p*g) / sum(p + g)**2

depends on the pixel position only through g, so it is constant within the
foreground class and within the background class.

Tensors are interpreted as a batch along axis 0 when they have 3 or more
axes (N,H,W or N,1,H,W); 1-D and 2-D tensors are a single image.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import torch

from .errors import ShapeError

BCEL_REDUCTIONS = ("sum", "mean")
CEL_BATCH_MODES = ("per_image_mean", "global_sum")

#: predictions produced by the network are clamped to [EPS, 1 - EPS]
EPS = 1e-7


def _check_pair(P: torch.Tensor, G: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    P = torch.as_tensor(P)
    G = torch.as_tensor(G)
    if P.shape != G.shape:
        raise ShapeError(f"prediction shape {tuple(P.shape)} != mask shape {tuple(G.shape)}")
    if not torch.all((G == 0) | (G == 1)):
        raise ValueError("ground-truth mask must be strictly binary (values in {0, 1})")
    return P, G.to(P.dtype)


def _flatten_images(x: torch.Tensor) -> torch.Tensor:
    # (N, pixels) view; tensors with fewer than 3 axes are one image
    if x.ndim >= 3:
        return x.reshape(x.shape[0], -1)
    return x.reshape(1, -1)


def bcel(P: torch.Tensor, G: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """Binary cross entropy accumulated per pixel.

    ``reduction="sum"`` is the raw accumulated value; ``"mean"`` divides by
    the total pixel count.
    """
    if reduction not in BCEL_REDUCTIONS:
        raise ValueError(f"reduction must be one of {BCEL_REDUCTIONS}, got {reduction!r}")
    P, G = _check_pair(P, G)
    if torch.any(P <= 0) or torch.any(P >= 1):
        raise ValueError("predictions must lie strictly inside (0, 1); clamp before the log")
    per_pixel = -(G * torch.log(P) + (1.0 - G) * torch.log1p(-P))
    total = per_pixel.sum()
    if reduction == "mean":
        return total / P.numel()
    return total


def bcel_grad_analytic(
    P: torch.Tensor, G: torch.Tensor, reduction: str = "sum"
) -> torch.Tensor:
    """Per-pixel derivative of :func:`bcel`:  -g/p + (1-g)/(1-p).

    Defaults to the sum reduction (the raw accumulated loss); ``"mean"``
    divides by the pixel count to match ``bcel(..., reduction="mean")``.
    Values at or beyond the clamp boundary [EPS, 1-EPS] are flagged with a
    warning since the derivative blows up there.
    """
    if reduction not in BCEL_REDUCTIONS:
        raise ValueError(f"reduction must be one of {BCEL_REDUCTIONS}, got {reduction!r}")
    P, G = _check_pair(P, G)
    if torch.any(P <= 0) or torch.any(P >= 1):
        raise ValueError("predictions must lie strictly inside (0, 1)")
    if torch.any(P <= EPS) or torch.any(P >= 1.0 - EPS):
        warnings.warn(
            "prediction values at the clamp boundary; cross-entropy gradient "
            "is saturated there",
            RuntimeWarning,
            stacklevel=2,
        )
    grad = -G / P + (1.0 - G) / (1.0 - P)
    if reduction == "mean":
        grad = grad / P.numel()
    return grad


def _cel_sums(P: torch.Tensor, G: torch.Tensor):
    # per-image mismatch sum(p + g - 2pg) and mass sum(p + g)
    p = _flatten_images(P)
    g = _flatten_images(G)
    mismatch = (p + g - 2.0 * p * g).sum(dim=1)
    mass = (p + g).sum(dim=1)
    return mismatch, mass


def cel(P: torch.Tensor, G: torch.Tensor, batch_mode: str = "per_image_mean") -> torch.Tensor:
    """Region consistency loss in [0, 1].

    ``per_image_mean`` evaluates the ratio independently per image and
    averages; ``global_sum`` pools the sums over the whole batch.  An image
    whose prediction and mask are both identically zero has an undefined
    0/0 ratio and contributes the fallback value 0 (see :func:`cel_flags`).
    """
    value, _ = _cel_with_flags(P, G, batch_mode)
    return value


def cel_flags(P: torch.Tensor, G: torch.Tensor, batch_mode: str = "per_image_mean"):
    """Indices of images hitting the degenerate 0/0 fallback of :func:`cel`."""
    _, flags = _cel_with_flags(P, G, batch_mode)
    return flags


def _cel_with_flags(P, G, batch_mode):
    if batch_mode not in CEL_BATCH_MODES:
        raise ValueError(f"batch_mode must be one of {CEL_BATCH_MODES}, got {batch_mode!r}")
    P, G = _check_pair(P, G)
    if torch.any(P < 0) or torch.any(P > 1):
        raise ValueError("predictions must lie in [0, 1]")
    mismatch, mass = _cel_sums(P, G)
    degenerate = mass == 0
    if batch_mode == "global_sum":
        total_mass = mass.sum()
        if total_mass == 0:
            value = torch.zeros((), dtype=P.dtype)
        else:
            value = mismatch.sum() / total_mass
    else:
        safe_mass = torch.where(degenerate, torch.ones_like(mass), mass)
        ratios = torch.where(degenerate, torch.zeros_like(mass), mismatch / safe_mass)
        value = ratios.mean()
    flags = tuple(i for i, bad in enumerate(degenerate.tolist()) if bad)
    return value, flags


def cel_grad_analytic(
    P: torch.Tensor, G: torch.Tensor, batch_mode: str = "per_image_mean"
) -> torch.Tensor:
    """Closed-form per-pixel gradient of :func:`cel`, same shape as P.

    Within one image the gradient takes exactly two values, one per class;
    background minus foreground equals 2 / sum(p + g).  Degenerate images
    (0/0 fallback) get a zero gradient.
    """
    if batch_mode not in CEL_BATCH_MODES:
        raise ValueError(f"batch_mode must be one of {CEL_BATCH_MODES}, got {batch_mode!r}")
    P, G = _check_pair(P, G)
    mismatch, mass = _cel_sums(P, G)
    n_images = mass.shape[0]
    if batch_mode == "global_sum":
        mass_total = mass.sum()
        if mass_total == 0:
            return torch.zeros_like(P)
        grad = (1.0 - 2.0 * G) / mass_total - mismatch.sum() / mass_total**2
        return grad
    degenerate = mass == 0
    safe_mass = torch.where(degenerate, torch.ones_like(mass), mass)
    shape = (n_images,) + (1,) * (max(P.ndim, 1) - 1)
    first = (1.0 - 2.0 * G) / safe_mass.reshape(shape)
    second = (mismatch / safe_mass**2).reshape(shape)
    grad = (first - second) / n_images
    grad = torch.where(degenerate.reshape(shape), torch.zeros_like(grad), grad)
    return grad.reshape(P.shape)


@dataclass(frozen=True)
class LossBreakdown:
    """Components of the combined objective: total = bcel + lam * cel."""

    bcel: torch.Tensor
    cel: torch.Tensor
    lam: float
    total: torch.Tensor
    degenerate_images: tuple = ()

    def as_floats(self) -> dict:
        return {
            "bcel": float(self.bcel),
            "cel": float(self.cel),
            "lambda": self.lam,
            "total": float(self.total),
        }


def total_loss(
    P: torch.Tensor,
    G: torch.Tensor,
    lam: float = 1.0,
    bcel_reduction: str = "mean",
    cel_batch_mode: str = "per_image_mean",
) -> LossBreakdown:
    """Combined objective bcel + lam * cel (lam >= 0, default 1)."""
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    bce = bcel(P, G, reduction=bcel_reduction)
    region, flags = _cel_with_flags(P, G, cel_batch_mode)
    return LossBreakdown(
        bcel=bce,
        cel=region,
        lam=lam,
        total=bce + lam * region,
        degenerate_images=flags,
    )
