"""Building blocks of the decoder: fusion units, the aggregate interaction
module that mixes adjacent encoder levels, and the self-interaction module
that extracts multi-scale information inside one level.

Both interaction modules follow the same transformation - interaction -
fusion layout: per-branch channel-reducing transforms, one simultaneous
cross-resolution exchange round (resample + convolution + add), per-branch
processing, then a concatenation-and-reduce merge added onto a residual
main path.  The final merge of each module is a plain convolution, so
zeroing its weights reduces the module to its residual path exactly.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ShapeError


class FusionUnit(nn.Module):
    """Convolution + batch norm + ReLU; the glue block of the decoder."""

    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1, bn_momentum=0.1):
        super().__init__()
        self.conv = nn.Conv2d(
            in_channels, out_channels, kernel_size, stride=stride, padding=kernel_size // 2
        )
        self.bn = nn.BatchNorm2d(out_channels, momentum=bn_momentum)
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x):
        if x.shape[1] != self.conv.in_channels:
            raise ShapeError(
                f"channel axis has {x.shape[1]} channels, unit expects {self.conv.in_channels}"
            )
        return self.relu(self.bn(self.conv(x)))


def _down2(x):
    return F.avg_pool2d(x, kernel_size=2)


def _up2(x):
    return F.interpolate(x, scale_factor=2, mode="nearest")


class AggregateInteraction(nn.Module):
    """Fuses an encoder level with its adjacent levels (one or two neighbors).

    Branches run at their native resolutions.  The exchange sends the
    neighbor branches into the current one and the current branch into each
    neighbor, all computed from the pre-exchange values.  Outputs of all
    branches are resampled to the current resolution, concatenated and
    reduced; the result rides on a residual transform of the current level,
    which keeps the level's own features dominant.
    """

    def __init__(self, curr_channels, out_channels, higher_res_channels=None,
                 lower_res_channels=None, bn_momentum=0.1):
        super().__init__()
        if higher_res_channels is None and lower_res_channels is None:
            raise ShapeError("an interaction level needs at least one neighbor")
        c = out_channels
        self.identity_path = FusionUnit(curr_channels, c, bn_momentum=bn_momentum)
        self.transform_curr = FusionUnit(curr_channels, c, bn_momentum=bn_momentum)
        self.has_higher_res = higher_res_channels is not None
        self.has_lower_res = lower_res_channels is not None
        n_branches = 1
        if self.has_higher_res:
            # neighbor one level shallower: double resolution
            self.transform_hi = FusionUnit(higher_res_channels, c, bn_momentum=bn_momentum)
            self.exchange_hi_to_curr = nn.Conv2d(c, c, 3, padding=1)
            self.exchange_curr_to_hi = nn.Conv2d(c, c, 3, padding=1)
            self.branch_hi = FusionUnit(c, c, bn_momentum=bn_momentum)
            n_branches += 1
        if self.has_lower_res:
            # neighbor one level deeper: half resolution
            self.transform_lo = FusionUnit(lower_res_channels, c, bn_momentum=bn_momentum)
            self.exchange_lo_to_curr = nn.Conv2d(c, c, 3, padding=1)
            self.exchange_curr_to_lo = nn.Conv2d(c, c, 3, padding=1)
            self.branch_lo = FusionUnit(c, c, bn_momentum=bn_momentum)
            n_branches += 1
        self.branch_curr = FusionUnit(c, c, bn_momentum=bn_momentum)
        self.merge = nn.Conv2d(n_branches * c, c, 3, padding=1)

    def forward(self, curr, higher_res=None, lower_res=None):
        if self.has_higher_res != (higher_res is not None):
            raise ShapeError("higher-resolution neighbor presence does not match construction")
        if self.has_lower_res != (lower_res is not None):
            raise ShapeError("lower-resolution neighbor presence does not match construction")
        n, _, h, w = curr.shape
        if higher_res is not None and higher_res.shape[-2:] != (2 * h, 2 * w):
            raise ShapeError(
                f"higher-resolution neighbor must be exactly 2x, got {tuple(higher_res.shape[-2:])}"
                f" for current {(h, w)}"
            )
        if lower_res is not None and lower_res.shape[-2:] != (h // 2, w // 2):
            raise ShapeError(
                f"lower-resolution neighbor must be exactly 1/2x, got {tuple(lower_res.shape[-2:])}"
                f" for current {(h, w)}"
            )

        x_curr = self.transform_curr(curr)
        x_hi = self.transform_hi(higher_res) if higher_res is not None else None
        x_lo = self.transform_lo(lower_res) if lower_res is not None else None

        # simultaneous exchange round from the pre-exchange values
        y_curr = x_curr
        if x_hi is not None:
            y_curr = y_curr + self.exchange_hi_to_curr(_down2(x_hi))
        if x_lo is not None:
            y_curr = y_curr + self.exchange_lo_to_curr(_up2(x_lo))
        branches = []
        if x_hi is not None:
            y_hi = x_hi + self.exchange_curr_to_hi(_up2(x_curr))
            branches.append(_down2(self.branch_hi(y_hi)))
        branches.append(self.branch_curr(y_curr))
        if x_lo is not None:
            y_lo = x_lo + self.exchange_curr_to_lo(_down2(x_curr))
            branches.append(_up2(self.branch_lo(y_lo)))

        return self.identity_path(curr) + self.merge(torch.cat(branches, dim=1))


class SelfInteraction(nn.Module):
    """Two-branch multi-scale block with a residual shortcut.

    The high-resolution branch keeps the input resolution at half the
    channels; the low-resolution branch halves the resolution at the full
    channel count.  After one exchange the low branch is upsampled, reduced,
    normalized and rectified, summed with the high branch and merged back to
    the input width; the input is added on top (shape-preserving).
    """

    def __init__(self, channels, bn_momentum=0.1):
        super().__init__()
        if channels < 2:
            raise ShapeError(f"self-interaction needs >= 2 channels, got {channels}")
        k = channels // 2
        self.hi_in = FusionUnit(channels, k, bn_momentum=bn_momentum)
        self.lo_in = FusionUnit(channels, 2 * k, stride=2, bn_momentum=bn_momentum)
        self.exchange_hi_to_lo = nn.Conv2d(k, 2 * k, 3, padding=1)
        self.exchange_lo_to_hi = nn.Conv2d(2 * k, k, 3, padding=1)
        self.branch_hi = FusionUnit(k, k, bn_momentum=bn_momentum)
        self.branch_lo = FusionUnit(2 * k, 2 * k, bn_momentum=bn_momentum)
        self.lo_up = FusionUnit(2 * k, k, bn_momentum=bn_momentum)
        self.merge = nn.Conv2d(k, channels, 3, padding=1)

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % 2 or w % 2:
            axis = "height" if h % 2 else "width"
            raise ShapeError(f"{axis} {h if h % 2 else w} is odd; the low-resolution branch halves it")
        x_hi = self.hi_in(x)
        x_lo = self.lo_in(x)
        y_hi = x_hi + self.exchange_lo_to_hi(_up2(x_lo))
        y_lo = x_lo + self.exchange_hi_to_lo(_down2(x_hi))
        z_hi = self.branch_hi(y_hi)
        z_lo = self.lo_up(_up2(self.branch_lo(y_lo)))
        return x + self.merge(z_hi + z_lo)


def zero_merge_(module) -> None:
    """Test hook: zero the final merge convolution so only the residual path remains."""
    nn.init.zeros_(module.merge.weight)
    if module.merge.bias is not None:
        nn.init.zeros_(module.merge.bias)


if __name__ == "__main__":
    aim = AggregateInteraction(8, 64, higher_res_channels=4, lower_res_channels=16)
    out = aim(torch.rand(1, 8, 80, 80), higher_res=torch.rand(1, 4, 160, 160),
              lower_res=torch.rand(1, 16, 40, 40))
    print("aggregate interaction:", tuple(out.shape))
    sim = SelfInteraction(64)
    print("self interaction:", tuple(sim(torch.rand(1, 64, 40, 40)).shape))
