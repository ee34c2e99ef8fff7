"""Datasets: image/mask pair loading, training-time augmentation, and a
seeded synthetic-shapes generator for desk-scale experiments.

Every sample's augmentation stream is derived from (global seed, sample id,
epoch), so parallel loading cannot change results.  The synthetic generator
derives each sample from (seed, index); regeneration is byte-identical and
independent of the requested count.
"""

from __future__ import annotations

import csv
import warnings
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy import ndimage

from .errors import ConfigError, DataError
from .imgio import list_stems, load_mask, load_rgb


@dataclass
class SamplePair:
    image: np.ndarray  # H x W x 3 float32 in [0, 1]
    mask: np.ndarray  # H x W float32 in {0, 1}
    id: str

    def __post_init__(self):
        if self.image.shape[:2] != self.mask.shape:
            raise DataError(
                f"{self.id}: image {self.image.shape[:2]} and mask {self.mask.shape} differ"
            )


class PairDataset(Sequence):
    """Stable, id-sorted sample collection with load bookkeeping."""

    def __init__(self, pairs, skipped=0, unmatched=()):
        self.pairs = list(pairs)
        self.skipped = skipped
        self.unmatched = tuple(unmatched)

    def __len__(self):
        return len(self.pairs)

    def __getitem__(self, index):
        return self.pairs[index]

    def ids(self):
        return [pair.id for pair in self.pairs]


@dataclass(frozen=True)
class AugmentationConfig:
    hflip_prob: float = 0.5
    rotation_degrees: float = 15.0
    brightness: float = 0.1
    contrast: float = 0.1
    saturation: float = 0.1
    resize_to: tuple = (320, 320)
    rotation_fill: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ConfigError(f"hflip_prob must be in [0, 1], got {self.hflip_prob}")
        if self.rotation_degrees < 0:
            raise ConfigError("rotation_degrees must be >= 0")
        for name in ("brightness", "contrast", "saturation"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} strength must be >= 0")
        h, w = self.resize_to
        if h % 16 or w % 16:
            raise ConfigError(f"resize_to {self.resize_to} must be divisible by 16")


def load_pairs(image_dir, mask_dir, resize_to=(320, 320)) -> PairDataset:
    """Pair images and masks by filename stem, resized and binarized.

    Unmatched stems are skipped with a warning and listed on the dataset;
    corrupt files are skipped with a warning and counted.
    """
    h, w = resize_to
    if h % 16 or w % 16:
        raise ConfigError(f"resize_to {resize_to} must be divisible by 16")
    images = list_stems(image_dir)
    masks = list_stems(mask_dir)
    common = sorted(set(images) & set(masks))
    unmatched = sorted(set(images) ^ set(masks))
    if unmatched:
        warnings.warn(f"{len(unmatched)} files without counterparts: {unmatched[:8]}", stacklevel=2)
    if not common:
        warnings.warn(f"no matching image/mask stems under {image_dir} and {mask_dir}", stacklevel=2)

    pairs, skipped = [], 0
    for stem in common:
        try:
            image = load_rgb(images[stem], resize_to=resize_to)
            mask = load_mask(masks[stem], resize_to=resize_to)
        except Exception as exc:
            warnings.warn(f"skipping corrupt sample {stem}: {exc}", stacklevel=2)
            skipped += 1
            continue
        pairs.append(SamplePair(image=image, mask=mask, id=stem))
    return PairDataset(pairs, skipped=skipped, unmatched=unmatched)


def load_manifest(manifest_csv, resize_to=(320, 320)) -> PairDataset:
    """Two-column CSV manifest: image path, mask path (one sample per row).

    Relative paths resolve against the manifest's directory; sample ids are
    the image stems.  Corrupt rows are skipped with a warning and counted.
    """
    h, w = resize_to
    if h % 16 or w % 16:
        raise ConfigError(f"resize_to {resize_to} must be divisible by 16")
    manifest_csv = Path(manifest_csv)
    if not manifest_csv.is_file():
        raise DataError(f"manifest {manifest_csv} not found")
    root = manifest_csv.parent
    pairs, skipped = [], 0
    with open(manifest_csv, newline="") as fh:
        for row_number, row in enumerate(csv.reader(fh)):
            if not row or row[0].lstrip().startswith("#"):
                continue
            if len(row) != 2:
                raise DataError(f"{manifest_csv}:{row_number + 1}: expected 2 columns, got {len(row)}")
            image_path = root / row[0].strip()
            mask_path = root / row[1].strip()
            try:
                image = load_rgb(image_path, resize_to=resize_to)
                mask = load_mask(mask_path, resize_to=resize_to)
            except Exception as exc:
                warnings.warn(f"skipping manifest row {row_number + 1}: {exc}", stacklevel=2)
                skipped += 1
                continue
            pairs.append(SamplePair(image=image, mask=mask, id=Path(row[0].strip()).stem))
    pairs.sort(key=lambda pair: pair.id)
    return PairDataset(pairs, skipped=skipped)


def sample_rng(seed: int, sample_id: str, epoch: int) -> np.random.Generator:
    """Per-(seed, sample, epoch) random stream; safe under parallel workers."""
    return np.random.default_rng(
        np.random.SeedSequence([seed, zlib.crc32(sample_id.encode()), epoch])
    )


def _luminance(image):
    return image @ np.array([0.299, 0.587, 0.114], dtype=image.dtype)


def augment(pair: SamplePair, cfg: AugmentationConfig, rng: np.random.Generator) -> SamplePair:
    """Horizontal flip, rotation and color jitter; geometry shared with the mask."""
    image = pair.image
    mask = pair.mask

    if rng.uniform() < cfg.hflip_prob:
        image = image[:, ::-1].copy()
        mask = mask[:, ::-1].copy()

    angle = float(rng.uniform(-cfg.rotation_degrees, cfg.rotation_degrees))
    if angle != 0.0:
        image = ndimage.rotate(
            image, angle, axes=(1, 0), reshape=False, order=1,
            mode="constant", cval=cfg.rotation_fill,
        ).astype(np.float32)
        mask = ndimage.rotate(
            mask, angle, axes=(1, 0), reshape=False, order=0,
            mode="constant", cval=0.0,
        )
        mask = (mask > 0.5).astype(np.float32)
        image = np.clip(image, 0.0, 1.0)

    if cfg.brightness or cfg.contrast or cfg.saturation:
        f_bright = float(rng.uniform(1.0 - cfg.brightness, 1.0 + cfg.brightness))
        f_contrast = float(rng.uniform(1.0 - cfg.contrast, 1.0 + cfg.contrast))
        f_sat = float(rng.uniform(1.0 - cfg.saturation, 1.0 + cfg.saturation))
        image = image * f_bright
        gray_mean = float(_luminance(image).mean())
        image = gray_mean + (image - gray_mean) * f_contrast
        gray = _luminance(image)[..., None]
        image = gray + (image - gray) * f_sat
        image = np.clip(image, 0.0, 1.0).astype(np.float32)

    return SamplePair(image=image, mask=mask, id=pair.id)


# ------------------------------------------------------------- synthetic shapes

#: every generated mask keeps its foreground ratio inside these bounds
RATIO_BOUNDS = (0.01, 0.6)
_RATIO_BUCKETS = ((0.013, 0.05), (0.05, 0.3), (0.3, 0.55))


def _coverage(h, w, params, supersample=1):
    """Analytic inside-test of a rotated ellipse or box on the pixel grid."""
    kind, cx, cy, ax, ay, theta = params
    s = supersample
    ys = (np.arange(h * s) + 0.5) / s
    xs = (np.arange(w * s) + 0.5) / s
    dy = ys[:, None] - cy
    dx = xs[None, :] - cx
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    u = (dx * cos_t + dy * sin_t) / ax
    v = (-dx * sin_t + dy * cos_t) / ay
    if kind == "ellipse":
        inside = (u * u + v * v) <= 1.0
    else:
        inside = (np.abs(u) <= 1.0) & (np.abs(v) <= 1.0)
    if s == 1:
        return inside
    blocks = inside.astype(np.float64).reshape(h, s, w, s)
    return blocks.mean(axis=(1, 3))


def _shape_params(rng, h, w, area):
    kind = "ellipse" if rng.uniform() < 0.5 else "box"
    theta = float(rng.uniform(0.0, np.pi))
    aspect = float(rng.uniform(0.5, 1.0))
    if kind == "ellipse":
        ax = np.sqrt(area / (np.pi * aspect))
    else:
        ax = np.sqrt(area / (4.0 * aspect))
    ay = aspect * ax
    ax, ay = max(ax, 1.2), max(ay, 1.2)
    # keep the rotated bounding box inside the frame, shrinking if needed
    for _ in range(12):
        ex = np.sqrt((ax * np.cos(theta)) ** 2 + (ay * np.sin(theta)) ** 2)
        ey = np.sqrt((ax * np.sin(theta)) ** 2 + (ay * np.cos(theta)) ** 2)
        if kind == "box":
            ex, ey = abs(ax * np.cos(theta)) + abs(ay * np.sin(theta)), abs(
                ax * np.sin(theta)
            ) + abs(ay * np.cos(theta))
        if ex < w / 2 - 1 and ey < h / 2 - 1:
            break
        ax *= 0.85
        ay *= 0.85
    cx = float(rng.uniform(ex + 1.0, w - ex - 1.0)) if w - 2 * ex - 2 > 0 else w / 2
    cy = float(rng.uniform(ey + 1.0, h - ey - 1.0)) if h - 2 * ey - 2 > 0 else h / 2
    return [kind, cx, cy, float(ax), float(ay), theta]


def _contrasting_color(rng, reference):
    for _ in range(8):
        color = rng.uniform(0.0, 1.0, size=3)
        if np.abs(color - reference).max() >= 0.4:
            return color
    return 1.0 - reference


def _synth_sample(index: int, image_size, seed: int) -> SamplePair:
    h, w = image_size
    rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
    lo, hi = _RATIO_BUCKETS[int(rng.integers(0, len(_RATIO_BUCKETS)))]
    target = float(rng.uniform(lo, hi))
    n_shapes = int(rng.integers(1, 4))

    shapes = [_shape_params(rng, h, w, target * h * w)]
    budget = max(RATIO_BOUNDS[1] - target - 0.02, 0.0)
    for _ in range(n_shapes - 1):
        extra = min(0.35 * target, budget / 2.0)
        if extra * h * w < 4.0:
            break
        shapes.append(_shape_params(rng, h, w, float(rng.uniform(0.5, 1.0)) * extra * h * w))
        budget -= extra

    def union_ratio():
        mask = np.zeros((h, w), dtype=bool)
        for params in shapes:
            mask |= _coverage(h, w, params)
        return mask, float(mask.mean())

    mask, ratio = union_ratio()
    for _ in range(24):  # deterministic correction toward the ratio contract
        if ratio < RATIO_BOUNDS[0]:
            shapes[0][3] *= 1.15
            shapes[0][4] *= 1.15
        elif ratio > RATIO_BOUNDS[1]:
            for params in shapes:
                params[3] *= 0.88
                params[4] *= 0.88
        else:
            break
        mask, ratio = union_ratio()

    background = rng.uniform(0.05, 0.95, size=3)
    image = np.ones((h, w, 3), dtype=np.float64) * background
    for params in shapes:
        color = _contrasting_color(rng, background)
        cover = _coverage(h, w, params, supersample=4)[..., None]
        image = image * (1.0 - cover) + color * cover
    image = image + rng.normal(0.0, 0.015, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return SamplePair(image=image, mask=mask.astype(np.float32), id=f"synth{index:04d}")


def synth_generate(count: int, image_size=(64, 64), seed: int = 0) -> PairDataset:
    """Deterministic dataset of 1-3 contrasting shapes per image.

    Object scale is drawn from three coarse buckets so a modest set already
    spans small and large foregrounds; every mask ratio lies in RATIO_BOUNDS.
    """
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    h, w = image_size
    if h % 16 or w % 16:
        raise ConfigError(f"image_size {image_size} must be divisible by 16")
    return PairDataset([_synth_sample(i, (h, w), seed) for i in range(count)])


def to_batch(pairs) -> tuple:
    """Stack samples into model tensors: N x 3 x H x W images, N x 1 x H x W masks."""
    images = np.stack([pair.image for pair in pairs])
    masks = np.stack([pair.mask for pair in pairs])
    image_t = torch.from_numpy(images).permute(0, 3, 1, 2).contiguous()
    mask_t = torch.from_numpy(masks).unsqueeze(1)
    return image_t, mask_t
