"""Cross-set CutMix boxes and block-wise patch masks.

Both generators take an explicit ``numpy.random.Generator`` and return plain
arrays; the ``apply_*`` helpers work on numpy arrays and torch tensors alike.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CutMixMask:
    mask: np.ndarray  # uint8, 1 inside the box
    start: tuple[int, int, int]
    size: tuple[int, int, int]

    @property
    def fraction(self):
        return float(np.prod(self.size)) / self.mask.size


@dataclass(frozen=True)
class PatchMaskSpec:
    ratio: float
    patch_size: tuple[int, int, int]
    mask: np.ndarray  # uint8, block-constant


@functools.lru_cache(maxsize=32)
def _box_sizes(shape):
    axes = np.meshgrid(*[np.arange(1, n + 1) for n in shape], indexing="ij")
    sizes = np.stack([a.ravel() for a in axes], axis=1)
    return sizes, sizes.prod(axis=1)


def make_cutmix_mask(shape, fraction_range, rng: np.random.Generator) -> CutMixMask:
    """One axis-aligned box whose volume fraction lies inside ``fraction_range``.

    A target volume is drawn uniformly from the range; among all box sizes
    that fit the range, one of those closest to the target is picked at
    random, then placed uniformly.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or min(shape) < 4:
        raise ValueError(f"cutmix needs a 3D shape with dims >= 4, got {shape}")
    lo, hi = float(fraction_range[0]), float(fraction_range[1])
    if not 0 <= lo <= hi <= 1:
        raise ValueError(f"invalid fraction range {fraction_range}")
    total = int(np.prod(shape))
    sizes, volumes = _box_sizes(shape)
    vmin, vmax = int(np.ceil(lo * total - 1e-9)), int(np.floor(hi * total + 1e-9))
    ok = (volumes >= vmin) & (volumes <= vmax)
    if not ok.any():
        raise ValueError(f"no box in {shape} has a volume fraction within [{lo}, {hi}]")
    cand, cvol = sizes[ok], volumes[ok]
    target = rng.uniform(vmin, vmax) if vmax > vmin else vmin
    gap = np.abs(cvol - target)
    best = np.flatnonzero(gap == gap.min())
    size = tuple(int(v) for v in cand[best[rng.integers(len(best))]])
    start = tuple(int(rng.integers(0, n - s + 1)) for n, s in zip(shape, size))
    mask = np.zeros(shape, dtype=np.uint8)
    mask[tuple(slice(a, a + s) for a, s in zip(start, size))] = 1
    return CutMixMask(mask, start, size)


def _check_spatial(*arrays):
    shapes = {tuple(a.shape[-3:]) for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"spatial shapes differ: {sorted(shapes)}")


def apply_cutmix(x_i, x_j, y_i, y_j, mask):
    """x_mix = (1 - M) * x_i + M * x_j, and the same for targets.

    ``mask`` broadcasts over any leading channel/batch dims. Integer label
    maps stay integer.
    """
    _check_spatial(x_i, x_j, y_i, y_j, mask)
    if x_i.shape != x_j.shape or y_i.shape != y_j.shape:
        raise ValueError("cutmix pair must have identical shapes")
    m = mask.astype(x_i.dtype) if isinstance(mask, np.ndarray) else mask.to(x_i.dtype)
    x_mix = (1 - m) * x_i + m * x_j
    my = mask.astype(y_i.dtype) if isinstance(mask, np.ndarray) else mask.to(y_i.dtype)
    y_mix = (1 - my) * y_i + my * y_j
    return x_mix, y_mix


def default_patch_size(shape, blocks=16):
    """Patch edge = 1/16 of the image extent per axis."""
    if any(s % blocks for s in shape):
        raise ValueError(f"shape {tuple(shape)} is not divisible into {blocks} blocks per axis")
    return tuple(s // blocks for s in shape)


def make_patch_mask(shape, ratio, patch_size, rng: np.random.Generator) -> PatchMaskSpec:
    """Each aligned patch is kept iff a fresh U(0, 1) draw exceeds ``ratio``."""
    shape = tuple(int(s) for s in shape)
    if isinstance(patch_size, int):
        patch_size = (patch_size,) * len(shape)
    patch_size = tuple(int(b) for b in patch_size)
    if any(b < 1 or s % b for s, b in zip(shape, patch_size)):
        raise ValueError(f"shape {shape} is not divisible by patch size {patch_size}")
    grid = tuple(s // b for s, b in zip(shape, patch_size))
    keep = (rng.random(grid) > ratio).astype(np.uint8)
    mask = keep
    for axis, b in enumerate(patch_size):
        mask = np.repeat(mask, b, axis=axis)
    return PatchMaskSpec(float(ratio), patch_size, mask)


def apply_patch_mask(x, mask):
    _check_spatial(x, mask)
    m = mask.astype(x.dtype) if isinstance(mask, np.ndarray) else mask.to(x.dtype)
    return m * x
