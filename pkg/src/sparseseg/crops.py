"""Non-overlapping region crops stacked along the batch axis, and their inverse."""
from __future__ import annotations

from fractions import Fraction

import numpy as np

from .sparsity import RegionGrid
from .tensor import ParameterError, as_tensor


def _block(grid: RegionGrid, scale) -> int:
    r = Fraction(grid.region_px) * Fraction(scale)
    if r.denominator != 1 or r < 1:
        raise ParameterError(f"region {grid.region_px}px at scale {scale} is not a whole number of pixels")
    return int(r)


def crop_blocks(x: np.ndarray, r: int, index: np.ndarray | None = None) -> np.ndarray:
    """Split (N, C, h, w) into r x r blocks, ordered image-major then row-major.

    ``index`` optionally selects a subset of the N*H*W blocks (in order).
    """
    n, c, h, w = x.shape
    if h % r or w % r:
        raise ParameterError(f"dims {h}x{w} not divisible by crop size {r}")
    gh, gw = h // r, w // r
    crops = x.reshape(n, c, gh, r, gw, r).transpose(0, 2, 4, 1, 3, 5).reshape(n * gh * gw, c, r, r)
    if index is not None:
        crops = crops[index]
    return np.ascontiguousarray(crops)


def uncrop_blocks(crops: np.ndarray, n: int, gh: int, gw: int,
                  index: np.ndarray | None = None) -> np.ndarray:
    """Inverse of :func:`crop_blocks`; positions missing from ``index`` are zero."""
    total = n * gh * gw
    _, c, r, r2 = crops.shape
    if r != r2:
        raise ParameterError("crops must be square")
    if index is None:
        if crops.shape[0] != total:
            raise ParameterError(f"expected {total} crops, got {crops.shape[0]}")
        full = crops
    else:
        if crops.shape[0] != len(index):
            raise ParameterError(f"expected {len(index)} crops, got {crops.shape[0]}")
        full = np.zeros((total, c, r, r))
        full[index] = crops
    return np.ascontiguousarray(
        full.reshape(n, gh, gw, c, r, r).transpose(0, 3, 1, 4, 2, 5).reshape(n, c, gh * r, gw * r)
    )


def crop_grid(x, grid: RegionGrid, scale=1) -> np.ndarray:
    """Crop every region of ``grid`` from a tensor at ``scale`` of full resolution."""
    x = as_tensor(x)
    r = _block(grid, scale)
    if (x.shape[2] // r, x.shape[3] // r) != grid.grid or x.shape[2] % r or x.shape[3] % r:
        raise ParameterError(f"tensor {x.shape[2]}x{x.shape[3]} does not tile grid {grid.grid} with {r}px crops")
    return crop_blocks(x, r)


def uncrop_grid(crops, grid: RegionGrid, scale=1, n: int | None = None,
                active: np.ndarray | None = None) -> np.ndarray:
    """Place crops back on the grid.

    ``active`` is an optional binary (N, H, W) mask naming which regions the
    crops belong to; absent regions are filled with exact zeros.
    """
    crops = as_tensor(crops, "crops")
    gh, gw = grid.grid
    _block(grid, scale)
    index = None
    if active is not None:
        active = np.asarray(active)
        n = active.shape[0]
        index = np.flatnonzero(active.reshape(-1) == 1)
    elif n is None:
        if crops.shape[0] % (gh * gw):
            raise ParameterError(f"{crops.shape[0]} crops do not fill a {gh}x{gw} grid")
        n = crops.shape[0] // (gh * gw)
    return uncrop_blocks(crops, n, gh, gw, index)
