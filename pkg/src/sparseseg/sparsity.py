"""Spatial sparsity: the region grid, the sparse weight head, rate estimates,
the moving-average sparsity penalty and winner-take-all region selection."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ParameterError, sigmoid

Q_EPS = 1e-6


@dataclass(frozen=True)
class RegionGrid:
    """Partition of an image into ``grid`` square regions of ``region_px`` pixels.

    ``feature_stride`` is the stride, in full-resolution pixels, of the
    half-resolution features the sparse head reads; each region then covers
    ``tau x tau`` feature vectors.
    """

    region_px: int = 16
    grid: tuple[int, int] = (4, 8)
    feature_stride: int = 8

    def __post_init__(self):
        if self.region_px < 1 or self.feature_stride < 1:
            raise ParameterError("region_px and feature_stride must be positive")
        if self.region_px % self.feature_stride:
            raise ParameterError(
                f"region {self.region_px}px is not a multiple of feature stride {self.feature_stride}"
            )
        object.__setattr__(self, "grid", tuple(int(v) for v in self.grid))

    @classmethod
    def for_image(cls, height: int, width: int, region_px: int = 16, feature_stride: int = 8):
        if height % region_px or width % region_px:
            raise ParameterError(f"image {height}x{width} not divisible into {region_px}px regions")
        return cls(region_px, (height // region_px, width // region_px), feature_stride)

    @property
    def tau(self) -> int:
        return self.region_px // self.feature_stride

    @property
    def n_regions(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def image_dims(self) -> tuple[int, int]:
        return self.grid[0] * self.region_px, self.grid[1] * self.region_px

    def k_for(self, p: float) -> int:
        """Number of regions kept at target rate ``p``."""
        return int(round(p * self.n_regions))


@dataclass
class SparseState:
    s: np.ndarray
    q: float
    mask: np.ndarray | None = None
    active: list[tuple[int, int, int]] = field(default_factory=list)

    @classmethod
    def from_scores(cls, s, k: int, q: float = 0.5):
        s = _as_map(s)
        mask = select_wta(s, k)
        active = [tuple(int(v) for v in idx) for idx in np.argwhere(mask == 1)]
        return cls(s=s, q=float(np.clip(q, Q_EPS, 1 - Q_EPS)), mask=mask, active=active)


def _as_map(s) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    if s.ndim == 4 and s.shape[1] == 1:
        s = s[:, 0]
    if s.ndim != 3:
        raise ParameterError(f"sparse weight map must be (N, H, W), got {s.shape}")
    return s


def sparse_head(features, grid: RegionGrid, weight, bias: float = 0.0) -> np.ndarray:
    """Apply a single tau x tau kernel with stride tau: one scalar per region.

    ``weight`` has shape (channels, tau, tau).  Returns ``s`` of shape (N, H, W).
    """
    x = np.asarray(features, dtype=np.float64)
    n, c, h, w = x.shape
    t = grid.tau
    if h % t or w % t:
        raise ParameterError(f"feature dims {h}x{w} not divisible by tau={t}")
    if (h // t, w // t) != grid.grid:
        raise ParameterError(f"feature dims {h}x{w} do not match grid {grid.grid} at tau={t}")
    weight = np.asarray(weight, dtype=np.float64).reshape(c, t, t)
    blocks = x.reshape(n, c, h // t, t, w // t, t)
    return np.einsum("ncyixj,cij->nyx", blocks, weight) + bias


def rate_per_image(s) -> np.ndarray:
    """Mean of sigmoid(s) over each image's regions."""
    return sigmoid(_as_map(s)).mean(axis=(1, 2))


def rate_per_location(s) -> np.ndarray:
    """Mean of sigmoid(s) over the batch at each region."""
    return sigmoid(_as_map(s)).mean(axis=0)


def update_q(q_old: float, r: float, alpha: float = 0.9) -> float:
    if not 0.0 <= alpha < 1.0:
        raise ParameterError(f"alpha must lie in [0, 1), got {alpha}")
    q = alpha * q_old + (1.0 - alpha) * r
    return float(min(max(q, Q_EPS), 1.0 - Q_EPS))


def sparsity_penalty(p: float, q: float, lam: float) -> float:
    """Cross entropy between target rate ``p`` and moving average ``q``, scaled."""
    if lam == 0:
        return 0.0
    q = min(max(q, Q_EPS), 1.0 - Q_EPS)
    return float(lam * (-p * np.log(q) - (1.0 - p) * np.log(1.0 - q)))


def sparsity_penalty_grad(p: float, q: float, lam: float) -> float:
    """Derivative of :func:`sparsity_penalty` with respect to ``q``."""
    q = min(max(q, Q_EPS), 1.0 - Q_EPS)
    return float(lam * ((1.0 - p) / (1.0 - q) - p / q))


def select_wta(s, k: int) -> np.ndarray:
    """Binary (N, H, W) mask keeping the ``k`` largest entries of each image.

    Ties go to the earlier region in row-major order.
    """
    s = _as_map(s)
    n, h, w = s.shape
    if not 0 <= k <= h * w:
        raise ParameterError(f"k={k} outside [0, {h * w}]")
    flat = s.reshape(n, -1)
    order = np.argsort(-flat, axis=1, kind="stable")
    mask = np.zeros_like(flat)
    np.put_along_axis(mask, order[:, :k], 1.0, axis=1)
    return mask.reshape(n, h, w)


def broadcast_weights(mask, s, grid: RegionGrid | None, target_dims) -> np.ndarray:
    """Region-constant map mask * sigmoid(s) at ``target_dims`` = (th, tw).

    Each region's value fills its whole footprint, so inactive regions are
    exactly zero everywhere.  Returns shape (N, 1, th, tw).
    """
    s = _as_map(s)
    mask = _as_map(mask)
    if mask.shape != s.shape:
        raise ParameterError("mask and s shapes differ")
    n, h, w = s.shape
    if grid is not None and (h, w) != grid.grid:
        raise ParameterError(f"s dims {(h, w)} do not match grid {grid.grid}")
    th, tw = target_dims
    if th % h or tw % w or th // h != tw // w:
        raise ParameterError(f"target {th}x{tw} is not an integer multiple of {h}x{w}")
    f = th // h
    weight = mask * sigmoid(s)
    return np.repeat(np.repeat(weight, f, axis=1), f, axis=2)[:, None]
