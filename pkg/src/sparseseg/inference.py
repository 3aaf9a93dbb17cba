"""Classic and fast inference executors."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cost import CostReport, mac_of_pipeline
from .crops import crop_grid, uncrop_grid  # re-exported: part of this module's interface
from .graph import Context, GraphError, ModelGraph, forward
from .tensor import ParameterError, as_tensor, resample

__all__ = ["InferenceResult", "classic_infer", "fast_infer", "crop_grid", "uncrop_grid",
           "labels_from_scores", "regions_for"]


@dataclass
class InferenceResult:
    labels: np.ndarray          # (N, h, w) int64 at image resolution
    fused_scores: np.ndarray    # (N, C, h/4, w/4)
    active: list                # per image, sorted flat indices of active regions
    cost: CostReport | None = None
    mask: np.ndarray | None = None   # (N, H, W) region mask, sparse graphs only


def labels_from_scores(scores) -> np.ndarray:
    """Argmax over classes, then nearest x4 upsampling to image resolution."""
    lab = np.asarray(scores).argmax(axis=1)
    return np.repeat(np.repeat(lab, 4, axis=1), 4, axis=2)


def regions_for(graph: ModelGraph, image_dims) -> int:
    r = graph.meta["region_px"]
    h, w = image_dims
    return (h // r) * (w // r)


def _check_image(graph, image):
    x = as_tensor(image, "image")
    if x.shape[1] != 3:
        raise ParameterError(f"expected 3 colour channels, got {x.shape[1]}")
    h, w = x.shape[2:]
    if h % 32 or w % 32:
        raise ParameterError(f"image dims {h}x{w} must be divisible by 32")
    r = graph.meta.get("region_px")
    if r and (h % r or w % r):
        raise ParameterError(f"image dims {h}x{w} not divisible into {r}px regions")
    return x


def _k_for(graph, dims, p, k):
    n = regions_for(graph, dims)
    if k is None:
        if p is None:
            p = graph.meta.get("p", 0.25)
        if not 0.0 <= p <= 1.0:
            raise ParameterError(f"p={p} outside [0, 1]")
        k = int(round(p * n))
    if not 0 <= k <= n:
        raise ParameterError(f"k={k} outside [0, {n}]")
    return int(k)


def _run(graph, x, ctx, mode, k):
    trace = forward(graph, x, ctx)
    scores = trace.values[graph.outputs["scores"]]
    mask = active = None
    if "mask" in graph.outputs:
        mask = trace.values[graph.outputs["mask"]][:, 0].astype(np.int8)
        active = [np.flatnonzero(m.reshape(-1)).tolist() for m in mask]
    else:
        active = [[0] for _ in range(len(x))]
    cost = mac_of_pipeline(graph, x.shape[2:], mode, k if graph.is_sparse else None, n=len(x))
    return InferenceResult(labels_from_scores(scores), scores, active, cost, mask)


def classic_infer(graph: ModelGraph, image, p: float | None = None, k: int | None = None
                  ) -> InferenceResult:
    """Compute every region of the full-resolution column.

    For sparse graphs the winner-take-all mask (``k`` or ``round(p * regions)``,
    default p from the graph) still weights the fusion, exactly as in
    :func:`fast_infer`; other graphs fuse normally.
    """
    x = _check_image(graph, image)
    if graph.is_sparse:
        k = _k_for(graph, x.shape[2:], p, k)
    else:
        k = None
    return _run(graph, x, Context(k=k, fast=False), "classic", k)


def fast_infer(graph: ModelGraph, image, p: float | None = None, k: int | None = None
               ) -> InferenceResult:
    """Run the full-resolution column only on the winner-take-all regions."""
    if not graph.is_sparse:
        raise GraphError(f"fast inference needs an sctf/isctf graph, not "
                         f"{graph.meta.get('fusion', 'single column')}")
    x = _check_image(graph, image)
    k = _k_for(graph, x.shape[2:], p, k)
    return _run(graph, x, Context(k=k, fast=True), "fast", k)


def upsample_scores(scores) -> np.ndarray:
    """Bilinear x4 of 1/4-res scores (for callers wanting full-res score maps)."""
    return resample(np.asarray(scores, dtype=np.float64), 4)
