"""scikit-learn style wrapper around graph building, training and inference."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .builders import build_two_column
from .data import ConfusionMatrix, metrics
from .graph import ModelGraph, load, save
from .inference import classic_infer, fast_infer
from .sparsity import RegionGrid
from .tensor import ParameterError
from .train import TrainConfig, train


def _images(X):
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_min_features=1)
    if X.ndim != 4 or X.shape[1] != 3:
        raise ParameterError(f"expected images shaped (N, 3, H, W), got {X.shape}")
    return X


def _labels(y, n):
    y = check_array(y, allow_nd=True, dtype=np.int64)
    if y.ndim == 2 and n == 1:
        y = y[None]
    if y.ndim != 3 or len(y) != n:
        raise ParameterError(f"expected label maps shaped (N, H, W), got {y.shape}")
    return y


class SparseSegmenter(BaseEstimator):
    """Two-column segmentation network with sparse full-resolution regions.

    ``fit`` trains from scratch on ``(X, y)`` with X of shape (N, 3, H, W) in
    [0, 1] and y of shape (N, H, W).  ``predict`` returns label maps; ``mode``
    is ``"classic"`` or ``"fast"`` (sparse fusions only).  ``score`` is mean IoU.
    """

    def __init__(self, fusion="isctf", decoder="sharpmask", classes=8, p=0.25, region_px=16,
                 optimized=False, lr=0.05, momentum=0.9, iterations=500, batch=2, lam=1.0,
                 alpha=0.9, aux_weight=0.4, bootstrap_fraction=1.0, seed=0):
        self.fusion = fusion
        self.decoder = decoder
        self.classes = classes
        self.p = p
        self.region_px = region_px
        self.optimized = optimized
        self.lr = lr
        self.momentum = momentum
        self.iterations = iterations
        self.batch = batch
        self.lam = lam
        self.alpha = alpha
        self.aux_weight = aux_weight
        self.bootstrap_fraction = bootstrap_fraction
        self.seed = seed

    def build(self) -> ModelGraph:
        region = RegionGrid(self.region_px) if self.fusion in ("sctf", "isctf") else None
        return build_two_column(self.decoder, self.fusion, region, classes=self.classes,
                                optimized=self.optimized, p=self.p, seed=self.seed)

    def train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, momentum=self.momentum, iterations=self.iterations,
                           batch=self.batch, p=self.p, lam=self.lam, alpha=self.alpha,
                           aux_weight=self.aux_weight,
                           bootstrap_fraction=self.bootstrap_fraction, seed=self.seed)

    def fit(self, X, y):
        X = _images(X)
        y = _labels(y, len(X))
        if y.shape[1:] != X.shape[2:]:
            raise ParameterError("label maps and images differ in size")
        if y.min() < 0 or y.max() >= self.classes:
            raise ParameterError(f"labels must lie in [0, {self.classes})")
        self.graph_, self.history_ = train(self.build(), self.train_config(), (X, y))
        self.classes_ = np.arange(self.classes)
        return self

    @classmethod
    def from_graph(cls, graph: ModelGraph) -> "SparseSegmenter":
        """Wrap an already trained graph (e.g. a loaded checkpoint)."""
        m = graph.meta
        est = cls(fusion=m.get("fusion", "isctf"), decoder=m.get("decoder_variant", "sharpmask"),
                  classes=m.get("classes", 8), p=m.get("p", 0.25),
                  region_px=m.get("region_px", 16), optimized=m.get("optimized", False),
                  seed=m.get("seed", 0))
        est.graph_ = graph
        est.history_ = []
        est.classes_ = np.arange(est.classes)
        return est

    def save(self, path):
        check_is_fitted(self, "graph_")
        save(self.graph_, path)

    @classmethod
    def load(cls, path) -> "SparseSegmenter":
        return cls.from_graph(load(path))

    def infer(self, X, mode="classic", p=None):
        """Full :class:`InferenceResult` for a batch of images."""
        check_is_fitted(self, "graph_")
        X = _images(X)
        p = self.p if p is None else p
        if mode == "classic":
            return classic_infer(self.graph_, X, p)
        if mode == "fast":
            return fast_infer(self.graph_, X, p)
        raise ParameterError(f"unknown mode {mode!r}; use 'classic' or 'fast'")

    def predict(self, X, mode="classic", p=None):
        return self.infer(X, mode, p).labels

    def score(self, X, y, mode="classic"):
        """Mean intersection-over-union of the predictions."""
        X = _images(X)
        y = _labels(y, len(X))
        m = ConfusionMatrix(self.classes).add(self.predict(X, mode), y)
        return metrics(m)[2]
