"""Training: per-pixel softmax losses, online bootstrapping, the sparsity
penalty wiring, SGD with momentum, and finite-difference gradient checks."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .graph import Context, ModelGraph, backward, forward
from .sparsity import (rate_per_image, sparsity_penalty, sparsity_penalty_grad, update_q,
                       Q_EPS)
from .tensor import ParameterError, sigmoid

log = logging.getLogger(__name__)

IGNORE = 255


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration, loss):
        super().__init__(f"loss became {loss} at iteration {iteration}")
        self.iteration = iteration


@dataclass
class TrainConfig:
    lr: float = 0.05
    momentum: float = 0.9
    iterations: int = 500
    batch: int = 2
    p: float = 0.25
    lam: float = 1.0
    alpha: float = 0.9
    aux_weight: float = 0.4
    bootstrap_fraction: float = 1.0
    weight_decay: float = 1e-4
    clip_norm: float = 5.0
    flip: bool = True
    seed: int = 0
    q_init: float | None = None
    sparse_weight: float | None = None

    def __post_init__(self):
        if not 0.0 < self.p < 1.0:
            raise ParameterError(f"target rate p must lie in (0, 1), got {self.p}")
        if self.lam < 0:
            raise ParameterError("lambda must be >= 0")
        if not 0.0 <= self.alpha < 1.0:
            raise ParameterError("alpha must lie in [0, 1)")
        if not 0.0 < self.bootstrap_fraction <= 1.0:
            raise ParameterError("bootstrap_fraction must lie in (0, 1]")
        if self.iterations < 1 or self.batch < 1:
            raise ParameterError("iterations and batch must be positive")


def downsample_labels(labels, factor: int = 4) -> np.ndarray:
    """Nearest sampling at the centre of each ``factor`` x ``factor`` cell."""
    labels = np.asarray(labels)
    return np.ascontiguousarray(labels[..., factor // 2::factor, factor // 2::factor])


def _log_softmax(scores):
    shifted = scores - scores.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def pixel_losses(scores, labels, ignore_index: int = IGNORE) -> np.ndarray:
    """Per-pixel cross entropy (N, h, w); ignored pixels get 0."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if labels.shape != (scores.shape[0],) + scores.shape[2:]:
        raise ParameterError(f"labels {labels.shape} do not match scores {scores.shape}")
    logp = _log_softmax(scores)
    valid = labels != ignore_index
    safe = np.where(valid, labels, 0)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    return np.where(valid, -picked, 0.0)


def softmax_pixel_loss(scores, labels, ignore_index: int = IGNORE):
    """Mean cross entropy over non-ignored pixels and its gradient."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    losses = pixel_losses(scores, labels, ignore_index)
    valid = labels != ignore_index
    count = int(valid.sum())
    if count == 0:
        raise ParameterError("every pixel is ignored; the loss is undefined")
    prob = np.exp(_log_softmax(scores))
    grad = prob
    safe = np.where(valid, labels, 0)
    np.put_along_axis(grad, safe[:, None], np.take_along_axis(grad, safe[:, None], axis=1) - 1.0, axis=1)
    grad *= valid[:, None] / count
    return float(losses.sum() / count), grad


def bootstrap_filter(per_pixel_losses, fraction: float) -> np.ndarray:
    """Boolean keep-mask: the ceil(fraction * P) hardest pixels of each image.

    Ties keep the earlier pixel in scan order.
    """
    losses = np.asarray(per_pixel_losses, dtype=np.float64)
    if not 0.0 < fraction <= 1.0:
        raise ParameterError("fraction must lie in (0, 1]")
    n = losses.shape[0]
    flat = losses.reshape(n, -1)
    keep_n = int(np.ceil(fraction * flat.shape[1]))
    order = np.argsort(-flat, axis=1, kind="stable")
    keep = np.zeros(flat.shape, dtype=bool)
    np.put_along_axis(keep, order[:, :keep_n], True, axis=1)
    return keep.reshape(losses.shape)


@dataclass
class LossResult:
    loss: float
    terms: dict
    grads: dict
    q: float | None = None
    r: float | None = None
    trace: object = field(default=None, repr=False)


def composite_loss(graph: ModelGraph, images, labels4, config: TrainConfig,
                   q_old: float | None = None, ctx: Context | None = None,
                   need_grads: bool = True) -> LossResult:
    """main + aux_weight * (aux_half + aux_full) + sparsity penalty.

    ``labels4`` are labels at score resolution.  ``q_old`` is the moving
    average before this step; the returned ``q`` is the updated one.
    """
    ctx = ctx or Context(train=True, sparse_weight=config.sparse_weight)
    trace = forward(graph, images, ctx)
    out = graph.outputs
    grads_out: dict[str, np.ndarray] = {}

    def push(name, g):
        grads_out[name] = grads_out[name] + g if name in grads_out else g

    labels_main = labels4
    if config.bootstrap_fraction < 1.0:
        per_px = pixel_losses(trace.values[out["scores"]], labels4)
        keep = bootstrap_filter(per_px, config.bootstrap_fraction)
        labels_main = np.where(keep, labels4, IGNORE)
    main, g = softmax_pixel_loss(trace.values[out["scores"]], labels_main)
    push(out["scores"], g)
    terms = {"main": main}
    total = main
    for key in ("aux_half", "aux_full"):
        if key in out and config.aux_weight > 0:
            val, g = softmax_pixel_loss(trace.values[out[key]], labels4)
            push(out[key], config.aux_weight * g)
            terms[key] = val
            total += config.aux_weight * val
    q = r = None
    if "s" in out:
        s = trace.values[out["s"]]
        r = float(rate_per_image(s).mean())
        q_prev = config.p if q_old is None else q_old
        q = update_q(q_prev, r, config.alpha)
        pen = sparsity_penalty(config.p, q, config.lam)
        terms["penalty"] = pen
        total += pen
        raw_q = config.alpha * q_prev + (1 - config.alpha) * r
        if config.lam > 0 and Q_EPS < raw_q < 1 - Q_EPS:
            dq = sparsity_penalty_grad(config.p, q, config.lam) * (1 - config.alpha)
            sig = sigmoid(s)
            push(out["s"], dq * sig * (1 - sig) / s.size)
    grads = backward(graph, trace, grads_out) if need_grads else {}
    return LossResult(float(total), terms, grads, q, r, trace)


def _flip(images, labels):
    return images[..., ::-1].copy(), labels[..., ::-1].copy()


def train(graph: ModelGraph, config: TrainConfig, dataset, *, log_every: int = 50):
    """SGD with momentum on ``dataset = (images, labels)``.

    Returns ``(trained_graph, history)``; the input graph is not modified.
    History rows hold the loss terms, r, q and batch pixel accuracy.
    """
    images, labels = dataset
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    if len(images) == 0:
        raise ParameterError("dataset is empty")
    if len(images) != len(labels):
        raise ParameterError("images and labels differ in count")
    graph = graph.copy()
    rng = np.random.default_rng(config.seed)
    velocity = {(n, p): np.zeros_like(a) for n, p, a in graph.parameters()}
    q = config.p if config.q_init is None else config.q_init
    history = []
    order = np.array([], dtype=int)
    for it in range(1, config.iterations + 1):
        if len(order) < config.batch:
            order = np.concatenate([order, rng.permutation(len(images))])
        idx, order = order[:config.batch], order[config.batch:]
        xb, yb = images[idx], labels[idx]
        if config.flip and rng.random() < 0.5:
            xb, yb = _flip(xb, yb)
        y4 = downsample_labels(yb)
        res = composite_loss(graph, xb, y4, config, q)
        if not np.isfinite(res.loss):
            raise TrainingDiverged(it, res.loss)
        if res.q is not None:
            q = res.q
        _sgd_step(graph, res.grads, velocity, config)
        pred = res.trace.values[graph.outputs["scores"]].argmax(axis=1)
        row = {"iteration": it, "loss": res.loss, **res.terms,
               "r": res.r if res.r is not None else float("nan"),
               "q": res.q if res.q is not None else float("nan"),
               "pixel_acc": float((pred == y4).mean())}
        history.append(row)
        if log_every and it % log_every == 0:
            log.info("iter %d loss %.4f q %s acc %.3f", it, res.loss, row["q"], row["pixel_acc"])
    return graph, history


def _sgd_step(graph, grads, velocity, config):
    norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    scale = 1.0
    if config.clip_norm and norm > config.clip_norm:
        scale = config.clip_norm / norm
    for (node, pname), g in grads.items():
        w = graph[node].params[pname]
        step = scale * graph[node].attrs.get("lr_mult", 1.0) * g
        if config.weight_decay and pname in ("weight",):
            step = step + config.weight_decay * w
        v = velocity[(node, pname)]
        v *= config.momentum
        v += step
        w -= config.lr * v


HISTORY_FIELDS = ("iteration", "loss", "main", "aux_half", "aux_full", "penalty", "r", "q",
                  "pixel_acc")


def write_history(path, history):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS, extrasaction="ignore",
                                restval="", lineterminator="\n")
        writer.writeheader()
        for row in history:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def gradcheck(graph: ModelGraph, images, labels, *, config: TrainConfig | None = None,
              per_param: int = 2, step: float = 1e-5, atol: float = 1e-5, seed: int = 0,
              q_old: float = 0.3):
    """Compare analytic gradients to central differences on sampled coordinates.

    ``labels`` are full-resolution.  Each sampled coordinate's error is
    ``|a - n| / max(|a|, |n|, atol)``.  Returns ``(max_error, rows)`` where rows
    are ``(node, param, index, analytic, numeric, error)``.  Outputs of
    stop-gradient nodes are held at their baseline values while differencing.
    Parameters whose every path to the loss is gradient-blocked are reported
    with analytic 0 but left out of the maximum.
    """
    config = config or TrainConfig(lam=0.1, bootstrap_fraction=1.0)
    images = np.asarray(images, dtype=np.float64)
    y4 = downsample_labels(labels)
    g = graph.copy()

    ctx = Context(train=True, update_stats=False, sparse_weight=config.sparse_weight)
    base = composite_loss(g, images, y4, config, q_old, ctx)
    analytic = base.grads
    # a stop-gradient node is an identity forward but a constant for the
    # derivative, so the differences hold its output at the baseline value
    frozen = {n.name: base.trace.values[n.name] for n in g if n.op == "stop_grad"}

    def loss():
        ctx = Context(train=True, update_stats=False, sparse_weight=config.sparse_weight,
                      overrides=frozen)
        return composite_loss(g, images, y4, config, q_old, ctx, need_grads=False).loss
    rng = np.random.default_rng(seed)
    rows, worst = [], 0.0
    for node, pname, arr in list(g.parameters()):
        picks = rng.choice(arr.size, size=min(per_param, arr.size), replace=False)
        for flat in picks:
            idx = np.unravel_index(int(flat), arr.shape)
            orig = arr[idx]
            arr[idx] = orig + step
            up = loss()
            arr[idx] = orig - step
            down = loss()
            arr[idx] = orig
            num = (up - down) / (2 * step)
            grad = analytic.get((node, pname))
            blocked = grad is None
            a = 0.0 if blocked else float(grad[idx])
            err = abs(a - num) / max(abs(a), abs(num), atol)
            rows.append((node, pname, tuple(int(i) for i in idx), a, num, err))
            if not blocked:
                worst = max(worst, err)
    return worst, rows


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
