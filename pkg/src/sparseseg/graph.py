"""Layer graphs: node storage, forward/backward execution and serialization.

A :class:`ModelGraph` is a list of :class:`Node` objects kept in topological
order.  Execution is driven by a :class:`Context` that says whether batch
statistics are used (training), how many regions winner-take-all keeps, and
whether cropped columns compute only the selected regions (fast inference).
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable

import numpy as np

from . import tensor as T
from .crops import crop_blocks, uncrop_blocks
from .sparsity import select_wta

FORMAT_MAGIC = "sparseseg-graph"
FORMAT_VERSION = 1


class GraphError(ValueError):
    """Raised for invalid graph construction or usage."""


@dataclass
class Node:
    name: str
    op: str
    inputs: list[str] = field(default_factory=list)
    attrs: dict = field(default_factory=dict)
    params: dict[str, np.ndarray] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    tags: dict = field(default_factory=dict)

    def conv_params(self) -> T.ConvParams:
        return T.ConvParams(
            self.params["weight"],
            self.params["bias"],
            stride=self.attrs.get("stride", 1),
            dilation=self.attrs.get("dilation", 1),
            groups=self.attrs.get("groups", 1),
            padding=self.attrs.get("padding"),
        )


@dataclass
class Context:
    """Execution mode.

    ``k`` is the number of regions winner-take-all keeps per image; ``None``
    keeps every region and leaves the sparse weights soft (training).
    ``fast`` restricts cropped columns to the selected regions.
    ``sparse_weight`` optionally replaces sigmoid(s) by a constant.
    ``hook`` receives ``(node, inputs, output)`` after every node runs.
    ``overrides`` maps node names to fixed output values (used to hold
    stop-gradient outputs constant in finite-difference checks).
    """

    train: bool = False
    k: int | None = None
    fast: bool = False
    update_stats: bool = True
    sparse_weight: float | None = None
    hook: Callable | None = None
    overrides: dict | None = None


class ModelGraph:
    def __init__(self, meta: dict | None = None):
        self.nodes: dict[str, Node] = {}
        self.inputs: list[str] = []
        self.outputs: dict[str, str] = {}
        self.meta: dict = dict(meta or {})

    # -- construction ---------------------------------------------------------
    def add(self, name, op, inputs=(), attrs=None, params=None, buffers=None, tags=None) -> str:
        if name in self.nodes:
            raise GraphError(f"duplicate node name {name!r}")
        for i in inputs:
            if i not in self.nodes:
                raise GraphError(f"node {name!r} reads unknown input {i!r}")
        self.nodes[name] = Node(name, op, list(inputs), dict(attrs or {}),
                                dict(params or {}), dict(buffers or {}), dict(tags or {}))
        if op == "input":
            self.inputs.append(name)
        return name

    def copy(self) -> "ModelGraph":
        return copy.deepcopy(self)

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes.values())

    def __getitem__(self, name) -> Node:
        return self.nodes[name]

    def consumers(self, name) -> list[str]:
        return [n.name for n in self if name in n.inputs]

    def ancestors(self, name) -> set[str]:
        seen, stack = set(), [name]
        while stack:
            for i in self.nodes[stack.pop()].inputs:
                if i not in seen:
                    seen.add(i)
                    stack.append(i)
        return seen

    def has_path(self, src, dst) -> bool:
        return src in self.ancestors(dst)

    def remove_nodes(self, names, rewire: dict[str, str] | None = None):
        """Delete ``names``; consumers of a key in ``rewire`` read its value instead."""
        rewire = rewire or {}
        for n in names:
            del self.nodes[n]
        for node in self:
            node.inputs = [rewire.get(i, i) for i in node.inputs]
            for i in node.inputs:
                if i not in self.nodes:
                    raise GraphError(f"node {node.name!r} lost its input {i!r}")
        self.outputs = {k: rewire.get(v, v) for k, v in self.outputs.items()}

    def parameters(self):
        """Yield ``(node_name, param_name, array)`` for every trainable array."""
        for node in self:
            for pname, arr in node.params.items():
                yield node.name, pname, arr

    def n_parameters(self) -> int:
        return sum(a.size for _, _, a in self.parameters())

    def nodes_with(self, **tags) -> list[Node]:
        return [n for n in self if all(n.tags.get(k) == v for k, v in tags.items())]

    @property
    def is_sparse(self) -> bool:
        return self.meta.get("fusion") in ("sctf", "isctf")


# -- execution ------------------------------------------------------------------

def _factor(node) -> Fraction:
    return Fraction(node.attrs["factor"])


def _mask_index(mask: np.ndarray) -> np.ndarray:
    return np.flatnonzero(mask.reshape(-1) == 1)


def _crop_active(node, ctx) -> bool:
    return node.attrs.get("when", "always") == "always" or ctx.fast


def _fwd(node: Node, xs: list, ctx: Context):
    op, a = node.op, node.attrs
    if op == "conv":
        p = node.conv_params()
        return T.conv2d(xs[0], p), p
    if op == "bn":
        train = ctx.train
        out, cache = T.batchnorm(xs[0], node.params["scale"], node.params["shift"],
                                 node.buffers["mean"], node.buffers["var"], train=train,
                                 eps=a.get("eps", 1e-8))
        if train and ctx.update_stats:
            m = a.get("momentum", 0.1)
            node.buffers["mean"] = (1 - m) * node.buffers["mean"] + m * cache[2]
            node.buffers["var"] = (1 - m) * node.buffers["var"] + m * cache[3]
        return out, cache
    if op in ("relu", "sigmoid"):
        return T.activation(xs[0], op), None
    if op == "pool":
        return T.pool_avg(xs[0], a.get("window", 2)), None
    if op == "resample":
        return T.resample(xs[0], _factor(node), a.get("mode", "bilinear")), None
    if op == "add":
        out = xs[0].copy()
        for x in xs[1:]:
            if x.shape != out.shape:
                raise T.ParameterError(f"{node.name}: add dims differ {out.shape} vs {x.shape}")
            out += x
        return out, None
    if op in ("max", "mul"):
        return T.eltwise(xs[0], xs[1], "max" if op == "max" else "product"), None
    if op == "scale":
        x, w = xs
        if w.shape[1] != 1 or w.shape[2:] != x.shape[2:] or w.shape[0] != x.shape[0]:
            raise T.ParameterError(f"{node.name}: weight map {w.shape} cannot scale {x.shape}")
        return x * w, None
    if op == "slice":
        return np.ascontiguousarray(xs[0][:, a["start"]:a["stop"]]), None
    if op == "softmax":
        return T.softmax_channels(xs[0]), None
    if op == "stop_grad":
        return xs[0], None
    if op == "wta":
        s = xs[0]
        if ctx.k is None:
            return np.ones_like(s), None
        return select_wta(s, ctx.k)[:, None], None
    if op == "sparse_weight":
        s, mask = xs
        f = a["footprint"]
        sig = T.sigmoid(s) if ctx.sparse_weight is None else np.full_like(s, ctx.sparse_weight)
        w = mask * sig
        out = np.repeat(np.repeat(w, f, axis=2), f, axis=3)
        return out, (mask, sig)
    if op == "crop":
        x, mask = xs
        if not _crop_active(node, ctx):
            return x, None
        index = _mask_index(mask) if ctx.fast else None
        return crop_blocks(x, a["size"], index), index
    if op == "uncrop":
        x, mask = xs
        if not _crop_active(node, ctx):
            return x, None
        n, _, gh, gw = mask.shape
        index = _mask_index(mask) if ctx.fast else None
        return uncrop_blocks(x, n, gh, gw, index), index
    raise GraphError(f"unknown op {op!r} at node {node.name!r}")


def _bwd(node: Node, xs: list, out, cache, g, ctx: Context):
    """Return (list of input grads or None, dict of param grads)."""
    op, a = node.op, node.attrs
    if op == "conv":
        dx, dw, db = T.conv2d_adjoint(xs[0], cache, g)
        return [dx], {"weight": dw, "bias": db}
    if op == "bn":
        dx, dscale, dshift = T.batchnorm_adjoint(cache, node.params["scale"], g)
        return [dx], {"scale": dscale, "shift": dshift}
    if op in ("relu", "sigmoid"):
        return [T.activation_adjoint(xs[0], op, g)], {}
    if op == "pool":
        return [T.pool_avg_adjoint(xs[0].shape, a.get("window", 2), g)], {}
    if op == "resample":
        return [T.resample_adjoint(xs[0].shape, _factor(node), a.get("mode", "bilinear"), g)], {}
    if op == "add":
        return [g] * len(xs), {}
    if op == "max":
        return list(T.eltwise_adjoint(xs[0], xs[1], "max", g)), {}
    if op == "mul":
        return list(T.eltwise_adjoint(xs[0], xs[1], "product", g)), {}
    if op == "scale":
        x, w = xs
        return [g * w, (g * x).sum(axis=1, keepdims=True)], {}
    if op == "slice":
        dx = np.zeros_like(xs[0])
        dx[:, a["start"]:a["stop"]] = g
        return [dx], {}
    if op == "softmax":
        return [T.softmax_channels_adjoint(out, g)], {}
    if op == "stop_grad":
        return [None], {}
    if op == "wta":
        return [None], {}
    if op == "sparse_weight":
        mask, sig = cache
        f = a["footprint"]
        n, c, h, w = g.shape
        gw = g.reshape(n, c, h // f, f, w // f, f).sum(axis=(3, 5))
        if ctx.sparse_weight is not None:
            return [None, None], {}
        return [gw * mask * sig * (1.0 - sig), None], {}
    if op == "crop":
        x, mask = xs
        if not _crop_active(node, ctx):
            return [g, None], {}
        n, _, h, w = x.shape
        r = a["size"]
        return [uncrop_blocks(g, n, h // r, w // r, cache), None], {}
    if op == "uncrop":
        if not _crop_active(node, ctx):
            return [g, None], {}
        return [crop_blocks(g, a["size"], cache), None], {}
    raise GraphError(f"no adjoint for op {op!r}")


@dataclass
class Trace:
    values: dict[str, np.ndarray]
    caches: dict[str, object]
    ctx: Context


def forward(graph: ModelGraph, feeds, ctx: Context | None = None,
            targets: list[str] | None = None) -> Trace:
    """Evaluate the graph.  ``feeds`` is an array (single input) or a dict.

    With ``targets`` only their ancestors are evaluated.
    """
    ctx = ctx or Context()
    if not isinstance(feeds, dict):
        if len(graph.inputs) != 1:
            raise GraphError("graph has several inputs; pass a dict of feeds")
        feeds = {graph.inputs[0]: feeds}
    needed = None
    if targets is not None:
        needed = set(targets)
        for t in targets:
            needed |= graph.ancestors(t)
    values, caches = {}, {}
    for node in graph:
        if needed is not None and node.name not in needed:
            continue
        if node.op == "input":
            if node.name not in feeds:
                raise GraphError(f"missing feed for input {node.name!r}")
            values[node.name] = T.as_tensor(feeds[node.name], node.name)
            continue
        xs = [values[i] for i in node.inputs]
        if ctx.overrides and node.name in ctx.overrides:
            values[node.name] = ctx.overrides[node.name]
            caches[node.name] = None
            continue
        out, cache = _fwd(node, xs, ctx)
        values[node.name] = out
        caches[node.name] = cache
        if ctx.hook is not None:
            ctx.hook(node, xs, out)
    return Trace(values, caches, ctx)


def backward(graph: ModelGraph, trace: Trace, out_grads: dict[str, np.ndarray]):
    """Accumulate gradients from ``out_grads`` (node name -> dL/dvalue).

    Returns ``{(node_name, param_name): grad}`` for every trainable array
    that received a gradient path.
    """
    grads: dict[str, np.ndarray] = {}
    for name, g in out_grads.items():
        grads[name] = grads[name] + g if name in grads else np.asarray(g, dtype=np.float64)
    pgrads = {}
    for node in reversed(list(graph)):
        g = grads.pop(node.name, None)
        if g is None or node.op == "input" or node.name not in trace.values:
            continue
        xs = [trace.values[i] for i in node.inputs]
        dxs, dps = _bwd(node, xs, trace.values[node.name], trace.caches[node.name], g, trace.ctx)
        for pname, dp in dps.items():
            pgrads[(node.name, pname)] = dp
        for iname, dx in zip(node.inputs, dxs):
            if dx is None or graph[iname].op == "input":
                continue
            grads[iname] = grads[iname] + dx if iname in grads else dx
    return pgrads


# -- serialization ----------------------------------------------------------------

def _blob(arr: np.ndarray) -> str:
    shape = "x".join(str(s) for s in arr.shape) or "scalar"
    return f"{shape} {np.ascontiguousarray(arr, dtype='>f8').tobytes().hex()}"


def _unblob(shape: str, hexdata: str) -> np.ndarray:
    dims = () if shape == "scalar" else tuple(int(s) for s in shape.split("x"))
    return np.frombuffer(bytes.fromhex(hexdata), dtype=">f8").astype(np.float64).reshape(dims)


def dumps(graph: ModelGraph) -> str:
    lines = [f"{FORMAT_MAGIC} v{FORMAT_VERSION}",
             "meta " + json.dumps(graph.meta, sort_keys=True),
             "outputs " + json.dumps(graph.outputs, sort_keys=True)]
    for node in graph:
        desc = {"inputs": node.inputs, "attrs": node.attrs, "tags": node.tags}
        lines.append(f"node {node.name} {node.op} " + json.dumps(desc, sort_keys=True))
        for pname, arr in node.params.items():
            lines.append(f"param {node.name} {pname} {_blob(arr)}")
        for bname, arr in node.buffers.items():
            lines.append(f"buffer {node.name} {bname} {_blob(arr)}")
    lines.append("end")
    return "\n".join(lines) + "\n"


def loads(text: str) -> ModelGraph:
    lines = text.splitlines()
    if not lines or lines[0] != f"{FORMAT_MAGIC} v{FORMAT_VERSION}":
        raise GraphError(f"not a {FORMAT_MAGIC} v{FORMAT_VERSION} file")
    graph = ModelGraph()
    ended = False
    for lineno, line in enumerate(lines[1:], start=2):
        kind, _, rest = line.partition(" ")
        if kind == "meta":
            graph.meta = json.loads(rest)
        elif kind == "outputs":
            graph.outputs = json.loads(rest)
        elif kind == "node":
            name, op, desc = rest.split(" ", 2)
            desc = json.loads(desc)
            graph.add(name, op, desc["inputs"], desc["attrs"], tags=desc["tags"])
        elif kind in ("param", "buffer"):
            name, pname, shape, hexdata = rest.split(" ")
            target = graph[name].params if kind == "param" else graph[name].buffers
            target[pname] = _unblob(shape, hexdata)
        elif kind == "end":
            ended = True
            break
        else:
            raise GraphError(f"line {lineno}: unknown record {kind!r}")
    if not ended:
        raise GraphError("truncated graph file (no 'end' record)")
    return graph


def save(graph: ModelGraph, path):
    with open(path, "w", encoding="ascii") as fh:
        fh.write(dumps(graph))


def load(path) -> ModelGraph:
    with open(path, encoding="ascii") as fh:
        return loads(fh.read())
