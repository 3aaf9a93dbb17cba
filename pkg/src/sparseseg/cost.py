"""Multiply-add accounting.

Only convolution multiply-adds are counted; bias, normalisation, pointwise
ops and resampling cost nothing.  Counts are derived from static shape
propagation, so they are exact integers for any mode and region count.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

from .graph import GraphError, ModelGraph
from .tensor import ConvParams, ParameterError, conv_output_hw


@dataclass
class CostReport:
    per_layer: list[tuple[str, int]]
    total: int
    breakdown: dict[str, int]
    mode: str = "classic"
    k: int = 0
    n_regions: int = 1
    image_dims: tuple[int, int] = (0, 0)

    def total_for(self, k: int) -> int:
        b = self.breakdown
        return b["half_column"] + b["fixed_overhead"] + k * b["full_column_per_region"]

    def to_text(self) -> str:
        lines = [f"mode {self.mode}  image {self.image_dims[0]}x{self.image_dims[1]}  "
                 f"regions {self.k}/{self.n_regions}"]
        width = max((len(n) for n, _ in self.per_layer), default=4)
        for name, macs in self.per_layer:
            lines.append(f"  {name:<{width}}  {macs:>12d}")
        for key, val in self.breakdown.items():
            lines.append(f"{key:<24}{val:>14d}")
        lines.append(f"{'total':<24}{self.total:>14d}")
        return "\n".join(lines) + "\n"

    def to_kv(self) -> str:
        rows = [("mode", self.mode), ("image_h", self.image_dims[0]), ("image_w", self.image_dims[1]),
                ("k", self.k), ("n_regions", self.n_regions), ("total", self.total)]
        rows += list(self.breakdown.items())
        rows += [(f"layer.{name}", macs) for name, macs in self.per_layer]
        return "".join(f"{k}={v}\n" for k, v in rows)


def mac_of_conv(in_dims, params) -> int:
    """n * c_out * h_out * w_out * (c_in / groups) * k_h * k_w."""
    n, c, h, w = (int(v) for v in in_dims)
    if not isinstance(params, ConvParams):
        raise ParameterError("mac_of_conv expects ConvParams")
    if c != params.in_channels:
        raise ParameterError(f"input has {c} channels, kernel bank expects {params.in_channels}")
    ho, wo = params.output_hw(h, w)
    kh, kw = params.kernel
    return n * params.out_channels * ho * wo * (c // params.groups) * kh * kw


def _conv_macs(node, shape):
    n, c, h, w = shape
    cout, cg, kh, kw = node.params["weight"].shape
    g = node.attrs.get("groups", 1)
    if c != cg * g:
        raise GraphError(f"{node.name}: input has {c} channels, expects {cg * g}")
    ho, wo = conv_output_hw(h, w, (kh, kw), node.attrs.get("stride", 1),
                            node.attrs.get("dilation", 1), node.attrs.get("padding", 0))
    return (n, cout, ho, wo), n * cout * ho * wo * cg * kh * kw


def infer_shapes(graph: ModelGraph, image_dims, n: int = 1, *, fast: bool = False,
                 k: int | None = None):
    """Propagate shapes statically.  Returns ``(shapes, macs)`` dicts by node."""
    h, w = image_dims
    shapes, macs = {}, {}
    for node in graph:
        a = node.attrs
        xs = [shapes[i] for i in node.inputs]
        if node.op == "input":
            out = (n, 3, h, w)
        elif node.op == "conv":
            out, macs[node.name] = _conv_macs(node, xs[0])
        elif node.op == "pool":
            win = a.get("window", 2)
            out = (xs[0][0], xs[0][1], xs[0][2] // win, xs[0][3] // win)
        elif node.op == "resample":
            f = Fraction(a["factor"])
            out = xs[0][:2] + (int(xs[0][2] * f), int(xs[0][3] * f))
        elif node.op in ("slice",):
            out = (xs[0][0], a["stop"] - a["start"]) + xs[0][2:]
        elif node.op == "wta":
            out = xs[0]
        elif node.op == "sparse_weight":
            f = a["footprint"]
            out = (xs[0][0], 1, xs[0][2] * f, xs[0][3] * f)
        elif node.op == "crop":
            x, mask = xs
            if a.get("when", "always") == "fast" and not fast:
                out = x
            else:
                r = a["size"]
                per_image = k if fast else mask[2] * mask[3]
                out = (x[0] * per_image, x[1], r, r)
        elif node.op == "uncrop":
            x, mask = xs
            if a.get("when", "always") == "fast" and not fast:
                out = x
            else:
                out = (mask[0], x[1], mask[2] * a["size"], mask[3] * a["size"])
        elif node.op == "scale":
            out = xs[0]
        else:  # pointwise / normalisation ops keep the first input's shape
            out = xs[0]
        shapes[node.name] = out
    return shapes, macs


def _check_dims(graph, image_dims):
    h, w = image_dims
    if h % 32 or w % 32:
        raise ParameterError(f"image dims {h}x{w} must be divisible by 32")
    if graph.meta.get("kind") == "two_column":
        plan_half = graph.meta["plan_half"]
        if plan_half[3] > 0 and (h % 64 or w % 64):
            raise ParameterError(f"image dims {h}x{w} must be divisible by 64 for a half column "
                                 "with a stride-32 stage")
    region = graph.meta.get("region_px")
    if region and (h % region or w % region):
        raise ParameterError(f"image dims {h}x{w} not divisible into {region}px regions")


def mac_of_pipeline(graph: ModelGraph, image_dims, mode: str = "classic",
                    k: int | None = None, n: int = 1) -> CostReport:
    """Per-layer and per-pipeline multiply-adds for one forward pass."""
    if mode not in ("classic", "fast"):
        raise ParameterError(f"unknown mode {mode!r}")
    image_dims = tuple(int(v) for v in image_dims)
    _check_dims(graph, image_dims)
    sparse = graph.is_sparse
    if mode == "fast" and not sparse:
        raise GraphError("fast-mode cost needs a sparse (sctf/isctf) graph")
    n_regions = 1
    if sparse:
        r = graph.meta["region_px"]
        n_regions = (image_dims[0] // r) * (image_dims[1] // r)
        if k is None:
            k = int(round(graph.meta.get("p", 0.25) * n_regions)) if mode == "fast" else n_regions
        if not 0 <= k <= n_regions:
            raise ParameterError(f"k={k} outside [0, {n_regions}]")
        if mode == "classic":
            k = n_regions
    else:
        k = 1
    _, macs = infer_shapes(graph, image_dims, n, fast=mode == "fast", k=k)
    per_layer = [(name, macs[name]) for name in graph.nodes if name in macs]
    total = sum(m for _, m in per_layer)

    def column_sum(column, table):
        return sum(table[nd.name] for nd in graph.nodes_with(column=column) if nd.name in table)

    half = column_sum("half", macs)
    fixed = sum(m for name, m in per_layer if graph[name].tags.get("column") not in ("half", "full"))
    if sparse:
        _, one = infer_shapes(graph, image_dims, n, fast=True, k=1)
        per_region = column_sum("full", one)
    else:
        per_region = column_sum("full", macs)
    report = CostReport(per_layer, total,
                        {"half_column": half, "full_column_per_region": per_region,
                         "fixed_overhead": fixed},
                        mode, k, n_regions, image_dims)
    if report.total_for(k) != total:
        raise GraphError("cost breakdown does not recompose the total; "
                         "the full column is not separable into regions")
    return report
