"""Network topologies: toy residual backbones, the three decoder variants and
the two-column fusion models, plus residual-unit removal and the structure
optimisation pass.

Weights are drawn from a generator seeded by ``(seed, crc32(node name))`` so a
node's initial weights do not depend on which other nodes exist.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .graph import GraphError, ModelGraph
from .sparsity import RegionGrid
from .tensor import same_padding

STAGE_WIDTHS = (16, 32, 64, 128)
FULL_PLAN = (3, 4, 6, 3)
# kept units of the cheapest configuration in the unit-removal study
MODEL_A_FULL = (1, 1, 2, 0)
MODEL_A_HALF = (1, 2, 4, 1)
SPARSE_HEAD_LR_MULT = 0.03
FUSIONS = ("sum", "max", "attention", "ctf", "sctf", "isctf")
VARIANTS = ("classic", "dilated", "sharpmask")


@dataclass(frozen=True)
class ResidualStagePlan:
    """Kept residual units in stages 2-5 and their widths."""

    units_per_stage: tuple[int, int, int, int] = FULL_PLAN
    stage_widths: tuple[int, int, int, int] = STAGE_WIDTHS

    def __post_init__(self):
        units = tuple(int(u) for u in self.units_per_stage)
        widths = tuple(int(w) for w in self.stage_widths)
        if len(units) != 4 or len(widths) != 4:
            raise GraphError("a stage plan has exactly four stages")
        if min(units) < 0 or min(widths) < 1:
            raise GraphError("unit counts must be >= 0 and widths >= 1")
        object.__setattr__(self, "units_per_stage", units)
        object.__setattr__(self, "stage_widths", widths)

    @property
    def first_unit_projects(self) -> bool:
        return True

    @property
    def n_units(self) -> int:
        return sum(self.units_per_stage)

    @property
    def n_projection(self) -> int:
        return sum(1 for u in self.units_per_stage if u > 0)

    @property
    def n_identity(self) -> int:
        return self.n_units - self.n_projection

    def tap_strides(self) -> list[int]:
        strides = []
        for i, u in enumerate(self.units_per_stage):
            if u == 0:
                deeper = [4 * 2 ** j for j in range(i + 1, 4) if self.units_per_stage[j] > 0]
                if deeper:
                    raise GraphError(
                        f"stride-{deeper[0]} tap depends on stage {i + 2}, which has 0 units"
                    )
                break
            strides.append(4 * 2 ** i)
        return strides


def _plan(plan) -> ResidualStagePlan:
    if isinstance(plan, ResidualStagePlan):
        return plan
    return ResidualStagePlan(tuple(plan))


class _Builder:
    def __init__(self, graph: ModelGraph, seed: int):
        self.g = graph
        self.seed = int(seed)

    def rng(self, name):
        return np.random.default_rng([self.seed, zlib.crc32(name.encode())])

    def conv(self, name, x, cin, cout, k=3, stride=1, dilation=1, groups=1, tags=None,
             gain=1.0, bias=0.0, zero=False, padding=None):
        if cin % groups or cout % groups:
            raise GraphError(f"{name}: width {cin}->{cout} not divisible by {groups} groups")
        fan_in = cin // groups * k * k
        shape = (cout, cin // groups, k, k)
        if zero:
            w = np.zeros(shape)
        else:
            w = self.rng(name).normal(0.0, gain * np.sqrt(2.0 / fan_in), shape)
        if padding is None:
            padding = same_padding(k, dilation) if k % 2 else 0
        attrs = {"stride": stride, "dilation": dilation, "groups": groups, "padding": padding}
        return self.g.add(name, "conv", [x], attrs,
                          {"weight": w, "bias": np.full(cout, float(bias))}, tags=tags)

    def bn(self, name, x, c, tags=None):
        return self.g.add(name, "bn", [x], {"eps": 1e-8, "momentum": 0.1},
                          {"scale": np.ones(c), "shift": np.zeros(c)},
                          {"mean": np.zeros(c), "var": np.ones(c)}, tags=tags)

    def op(self, name, op, inputs, tags=None, **attrs):
        return self.g.add(name, op, inputs, attrs, tags=tags)


def _unit(b: _Builder, name, x, cin, width, stride, dilation, projection, tags):
    t = dict(tags, role="unit")
    r1 = b.op(f"{name}/relu1", "relu", [b.bn(f"{name}/bn1", x, cin, t)], t)
    c1 = b.conv(f"{name}/conv1", r1, cin, width, 3, stride, dilation, tags=t)
    r2 = b.op(f"{name}/relu2", "relu", [b.bn(f"{name}/bn2", c1, width, t)], t)
    c2 = b.conv(f"{name}/conv2", r2, width, width, 3, 1, dilation, tags=t, gain=0.5)
    short = b.conv(f"{name}/proj", r1, cin, width, 1, stride, tags=t) if projection else x
    return b.op(f"{name}/out", "add", [short, c2], dict(t, unit_out=True))


def _backbone(b: _Builder, x, plan: ResidualStagePlan, stem_width, prefix, column,
              dilated_stages=0):
    """Add stem + residual stages; return taps as [stage, stride, node, width]."""
    tags = {"column": column}
    strides = plan.tap_strides()
    h = b.conv(f"{prefix}stem/conv", x, 3, stem_width, 3, 2, tags=tags)
    h = b.op(f"{prefix}stem/relu", "relu", [b.bn(f"{prefix}stem/bn", h, stem_width, tags)], tags)
    h = b.op(f"{prefix}stem/pool", "pool", [h], tags, window=2)
    stride, dil, cin = 4, 1, stem_width
    taps = []
    for si in range(len(strides)):
        stage = si + 2
        units, width = plan.units_per_stage[si], plan.stage_widths[si]
        step = 1 if si == 0 else 2
        if si > 0 and si >= 4 - dilated_stages:
            step, dil = 1, dil * 2
        for j in range(units):
            utags = dict(tags, stage=stage, unit=j, identity=j > 0)
            h = _unit(b, f"{prefix}s{stage}u{j}", h, cin, width, step if j == 0 else 1, dil,
                      j == 0, utags)
            cin = width
        stride *= step
        taps.append([stage, stride, h, width])
    return taps


def _decoder_shape(optimized, width_factor):
    base = int(round(128 * width_factor))
    if optimized:
        widths = {"top": base, 16: base, 8: base // 2, 4: base // 4}
        groups = {"top": 8, 16: 8, 8: 4, 4: 2}
    else:
        widths = {"top": base, 16: base, 8: base, 4: base}
        groups = {"top": 1, 16: 1, 8: 1, 4: 1}
    return widths, groups


def _decoder(b: _Builder, variant, taps, prefix, column, classes, width_factor=0.25,
             optimized=False, top_kernel=3, cross=None, dilation=1):
    """Add a decoder on ``taps``; return a dict describing its nodes.

    ``cross`` maps an output-stride level to (node, channels) features that are
    projected by a 1x1 conv and summed into that level's input.
    """
    tags = {"column": column, "role": "decoder"}
    cross = cross or {}
    bystride = {}
    for stage, stride, node, width in taps:
        bystride[stride] = (node, width)  # deepest tap wins on shared strides
    info = {"levels": {}, "ups": {}}
    if variant == "classic":
        terms = []
        for stride, (node, width) in sorted(bystride.items()):
            sc = b.conv(f"{prefix}score{stride}", node, width, classes, 1, tags=tags)
            f = stride // 4
            while f > 1:
                step = 4 if f % 4 == 0 else 2
                sc = b.op(f"{prefix}score{stride}/up{f}", "resample", [sc], tags,
                          factor=str(step), mode="bilinear")
                f //= step
            terms.append(sc)
        info["scores"] = b.op(f"{prefix}scores", "add", terms, tags) if len(terms) > 1 else terms[0]
        return info

    widths, groups = _decoder_shape(optimized, width_factor)
    deepest = max(bystride)
    h, hw = None, None
    if variant == "sharpmask":
        if 4 not in bystride or 8 not in bystride or 16 not in bystride:
            raise GraphError(f"{prefix}: sharpmask decoder needs stride-4, 8 and 16 taps")
        start = 32 if 32 in bystride else None
    else:
        if 32 in bystride or deepest == 32:
            raise GraphError(f"{prefix}: dilated decoder needs a dilated backbone")
        start = deepest
    if start is not None:
        node, width = bystride[start]
        h = b.conv(f"{prefix}top", node, width, widths["top"], top_kernel,
                   groups=groups["top"], dilation=dilation if top_kernel > 1 else 1, tags=tags)
        h = b.op(f"{prefix}top/relu", "relu", [h], tags)
        hw = widths["top"]
        info["levels"][start] = h
    level = (start or 32) // 2
    while level >= 4:
        node, width = bystride[level]
        in_w = hw if hw is not None else widths["top"]
        terms = []
        if h is not None:
            up = b.op(f"{prefix}up{level}", "resample", [h], tags, factor="2", mode="bilinear")
            info["ups"][level] = up
            terms.append(up)
        terms.append(b.conv(f"{prefix}jump{level}", node, width, in_w, 1,
                            groups=groups[level], tags=tags))
        if level in cross:
            src, src_w = cross[level]
            terms.append(b.conv(f"{prefix}cross{level}", src, src_w, in_w, 1,
                                tags=dict(tags, role="cross")))
        s = b.op(f"{prefix}in{level}", "add", terms, tags)
        # the first layer on raw backbone features takes the top kernel size
        kern = 3 if h is not None else top_kernel
        h = b.conv(f"{prefix}conv{level}", s, in_w, widths[level], kern,
                   dilation=dilation if kern > 1 else 1, tags=tags)
        h = b.op(f"{prefix}conv{level}/relu", "relu", [h], tags)
        hw = widths[level]
        info["levels"][level] = h
        level //= 2
    info["h"], info["h_width"] = h, hw
    info["scores"] = b.conv(f"{prefix}score", h, hw, classes, 1, tags=tags)
    return info


# -- public builders -------------------------------------------------------------

def build_backbone(plan=FULL_PLAN, stem_width: int = 16, *, dilated_stages: int = 0,
                   seed: int = 0, taps=None) -> ModelGraph:
    """Toy residual feature extractor with taps at strides 4, 8, 16 and 32."""
    plan = _plan(plan)
    if taps is not None:
        available = plan.tap_strides()
        for t in taps:
            if t not in available:
                raise GraphError(f"requested stride-{t} tap is removed by plan {plan.units_per_stage}")
    g = ModelGraph(meta={"kind": "backbone", "plan": list(plan.units_per_stage),
                         "stage_widths": list(plan.stage_widths), "stem_width": stem_width,
                         "dilated_stages": dilated_stages, "seed": seed})
    b = _Builder(g, seed)
    img = g.add("image", "input")
    tap_list = _backbone(b, img, plan, stem_width, "", "full", dilated_stages)
    g.meta["taps"] = tap_list
    for stage, stride, node, _ in tap_list:
        g.outputs[f"tap{4 * 2 ** (stage - 2)}"] = node
    return g


def _dilate(graph: ModelGraph, dilated_stages: int):
    """Replace the strides of the last ``dilated_stages`` stages by dilation growth."""
    taps = graph.meta["taps"]
    if len(taps) < 4:
        raise GraphError("dilated variant needs the stride-32 stage, which this plan removes")
    dil = 1
    for stage, *_ in taps[4 - dilated_stages:]:
        dil *= 2
        for node in graph.nodes_with(stage=stage):
            if node.op == "conv":
                node.attrs["stride"] = 1
                k = node.params["weight"].shape[2]
                if k > 1:
                    node.attrs["dilation"] = dil
                    node.attrs["padding"] = same_padding(k, dil)
    stride = 4
    for i, tap in enumerate(taps):
        if i > 0 and i < 4 - dilated_stages:
            stride *= 2
        tap[1] = stride
    graph.meta["dilated_stages"] = dilated_stages


def build_decoder(backbone: ModelGraph, variant: str = "sharpmask", *, classes: int = 8,
                  width_factor: float = 0.25, dilated_stages: int = 2,
                  optimized: bool = False, seed: int | None = None) -> ModelGraph:
    """Single-column segmentation network: backbone + decoder producing 1/4-res scores.

    ``dilated_stages`` (1 or 2) applies to the dilated variant only.
    """
    if variant not in VARIANTS:
        raise GraphError(f"unknown decoder variant {variant!r}")
    g = backbone.copy()
    seed = g.meta.get("seed", 0) if seed is None else seed
    if variant == "dilated":
        if dilated_stages not in (1, 2):
            raise GraphError("dilated_stages must be 1 or 2")
        if g.meta.get("dilated_stages", 0) == 0:
            _dilate(g, dilated_stages)
    elif g.meta.get("dilated_stages", 0):
        raise GraphError(f"{variant} decoder expects an undilated backbone")
    b = _Builder(g, seed)
    info = _decoder(b, variant, g.meta["taps"], "dec/", "full", classes, width_factor, optimized)
    g.outputs = {"scores": info["scores"]}
    g.meta.update(kind="single_column", variant=variant, classes=classes,
                  width_factor=width_factor, optimized=optimized)
    return g


def build_single_column(plan=FULL_PLAN, variant: str = "sharpmask", *, classes: int = 8,
                        dilated_stages: int = 2, stem_width: int = 16, width_factor: float = 0.25,
                        optimized: bool = False, seed: int = 0) -> ModelGraph:
    return build_decoder(build_backbone(plan, stem_width, seed=seed), variant, classes=classes,
                         width_factor=width_factor, dilated_stages=dilated_stages,
                         optimized=optimized, seed=seed)


def build_two_column(decoder_variant: str = "sharpmask", fusion: str = "isctf",
                     region: RegionGrid | None = None, *, classes: int = 8,
                     plan_full=MODEL_A_FULL, plan_half=MODEL_A_HALF, stem_width: int = 16,
                     width_factor: float = 0.25, optimized: bool = False,
                     fast_inference: bool | None = None, p: float = 0.25,
                     seed: int = 0) -> ModelGraph:
    """Full-resolution + half-resolution columns fused into 1/4-res scores.

    Outputs: ``scores`` (fused), ``aux_half`` and ``aux_full`` (per-column
    scores used by the auxiliary losses), plus ``z`` (scale weights) for the
    weighted fusions and ``s``/``mask``/``weight`` for the sparse ones.
    """
    if fusion not in FUSIONS:
        raise GraphError(f"unknown fusion {fusion!r}")
    if decoder_variant not in VARIANTS:
        raise GraphError(f"unknown decoder variant {decoder_variant!r}")
    sparse = fusion in ("sctf", "isctf")
    if fast_inference is None:
        fast_inference = sparse
    if fast_inference and fusion == "attention":
        raise GraphError("attention fusion cannot run fast inference: "
                         "it requires full-resolution features everywhere")
    if fast_inference and not sparse:
        raise GraphError(f"fast inference needs a sparse fusion (sctf/isctf), not {fusion}")
    if fusion in ("attention", "ctf", "sctf", "isctf") and decoder_variant != "sharpmask":
        raise GraphError(f"{fusion} fusion reads decoder features; use the sharpmask decoder")
    if sparse and region is None:
        region = RegionGrid()
    plan_full, plan_half = _plan(plan_full), _plan(plan_half)
    meta = {
        "kind": "two_column", "decoder_variant": decoder_variant, "fusion": fusion,
        "classes": classes, "plan_full": list(plan_full.units_per_stage),
        "plan_half": list(plan_half.units_per_stage), "stage_widths": list(plan_full.stage_widths),
        "stem_width": stem_width, "width_factor": width_factor, "optimized": optimized,
        "p": p, "seed": seed,
    }
    if region is not None:
        meta.update(region_px=region.region_px, feature_stride=region.feature_stride)
    g = ModelGraph(meta=meta)
    b = _Builder(g, seed)
    img = g.add("image", "input")
    widths, _ = _decoder_shape(optimized, width_factor)

    # half-resolution column; its strides are doubled in full-resolution pixels
    half_in = b.op("half/input", "resample", [img], {"column": "half"}, factor="1/2", mode="bilinear")
    half_taps = _backbone(b, half_in, plan_half, stem_width, "half/", "half")
    half = _decoder(b, decoder_variant, half_taps, "half/dec/", "half", classes, width_factor,
                    optimized)
    htags = {"column": "half"}
    half_up = b.op("half/scores_up", "resample", [half["scores"]], htags, factor="2", mode="bilinear")

    mask = s = None
    if sparse:
        levels = {2 * k: v for k, v in half["levels"].items()}
        if region.feature_stride not in levels:
            raise GraphError(f"no half-column decoder features at full-res stride {region.feature_stride}; "
                             f"available {sorted(levels)}")
        feat = levels[region.feature_stride]
        feat_w = widths[region.feature_stride // 2]
        t = region.tau
        stags = {"column": "head", "role": "sparse"}
        sg = b.op("sparse/stop_grad", "stop_grad", [feat], stags)
        s = b.conv("sparse/head", sg, feat_w, 1, t, stride=t, padding=0, tags=stags, gain=0.1,
                   bias=float(np.log(p / (1 - p))))
        # the head sees unnormalised features and a lagged rate signal; a small
        # step keeps the q feedback loop from oscillating
        g[s].attrs["lr_mult"] = SPARSE_HEAD_LR_MULT
        mask = b.op("sparse/mask", "wta", [s], stags)

    # full-resolution column
    ftags = {"column": "full"}
    crop = sparse
    when = "always" if fusion == "isctf" else "fast"
    x = img
    if crop:
        for stride in plan_full.tap_strides():
            if region.region_px % stride:
                raise GraphError(f"stride-{stride} stage of the cropped column does not fit "
                                 f"{region.region_px}px regions; remove its units")
        x = b.op("full/crop", "crop", [img, mask], ftags, size=region.region_px, when=when)
    full_taps = _backbone(b, x, plan_full, stem_width, "full/", "full")
    cross = {}
    if fusion == "isctf":
        hl = half["levels"]
        srcs = {16: (half["ups"][8], widths[16]), 8: (half["ups"][4], widths[8])}
        up4 = b.op("half/dec/up_cross4", "resample", [hl[4]], htags, factor="2", mode="bilinear")
        srcs[4] = (up4, widths[4])
        for level, (src, w) in srcs.items():
            cropped = b.op(f"full/cross_crop{level}", "crop", [src, mask], ftags,
                           size=region.region_px // level, when="always")
            cross[level] = (cropped, w)
    full = _decoder(b, decoder_variant, full_taps, "full/dec/", "full", classes, width_factor,
                    optimized, top_kernel=1 if optimized else 3, cross=cross)
    full_scores = full["scores"]
    if crop:
        full_scores = b.op("full/uncrop", "uncrop", [full_scores, mask], ftags,
                           size=region.region_px // 4, when=when)

    # fusion
    otags = {"column": "head", "role": "fusion"}
    outputs = {"aux_half": half_up, "aux_full": full_scores}
    if fusion == "sum":
        fused = b.op("fuse", "add", [half_up, full_scores], otags)
    elif fusion == "max":
        fused = b.op("fuse", "max", [half_up, full_scores], otags)
    else:
        ztags = {"column": "head", "role": "scale"}
        zh = b.conv("scale/half", half["h"], half["h_width"], 2, 1, tags=ztags, zero=True)
        z = b.op("scale/half_up", "resample", [zh], ztags, factor="2", mode="bilinear")
        if fusion == "attention":
            zf = b.conv("scale/full", full["h"], full["h_width"], 2, 1, tags=ztags, zero=True)
            z = b.op("scale/sum", "add", [z, zf], ztags)
        z = b.op("scale/softmax", "softmax", [z], ztags)
        z1 = b.op("scale/z1", "slice", [z], ztags, start=0, stop=1)
        z2 = b.op("scale/z2", "slice", [z], ztags, start=1, stop=2)
        outputs["z"] = z
        if sparse:
            sw = b.op("sparse/weight", "sparse_weight", [s, mask], stags,
                      footprint=region.region_px // 4)
            z2 = b.op("scale/z2_sparse", "mul", [z2, sw], ztags)
            outputs.update(s=s, mask=mask, weight=sw)
        a = b.op("fuse/half", "scale", [half_up, z1], otags)
        c = b.op("fuse/full", "scale", [full_scores, z2], otags)
        fused = b.op("fuse", "add", [a, c], otags)
    outputs["scores"] = fused
    g.outputs = outputs
    return g


def rebuild(graph: ModelGraph, **overrides) -> ModelGraph:
    """Build a fresh two-column graph from ``graph``'s construction arguments."""
    m = dict(graph.meta)
    if m.get("kind") != "two_column":
        raise GraphError("rebuild needs a two-column graph")
    region = None
    if "region_px" in m:
        region = RegionGrid(m["region_px"], (1, 1), m["feature_stride"])
    kwargs = dict(classes=m["classes"], plan_full=m["plan_full"], plan_half=m["plan_half"],
                  stem_width=m["stem_width"], width_factor=m["width_factor"],
                  optimized=m["optimized"], p=m["p"], seed=m["seed"])
    kwargs.update(overrides)
    plan_kw = {}
    for key in ("plan_full", "plan_half"):
        plan_kw[key] = ResidualStagePlan(tuple(kwargs.pop(key)), tuple(m["stage_widths"]))
    return build_two_column(m["decoder_variant"], kwargs.pop("fusion", m["fusion"]), region,
                            **plan_kw, **kwargs)


def optimize_structure(graph: ModelGraph) -> ModelGraph:
    """Narrow the decoders to (128, 64, 32)-scaled widths with grouped layers.

    Returns a freshly initialised graph with the optimised layout.
    """
    if graph.meta.get("kind") != "two_column" or graph.meta.get("fusion") != "isctf":
        raise GraphError("structure optimisation applies to isctf graphs")
    if graph.meta.get("optimized"):
        raise GraphError("graph is already optimised")
    return rebuild(graph, optimized=True)


def decoder_widths(graph: ModelGraph, column: str = "full") -> tuple[int, ...]:
    """Output widths of the decoder's 3x3 layers at strides 16, 8, 4."""
    prefix = "dec/" if graph.meta.get("kind") == "single_column" else f"{column}/dec/"
    return tuple(graph[f"{prefix}conv{s}"].params["weight"].shape[0] for s in (16, 8, 4))


def remove_identity_unit(graph: ModelGraph, column: str, stage: int, unit: int | None = None) -> ModelGraph:
    """Delete one identity residual unit, rewiring its consumers to its input.

    ``unit`` defaults to the last unit of the stage.  Returns a new graph that
    keeps every other weight.
    """
    g = graph.copy()
    units = sorted({n.tags["unit"] for n in g.nodes_with(column=column, stage=stage)})
    if unit is None:
        if not units:
            raise GraphError(f"{column} stage {stage} has no units")
        unit = units[-1]
    nodes = [n for n in g.nodes_with(column=column, stage=stage) if n.tags.get("unit") == unit]
    if not nodes:
        raise GraphError(f"no unit {unit} in {column} stage {stage}")
    if not nodes[0].tags.get("identity"):
        raise GraphError("only identity-mapping units can be removed")
    out = next(n for n in nodes if n.tags.get("unit_out"))
    bn1 = next(n for n in nodes if n.name.endswith("/bn1"))
    g.remove_nodes([n.name for n in nodes], rewire={out.name: bn1.inputs[0]})
    key = "plan" if g.meta.get("kind") in ("backbone", "single_column") else f"plan_{column}"
    if key in g.meta:
        plan = list(g.meta[key])
        plan[stage - 2] -= 1
        g.meta[key] = plan
    for tap in g.meta.get("taps", []):
        if tap[2] == out.name:
            tap[2] = bn1.inputs[0]
    return g
