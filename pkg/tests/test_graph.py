import numpy as np
import pytest

from sparseseg import graph as G
from sparseseg.builders import (
    ResidualStagePlan, build_backbone, build_decoder, build_single_column, build_two_column,
    decoder_widths, optimize_structure, remove_identity_unit,
)
from sparseseg.cost import infer_shapes, mac_of_pipeline
from sparseseg.graph import Context, GraphError, ModelGraph, forward

DIMS = (64, 128)


def image(rng, n=1, dims=DIMS):
    return rng.random((n, 3) + dims)


def run(graph, x, **ctx):
    trace = forward(graph, x, Context(**ctx))
    return {k: trace.values[v] for k, v in graph.outputs.items() if v in trace.values}


# -- stage plans and backbones ------------------------------------------------------

def test_full_plan_unit_counts():
    plan = ResidualStagePlan((3, 4, 6, 3))
    assert (plan.n_units, plan.n_projection, plan.n_identity) == (16, 4, 12)
    g = build_backbone(plan)
    identity = {(n.tags["stage"], n.tags["unit"]) for n in g if n.tags.get("identity")}
    assert len(identity) == 12


def test_removed_stride32_stage_drops_its_tap(rng):
    g = build_backbone((1, 1, 1, 0))
    assert sorted(g.outputs) == ["tap16", "tap4", "tap8"]
    out = run(g, image(rng))
    assert out["tap16"].shape[2:] == (DIMS[0] // 16, DIMS[1] // 16)
    with pytest.raises(GraphError, match="stride-32"):
        build_backbone((1, 1, 1, 0), taps=[32])


def test_zero_unit_stage_with_deeper_tap_is_rejected():
    with pytest.raises(GraphError, match="stride-32 tap"):
        build_backbone((1, 1, 0, 1))
    with pytest.raises(GraphError):
        ResidualStagePlan((1, -1, 1, 1))


def test_identity_unit_removal_keeps_every_dim():
    g = build_backbone((1, 1, 2, 0))
    before, _ = infer_shapes(g, DIMS)
    slim = remove_identity_unit(g, "full", stage=4)
    after, _ = infer_shapes(slim, DIMS)
    assert slim.meta["plan"] == [1, 1, 1, 0]
    assert len(slim) < len(g)
    for name, shape in after.items():
        assert before[name] == shape
    for tap in g.outputs:
        assert before[g.outputs[tap]] == after[slim.outputs[tap]]
    with pytest.raises(GraphError, match="identity"):
        remove_identity_unit(g, "full", stage=4, unit=0)


def test_identity_removal_on_two_column_graph(rng):
    g = build_two_column(fusion="isctf")
    slim = remove_identity_unit(g, "half", stage=4)
    assert slim.meta["plan_half"] == [1, 2, 3, 1]
    x = image(rng)
    a, b = run(g, x, k=8), run(slim, x, k=8)
    assert {k: v.shape for k, v in a.items()} == {k: v.shape for k, v in b.items()}


# -- decoders -----------------------------------------------------------------------

@pytest.mark.parametrize("variant", ["classic", "dilated", "sharpmask"])
def test_decoders_emit_quarter_resolution_scores(rng, variant):
    g = build_single_column((3, 4, 6, 3), variant, classes=8)
    scores = run(g, image(rng))["scores"]
    assert scores.shape == (1, 8, DIMS[0] // 4, DIMS[1] // 4)


def test_classic_decoder_with_zero_kernels_gives_zero_scores(rng):
    g = build_single_column((1, 1, 1, 1), "classic")
    for node in g:
        if node.op == "conv":
            node.params["weight"][:] = 0
    assert not run(g, image(rng))["scores"].any()


def test_dilated_decoder_needs_stride32_stage():
    with pytest.raises(GraphError, match="stride-32"):
        build_decoder(build_backbone((1, 1, 1, 0)), "dilated")
    with pytest.raises(GraphError):
        build_decoder(build_backbone((1, 1, 1, 1)), "unknown")


def test_decoder_variants_rank_by_cost():
    plan = (3, 4, 6, 3)
    macs = {name: mac_of_pipeline(build_single_column(plan, variant, dilated_stages=d), DIMS).total
            for name, variant, d in [("dil2", "dilated", 2), ("dil1", "dilated", 1),
                                     ("jump", "sharpmask", 2)]}
    assert macs["dil2"] > macs["dil1"] > macs["jump"]


# -- two-column fusions --------------------------------------------------------------

def _constant_scores(g, bias):
    """Force both columns' score layers to emit the same constant map."""
    for name in ("half/dec/score", "full/dec/score"):
        g[name].params["weight"][:] = 0
        g[name].params["bias"][:] = bias


def test_sum_fusion_of_identical_columns_doubles(rng):
    g = build_two_column(fusion="sum", fast_inference=False)
    bias = rng.normal(size=8)
    _constant_scores(g, bias)
    out = run(g, image(rng))
    np.testing.assert_array_equal(out["aux_half"], out["aux_full"])
    np.testing.assert_array_equal(out["scores"], 2 * out["aux_full"])


def test_ctf_with_forced_half_weight_returns_half_scores(rng):
    g = build_two_column(fusion="ctf", fast_inference=False)
    g["scale/half"].params["bias"][:] = [800.0, -800.0]
    out = run(g, image(rng))
    assert np.all(out["z"][:, 0] == 1.0) and np.all(out["z"][:, 1] == 0.0)
    np.testing.assert_array_equal(out["scores"], out["aux_half"])


@pytest.mark.parametrize("fusion", ["max", "attention"])
def test_other_fusions_run(rng, fusion):
    g = build_two_column(fusion=fusion, fast_inference=False)
    out = run(g, image(rng))
    assert out["scores"].shape == (1, 8, 16, 32)
    if fusion == "max":
        np.testing.assert_array_equal(out["scores"], np.maximum(out["aux_half"], out["aux_full"]))


def test_attention_with_fast_inference_is_rejected():
    with pytest.raises(GraphError, match="requires full-resolution features everywhere"):
        build_two_column(fusion="attention", fast_inference=True)


@pytest.mark.parametrize("fusion", ["ctf", "sctf", "isctf"])
def test_weight_head_never_reads_the_full_column(fusion):
    g = build_two_column(fusion=fusion)
    heads = [g.outputs["z"]] + ([g.outputs["s"], g.outputs["weight"]] if g.is_sparse else [])
    full = [n.name for n in g.nodes_with(column="full")]
    assert full
    for head in heads:
        assert not any(g.has_path(f, head) for f in full)


def test_isctf_geometry_and_outputs(rng):
    g = build_two_column(fusion="isctf")
    assert {"scores", "aux_half", "aux_full", "z", "s", "mask", "weight"} <= set(g.outputs)
    assert g["sparse/head"].params["weight"].shape[2:] == (2, 2)
    out = run(g, image(rng, n=2), k=8)
    assert out["s"].shape == (2, 1, 4, 8)
    assert out["mask"].sum(axis=(1, 2, 3)).tolist() == [8, 8]
    # the sparse head is fed through a gradient block
    assert g[g["sparse/head"].inputs[0]].op == "stop_grad"
    # cross-column injections are present at strides 16, 8 and 4
    assert {f"full/dec/cross{s}" for s in (16, 8, 4)} <= set(g.nodes)


def test_construction_is_deterministic():
    assert G.dumps(build_two_column(fusion="isctf", seed=3)) == G.dumps(build_two_column(fusion="isctf", seed=3))
    assert G.dumps(build_two_column(fusion="isctf", seed=3)) != G.dumps(build_two_column(fusion="isctf", seed=4))


def test_sparse_fusions_need_sharpmask():
    with pytest.raises(GraphError):
        build_two_column("classic", fusion="isctf")
    with pytest.raises(GraphError):
        build_two_column(fusion="bogus")


# -- structure optimisation -------------------------------------------------------------

def test_optimize_structure_widths_groups_and_cost():
    g = build_two_column(fusion="isctf")
    opt = optimize_structure(g)
    assert decoder_widths(g) == (32, 32, 32)
    assert decoder_widths(opt) == (32, 16, 8)
    assert [opt[f"full/dec/jump{s}"].attrs["groups"] for s in (16, 8, 4)] == [8, 4, 2]
    assert opt["half/dec/top"].attrs["groups"] == 8
    # Model A's full column has no stride-32 stage: its first decoder layer reads raw features
    assert g["full/dec/conv16"].params["weight"].shape[2:] == (3, 3)
    assert opt["full/dec/conv16"].params["weight"].shape[2:] == (1, 1)
    for dims in [(64, 128), (128, 128), (64, 256)]:
        assert mac_of_pipeline(opt, dims).total < mac_of_pipeline(g, dims).total
    with pytest.raises(GraphError):
        optimize_structure(opt)


def test_indivisible_group_width_is_rejected():
    with pytest.raises(GraphError, match="groups"):
        build_two_column(fusion="isctf", optimized=True, width_factor=0.3)


# -- execution details ------------------------------------------------------------------

def test_zero_weight_bias_propagation_matches_hand_oracle(rng):
    g = ModelGraph()
    x = g.add("x", "input")
    b1 = rng.normal(size=4)
    w2, b2 = rng.normal(size=(3, 4, 1, 1)), rng.normal(size=3)
    g.add("c1", "conv", [x], {"padding": 1}, {"weight": np.zeros((4, 3, 3, 3)), "bias": b1})
    g.add("r1", "relu", ["c1"])
    g.add("c2", "conv", ["r1"], {}, {"weight": w2, "bias": b2})
    g.outputs = {"scores": "c2"}
    out = run(g, rng.normal(size=(2, 3, 5, 7)))["scores"]
    expected = w2[:, :, 0, 0] @ np.maximum(b1, 0) + b2
    np.testing.assert_allclose(out, np.broadcast_to(expected[None, :, None, None], out.shape),
                               atol=1e-14)


def test_graph_construction_errors():
    g = ModelGraph()
    g.add("x", "input")
    with pytest.raises(GraphError):
        g.add("x", "relu", ["x"])
    with pytest.raises(GraphError):
        g.add("y", "relu", ["missing"])
    g.add("y", "frobnicate", ["x"])
    with pytest.raises(GraphError, match="unknown op"):
        forward(g, np.zeros((1, 3, 4, 4)))


def test_serialization_round_trip(rng, tmp_path):
    g = build_two_column(fusion="isctf", seed=5)
    g["full/stem/bn"].buffers["mean"][:] = rng.normal(size=16)
    path = tmp_path / "m.sgraph"
    G.save(g, path)
    back = G.load(path)
    assert G.dumps(back) == G.dumps(g)
    assert path.read_text().startswith("sparseseg-graph v1\n")
    x = image(rng)
    a, b = run(g, x, k=8), run(back, x, k=8)
    for key in a:
        assert np.array_equal(a[key], b[key])


@pytest.mark.parametrize("text,match", [
    ("not a graph\n", "not a sparseseg-graph"),
    ("sparseseg-graph v1\nmeta {}\n", "truncated"),
    ("sparseseg-graph v1\nbogus 1\nend\n", "unknown record"),
])
def test_malformed_graph_files(text, match):
    with pytest.raises(GraphError, match=match):
        G.loads(text)


def test_backward_blocks_at_stop_grad(rng):
    g = build_two_column(fusion="isctf", plan_half=(1, 1, 1, 0), plan_full=(1, 1, 1, 0))
    trace = forward(g, image(rng), Context(train=True, update_stats=False))
    s = trace.values[g.outputs["s"]]
    grads = G.backward(g, trace, {g.outputs["s"]: np.ones_like(s)})
    assert set(grads) == {("sparse/head", "weight"), ("sparse/head", "bias")}
