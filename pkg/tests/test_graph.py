from pathlib import Path

import numpy as np
import pytest

from mlrn.builders import ARCH_NAMES, StageSpec, build_arch, build_newnet, build_resnet, build_wideresnet, stage_outputs
from mlrn.graph import (
    GraphError,
    GraphFormatError,
    LayerNode,
    NetworkGraph,
    count_params,
    deserialize_graph,
    infer_shapes,
    load_graph,
    param_breakdown,
    serialize_graph,
)
from mlrn.model import Model
from mlrn.transform import (
    TransformError,
    add_taps,
    apply_multilevel_transform,
    classifier_layout,
    find_reduction_points,
    find_taps,
)
from oracles import newnet_params, resnet_params, wrn_params

DATA = Path(__file__).parent / "data"

# Frozen from the analytic counting oracle (tests/oracles.py).
GOLDEN = {
    ("resnet32", 100, 1): 472_756,
    ("resnet32", 100, 2): 1_872_132,
    ("newnet", 100, 1): 842_628,
    ("wrn28-10", 100, 1): 36_536_884,
}


def classifier_width(g):
    lin = g.inputs_of(g.output_node.id)[0]
    return g.node(lin)["in_features"]


def structure(g):
    return ([(n.id, n.kind, dict(n.attrs)) for n in g.nodes], sorted(g.edges))


# --------------------------------------------------------------- builders


class TestBuilders:
    def test_resnet32_layer_count(self):
        g = build_resnet(5, 100)
        convs = g.nodes_of_kind("conv")
        shortcuts = [n for n in convs if "shortcut" in n.id]
        assert len(shortcuts) == 2
        # stem + 30 block convs + 2 projections, plus the classifier
        assert len(convs) == 33
        assert len(g.nodes_of_kind("linear")) == 1
        assert infer_shapes(g)["output"] == (1, 100)

    def test_resnet32_params_golden(self):
        assert count_params(build_resnet(5, 100)) == resnet_params(5, 100) == GOLDEN["resnet32", 100, 1]

    def test_double_width_ratio(self):
        one, two = count_params(build_resnet(5, 100)), count_params(build_resnet(5, 100, 2))
        assert two == resnet_params(5, 100, 2) == GOLDEN["resnet32", 100, 2]
        assert 3.5 < two / one < 4.0

    @pytest.mark.parametrize("pool", ["channel_mean", "per_channel_gap"])
    def test_newnet_params(self, pool):
        assert count_params(build_newnet(100, 1, pool)) == newnet_params(100, 1, pool)

    def test_newnet_golden(self):
        assert count_params(build_newnet(100)) == GOLDEN["newnet", 100, 1]

    def test_newnet_fewer_params_than_double_width(self):
        assert count_params(build_newnet(100)) < count_params(build_resnet(5, 100, 2))

    # every stage tapped: 32*32 + 16*16 + 8*8 + 128 and 32 + 64 + 128 + 128
    @pytest.mark.parametrize("pool,width", [("channel_mean", 1472), ("per_channel_gap", 352)])
    def test_newnet_classifier_width(self, pool, width):
        g = build_newnet(100, 1, pool)
        assert classifier_width(g) == width
        assert infer_shapes(g)["head.concat"] == (1, width)

    def test_wrn(self):
        g = build_wideresnet(28, 10, 100)
        assert count_params(g) == wrn_params(28, 10, 100) == GOLDEN["wrn28-10", 100, 1]
        assert infer_shapes(g, (4, 3, 32, 32))["output"] == (4, 100)
        blocks = {".".join(n.id.split(".")[:2]) for n in g.nodes if n.id.startswith("stage")}
        for s in (1, 2, 3):
            assert sum(b.startswith(f"stage{s}.") for b in blocks) == (28 - 4) // 6

    def test_wrn_depth_check(self):
        with pytest.raises(ValueError):
            build_wideresnet(27, 10, 100)

    @pytest.mark.parametrize("n", [1, 3, 7])
    def test_resnet_params_match_oracle(self, n):
        for wm in (1, 2):
            for classes in (2, 10):
                assert count_params(build_resnet(n, classes, wm)) == resnet_params(n, classes, wm)

    @pytest.mark.parametrize("classes", [2, 10, 100])
    @pytest.mark.parametrize("wm", [1, 2])
    @pytest.mark.parametrize("combine", ["add", "max"])
    def test_all_builders_validate(self, classes, wm, combine):
        for g in (build_resnet(3, classes, wm, combine), build_newnet(classes, wm, combine=combine),
                  build_wideresnet(10, wm, classes, combine)):
            shapes = g.validate()
            assert shapes["output"] == (1, classes)
            assert all(n["mode"] == combine for n in g.nodes_of_kind("combine"))

    def test_resnet32_stage_shapes(self):
        g = build_resnet(5, 100)
        shapes = infer_shapes(g, (1, 3, 32, 32))
        assert [shapes[s][1:] for s in stage_outputs(g)] == [(16, 32, 32), (32, 16, 16), (64, 8, 8)]

    def test_newnet_stage_shapes(self):
        g = build_newnet(100)
        shapes = infer_shapes(g)
        assert [shapes[s][1:] for s in stage_outputs(g)] == [(32, 32, 32), (64, 16, 16), (128, 8, 8)]

    def test_positivity_checks(self):
        for bad in ({"n": 0, "classes": 10}, {"n": 3, "classes": 0}, {"n": 3, "classes": 10, "width_mult": 0}):
            with pytest.raises(ValueError):
                build_resnet(**bad)
        with pytest.raises(ValueError):
            build_resnet(3, 10, 1, "mul")

    def test_stage_spec_invariants(self):
        with pytest.raises(ValueError):
            StageSpec(2, (16, 32, 64), "add", (True, True, True))
        with pytest.raises(ValueError):
            StageSpec(0, (16,), "add", (False,))

    def test_build_arch_names(self):
        for name in ARCH_NAMES:
            if name != "wrn28-10":
                assert build_arch(name, 10).validate()["output"] == (1, 10)
        with pytest.raises(ValueError, match="valid choices"):
            build_arch("resnet33", 10)

    def test_shortcut_is_projection_with_bn(self):
        g = build_resnet(2, 10)
        sc = g.node("stage2.block0.shortcut.conv")
        assert (sc["kernel"], sc["stride"]) == (1, 2)
        assert g.consumers_of(sc.id) == ["stage2.block0.shortcut.bn"]


# ------------------------------------------------------- graph primitives


class TestGraph:
    def test_single_conv_with_bias_params(self):
        g = load_graph(DATA / "minimal_spec.json")
        assert param_breakdown(g)["conv"] == (448, 0)

    def test_bn_breakdown(self):
        g = build_resnet(1, 10)
        assert param_breakdown(g)["stem.bn"] == (32, 32)

    def test_minimal_spec_golden(self):
        g = load_graph(DATA / "minimal_spec.json")
        shapes = infer_shapes(g, (2, 3, 32, 32))
        assert shapes == {"input": (2, 3, 32, 32), "conv": (2, 16, 32, 32), "gap": (2, 16), "fc": (2, 10),
                          "output": (2, 10)}
        assert count_params(g) == 448 + 16 * 10 + 10

    @pytest.mark.parametrize("make", [lambda: build_resnet(5, 100), lambda: build_newnet(100),
                                      lambda: build_newnet(10, 2, "per_channel_gap", "max"),
                                      lambda: build_wideresnet(28, 10, 100),
                                      lambda: apply_multilevel_transform(build_resnet(3, 10))])
    def test_round_trip(self, make):
        g = make()
        text = serialize_graph(g)
        assert deserialize_graph(text) == g
        assert serialize_graph(deserialize_graph(text)) == text

    def test_unknown_kind_named(self):
        text = (DATA / "minimal_spec.json").read_text().replace('"global_avg_pool"', '"fancy_pool"')
        with pytest.raises(GraphFormatError, match="fancy_pool"):
            deserialize_graph(text)

    def test_bad_json(self):
        with pytest.raises(GraphFormatError):
            deserialize_graph("{not json")

    def test_cycle_rejected(self):
        nodes = [LayerNode("input", "input", {"shape": [1, 4, 4]}), LayerNode("a", "relu", {}),
                 LayerNode("b", "combine", {"mode": "add"}), LayerNode("output", "output", {})]
        edges = [("input", "b", 0), ("a", "b", 1), ("b", "a", 0), ("b", "output", 0)]
        with pytest.raises(GraphError, match="cycl"):
            NetworkGraph("cyc", 2, nodes, edges).validate()

    def test_two_inputs_rejected(self):
        nodes = [LayerNode("input", "input", {"shape": [1, 4, 4]}), LayerNode("in2", "input", {"shape": [1, 4, 4]}),
                 LayerNode("c", "combine", {"mode": "add"}), LayerNode("output", "output", {})]
        edges = [("input", "c", 0), ("in2", "c", 1), ("c", "output", 0)]
        with pytest.raises(GraphError):
            NetworkGraph("two", 2, nodes, edges).validate()

    def test_shape_mismatch_detected(self):
        text = (DATA / "minimal_spec.json").read_text().replace('"in_features": 16', '"in_features": 15')
        with pytest.raises(GraphError):
            deserialize_graph(text)

    def test_concat_width_is_sum(self):
        g = apply_multilevel_transform(build_resnet(2, 10), "per_channel_gap")
        shapes = infer_shapes(g)
        ins = g.inputs_of("head.concat")
        assert shapes["head.concat"][1] == sum(shapes[i][1] for i in ins)

    def test_topo_order_stable(self):
        g = build_resnet(2, 10)
        assert g.topo_order() == g.topo_order()
        pos = {nid: i for i, nid in enumerate(g.topo_order())}
        assert all(pos[s] < pos[d] for s, d, _ in g.edges)


# -------------------------------------------------------------- transform


class TestTransform:
    def test_resnet32_taps(self):
        g = build_resnet(5, 100)
        out = apply_multilevel_transform(g, "channel_mean")
        taps = find_taps(out)
        assert [t.node_id for t in taps] == ["stage1.block4.out", "stage2.block4.out"]
        assert [t.width for t in taps] == [1024, 256]
        assert classifier_width(out) == 32 * 32 + 16 * 16 + 64 == 1344

    def test_reduction_points(self):
        assert find_reduction_points(build_resnet(5, 100)) == ["stage1.block4.out", "stage2.block4.out"]

    @pytest.mark.parametrize("pool", ["channel_mean", "per_channel_gap"])
    def test_param_delta(self, pool):
        g = build_resnet(5, 100)
        out = apply_multilevel_transform(g, pool)
        added = classifier_width(out) - classifier_width(g)
        assert count_params(out) - count_params(g) == 100 * added
        assert added == (1024 + 256 if pool == "channel_mean" else 16 + 32)

    def test_original_graph_untouched(self):
        g = build_resnet(3, 10)
        before = serialize_graph(g)
        out = apply_multilevel_transform(g)
        assert serialize_graph(g) == before
        kept = {n.id: n for n in out.nodes}
        for n in g.nodes:
            if n.kind != "linear":
                assert kept[n.id] == n
        assert set(g.edges) - {("head.gap", "head.linear", 0)} <= set(out.edges)

    def test_concat_order(self):
        out = apply_multilevel_transform(build_resnet(3, 10), "per_channel_gap")
        ins = out.inputs_of("head.concat")
        assert ins[-1] == "head.gap"
        assert len(ins) == 3
        layout = classifier_layout(out)
        assert [k for k, _ in layout] == [("per_channel_gap", "stage1.block2.out"),
                                          ("per_channel_gap", "stage2.block2.out"), ("head", "head.gap")]

    def test_no_reduction_error(self):
        single = build_resnet(2, 10, stages=1)
        with pytest.raises(TransformError, match="no spatial reduction found"):
            apply_multilevel_transform(single)

    def test_unrecognised_head(self):
        g = load_graph(DATA / "minimal_spec.json")
        # the minimal spec has a recognisable head but no residual blocks
        with pytest.raises(TransformError, match="no spatial reduction found"):
            apply_multilevel_transform(g)
        nodes = [LayerNode("input", "input", {"shape": [3, 8, 8]}), LayerNode("f", "flatten", {}),
                 LayerNode("fc", "linear", {"in_features": 192, "out_features": 2}), LayerNode("output", "output", {})]
        edges = [("input", "f", 0), ("f", "fc", 0), ("fc", "output", 0)]
        with pytest.raises(TransformError, match="head"):
            apply_multilevel_transform(NetworkGraph("flat", 2, nodes, edges))

    def test_idempotent(self):
        once = apply_multilevel_transform(build_resnet(5, 100))
        twice = apply_multilevel_transform(once)
        assert [t.node_id for t in find_taps(twice)] == ["stage1.block4.out", "stage2.block4.out"]
        assert structure(twice) == structure(once)
        assert find_reduction_points(once) == find_reduction_points(build_resnet(5, 100))

    def test_newnet_transform_adds_nothing(self):
        g = build_newnet(10)
        assert structure(apply_multilevel_transform(g)) == structure(g)

    def test_newnet_taps_all_stages(self):
        g = build_newnet(100)
        assert [t.node_id for t in find_taps(g)] == stage_outputs(g)

    def test_wrn_transform(self):
        g = build_wideresnet(28, 10, 100)
        out = apply_multilevel_transform(g)
        assert classifier_width(out) == 32 * 32 + 16 * 16 + 640
        assert count_params(out) - count_params(g) == 100 * (1024 + 256)

    def test_max_combine_transform(self):
        out = apply_multilevel_transform(build_resnet(3, 10, 1, "max"))
        assert len(find_taps(out)) == 2

    def test_add_taps_validates_pool(self):
        with pytest.raises(ValueError):
            add_taps(build_resnet(1, 10), ["stage1.block0.out"], "max_pool")

    def test_grafting_preserves_logits(self, rng):
        g = build_resnet(3, 10)
        base = Model(g, seed=3, dtype="double")
        for st in base.bn.values():
            st.running_mean[...] = rng.normal(size=st.channels)
            st.running_var[...] = rng.uniform(0.5, 2, st.channels)
        graft = base.graft(apply_multilevel_transform(g), new_columns="zero")
        x = rng.standard_normal((8, 3, 32, 32))
        np.testing.assert_allclose(graft.predict_logits(x), base.predict_logits(x), rtol=0, atol=1e-9)
        # head features sit unchanged at the end of the widened classifier input
        base.eval()
        graft.eval()
        np.testing.assert_array_equal(graft.features(x).data[:, -64:], base.features(x).data)

    def test_graft_he_columns(self):
        g = build_resnet(1, 10)
        base = Model(g, seed=0, dtype="double")
        grafted = base.graft(apply_multilevel_transform(g), new_columns="he", seed=1)
        w = grafted.params["head.linear"]["weight"].data
        assert np.any(w[:, :-64] != 0)
        np.testing.assert_array_equal(w[:, -64:], base.params["head.linear"]["weight"].data)
