import numpy as np
import pytest

from covidnet import arch
from covidnet.arch import ArchConfig, ArchGraph, LayerNode, PEPXSpec, conv_node
from covidnet.errors import ArchitectureError, ShapeError
from oracles import MulCounter, hand_count_params, naive_forward

WORKED = PEPXSpec(64, 32, 128, 32, 64)


# --- PEPX ----------------------------------------------------------------------

def test_pepx_structure():
    frag = arch.build_pepx(WORKED)
    convs = frag.convs
    assert [c.id.split(".")[-1] for c in convs] == ["proj1", "expand", "dw", "proj2", "extend"]
    assert [c.attrs["kernel"] for c in convs] == [1, 1, 3, 1, 1]
    assert convs[2].attrs["groups"] == 128 and convs[2].attrs["in_channels"] == 128
    assert frag.residual
    add = frag.nodes[-1]
    assert add.kind == "add" and set(add.inputs) == {"input", "pepx.extend"}


def test_pepx_param_hand_count():
    weights = 64 * 32 + 32 * 128 + 128 * 9 + 128 * 32 + 32 * 64
    biases = 32 + 128 + 128 + 32 + 64
    assert weights == 13440
    assert arch.count_params(arch.build_pepx(WORKED).nodes) == weights + biases == 13824


def test_pepx_without_residual_when_widths_differ():
    frag = arch.build_pepx(PEPXSpec(64, 32, 128, 32, 96))
    assert not frag.residual
    assert all(n.kind == "conv" for n in frag.nodes)


@pytest.mark.parametrize("dims", [(64, 64, 128, 32, 64), (64, 32, 32, 16, 64), (64, 32, 128, 128, 64), (0, 1, 2, 1, 1)])
def test_pepx_rejects_bad_ordering(dims):
    with pytest.raises(ArchitectureError):
        PEPXSpec(*dims)


# --- build_covidnet --------------------------------------------------------------

def test_default_graph_validates():
    g = arch.build_covidnet()
    shapes = g.validate()
    assert len(g.hub_nodes) == 4
    assert shapes[g.output_id] == (3,)
    assert g.nodes["stem"].attrs["kernel"] == 7
    order = g.topo_order()
    assert order[-4:] == ["gap", "fc1", "fc2", "softmax"]
    assert [g.nodes[n].kind for n in order[-4:]] == ["gap", "dense", "dense", "softmax"]


def test_default_graph_kernel_diversity():
    g = arch.build_covidnet()
    convs = [n for n in g.nodes.values() if n.kind == "conv"]
    assert {c.attrs["kernel"] for c in convs} == {7, 3, 1}
    assert any(c.attrs["groups"] > 1 for c in convs) and any(c.attrs["groups"] == 1 for c in convs)


def test_hubs_receive_all_blocks_of_their_stage():
    g = arch.build_covidnet()
    for s in range(1, 5):
        hub = g.nodes[f"s{s}.hub"]
        assert hub.attrs["kernel"] == 1
        blocks = [i for i in hub.inputs if i.startswith(f"s{s}.b")]
        assert len(blocks) == 2
        assert len(hub.inputs) == 3  # stage input plus both block outputs
    assert len(g.long_range_edges) == 12


def test_default_forward_shape_and_normalisation():
    g = arch.build_covidnet()
    p = arch.init_params(g, 0)
    y = arch.forward(g, p, np.random.default_rng(0).random((1, 1, 64, 64))).data
    assert y.shape == (1, 3)
    assert abs(y.sum() - 1) < 1e-12


def test_tiny_config_hand_count():
    cfg = ArchConfig(input_size=16, widths=(8,), blocks_per_stage=(1,))
    g = arch.build_covidnet(cfg)
    stem = 7 * 7 * 1 * 8 + 8
    # pepx 8 -> proj1 4 -> expand 16 -> dw 16 -> proj2 4 -> extend 8
    pepx = (8 * 4 + 4) + (4 * 16 + 16) + (16 * 9 + 16) + (16 * 4 + 4) + (4 * 8 + 8)
    hub = (8 + 8) * 8 + 8
    head = (8 * 64 + 64) + (64 * 3 + 3)
    assert arch.count_params(g) == stem + pepx + hub + head == 1691
    assert hand_count_params(g) == 1691


def test_bad_widths_name_the_stage():
    with pytest.raises(ArchitectureError, match="stage 2 block 1"):
        # stage 2: in 8, proj1 4, expand round(2 * 2.0) = 4 is not an expansion
        arch.build_covidnet(ArchConfig(widths=(8, 2), blocks_per_stage=(1, 1)))


def test_config_mapping_round_trip():
    cfg = ArchConfig(input_size=32, widths=(8, 16), blocks_per_stage=(1, 2), hub_policy="none")
    assert ArchConfig.from_mapping(cfg.to_mapping()) == cfg
    with pytest.raises(ArchitectureError):
        ArchConfig.from_mapping({"no_such_key": "1"})
    with pytest.raises(ArchitectureError):
        ArchConfig.from_mapping({"stages": "3", "widths": "8,16"})


def test_hub_policy_none_has_no_hubs():
    g = arch.build_covidnet(ArchConfig(input_size=16, widths=(8, 16), blocks_per_stage=(1, 1), hub_policy="none"))
    assert g.hub_nodes == () and g.long_range_edges == []


# --- forward -------------------------------------------------------------------

def _identity_stem_graph():
    nodes = [
        LayerNode("input", "input", (), {"shape": (2, 3, 3)}),
        conv_node("stem", ["input"], 2, 2, kernel=1),
        LayerNode("gap", "gap", ("stem",)),
        LayerNode("fc1", "dense", ("gap",), {"in_features": 2, "out_features": 2, "act": "relu"}),
        LayerNode("fc2", "dense", ("fc1",), {"in_features": 2, "out_features": 3, "act": "none"}),
        LayerNode("softmax", "softmax", ("fc2",)),
    ]
    return ArchGraph(nodes)


def test_identity_stem_graph_by_hand():
    g = _identity_stem_graph()
    g.validate()
    x = np.array([[[[1, -2, 3], [0, 1, 1], [2, 2, -4]], [[0, 0, 9], [1, 1, 1], [-1, -1, -1]]]], dtype=float)
    w1 = np.array([[1.0, -1.0], [0.5, 2.0]])
    w2 = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    params = {"stem.weight": np.eye(2)[:, :, None, None], "stem.bias": np.zeros(2),
              "fc1.weight": w1, "fc1.bias": np.array([0.0, -1.0]),
              "fc2.weight": w2, "fc2.bias": np.array([0.0, 0.0, -1.0])}
    # relu(identity conv) keeps positives; average each channel over 9 pixels
    pooled = np.array([(1 + 3 + 1 + 1 + 2 + 2) / 9, (9 + 1 + 1 + 1) / 9])
    h = np.maximum(w1 @ pooled + np.array([0.0, -1.0]), 0)
    z = w2 @ h + np.array([0.0, 0.0, -1.0])
    expect = np.exp(z - z.max()) / np.exp(z - z.max()).sum()
    np.testing.assert_allclose(arch.forward(g, params, x).data[0], expect, rtol=1e-14)


def test_forward_independent_of_storage_order():
    cfg = ArchConfig(input_size=16, widths=(8, 16), blocks_per_stage=(1, 2))
    g = arch.build_covidnet(cfg)
    p = arch.init_params(g, 1)
    x = np.random.default_rng(2).random((2, 1, 16, 16))
    perm = np.random.default_rng(3).permutation(len(g.nodes))
    a = arch.forward(g, p, x).data
    b = arch.forward(g.reordered(perm), p, x).data
    assert a.tobytes() == b.tobytes()


def test_identical_images_give_identical_rows():
    g = arch.build_covidnet(ArchConfig(input_size=16, widths=(8,), blocks_per_stage=(1,)))
    img = np.random.default_rng(4).random((1, 1, 16, 16))
    y = arch.forward(g, arch.init_params(g, 0), np.concatenate([img, img])).data
    assert y[0].tobytes() == y[1].tobytes()


def test_forward_rejects_wrong_input_size():
    g = arch.build_covidnet(ArchConfig(input_size=16, widths=(8,), blocks_per_stage=(1,)))
    with pytest.raises(ShapeError, match="input"):
        arch.forward(g, arch.init_params(g), np.zeros((1, 1, 20, 20)))


def test_merge_shape_error_names_node():
    nodes = [
        LayerNode("input", "input", (), {"shape": (1, 8, 8)}),
        conv_node("a", ["input"], 1, 2, kernel=3, pad=1),
        conv_node("b", ["input"], 1, 2, kernel=3, stride=2, pad=1),
        conv_node("hub", ["a", "b"], 4, 2),
        LayerNode("gap", "gap", ("hub",)),
        LayerNode("fc", "dense", ("gap",), {"in_features": 2, "out_features": 3, "act": "none"}),
        LayerNode("softmax", "softmax", ("fc",)),
    ]
    with pytest.raises(ShapeError, match="hub"):
        ArchGraph(nodes).infer_shapes()


def test_cycle_rejected():
    nodes = [LayerNode("input", "input", (), {"shape": (1, 4, 4)}),
             conv_node("a", ["input", "b"], 2, 1), conv_node("b", ["a"], 1, 1)]
    with pytest.raises(ArchitectureError, match="cycle"):
        ArchGraph(nodes).topo_order()


def test_predict_matches_forward():
    g = arch.build_covidnet(ArchConfig(input_size=16, widths=(8,), blocks_per_stage=(1,)))
    p = arch.init_params(g, 0)
    x = np.random.default_rng(5).random((5, 16, 16))
    np.testing.assert_allclose(arch.predict(g, p, x, batch_size=2), arch.forward(g, p, x[:, None]).data, rtol=1e-12)


# --- complexity ----------------------------------------------------------------

def test_mac_examples():
    dw = ArchGraph([LayerNode("input", "input", (), {"shape": (4, 8, 8)}),
                    conv_node("dw", ["input"], 4, 4, kernel=3, pad=1, groups=4)])
    assert arch.count_macs(dw) == 3 * 3 * 4 * 8 * 8 == 2304
    pw = ArchGraph([LayerNode("input", "input", (), {"shape": (64, 16, 16)}), conv_node("pw", ["input"], 64, 32)])
    assert arch.count_macs(pw) == 64 * 32 * 16 * 16 == 524288
    fc = [LayerNode("fc", "dense", ("x",), {"in_features": 100, "out_features": 3, "act": "none"})]
    assert arch.count_params(fc) == 303


def test_complexity_totals_equal_per_layer_sums():
    rep = arch.complexity(arch.build_covidnet())
    assert rep.total_params == sum(p for _, p, _ in rep.per_layer) == arch.count_params(arch.build_covidnet())
    assert rep.total_macs == sum(m for _, _, m in rep.per_layer)


def test_default_complexity_frozen():
    # regression values for the default desk-scale graph
    rep = arch.complexity(arch.build_covidnet())
    assert (rep.total_params, rep.total_macs) == (706739, 37257408)
    assert "params_M = 0.7067" in rep.dump()


def test_count_macs_equals_loop_nest_multiplications():
    cfg = ArchConfig(input_size=12, widths=(4, 8), blocks_per_stage=(1, 1), head_hidden=6)
    g = arch.build_covidnet(cfg)
    p = arch.init_params(g, 0)
    counter = MulCounter()
    x = np.random.default_rng(6).random((1, 1, 12, 12))
    out = naive_forward(g, p, x, counter)
    assert counter.n == arch.count_macs(g)
    np.testing.assert_allclose(out, arch.forward(g, p, x).data, rtol=1e-12)


def test_removing_long_range_edge_reduces_params():
    g = arch.build_covidnet(ArchConfig(input_size=16, widths=(8, 16), blocks_per_stage=(2, 2)))
    base = arch.count_params(g)
    for src, dst in g.long_range_edges:
        assert arch.count_params(g.without_edge(src, dst)) < base


def test_describe_format():
    text = arch.describe(arch.build_covidnet())
    lines = text.splitlines()
    assert lines[0] == "input input shape=1x64x64 <- -"
    assert lines[1] == "stem conv k=7x7 s=2 p=3 g=1 in=1 out=32 act=relu <- input"
    hub = next(ln for ln in lines if ln.startswith("s1.hub "))
    assert hub == "s1.hub conv k=1x1 s=1 p=0 g=1 in=96 out=32 act=relu hub <- stem,s1.b1.add,s1.b2.add"
    assert lines[-1] == "softmax softmax - <- fc2"


def test_init_params_deterministic_and_zero_bias():
    g = arch.build_covidnet(ArchConfig(input_size=16, widths=(8,), blocks_per_stage=(1,)))
    a, b = arch.init_params(g, 3), arch.init_params(g, 3)
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    assert all(not v.any() for k, v in a.items() if k.endswith(".bias"))
