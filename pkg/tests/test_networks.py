import dataclasses

import numpy as np
import pytest

from leanpn import bench
from leanpn.layers import softmax_xent
from leanpn.memledger import MemoryLedger
from leanpn.networks import (
    PRESETS,
    ArchSpec,
    Network,
    PointCloud,
    SpecError,
    Stage,
    build_preset,
    compile_spec,
    count_params,
    grad_vector,
    spec_from_text,
    spec_to_text,
)
from leanpn.tensor_core import ContractError, InvalidInputError, make_rng


def cloud(n, seed=0, classes=2):
    rng = make_rng(seed)
    pos = rng.normal(size=(n, 3))
    pos /= np.linalg.norm(pos, axis=1).max()
    return PointCloud(pos, pos.copy(), rng.integers(0, classes, n))


def n_convs(spec):
    return sum(st.op == "conv" for st in spec.stages)


# --------------------------------------------------------------- presets


def test_pn2_paper_numbers():
    spec = build_preset("pn2_msg", "paper")
    enc1 = spec.stages[0]
    assert enc1.counts == [512, 512, 512]
    assert enc1.radii == [0.1, 0.2, 0.4]
    assert enc1.mlps == [[32, 32, 64], [64, 64, 128], [64, 96, 128]]
    assert spec.decoder == [[256, 256], [256, 128], [128, 128]]
    assert spec.head_hidden == 512 and spec.dropout == 0.7
    assert spec.n_points == 2048


def test_mres_resolution_counts():
    spec = build_preset("mres", "paper")
    assert spec.stages[0].counts == [512, 256, 128] and spec.stages[0].multires
    assert not spec.stages[0].crosslink
    assert build_preset("mresx", "paper").stages[0].crosslink


def test_deep_lpn_doubles_convs_per_segment():
    def per_segment(spec):
        counts, cur = [], 0
        for st in spec.stages:
            cur += st.op == "conv"
            if st.op == "combine":
                counts.append(cur)
                cur = 0
        return counts

    lpn, deep = build_preset("lpn", "paper"), build_preset("deep_lpn", "paper")
    assert per_segment(lpn) == [3, 3]
    assert per_segment(deep) == [6, 6]


def test_lpn_second_segment_skips_transition():
    ops = [st.op for st in build_preset("lpn", "paper").stages]
    seg2 = ops[ops.index("combine") + 1:]
    first = seg2.index("conv")
    assert seg2[first + 1] == "conv"


def test_deep_lpn_samples_after_third_conv():
    ops = [st.op for st in build_preset("deep_lpn", "paper").stages]
    seg1 = ops[:ops.index("combine")]
    conv_pos = [i for i, o in enumerate(seg1) if o == "conv"]
    assert seg1.index("sample") == conv_pos[2] + 1


def test_desk_scaling_rule():
    paper, desk = build_preset("pn2_msg", "paper"), build_preset("pn2_msg", "desk")
    assert desk.stages[0].counts == [128, 128, 128]
    assert desk.stages[0].mlps[0] == [16, 16, 32]
    assert desk.stages[0].radii == [0.2, 0.4, 0.8]
    assert desk.head_hidden == paper.head_hidden // 2


def test_unknown_preset_lists_choices():
    with pytest.raises(SpecError, match="deep_lpn"):
        build_preset("resnet")


# ------------------------------------------------------------ validation


def test_width_chain_mismatch_rejected():
    spec = build_preset("lpn")
    conv = next(i for i, st in enumerate(spec.stages) if st.op == "conv")
    spec.stages[conv] = dataclasses.replace(spec.stages[conv], widths=[1, 2, 3])
    with pytest.raises(SpecError, match="transition"):
        compile_spec(spec)


def test_missing_global_and_decoder_count():
    spec = build_preset("pn2_msg")
    with pytest.raises(SpecError, match="global"):
        compile_spec(dataclasses.replace(spec, stages=spec.stages[:-1]))
    with pytest.raises(SpecError, match="decoder"):
        compile_spec(dataclasses.replace(spec, decoder=spec.decoder[:-1]))


def test_oversampling_rejected():
    spec = ArchSpec("t", 16, 4, [Stage("sa", counts=[32], radii=[0.5], mlps=[[4]]), Stage("combine"),
                                 Stage("global", mlp=[4])], [[4], [4]], 4)
    with pytest.raises(SpecError, match="cannot sample"):
        compile_spec(spec)


def test_yaml_round_trip_lossless():
    for name in PRESETS:
        spec = build_preset(name, "paper")
        text = spec_to_text(spec)
        assert spec_from_text(text) == spec
        assert spec_to_text(spec_from_text(text)) == text


def test_malformed_yaml_is_spec_error():
    with pytest.raises(SpecError):
        spec_from_text("name: x\nstages: [}")


# ---------------------------------------------------------- count_params


def test_count_params():
    tiny = ArchSpec("t", 4, 2, [Stage("global", mlp=[4])], [[4]], 4)
    shapes = compile_spec(tiny)
    assert shapes["s0.m0"] == (6, 4)
    assert count_params(tiny) == sum(a * b + b for a, b in shapes.values())
    assert build_preset("deep_lpn") and count_params(build_preset("deep_lpn")) > count_params(build_preset("lpn"))


def test_doubling_widths_quadruples_interior_weights():
    desk, paper = compile_spec(build_preset("lpn", "desk")), compile_spec(build_preset("lpn", "paper"))
    interior = [n for n, (a, b) in desk.items() if ".s" not in n and a > 3 and n != "head.out"]
    assert interior
    for n in interior:
        (a, b), (c, d) = desk[n], paper[n]
        assert (c * d) / (a * b) == pytest.approx(4.0, rel=0.1)


def test_slp_3_to_4_has_16_params():
    tiny = ArchSpec("t", 4, 2, [Stage("global", mlp=[4])], [[4]], 4, in_dim=0)
    assert compile_spec(tiny)["s0.m0"] == (3, 4)
    assert 3 * 4 + 4 == 16


# --------------------------------------------------------------- forward


@pytest.mark.parametrize("name", PRESETS)
def test_logits_shape(name):
    spec = build_preset(name, n_points=128)
    logits, _ = Network(spec).forward(cloud(128))
    assert logits.shape == (128, 2)


def test_wrong_point_count():
    net = Network(build_preset("lpn", n_points=128))
    with pytest.raises(InvalidInputError, match="128"):
        net.forward(cloud(100))


@pytest.mark.parametrize("name", PRESETS)
def test_lean_reference_equivalence(name):
    spec = build_preset(name, n_points=128, k=8)
    lean, ref = Network(spec, 0, "lean"), Network(spec, 0, "reference")
    c = cloud(128, 1)
    plan = lean.plan([c])
    la, ra = lean.forward([c], plan)
    lb, rb = ref.forward([c], plan)
    assert np.abs(la - lb).max() <= 1e-12
    _, g = softmax_xent(la, c.labels)
    lean.backward(g, ra)
    ref.backward(g, rb)
    for n, p in lean.params.items():
        q = ref.params[n]
        scale = max(np.abs(q.grad_w).max(), 1e-30)
        assert np.abs(p.grad_w - q.grad_w).max() / scale <= 1e-9, n


def test_permutation_equivariance_pn2():
    n = 128
    spec = build_preset("pn2_msg", n_points=n, k=n - 1)  # untruncated balls
    net = Network(spec, 3)
    c = cloud(n, 4)
    perm = make_rng(5).permutation(n)
    pc = PointCloud(c.positions[perm], c.features[perm], c.labels[perm])
    a, _ = net.forward([c], net.plan([c], start="canonical"))
    b, _ = net.forward([pc], net.plan([pc], start="canonical"))
    assert np.allclose(b, a[perm], rtol=0, atol=1e-12)


def test_batched_forward_matches_single():
    spec = build_preset("mresx", n_points=128)
    net = Network(spec)
    c1, c2 = cloud(128, 1), cloud(128, 2)
    both, _ = net.forward([c1, c2], net.plan([c1, c2]))
    one, _ = net.forward([c2])
    assert np.allclose(both[128:], one, rtol=0, atol=1e-12)


# -------------------------------------------------------------- backward


def test_zero_grad_logits_give_zero_grads():
    net = Network(build_preset("lpn", n_points=128))
    logits, rec = net.forward(cloud(128))
    net.backward(np.zeros_like(logits), rec)
    assert not grad_vector(net).any()


def test_record_reuse_is_error():
    net = Network(build_preset("lpn", n_points=128))
    logits, rec = net.forward(cloud(128))
    net.backward(np.ones_like(logits), rec)
    with pytest.raises(ContractError):
        net.backward(np.ones_like(logits), rec)


def test_finite_difference_spot_check():
    net = Network(build_preset("lpn", n_points=128), 2)
    c = cloud(128, 6)
    plan = net.plan([c])
    # give the zero-initialised links something to propagate
    rng = make_rng(7)
    for name, p in net.params.items():
        if ".x" in name:
            p.weight[...] = rng.normal(scale=0.1, size=p.weight.shape)
    G = rng.normal(size=(128, 2))

    def loss():
        return float(np.sum(net.forward([c], plan)[0] * G))

    logits, rec = net.forward([c], plan)
    net.backward(G, rec)
    names = sorted(net.params)
    h = 1e-5
    for _ in range(10):
        p = net.params[names[rng.integers(len(names))]]
        idx = tuple(rng.integers(s) for s in p.weight.shape)
        old = p.weight[idx]
        p.weight[idx] = old + h
        up = loss()
        p.weight[idx] = old - h
        dn = loss()
        p.weight[idx] = old
        fd = (up - dn) / (2 * h)
        an = p.grad_w[idx]
        assert abs(fd - an) <= 1e-3 * max(abs(fd), abs(an), 1e-6)


@pytest.mark.parametrize("name", PRESETS)
def test_no_leak_after_backward(name):
    led = MemoryLedger()
    net = Network(build_preset(name, n_points=128), ledger=led)
    base = led.current
    assert base == net.param_bytes
    c = cloud(128)
    logits, rec = net.forward([c], net.plan([c]))
    assert led.current > base
    net.backward(np.ones_like(logits), rec)
    assert led.current == base
    assert led.replay()[0] == base


# ---------------------------------------------------------- depth memory


@pytest.fixture(scope="module")
def depth():
    return bench.depth_ratios("desk", n_points=512)


def test_deepening_lean_memory_ratio(depth):
    assert depth["lean"][2] <= 1.25


def test_deepening_reference_memory_ratio(depth):
    # stated threshold; half of the added blocks run after down-sampling,
    # which caps this ratio well below the threshold (see notes)
    assert depth["reference"][2] >= 1.7
