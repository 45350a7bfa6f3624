import dataclasses

import numpy as np
import pytest

from leanpn import harness as H
from leanpn.layers import SlpParams
from leanpn.networks import Network, build_preset
from leanpn.tensor_core import InvalidInputError, make_rng


# ------------------------------------------------------------------ data


def test_same_seed_same_dataset():
    a = H.gen_synthetic(3, 6, 128, catalog=("lollipop", "table"))
    b = H.gen_synthetic(3, 6, 128, catalog=("lollipop", "table"))
    for x, y in zip(a.samples, b.samples):
        assert np.array_equal(x.positions, y.positions) and np.array_equal(x.labels, y.labels)
    c = H.gen_synthetic(4, 6, 128, catalog=("lollipop", "table"))
    assert not np.array_equal(a.samples[0].positions, c.samples[0].positions)


def test_samples_have_exact_size_and_unit_norm():
    ds = H.gen_synthetic(0, 6, 100, catalog=H.CATALOG)
    for s in ds.samples:
        assert s.positions.shape == (100, 3) and s.labels.shape == (100,)
        assert np.linalg.norm(s.positions, axis=1).max() <= 1.0 + 1e-12
        assert s.labels.max() < H.PARTS[H.CATALOG[s.category]]
    assert [H.CATALOG[s.category] for s in ds.samples[:3]] == list(H.CATALOG)


def test_lollipop_label_histogram_tracks_area():
    head = 4 * np.pi * 0.35 ** 2
    stick = 2 * np.pi * 0.08 * 1.0
    expected = head / (head + stick)  # 0.7538
    ds = H.gen_synthetic(1, 10, 1024)
    frac = np.mean([np.mean(s.labels == 0) for s in ds.samples])
    assert abs(frac - expected) <= 0.10 * expected


def test_generator_rejects_bad_input():
    with pytest.raises(InvalidInputError, match="lollipop"):
        H.gen_synthetic(0, 1, 128, catalog=("teapot",))
    with pytest.raises(InvalidInputError):
        H.gen_synthetic(0, 1, 32)


def test_upsampling_duplicates_points():
    rng = make_rng(0)
    pts, lab = rng.normal(size=(5, 3)), np.arange(5)
    p2, l2 = H.resample(pts, lab, 8, rng)
    assert len(p2) == 8 and np.array_equal(p2[:5], pts)
    assert all(any(np.array_equal(q, p) for p in pts) for q in p2)


def test_split_counts():
    ds = H.gen_synthetic(0, 10, 64)
    assert len(ds.split("train")) == 8 and len(ds.split("test")) == 2


def test_file_round_trip(tmp_path):
    ds = H.gen_synthetic(2, 4, 64, catalog=("barbell", "table"))
    index = H.write_dataset(ds, tmp_path)
    back = H.read_dataset(index)
    assert back.splits == ds.splits
    for a, b in zip(ds.samples, back.samples):
        assert a.category == b.category and np.array_equal(a.labels, b.labels)
        assert np.allclose(a.positions, b.positions, rtol=1e-8, atol=1e-9)
    head = (tmp_path / "sample_00000.txt").read_text().splitlines()[0]
    assert head == "64 2 barbell"


def test_corrupt_header_names_line(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("64 two lollipop\n")
    with pytest.raises(H.DatasetFormatError, match=r"bad\.txt:1"):
        H.read_sample(p)


def test_corrupt_row_names_line(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("2 2 lollipop\n0 0 0 1\n0 0 x 1\n")
    with pytest.raises(H.DatasetFormatError, match=r"bad\.txt:3"):
        H.read_sample(p)
    p.write_text("1 2 lollipop\n0 0 0 2\n")
    with pytest.raises(H.DatasetFormatError, match=r":2: label 2"):
        H.read_sample(p)


# ------------------------------------------------------------------ adam


def scalar(p):
    return {"p": SlpParams(np.array([[p]]), np.array([0.0]))}


def test_adam_zero_grad_no_decay_is_noop():
    ps = scalar(0.7)
    H.adam_step(ps, H.AdamState(weight_decay=0.0))
    assert ps["p"].weight[0, 0] == 0.7


def test_adam_first_step_by_hand():
    ps = scalar(0.0)
    ps["p"].grad_w[...] = 1.0
    H.adam_step(ps, H.AdamState(lr=1e-3, weight_decay=0.0))
    assert ps["p"].weight[0, 0] == pytest.approx(-9.99999990e-4, abs=1e-15)
    assert ps["p"].grad_w[0, 0] == 0.0


def adam_oracle(p, grads, lr, wd, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        g = g + wd * p
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1 ** t)) / ((v / (1 - b2 ** t)) ** 0.5 + eps)
    return p


def test_adam_matches_scalar_oracle():
    grads = [0.3, -1.2, 0.05, 2.0, -0.7]
    ps = scalar(0.4)
    st = H.AdamState(lr=1e-2)
    for g in grads:
        ps["p"].grad_w[...] = g
        H.adam_step(ps, st)
    assert st.t == 5
    assert abs(ps["p"].weight[0, 0] - adam_oracle(0.4, grads, 1e-2, 5e-4)) <= 1e-12


def test_adam_nan_names_parameter():
    ps = scalar(0.0)
    ps["p"].grad_w[...] = np.nan
    with pytest.raises(H.TrainingDiverged, match="p.weight"):
        H.adam_step(ps, H.AdamState())


# --------------------------------------------------------------- metrics


def test_miou_hand_example():
    # part A: pred {p1, p2}, gt {p1}; part B absent in both; p2 is unlabelled
    assert H.miou([np.array([0, 0])], [np.array([0, -1])], [0], lambda c: 2) == 0.75


def test_miou_absent_part_counts_one():
    assert H.miou([np.array([0, 0])], [np.array([0, 0])], [0], lambda c: 2) == 1.0
    assert H.sample_iou(np.array([0, 0, 0]), np.array([0, 1, 1]), 2) == pytest.approx((1 / 3 + 0) / 2)


def test_piou_pooling_example():
    preds = [np.array([0]), np.array([0, 0, 1])]
    gts = [np.array([0]), np.array([1, 1, 0])]
    # part 0 pooled: (1 + 0) / (1 + 3); part 1 pooled: 0 / 3
    assert H.piou(preds, gts, 2) == pytest.approx((0.25 + 0.0) / 2)
    per_sample_part0 = [1.0, 0.0]
    assert np.mean(per_sample_part0) == 0.5


def test_perfect_predictions():
    gts = [make_rng(i).integers(0, 3, 10) for i in range(4)]
    assert H.miou(gts, gts, [0] * 4, lambda c: 3) == 1.0
    assert H.piou(gts, gts, 3) == 1.0


def test_metric_rejects_out_of_range():
    with pytest.raises(InvalidInputError):
        H.miou([np.array([0, 3])], [np.array([0, 1])], [0], lambda c: 2)
    with pytest.raises(InvalidInputError):
        H.piou([np.array([0, 1])], [np.array([0, -2])], 2)
    with pytest.raises(InvalidInputError):
        H.piou([np.array([0, -1])], [np.array([0, 1])], 2)


def brute_miou(preds, gts, n_parts):
    out = []
    for p, g in zip(preds, gts):
        ious = []
        for part in range(n_parts):
            P = {i for i, v in enumerate(p) if v == part}
            G = {i for i, v in enumerate(g) if v == part}
            ious.append(1.0 if not (P | G) else len(P & G) / len(P | G))
        out.append(sum(ious) / n_parts)
    return sum(out) / len(out)


def brute_piou(preds, gts, n_parts):
    vals = []
    for part in range(n_parts):
        inter = union = 0
        for p, g in zip(preds, gts):
            P = {i for i, v in enumerate(p) if v == part}
            G = {i for i, v in enumerate(g) if v == part}
            inter += len(P & G)
            union += len(P | G)
        if union:
            vals.append(inter / union)
    return sum(vals) / len(vals)


def random_instance(rng):
    n_parts = int(rng.integers(1, 6))
    n_samples = int(rng.integers(1, 5))
    preds, gts = [], []
    for _ in range(n_samples):
        n = int(rng.integers(1, 21))
        preds.append(rng.integers(0, n_parts, n))
        gts.append(rng.integers(0, n_parts, n))
    return preds, gts, n_parts


def test_metrics_match_brute_force():
    rng = make_rng(11)
    for _ in range(200):
        preds, gts, n_parts = random_instance(rng)
        assert H.miou(preds, gts, [0] * len(preds), lambda c: n_parts) == brute_miou(preds, gts, n_parts)
        assert H.piou(preds, gts, n_parts) == brute_piou(preds, gts, n_parts)


def test_metrics_relabel_invariant_and_bounded():
    rng = make_rng(12)
    for _ in range(50):
        preds, gts, n_parts = random_instance(rng)
        perm = rng.permutation(n_parts)
        m = H.miou(preds, gts, [0] * len(preds), lambda c: n_parts)
        p = H.piou(preds, gts, n_parts)
        assert 0.0 <= m <= 1.0 and 0.0 <= p <= 1.0
        assert m == pytest.approx(H.miou([perm[x] for x in preds], [perm[x] for x in gts],
                                         [0] * len(preds), lambda c: n_parts), abs=1e-15)
        assert p == pytest.approx(H.piou([perm[x] for x in preds], [perm[x] for x in gts], n_parts), abs=1e-15)
        same = all(np.array_equal(a, b) for a, b in zip(preds, gts))
        assert (m == 1.0) == same


def test_piou_pools_by_category():
    # part 0 of category 0 and part 0 of category 1 are different parts
    preds = [np.array([0, 0]), np.array([1, 1])]
    gts = [np.array([0, 0]), np.array([0, 0])]
    assert H.piou(preds, gts, 2, categories=[0, 1]) == pytest.approx((1.0 + 0.0 + 0.0) / 3)


# -------------------------------------------------------------- training


@pytest.fixture(scope="module")
def small():
    return H.gen_synthetic(0, 12, 128)


def test_lr_zero_keeps_loss_constant(small):
    spec = dataclasses.replace(build_preset("lpn", n_points=128), dropout=0.0)
    _, hist = H.train(spec, small.samples[:4], 3, 2, 0.0, seed=0)
    assert all(h.loss == pytest.approx(hist[0].loss, rel=1e-12) for h in hist)


def test_training_is_deterministic(small):
    spec = build_preset("lpn", n_points=128)
    _, h1 = H.train(spec, small.samples[:4], 2, 2, 1e-3, seed=5)
    _, h2 = H.train(spec, small.samples[:4], 2, 2, 1e-3, seed=5)
    assert h1 == h2
    assert H.history_csv(h1).splitlines()[0] == "epoch,loss,acc,miou,peak_bytes"


def test_single_sample_overfit():
    one = H.gen_synthetic(0, 1, 512).samples
    _, hist = H.train(build_preset("lpn"), one, 200, 1, 1e-3, seed=0)
    hit = [h.epoch for h in hist if h.acc >= 0.99]
    assert hit and hit[0] < 200
    losses = np.array([h.loss for h in hist])
    # upticks measured against the starting loss
    assert np.all(np.diff(losses) <= 0.05 * losses[0])
    assert losses[-1] < 0.05 * losses[0]


def test_vote_single_pass_and_determinism(small):
    net = Network(build_preset("lpn", n_points=128), 1)
    c = small.samples[0]
    one = H.multi_forward_vote(net, c, 1)
    assert np.array_equal(one, net.forward(c)[0].argmax(axis=1))
    a = H.multi_forward_vote(net, c, 3, seed=4)
    b = H.multi_forward_vote(net, c, 3, seed=4)
    assert np.array_equal(a, b)


def test_vote_not_worse_than_single_pass():
    ds = H.gen_synthetic(7, 60, 128)
    net, _ = H.train(build_preset("lpn", n_points=128), ds.split("train"), 4, 8, 1e-3, seed=0)
    test = ds.split("test")
    single = H.evaluate(net, test, 1)["acc"]
    vote = H.evaluate(net, test, 3)["acc"]
    assert vote >= single - 0.01


def test_wrong_size_cloud_rejected():
    spec = build_preset("lpn", n_points=128)
    with pytest.raises(InvalidInputError):
        H.train(spec, H.gen_synthetic(0, 1, 64).samples, 1, 1, 1e-3)
