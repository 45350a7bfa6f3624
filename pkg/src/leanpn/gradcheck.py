"""Central finite-difference checks of every layer's backward pass.

Each check builds a small random instance, takes ``L = sum(y * R)`` for a
fixed random ``R``, and compares analytic gradients with
``(L(x+h) - L(x-h)) / 2h`` on sampled coordinates. Coordinates whose one-sided
differences disagree sit on a ReLU or max-pool kink and are skipped (tie
rejection); every check still needs at least a few accepted coordinates.

Backward functions are looked up through the ``layers`` module at call time
so a patched ``layers.slp_backward`` is picked up.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from . import geometry, layers
from .layers import SlpParams
from .tensor_core import make_rng

H = 1e-5
TOL = 1e-4
FLOOR = 1e-6  # relative error denominator floor for vanishing gradients


@dataclass
class CheckRow:
    layer: str
    param: str
    max_rel_err: float
    n_checked: int

    @property
    def ok(self) -> bool:
        return self.n_checked > 0 and self.max_rel_err <= TOL


def _rel(a, n):
    return abs(a - n) / max(abs(a), abs(n), FLOOR)


def _check_array(loss, target, analytic, rng, n_coords=12):
    """Max relative error over sampled non-kink coordinates of ``target``."""
    flat = target.reshape(-1)
    ga = np.asarray(analytic).reshape(-1)
    picks = rng.choice(flat.size, size=min(flat.size, 4 * n_coords), replace=False)
    worst, used = 0.0, 0
    f0 = loss()
    for i in picks:
        old = flat[i]
        flat[i] = old + H
        fp = loss()
        flat[i] = old - H
        fm = loss()
        flat[i] = old
        up, down = (fp - f0) / H, (f0 - fm) / H
        if abs(up - down) > 1e-3 * max(abs(up), abs(down), 1e-3):
            continue  # kink inside [x-h, x+h]
        worst = max(worst, _rel(ga[i], (fp - fm) / (2 * H)))
        used += 1
        if used == n_coords:
            break
    return worst, used


def _params(rng, *dims, zero=False):
    return [SlpParams.init(rng, a, b, zero) for a, b in dims]


def _perturb_bias(rng, ps):
    for p in ps:
        p.bias[...] = rng.normal(scale=0.1, size=p.bias.shape)


def _run(name, rng, inputs, params, fwd, bwd):
    """Generic driver: ``fwd()`` -> (y, ctx); ``bwd(R, ctx)`` -> input grads."""
    y, _ = fwd()
    R = rng.normal(size=y.shape)

    def loss():
        yy, _ = fwd()
        return float(np.sum(yy * R))

    for p in params:
        p.zero_grad()
    _, ctx = fwd()
    grads = bwd(R, ctx)
    rows = []
    for label, x in inputs.items():
        err, n = _check_array(loss, x, grads[label], rng)
        rows.append(CheckRow(name, label, err, n))
    for i, p in enumerate(params):
        for label, val, g in (("weight", p.weight, p.grad_w), ("bias", p.bias, p.grad_b)):
            err, n = _check_array(loss, val, g.copy(), rng)
            rows.append(CheckRow(name, f"p{i}.{label}", err, n))
    return rows


def _cloud(rng, n):
    pos = rng.uniform(-1.0, 1.0, (n, 3))
    return pos


def check_slp(rng, activation):
    x = rng.normal(size=(20, 5))
    (p,) = _params(rng, (5, 4))
    _perturb_bias(rng, [p])
    return _run(f"slp_{activation}", rng, {"x": x}, [p],
                lambda: layers.slp_forward(x, p, activation),
                lambda R, c: {"x": layers.slp_backward(R, c, p)})


def check_transition(rng):
    x = rng.normal(size=(20, 6))
    (p,) = _params(rng, (6, 8))
    _perturb_bias(rng, [p])
    return _run("transition", rng, {"x": x}, [p],
                lambda: layers.transition_forward(x, p),
                lambda R, c: {"x": layers.transition_backward(R, c, p)})


def check_mlp(rng):
    x = rng.normal(size=(16, 4))
    ps = _params(rng, (4, 6), (6, 5), (5, 3))
    _perturb_bias(rng, ps)
    return _run("mlp", rng, {"x": x}, ps,
                lambda: layers.mlp_forward(x, ps),
                lambda R, c: {"x": layers.mlp_backward(R, c, ps)})


def check_maxpool(rng):
    pos = _cloud(rng, 24)
    nbr = geometry.knn_index(pos, 5)
    x = rng.normal(size=(24, 4))

    def fwd():
        pooled, argmax, ctx = layers.nbr_maxpool_forward(geometry.index_lookup(x, nbr))
        return pooled, argmax

    def bwd(R, argmax):
        routed = layers.nbr_maxpool_backward(R, argmax, nbr)
        return {"x": geometry.inverse_index_lookup(routed, nbr, 24)}

    return _run("nbr_maxpool", rng, {"x": x}, [], fwd, bwd)


def check_group(rng, mode, tail_dims=()):
    n, d, dout, k = 30, 4, 6, 6
    pos = _cloud(rng, n)
    feat = rng.normal(size=(n, d))
    nbr = geometry.ball_query(pos, pos, np.arange(n), 0.9, k)
    pf, ps = _params(rng, (d, dout), (3, dout))
    dims = [dout, *tail_dims]
    tail = _params(rng, *zip(dims[:-1], dims[1:]))
    _perturb_bias(rng, [pf, ps, *tail])
    name = f"{mode}_group" + ("_tail" if tail else "")
    return _run(name, rng, {"feat": feat}, [pf, ps, *tail],
                lambda: layers.group_forward(mode, feat, pos, nbr, pf, ps, tail),
                lambda R, c: {"feat": layers.group_backward(R, c, pf, ps, tail)[0]})


def check_residual(rng):
    x = rng.normal(size=(12, 5))
    (p,) = _params(rng, (5, 5))

    def fwd():
        y, c = layers.slp_forward(x, p, "relu")
        return layers.residual_apply(y, x), c

    def bwd(R, c):
        g_f, g_skip = layers.residual_backward(R)
        return {"x": layers.slp_backward(g_f, c, p) + g_skip}

    return _run("residual", rng, {"x": x}, [p], fwd, bwd)


def check_crosslink(rng):
    p0, p1, p2 = _cloud(rng, 24), None, None
    p1 = p0[geometry.fps(p0, 12)]
    p2 = p1[geometry.fps(p1, 6)]
    f = [rng.normal(size=(24, 3)), rng.normal(size=(12, 4)), rng.normal(size=(6, 5))]
    params = [tuple(_params(rng, (3, 4), (4, 3))), tuple(_params(rng, (4, 5), (5, 4)))]
    flat = [p for pair in params for p in pair]
    _perturb_bias(rng, flat)
    links = [layers.link_geometry(p0, p1), layers.link_geometry(p1, p2)]

    def fwd():
        outs, ctx = layers.crosslink_forward(list(zip(f, (p0, p1, p2))), params, links)
        return np.concatenate([o.ravel() for o in outs]), ctx

    def bwd(R, ctx):
        sizes = np.cumsum([0] + [o.size for o in f])
        grads = [R[sizes[i]:sizes[i + 1]].reshape(f[i].shape) for i in range(3)]
        g = layers.crosslink_backward(grads, ctx, params)
        return {f"feat{i}": g[i] for i in range(3)}

    return _run("crosslink", rng, {f"feat{i}": f[i] for i in range(3)}, flat, fwd, bwd)


def check_dropout(rng):
    x = rng.normal(size=(10, 6))
    seed = int(rng.integers(1 << 30))
    return _run("dropout", rng, {"x": x}, [],
                lambda: layers.dropout(x, 0.5, True, np.random.default_rng(seed)),
                lambda R, c: {"x": layers.dropout_backward(R, c)})


def check_softmax_xent(rng):
    z = rng.normal(size=(9, 4))
    labels = rng.integers(0, 4, 9)

    def fwd():
        loss, g = layers.softmax_xent(z, labels)
        return np.array([loss]), g

    return _run("softmax_xent", rng, {"logits": z}, [], fwd, lambda R, g: {"logits": R[0] * g})


def check_segment_maxpool(rng):
    x = rng.normal(size=(12, 5))
    return _run("segment_maxpool", rng, {"x": x}, [],
                lambda: layers.segment_maxpool_forward(x, 3),
                lambda R, c: {"x": layers.segment_maxpool_backward(R, c)})


def check_interpolate(rng):
    src, q = _cloud(rng, 10), _cloud(rng, 15)
    w = geometry.interp_weights(q, src)
    x = rng.normal(size=(10, 4))
    return _run("interpolate", rng, {"x": x}, [],
                lambda: (geometry.interpolate(x, w), None),
                lambda R, c: {"x": geometry.interpolate_adjoint(R, w, 10)})


def check_network(rng, preset="lpn", n_points=128, n_weights=10):
    """End-to-end check on a desk network: sampled weights across all layers."""
    from .networks import Network, PointCloud, build_preset

    spec = build_preset(preset, "desk", n_points=n_points, k=8)
    net = Network(spec, seed=int(rng.integers(1 << 30)))
    pos = rng.uniform(-1, 1, (n_points, 3))
    pos /= np.linalg.norm(pos, axis=1).max()
    cloud = PointCloud(pos, pos.copy(), rng.integers(0, 2, n_points))
    plan = net.plan([cloud])
    # links start at zero; give them values so their paths are exercised
    for name, p in net.params.items():
        if ".x" in name:
            p.weight[...] = rng.normal(scale=0.1, size=p.weight.shape)

    def loss():
        logits, _ = net.forward([cloud], plan)
        return layers.softmax_xent(logits, cloud.labels)[0]

    net.zero_grad()
    logits, rec = net.forward([cloud], plan)
    _, g = layers.softmax_xent(logits, cloud.labels)
    net.backward(g, rec)
    names = list(net.params)
    worst, used = 0.0, 0
    for name in rng.permutation(names):
        p = net.params[name]
        err, n = _check_array(loss, p.weight, p.grad_w.copy(), rng, n_coords=1)
        if n:
            worst = max(worst, err)
            used += 1
        if used == n_weights:
            break
    return [CheckRow(f"network_{preset}", "weights", worst, used)]


def run_suite(seed: int = 0, network: bool = True):
    rng = make_rng(seed)
    rows = []
    rows += check_slp(rng, "relu")
    rows += check_slp(rng, "none")
    rows += check_transition(rng)
    rows += check_mlp(rng)
    rows += check_maxpool(rng)
    rows += check_group(rng, "lean")
    rows += check_group(rng, "lean", (5, 3))
    rows += check_group(rng, "reference")
    rows += check_group(rng, "reference", (5, 3))
    rows += check_residual(rng)
    rows += check_crosslink(rng)
    rows += check_dropout(rng)
    rows += check_softmax_xent(rng)
    rows += check_segment_maxpool(rng)
    rows += check_interpolate(rng)
    if network:
        rows += check_network(rng)
    return rows


def rows_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "param", "max_rel_err"])
    for r in rows:
        w.writerow([r.layer, r.param, f"{r.max_rel_err:.3e}" if r.n_checked else "nan"])
    return buf.getvalue()
