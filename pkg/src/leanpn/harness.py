"""Synthetic part-labelled clouds, Adam, the training loop and IoU metrics."""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field

import numpy as np

from . import geometry, layers
from .memledger import MemoryLedger
from .networks import ArchSpec, Network, PointCloud, merge_plans, plan_cloud
from .tensor_core import FLOAT, INDEX, InvalidInputError

CATALOG = ("lollipop", "barbell", "table")
PARTS = {"lollipop": 2, "barbell": 2, "table": 2}
SPLITS = ("train", "val", "test")


class DatasetFormatError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    pass


# ---------------------------------------------------------------- shapes


def _sphere(rng, n, center, radius):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return center + radius * v


def _cylinder(rng, n, a, b, radius):
    """Lateral surface of the cylinder with axis a->b (no caps)."""
    a, b = np.asarray(a, dtype=FLOAT), np.asarray(b, dtype=FLOAT)
    axis = b - a
    length = np.linalg.norm(axis)
    u = axis / length
    helper = np.array([1.0, 0.0, 0.0]) if abs(u[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(u, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(u, e1)
    t = rng.uniform(0.0, 1.0, n)
    th = rng.uniform(0.0, 2 * np.pi, n)
    return a + t[:, None] * axis + radius * (np.cos(th)[:, None] * e1 + np.sin(th)[:, None] * e2)


def _box(rng, n, lo, hi):
    """Surface of an axis-aligned box, faces chosen by area."""
    lo, hi = np.asarray(lo, dtype=FLOAT), np.asarray(hi, dtype=FLOAT)
    ext = hi - lo
    areas = np.array([ext[1] * ext[2], ext[0] * ext[2], ext[0] * ext[1]] * 2)
    face = rng.choice(6, size=n, p=areas / areas.sum())
    pts = lo + rng.uniform(0.0, 1.0, (n, 3)) * ext
    ax = face % 3
    side = face // 3
    pts[np.arange(n), ax] = np.where(side == 0, lo[ax], hi[ax])
    return pts


def _primitives(shape):
    """(sampler, area, part) triples for a shape in its canonical pose."""
    if shape == "lollipop":
        rh, rs, ls = 0.35, 0.08, 1.0
        return [
            (lambda g, n: _sphere(g, n, np.array([0.0, 0.0, ls + rh]), rh), 4 * np.pi * rh ** 2, 0),
            (lambda g, n: _cylinder(g, n, [0, 0, 0], [0, 0, ls], rs), 2 * np.pi * rs * ls, 1),
        ]
    if shape == "barbell":
        rb, rs, ls = 0.3, 0.07, 1.0
        return [
            (lambda g, n: np.where(g.uniform(size=(n, 1)) < 0.5,
                                   _sphere(g, n, np.array([0.0, 0.0, -ls / 2 - rb]), rb),
                                   _sphere(g, n, np.array([0.0, 0.0, ls / 2 + rb]), rb)),
             2 * 4 * np.pi * rb ** 2, 0),
            (lambda g, n: _cylinder(g, n, [0, 0, -ls / 2], [0, 0, ls / 2], rs), 2 * np.pi * rs * ls, 1),
        ]
    if shape == "table":
        w, d, t, h, rl = 1.2, 0.8, 0.08, 0.7, 0.05
        lo, hi = np.array([-w / 2, -d / 2, h]), np.array([w / 2, d / 2, h + t])
        slab_area = 2 * (w * d + w * t + d * t)
        corners = np.array([[sx * (w / 2 - 0.1), sy * (d / 2 - 0.1)] for sx in (-1, 1) for sy in (-1, 1)])

        def legs(g, n):
            which = g.integers(0, 4, n)
            pts = _cylinder(g, n, [0, 0, 0], [0, 0, h], rl)
            pts[:, :2] += corners[which]
            return pts

        return [
            (lambda g, n: _box(g, n, lo, hi), slab_area, 0),
            (legs, 4 * 2 * np.pi * rl * h, 1),
        ]
    raise InvalidInputError(f"unknown shape {shape!r}; choose from {', '.join(CATALOG)}")


def part_areas(shape) -> np.ndarray:
    """Surface area of each part in the canonical pose."""
    out = np.zeros(PARTS[shape])
    for _, area, part in _primitives(shape):
        out[part] += area
    return out


def sample_surface(rng, shape, n):
    prims = _primitives(shape)
    areas = np.array([a for _, a, _ in prims])
    counts = rng.multinomial(n, areas / areas.sum())
    pts, labels = [], []
    for (sampler, _, part), c in zip(prims, counts):
        pts.append(sampler(rng, c))
        labels.append(np.full(c, part, dtype=INDEX))
    return np.concatenate(pts), np.concatenate(labels)


def random_rotation(rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def resample(points, labels, n, rng):
    """FPS down to ``n`` points, or pad with random duplicates up to ``n``."""
    m = len(points)
    if m >= n:
        keep = geometry.fps(points, n, int(rng.integers(m)))
    else:
        keep = np.concatenate([np.arange(m), rng.integers(0, m, n - m)])
    return points[keep], labels[keep]


def make_cloud(rng, shape, n_points, oversample=2.0) -> PointCloud:
    pts, labels = sample_surface(rng, shape, max(1, int(round(oversample * n_points))))
    pts = pts @ random_rotation(rng).T
    pts -= pts.mean(axis=0)
    pts /= np.linalg.norm(pts, axis=1).max()
    pts *= rng.uniform(0.8, 1.0)
    pts, labels = resample(pts, labels, n_points, rng)
    return PointCloud(pts, pts.copy(), labels, CATALOG.index(shape))


@dataclass
class Dataset:
    samples: list
    splits: list  # split name per sample
    catalog: tuple = CATALOG

    def split(self, name):
        return [s for s, sp in zip(self.samples, self.splits) if sp == name]

    def parts_of(self, category: int) -> int:
        return PARTS[CATALOG[category]]


def gen_synthetic(seed: int, n_samples: int, n_points: int, catalog=("lollipop",),
                  split=(0.8, 0.0, 0.2)) -> Dataset:
    """Sample ``i`` uses shape ``catalog[i % len(catalog)]`` and its own seed
    stream derived from ``(seed, i)``, so samples are independent of each other."""
    if n_points < 64:
        raise InvalidInputError(f"n_points must be at least 64, got {n_points}")
    for s in catalog:
        if s not in CATALOG:
            raise InvalidInputError(f"unknown shape {s!r}; choose from {', '.join(CATALOG)}")
    samples = []
    for i in range(n_samples):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        samples.append(make_cloud(rng, catalog[i % len(catalog)], n_points))
    n_train = int(round(split[0] * n_samples))
    n_val = int(round(split[1] * n_samples))
    names = ["train"] * n_train + ["val"] * n_val + ["test"] * (n_samples - n_train - n_val)
    return Dataset(samples, names, CATALOG)


# ------------------------------------------------------------ file format


def write_sample(path, cloud: PointCloud) -> None:
    shape = CATALOG[cloud.category]
    with open(path, "w") as f:
        f.write(f"{cloud.n} {PARTS[shape]} {shape}\n")
        for (x, y, z), lab in zip(cloud.positions, cloud.labels):
            f.write(f"{x:.9g} {y:.9g} {z:.9g} {int(lab)}\n")


def read_sample(path) -> PointCloud:
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines:
        raise DatasetFormatError(f"{path}:1: empty file")
    head = lines[0].split()
    try:
        if len(head) != 3:
            raise ValueError
        n, c, shape = int(head[0]), int(head[1]), head[2]
    except ValueError:
        raise DatasetFormatError(f"{path}:1: header must be 'N C category', got {lines[0]!r}") from None
    if shape not in CATALOG:
        raise DatasetFormatError(f"{path}:1: unknown category {shape!r}")
    if len(lines) - 1 != n:
        raise DatasetFormatError(f"{path}:1: header declares {n} points, file has {len(lines) - 1}")
    pos = np.empty((n, 3))
    labels = np.empty(n, dtype=INDEX)
    for i, line in enumerate(lines[1:], start=2):
        parts = line.split()
        try:
            if len(parts) != 4:
                raise ValueError
            pos[i - 2] = [float(v) for v in parts[:3]]
            labels[i - 2] = int(parts[3])
        except ValueError:
            raise DatasetFormatError(f"{path}:{i}: expected 'x y z label', got {line!r}") from None
        if not 0 <= labels[i - 2] < c:
            raise DatasetFormatError(f"{path}:{i}: label {labels[i - 2]} outside [0, {c})")
    return PointCloud(pos, pos.copy(), labels, CATALOG.index(shape))


def write_dataset(ds: Dataset, out_dir) -> str:
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for i, (cloud, sp) in enumerate(zip(ds.samples, ds.splits)):
        name = f"sample_{i:05d}.txt"
        write_sample(os.path.join(out_dir, name), cloud)
        rows.append(f"{name} {sp}\n")
    index = os.path.join(out_dir, "index.txt")
    with open(index, "w") as f:
        f.writelines(rows)
    return index


def read_dataset(index_path) -> Dataset:
    base = os.path.dirname(index_path)
    samples, splits = [], []
    with open(index_path) as f:
        for i, line in enumerate(f, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 2 or parts[1] not in SPLITS:
                raise DatasetFormatError(f"{index_path}:{i}: expected 'path split', got {line.rstrip()!r}")
            samples.append(read_sample(os.path.join(base, parts[0])))
            splits.append(parts[1])
    return Dataset(samples, splits, CATALOG)


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 5e-4
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, state: AdamState) -> None:
    """One Adam update with L2 weight decay added to the gradient; zeroes grads."""
    for name, p in params.items():
        for g, tag in ((p.grad_w, "weight"), (p.grad_b, "bias")):
            if not np.all(np.isfinite(g)):
                raise TrainingDiverged(f"non-finite gradient in {name}.{tag}")
    state.t += 1
    t = state.t
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        for value, grad, key in ((p.weight, p.grad_w, name + ".w"), (p.bias, p.grad_b, name + ".b")):
            g = grad + state.weight_decay * value
            m = state.m.get(key)
            if m is None:
                m = state.m[key] = np.zeros_like(value)
                state.v[key] = np.zeros_like(value)
            v = state.v[key]
            m *= state.beta1
            m += (1.0 - state.beta1) * g
            v *= state.beta2
            g *= g
            g *= 1.0 - state.beta2
            v += g
            # reuse g as scratch for the step
            np.divide(v, c2, out=g)
            np.sqrt(g, out=g)
            g += state.eps
            np.divide(m, g, out=g)
            g *= state.lr / c1
            value -= g
        p.zero_grad()


# -------------------------------------------------------------- metrics


def _check_labels(preds, gts, n_parts):
    preds = np.asarray(preds)
    gts = np.asarray(gts)
    if preds.shape != gts.shape:
        raise InvalidInputError(f"prediction shape {preds.shape} != label shape {gts.shape}")
    # a ground-truth label of -1 marks an unlabelled point: it joins no part
    for arr, what, lo in ((preds, "prediction", 0), (gts, "label", -1)):
        if arr.size and (arr.min() < lo or arr.max() >= n_parts):
            raise InvalidInputError(f"{what} outside the category's parts [0, {n_parts})")
    return preds, gts


def _inter_union(preds, gts, n_parts):
    p = preds[:, None] == np.arange(n_parts)
    g = gts[:, None] == np.arange(n_parts)
    return (p & g).sum(axis=0), (p | g).sum(axis=0)


def sample_iou(preds, gts, n_parts) -> float:
    preds, gts = _check_labels(preds, gts, n_parts)
    inter, union = _inter_union(preds, gts, n_parts)
    ious = np.where(union == 0, 1.0, inter / np.maximum(union, 1))
    return float(ious.mean())


def miou(preds, gts, categories, parts_of) -> float:
    """Mean over samples of the per-sample mean part IoU.

    ``preds``/``gts`` are sequences of per-sample label arrays; ``parts_of``
    maps a category id to its part count. A part absent from both prediction
    and label of a sample counts as IoU 1.
    """
    if len(preds) == 0:
        raise InvalidInputError("miou of an empty set")
    return float(np.mean([sample_iou(p, g, parts_of(c)) for p, g, c in zip(preds, gts, categories)]))


def piou(preds, gts, n_parts, categories=None) -> float:
    """Per-part IoU pooled over the dataset, averaged over parts with a
    non-empty union.

    Part labels are local to a category, so with ``categories`` given the
    pooled parts are (category, part) pairs.
    """
    if categories is None:
        categories = [0] * len(preds)
    n_cat = max(categories, default=0) + 1
    inter = np.zeros(n_cat * n_parts, dtype=INDEX)
    union = np.zeros(n_cat * n_parts, dtype=INDEX)
    for p, g, c in zip(preds, gts, categories):
        p, g = _check_labels(p, g, n_parts)
        i, u = _inter_union(p, g, n_parts)
        inter[c * n_parts:(c + 1) * n_parts] += i
        union[c * n_parts:(c + 1) * n_parts] += u
    seen = union > 0
    if not seen.any():
        raise InvalidInputError("piou: every part has an empty union")
    return float((inter[seen] / union[seen]).mean())


# ------------------------------------------------------------- training


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    acc: float
    miou: float
    peak_bytes: int


def history_csv(history) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "loss", "acc", "miou", "peak_bytes"])
    for h in history:
        w.writerow([h.epoch, f"{h.loss:.10g}", f"{h.acc:.10g}", f"{h.miou:.10g}", h.peak_bytes])
    return buf.getvalue()


class PlanCache:
    """Per-cloud geometry plans, keyed by sample position in a list."""

    def __init__(self, spec: ArchSpec):
        self.spec = spec
        self._plans = {}

    def get(self, i, cloud):
        if i not in self._plans:
            if cloud.n != self.spec.n_points:
                raise InvalidInputError(
                    f"cloud has {cloud.n} points but the network expects {self.spec.n_points}")
            self._plans[i] = plan_cloud(self.spec, cloud.positions)
        return self._plans[i]


def train(spec: ArchSpec, samples, epochs: int, batch: int, lr: float, seed: int = 0,
          mode: str = "lean", net: Network | None = None, log=None):
    """Train on ``samples`` (a list of clouds); returns (network, history).

    The returned network is the state after the last epoch.
    """
    if net is None:
        net = Network(spec, seed=seed, mode=mode, ledger=MemoryLedger(keep_log=False))
    if not samples:
        raise InvalidInputError("no training samples")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    state = AdamState(lr=lr)
    plans = PlanCache(spec)
    base = net.ledger.current
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(samples))
        losses, weights, preds, gts, cats = [], [], [], [], []
        peak = 0
        for start in range(0, len(order), batch):
            ids = order[start:start + batch]
            clouds = [samples[i] for i in ids]
            plan = merge_plans([plans.get(int(i), samples[i]) for i in ids])
            logits, rec = net.forward(clouds, plan, training=True, rng=rng)
            peak = max(peak, net.ledger.current - base)
            labels = np.concatenate([c.labels for c in clouds])
            loss, grad = layers.softmax_xent(logits, labels)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} in epoch {epoch}")
            net.backward(grad, rec)
            adam_step(net.params, state)
            losses.append(loss)
            weights.append(len(labels))
            guess = logits.argmax(axis=1).reshape(len(clouds), -1)
            for c, g in zip(clouds, guess):
                preds.append(g)
                gts.append(c.labels)
                cats.append(c.category)
        acc = float(np.mean(np.concatenate(preds) == np.concatenate(gts)))
        rec_ = EpochRecord(epoch, float(np.average(losses, weights=weights)), acc,
                           miou(preds, gts, cats, _parts_of), peak)
        history.append(rec_)
        if log is not None:
            log(rec_)
    return net, history


def _parts_of(category: int) -> int:
    return PARTS[CATALOG[category]]


def predict(net: Network, samples, batch: int = 8, start="zero", rng=None):
    """Per-sample logits from deterministic (eval-mode) forwards."""
    out = []
    for s in range(0, len(samples), batch):
        clouds = samples[s:s + batch]
        plan = merge_plans([plan_cloud(net.spec, c.positions, start, rng) for c in clouds])
        logits, _ = net.forward(clouds, plan, training=False)
        out.extend(np.split(logits, len(clouds)))
    return out


def multi_forward_vote(net: Network, cloud, n_passes: int, seed: int = 0) -> np.ndarray:
    """Average logits over ``n_passes`` sampling seeds and take the argmax.

    Pass 0 uses the default FPS start; later passes use random starts drawn
    from ``seed``.
    """
    if n_passes < 1:
        raise InvalidInputError("n_passes must be at least 1")
    clouds = cloud if isinstance(cloud, list) else [cloud]
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    total = None
    for k in range(n_passes):
        if k == 0:
            logits = predict(net, clouds)
        else:
            logits = predict(net, clouds, start="random", rng=rng)
        total = logits if total is None else [a + b for a, b in zip(total, logits)]
    votes = [t.argmax(axis=1) for t in total]
    return votes if isinstance(cloud, list) else votes[0]


def evaluate(net: Network, samples, n_passes: int = 1, seed: int = 0) -> dict:
    preds = multi_forward_vote(net, list(samples), n_passes, seed)
    gts = [c.labels for c in samples]
    n_parts = max(_parts_of(c.category) for c in samples)
    return {
        "acc": float(np.mean(np.concatenate(preds) == np.concatenate(gts))),
        "miou": miou(preds, gts, [c.category for c in samples], _parts_of),
        "piou": piou(preds, gts, n_parts, [c.category for c in samples]),
    }
