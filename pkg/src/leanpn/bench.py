"""Memory and speed benchmarks backing the bench-mem / bench-speed commands."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass

import numpy as np

from . import geometry, layers
from .memledger import ACTIVATION_KINDS, MemoryLedger, analytic_memory, reconcile
from .networks import Network, PointCloud, build_preset
from .tensor_core import make_rng


@dataclass
class MemRow:
    L: int
    N: int
    D: int
    K: int
    mode: str
    measured_peak: int
    model_peak: int

    @property
    def deviation(self) -> float:
        return (self.measured_peak - self.model_peak) / self.model_peak


def stack_peak(L: int, N: int, D: int, K: int, mode: str, seed: int = 0) -> tuple[int, MemoryLedger]:
    """Peak retained activation bytes of ``L`` stacked D->D grouping blocks.

    Runs forward through the stack and then backward; returns the activation
    high-water mark and the ledger (which must end empty).
    """
    rng = make_rng(seed)
    pos = rng.uniform(-1.0, 1.0, (N, 3))
    nbr = geometry.knn_index(pos, K)
    x = rng.normal(size=(N, D))
    blocks = [(layers.SlpParams.init(rng, D, D), layers.SlpParams.init(rng, 3, D)) for _ in range(L)]
    ledger = MemoryLedger()
    ctxs = []
    for i, (pf, ps) in enumerate(blocks):
        x, c = layers.group_forward(mode, x, pos, nbr, pf, ps, ledger=ledger, tag=f"layer{i}")
        ctxs.append(c)
    g = np.ones_like(x)
    for (pf, ps), c in zip(reversed(blocks), reversed(ctxs)):
        g, _ = layers.group_backward(g, c, pf, ps)
    return ledger.replay(ACTIVATION_KINDS)[1], ledger


def mem_sweep(N=1024, D=64, K=32, Ls=(2, 4, 8, 16), extra_L=(9,), seed=0):
    rows = []
    for mode in ("lean", "reference"):
        for L in sorted(set(Ls) | set(extra_L)):
            peak, ledger = stack_peak(L, N, D, K, mode, seed)
            rec = reconcile(ledger, L, N, D, K, mode)
            rows.append(MemRow(L, N, D, K, mode, peak, rec.model_peak))
    return rows


def mem_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["L", "N", "D", "K", "mode", "measured_peak", "model_peak", "deviation", "model_elements"])
    for r in rows:
        w.writerow([r.L, r.N, r.D, r.K, r.mode, r.measured_peak, r.model_peak,
                    f"{r.deviation:.6f}", r.model_peak // 8])
    return buf.getvalue()


def slope(rows, mode) -> float:
    """Least-squares bytes per extra layer over the sweep rows of one mode."""
    pts = [(r.L, r.measured_peak) for r in rows if r.mode == mode]
    L, y = np.array(pts, dtype=float).T
    return float(np.polyfit(L, y, 1)[0])


def _random_cloud(rng, n):
    pos = rng.normal(size=(n, 3))
    pos /= np.linalg.norm(pos, axis=1).max()
    return PointCloud(pos, pos.copy(), rng.integers(0, 2, n))


def preset_peak(name: str, mode: str, scale="desk", n_points=512, k=None, seed=0) -> int:
    """Activation high-water mark of one forward+backward of a preset."""
    spec = build_preset(name, scale, n_points=n_points, k=k)
    ledger = MemoryLedger()
    net = Network(spec, seed=seed, mode=mode, ledger=ledger)
    cloud = _random_cloud(make_rng(seed), n_points)
    logits, rec = net.forward([cloud], net.plan([cloud]))
    _, g = layers.softmax_xent(logits, cloud.labels)
    net.backward(g, rec)
    return ledger.replay(ACTIVATION_KINDS)[1]


def depth_ratios(scale="desk", n_points=512, k=None, seed=0) -> dict:
    out = {}
    for mode in ("lean", "reference"):
        shallow = preset_peak("lpn", mode, scale, n_points, k, seed)
        deep = preset_peak("deep_lpn", mode, scale, n_points, k, seed)
        out[mode] = (shallow, deep, deep / shallow)
    return out


def depth_csv(ratios) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["mode", "lpn_peak", "deep_lpn_peak", "ratio"])
    for mode, (a, b, r) in ratios.items():
        w.writerow([mode, a, b, f"{r:.6f}"])
    return buf.getvalue()


@dataclass
class SpeedRow:
    preset: str
    mode: str
    fwd_ms: float
    bwd_ms: float


def time_modes(name, modes=("lean", "reference"), n_points=1024, k=32, runs=5, seed=0,
               scale="desk") -> list[SpeedRow]:
    """Median wall-clock forward and backward times (geometry planning excluded).

    Runs of the different modes are interleaved so slow drifts in machine
    speed hit every mode alike. One untimed round warms caches first.
    """
    spec = build_preset(name, scale, n_points=n_points, k=k)
    cloud = _random_cloud(make_rng(seed), n_points)
    nets = [Network(spec, seed=seed, mode=m, ledger=MemoryLedger(keep_log=False)) for m in modes]
    plan = nets[0].plan([cloud])
    fwd = [[] for _ in modes]
    bwd = [[] for _ in modes]
    for r in range(runs + 1):
        for i, net in enumerate(nets):
            t0 = time.perf_counter()
            logits, rec = net.forward([cloud], plan)
            t1 = time.perf_counter()
            _, g = layers.softmax_xent(logits, cloud.labels)
            t2 = time.perf_counter()
            net.backward(g, rec)
            t3 = time.perf_counter()
            net.zero_grad()
            if r:
                fwd[i].append(t1 - t0)
                bwd[i].append(t3 - t2)
    return [SpeedRow(name, m, 1e3 * float(np.median(f)), 1e3 * float(np.median(b)))
            for m, f, b in zip(modes, fwd, bwd)]


def time_preset(name, mode, n_points=1024, k=32, runs=5, seed=0, scale="desk") -> SpeedRow:
    return time_modes(name, (mode,), n_points, k, runs, seed, scale)[0]


def speed_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["preset", "mode", "fwd_ms", "bwd_ms"])
    for r in rows:
        w.writerow([r.preset, r.mode, f"{r.fwd_ms:.3f}", f"{r.bwd_ms:.3f}"])
    return buf.getvalue()


def model_elements(L=9, N=1024, D=64, K=32) -> tuple[int, int]:
    base, lean = analytic_memory(L, N, D, K, bytes_per=1)
    return base, lean
