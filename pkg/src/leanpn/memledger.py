"""Byte accounting for tensors kept alive between forward and backward.

Each event carries a ``kind``:

``activation``
    float tensors a layer retains for its backward pass.
``index``
    integer lookup tables (neighbour tables, argmax). Counted, but kept out of
    the closed-form reconciliation because the analytic model ignores them.
``scratch``
    neighbourhood-expanded (K-fold) transients that live only inside one
    block call. Flat temporaries are not tracked.
``param``
    parameter and gradient storage.

``peak`` is the high-water mark of everything; :meth:`MemoryLedger.replay`
recomputes current/peak for any subset of kinds from the event log.
"""

from __future__ import annotations

import csv
import io
from contextlib import contextmanager
from dataclasses import dataclass, field

from .tensor_core import ContractError

KINDS = ("activation", "index", "scratch", "param")
ACTIVATION_KINDS = ("activation", "scratch")


@dataclass
class LedgerEvent:
    tag: str
    event: str  # "retain" | "release"
    nbytes: int
    kind: str
    current: int
    peak: int


@dataclass
class MemoryLedger:
    current: int = 0
    peak: int = 0
    per_tag: dict = field(default_factory=dict)
    log: list = field(default_factory=list)
    keep_log: bool = True

    def retain(self, tag: str, nbytes: int, kind: str = "activation") -> None:
        if kind not in KINDS:
            raise ValueError(f"unknown ledger kind {kind!r}")
        if nbytes < 0:
            raise ContractError("cannot retain a negative byte count")
        self.current += nbytes
        self.peak = max(self.peak, self.current)
        key = (tag, kind)
        self.per_tag[key] = self.per_tag.get(key, 0) + nbytes
        if self.keep_log:
            self.log.append(LedgerEvent(tag, "retain", nbytes, kind, self.current, self.peak))

    def release(self, tag: str, nbytes: int, kind: str = "activation") -> None:
        key = (tag, kind)
        have = self.per_tag.get(key, 0)
        if nbytes > have:
            raise ContractError(f"release of {nbytes} bytes under {tag!r}/{kind} exceeds {have} retained")
        self.per_tag[key] = have - nbytes
        if self.per_tag[key] == 0:
            del self.per_tag[key]
        self.current -= nbytes
        if self.keep_log:
            self.log.append(LedgerEvent(tag, "release", nbytes, kind, self.current, self.peak))

    @contextmanager
    def scratch(self, tag: str, nbytes: int):
        self.retain(tag, nbytes, "scratch")
        try:
            yield
        finally:
            self.release(tag, nbytes, "scratch")

    def current_of(self, kinds=KINDS) -> int:
        return sum(v for (_, k), v in self.per_tag.items() if k in kinds)

    def replay(self, kinds=KINDS) -> tuple[int, int]:
        """(current, peak) recomputed from the event log for the given kinds."""
        cur = peak = 0
        for ev in self.log:
            if ev.kind not in kinds:
                continue
            cur += ev.nbytes if ev.event == "retain" else -ev.nbytes
            if cur < 0:
                raise ContractError(f"event log goes negative at {ev.tag!r}")
            peak = max(peak, cur)
        return cur, peak

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["tag", "event", "bytes", "current", "peak"])
        for ev in self.log:
            w.writerow([f"{ev.tag}:{ev.kind}", ev.event, ev.nbytes, ev.current, ev.peak])
        return buf.getvalue()


class NullLedger(MemoryLedger):
    """Ledger that drops everything; used when no accounting is requested."""

    def retain(self, tag, nbytes, kind="activation"):
        pass

    def release(self, tag, nbytes, kind="activation"):
        pass


def analytic_memory(L: int, N: int, D: int, K: int, bytes_per: int = 8) -> tuple[int, int]:
    """Closed-form retained bytes for ``L`` grouping layers: (baseline, lean).

    The baseline keeps an N x D x K neighbourhood tensor per layer; the lean
    variant keeps N x D per layer plus one transient N x D x K neighbourhood.
    """
    for name, v in (("L", L), ("N", N), ("D", D), ("K", K), ("bytes_per", bytes_per)):
        if v <= 0:
            raise ValueError(f"{name} must be positive, got {v}")
    return L * N * D * K * bytes_per, (L * N * D + N * D * K) * bytes_per


@dataclass
class Reconciliation:
    L: int
    N: int
    D: int
    K: int
    mode: str
    measured_peak: int
    model_peak: int

    @property
    def deviation(self) -> float:
        if self.model_peak == 0:
            return 0.0 if self.measured_peak == 0 else float("inf")
        return (self.measured_peak - self.model_peak) / self.model_peak

    @property
    def flagged(self) -> bool:
        return abs(self.deviation) > 0.10


def reconcile(ledger: MemoryLedger, L: int, N: int, D: int, K: int, mode: str) -> Reconciliation:
    """Compare a ledger's activation high-water mark with the closed-form model."""
    _, measured = ledger.replay(ACTIVATION_KINDS)
    if L == 0:
        model = 0
    else:
        base, lean = analytic_memory(L, N, D, K)
        model = base if mode == "reference" else lean
    return Reconciliation(L, N, D, K, mode, measured, model)


def summary_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["L", "N", "D", "K", "mode", "measured_peak", "model_peak", "deviation"])
    for r in rows:
        w.writerow([r.L, r.N, r.D, r.K, r.mode, r.measured_peak, r.model_peak, f"{r.deviation:.6f}"])
    return buf.getvalue()
