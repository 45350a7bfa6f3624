"""Architecture descriptions, presets and the encoder/decoder executor.

An :class:`ArchSpec` is a flat list of encoder stages plus decoder/head
widths. Stage ops:

``sa``          set abstraction: sample centres, group with a ball query per
                branch, run a grouped MLP and max-pool (multi-scale when the
                branches share centres, multi-resolution when ``multires``)
``pyramid``     turn one resolution into several by nested FPS
``transition``  per-branch SLP changing the width
``conv``        per-branch single-SLP grouping block, optional cross-links and
                residual link
``sample``      per-branch FPS downsampling
``combine``     interpolate every branch onto branch 0 and concatenate; the
                result becomes a skip level for the decoder
``global``      pointwise MLP over [features, xyz] and a max over each cloud

Neighbourhood geometry depends only on positions, so it is computed once per
cloud into a :class:`Plan` and reused; plans of several clouds merge into one
batch plan by offsetting their index tables.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
import yaml

from . import geometry, layers
from .geometry import InterpWeights, NeighborIndex
from .layers import LinkGeometry, SlpParams
from .memledger import MemoryLedger
from .tensor_core import FLOAT, INDEX, ContractError, DimensionError, InvalidInputError, make_rng

PRESETS = ("pn2_msg", "mres", "mresx", "lpn", "deep_lpn")
SCALES = ("paper", "desk")
STAGE_OPS = ("sa", "pyramid", "transition", "conv", "sample", "combine", "global")


class SpecError(ValueError):
    pass


@dataclass
class Stage:
    op: str
    counts: list | None = None
    widths: list | None = None
    radii: list | None = None
    mlps: list | None = None
    mlp: list | None = None
    residual: bool = False
    crosslink: bool = False
    multires: bool = False

    def to_dict(self) -> dict:
        d = {"op": self.op}
        for f in dataclasses.fields(self)[1:]:
            v = getattr(self, f.name)
            if v not in (None, False):
                d[f.name] = v
        return d


@dataclass
class ArchSpec:
    name: str
    n_points: int
    k: int
    stages: list
    decoder: list
    head_hidden: int
    dropout: float = 0.7
    n_classes: int = 2
    in_dim: int = 3

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "n_points": self.n_points,
            "k": self.k,
            "in_dim": self.in_dim,
            "n_classes": self.n_classes,
            "stages": [s.to_dict() for s in self.stages],
            "decoder": [list(w) for w in self.decoder],
            "head_hidden": self.head_hidden,
            "dropout": self.dropout,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        d = dict(d)
        stages = [Stage(**s) for s in d.pop("stages")]
        return cls(stages=stages, **d)


def spec_to_text(spec: ArchSpec) -> str:
    return yaml.safe_dump(spec.to_dict(), sort_keys=False, default_flow_style=None)


def spec_from_text(text: str) -> ArchSpec:
    try:
        return ArchSpec.from_dict(yaml.safe_load(text))
    except (TypeError, KeyError, yaml.YAMLError) as e:
        raise SpecError(f"malformed architecture document: {e}") from e


# ------------------------------------------------------------------ presets


def _pn2_stages():
    return [
        Stage("sa", counts=[512, 512, 512], radii=[0.1, 0.2, 0.4],
              mlps=[[32, 32, 64], [64, 64, 128], [64, 96, 128]]),
        Stage("combine"),
        Stage("sa", counts=[128, 128, 128], radii=[0.2, 0.4, 0.8],
              mlps=[[64, 64, 128], [128, 128, 256], [128, 128, 256]]),
        Stage("combine"),
        Stage("global", mlp=[256, 512, 1024]),
    ]


def _mres_stages(crosslink: bool):
    return [
        Stage("sa", counts=[512, 256, 128], radii=[0.1, 0.2, 0.4], multires=True, crosslink=crosslink,
              mlps=[[32, 32, 64], [64, 64, 128], [64, 96, 128]]),
        Stage("combine"),
        Stage("sa", counts=[128, 96, 64], radii=[0.2, 0.4, 0.8], multires=True, crosslink=crosslink,
              mlps=[[64, 64, 128], [128, 128, 256], [128, 128, 256]]),
        Stage("combine"),
        Stage("global", mlp=[256, 512, 1024]),
    ]


def _conv(radii, widths):
    return Stage("conv", radii=list(radii), widths=list(widths), residual=True, crosslink=True)


def _lpn_stages(deep: bool):
    r1, r2 = [0.1, 0.2, 0.4], [0.2, 0.4, 0.8]
    t = lambda w: Stage("transition", widths=list(w))  # noqa: E731
    seg1 = [t([32, 64, 64]), _conv(r1, [32, 64, 64]),
            t([32, 64, 96]), _conv(r1, [32, 64, 96]),
            t([64, 128, 128]), _conv(r1, [64, 128, 128])]
    seg2 = [t([64, 128, 128]), _conv(r2, [64, 128, 128]), _conv(r2, [64, 128, 128]),
            t([128, 256, 256]), _conv(r2, [128, 256, 256])]
    samp1 = Stage("sample", counts=[512, 256, 128])
    samp2 = Stage("sample", counts=[128, 96, 64])
    if deep:
        seg1, seg2 = _deepen(seg1, samp1), _deepen(seg2, samp2)
    else:
        seg1, seg2 = seg1 + [samp1], seg2 + [samp2]
    return ([Stage("pyramid", counts=[None, 512, 256])] + seg1 + [Stage("combine")]
            + [Stage("pyramid", counts=[None, 128, 96])] + seg2 + [Stage("combine")]
            + [Stage("global", mlp=[256, 512, 1024])])


def _deepen(segment, sampling):
    """Repeat every conv block and put the sampling block after the third conv."""
    out, convs = [], 0
    for st in segment:
        copies = 2 if st.op == "conv" else 1
        for _ in range(copies):
            out.append(dataclasses.replace(st))
            if st.op == "conv":
                convs += 1
                if convs == 3:
                    out.append(dataclasses.replace(sampling))
    return out


def _scale_stage(st: Stage) -> Stage:
    def half(ws):
        return [max(1, w // 2) for w in ws]

    return dataclasses.replace(
        st,
        counts=None if st.counts is None else [None if c is None else max(1, c // 4) for c in st.counts],
        widths=None if st.widths is None else half(st.widths),
        radii=None if st.radii is None else [round(2 * r, 6) for r in st.radii],
        mlps=None if st.mlps is None else [half(m) for m in st.mlps],
        mlp=None if st.mlp is None else half(st.mlp),
    )


def build_preset(name: str, scale: str = "desk", n_points: int | None = None, k: int | None = None,
                 n_classes: int = 2, in_dim: int = 3) -> ArchSpec:
    if name not in PRESETS:
        raise SpecError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    if scale not in SCALES:
        raise SpecError(f"unknown scale {scale!r}; choose from {', '.join(SCALES)}")
    stages = {
        "pn2_msg": _pn2_stages,
        "mres": lambda: _mres_stages(False),
        "mresx": lambda: _mres_stages(True),
        "lpn": lambda: _lpn_stages(False),
        "deep_lpn": lambda: _lpn_stages(True),
    }[name]()
    decoder = [[256, 256], [256, 128], [128, 128]]
    head = 512
    if scale == "desk":
        stages = [_scale_stage(s) for s in stages]
        decoder = [[w // 2 for w in ws] for ws in decoder]
        head //= 2
    spec = ArchSpec(
        name=name,
        n_points=n_points or (2048 if scale == "paper" else 512),
        k=k or (32 if scale == "paper" else 8),
        stages=stages,
        decoder=decoder,
        head_hidden=head,
        dropout=0.7,
        n_classes=n_classes,
        in_dim=in_dim,
    )
    compile_spec(spec)
    return spec


# -------------------------------------------------------------- validation


def compile_spec(spec: ArchSpec) -> dict:
    """Check width/count chaining and return ``{param name: (d_in, d_out)}``."""
    shapes: dict[str, tuple[int, int]] = {}
    counts = [spec.n_points]
    widths = [spec.in_dim]
    levels = [(spec.n_points, spec.in_dim)]
    reached_global = False

    def fail(i, msg):
        raise SpecError(f"stage {i} ({spec.stages[i].op}): {msg}")

    def need_single(i):
        if len(widths) != 1:
            fail(i, f"expects a single resolution, got {len(widths)} (add a combine stage)")

    for i, st in enumerate(spec.stages):
        if st.op not in STAGE_OPS:
            fail(i, f"unknown op; choose from {STAGE_OPS}")
        if reached_global:
            fail(i, "no stage may follow the global stage")
        pre = f"s{i}"
        if st.op == "sa":
            need_single(i)
            nb = len(st.counts)
            if len(st.radii) != nb or len(st.mlps) != nb:
                fail(i, "counts, radii and mlps must have one entry per branch")
            if not st.multires and len(set(st.counts)) != 1:
                fail(i, "multi-scale grouping shares centres: all counts must be equal")
            src = counts[0]
            new_counts = []
            for b, c in enumerate(st.counts):
                if not 1 <= c <= src:
                    fail(i, f"cannot sample {c} centres from {src} points")
                new_counts.append(c)
                if st.multires:
                    src = c
            for b, mlp in enumerate(st.mlps):
                if not mlp:
                    fail(i, "empty mlp")
                shapes[f"{pre}.b{b}.f"] = (widths[0], mlp[0])
                shapes[f"{pre}.b{b}.s"] = (3, mlp[0])
                for j in range(1, len(mlp)):
                    shapes[f"{pre}.b{b}.t{j}"] = (mlp[j - 1], mlp[j])
            counts = new_counts
            widths = [m[-1] for m in st.mlps]
            if st.crosslink:
                _link_shapes(shapes, pre, widths)
        elif st.op == "pyramid":
            need_single(i)
            if not st.counts or st.counts[0] is not None:
                fail(i, "first entry must be None (the input resolution)")
            new = [counts[0]]
            for c in st.counts[1:]:
                if not 1 <= c <= new[-1]:
                    fail(i, f"cannot sample {c} points from {new[-1]}")
                new.append(c)
            counts, widths = new, widths * len(new)
        elif st.op == "transition":
            if len(st.widths) != len(widths):
                fail(i, f"{len(st.widths)} widths for {len(widths)} resolutions")
            for b, (a, w) in enumerate(zip(widths, st.widths)):
                shapes[f"{pre}.b{b}"] = (a, w)
            widths = list(st.widths)
        elif st.op == "conv":
            if len(st.radii) != len(widths):
                fail(i, f"{len(st.radii)} radii for {len(widths)} resolutions")
            if st.widths is not None and list(st.widths) != widths:
                fail(i, f"declared widths {st.widths} but input widths are {widths}; "
                        "insert a transition block")
            for b, w in enumerate(widths):
                shapes[f"{pre}.b{b}.f"] = (w, w)
                shapes[f"{pre}.b{b}.s"] = (3, w)
            if st.crosslink:
                _link_shapes(shapes, pre, widths)
        elif st.op == "sample":
            if len(st.counts) != len(counts):
                fail(i, f"{len(st.counts)} counts for {len(counts)} resolutions")
            for c, have in zip(st.counts, counts):
                if not 1 <= c <= have:
                    fail(i, f"cannot sample {c} points from {have}")
            counts = list(st.counts)
        elif st.op == "combine":
            counts, widths = [counts[0]], [sum(widths)]
            levels.append((counts[0], widths[0]))
        elif st.op == "global":
            need_single(i)
            d = widths[0] + 3
            for j, w in enumerate(st.mlp):
                shapes[f"{pre}.m{j}"] = (d, w)
                d = w
            counts, widths = [1], [d]
            levels.append((1, d))
            reached_global = True
    if not reached_global:
        raise SpecError("the encoder must end with a global stage")
    if len(spec.decoder) != len(levels) - 1:
        raise SpecError(f"{len(levels) - 1} skip levels need as many decoder mlps, got {len(spec.decoder)}")
    d = levels[-1][1]
    for j, ws in enumerate(spec.decoder):
        d += levels[-2 - j][1]
        for m, w in enumerate(ws):
            shapes[f"dec{j}.m{m}"] = (d, w)
            d = w
    shapes["head.hidden"] = (d, spec.head_hidden)
    shapes["head.out"] = (spec.head_hidden, spec.n_classes)
    return shapes


def _link_shapes(shapes, pre, widths):
    for b in range(len(widths) - 1):
        shapes[f"{pre}.x{b}.down"] = (widths[b], widths[b + 1])
        shapes[f"{pre}.x{b}.up"] = (widths[b + 1], widths[b])


def count_params(spec: ArchSpec) -> int:
    return sum(a * b + b for a, b in compile_spec(spec).values())


# --------------------------------------------------------------- geometry plan


@dataclass
class Table:
    """A geometry artefact plus the per-cloud size of the set it indexes."""

    kind: str  # rows | nbr | interp | link | pos
    value: object
    src: int = 0


def _offset(t: Table, s: int) -> object:
    by = s * t.src
    if t.kind == "rows":
        return t.value + by
    if t.kind in ("nbr", "interp"):
        return t.value.offset(by)
    if t.kind == "link":
        fine_n, coarse_n = t.src
        return LinkGeometry(t.value.down + s * fine_n, t.value.up.offset(s * coarse_n))
    return t.value


def _concat(kind, parts):
    if kind in ("rows", "pos"):
        return np.concatenate(parts)
    if kind == "nbr":
        return NeighborIndex(np.concatenate([p.indices for p in parts]),
                             np.concatenate([p.valid for p in parts]), parts[0].k, parts[0].radius)
    if kind == "interp":
        return InterpWeights(np.concatenate([p.indices for p in parts]),
                             np.concatenate([p.weights for p in parts]))
    return LinkGeometry(np.concatenate([p.down for p in parts]),
                        InterpWeights(np.concatenate([p.up.indices for p in parts]),
                                      np.concatenate([p.up.weights for p in parts])))


@dataclass
class Plan:
    n_clouds: int
    stages: list  # per encoder stage: dict name -> Table
    decoder: list  # per decoder step: Table(interp)


def merge_plans(plans) -> Plan:
    if len(plans) == 1:
        return plans[0]
    stages = []
    for per_stage in zip(*[p.stages for p in plans]):
        merged = {}
        for key, t0 in per_stage[0].items():
            parts = [_offset(ps[key], s) for s, ps in enumerate(per_stage)]
            merged[key] = Table(t0.kind, _concat(t0.kind, parts), t0.src)
        stages.append(merged)
    decoder = []
    for per_step in zip(*[p.decoder for p in plans]):
        parts = [_offset(t, s) for s, t in enumerate(per_step)]
        decoder.append(Table("interp", _concat("interp", parts), per_step[0].src))
    return Plan(sum(p.n_clouds for p in plans), stages, decoder)


def _interp_table(queries, sources) -> Table:
    if len(sources) >= 3:
        w = geometry.interp_weights(queries, sources)
    elif len(sources) == 1:
        w = geometry.broadcast_weights(len(queries))
    else:
        raise InvalidInputError(f"cannot interpolate from {len(sources)} points")
    return Table("interp", w, len(sources))


def plan_cloud(spec: ArchSpec, positions, start="zero", rng=None) -> Plan:
    """Geometry for one cloud. ``start`` picks each FPS seed point:
    ``"zero"`` (index 0), ``"canonical"`` (lexicographically smallest point)
    or ``"random"`` (drawn from ``rng``)."""
    pos = np.asarray(positions, dtype=FLOAT)

    def seed(p):
        if start == "zero":
            return 0
        if start == "canonical":
            return geometry.canonical_start(p)
        if start == "random":
            return int(rng.integers(len(p)))
        raise InvalidInputError(f"unknown FPS start policy {start!r}")

    def sample(p, m):
        return geometry.fps(p, m, seed(p))

    branches = [pos]
    levels = [pos]
    out = []
    # repeated conv blocks at one resolution share their tables; the memo is
    # keyed by array identity, so it also pins the arrays it has seen
    memo: dict = {"pinned": []}
    for st in spec.stages:
        t: dict[str, Table] = {}
        if st.op == "sa":
            src_pos = branches[0]
            src_rows = np.arange(len(src_pos), dtype=INDEX)
            new = []
            shared = None
            for b, (c, r) in enumerate(zip(st.counts, st.radii)):
                if st.multires or shared is None:
                    local = sample(src_pos, c)
                    shared = local
                else:
                    local = shared
                centers = src_pos[local]
                t[f"src{b}"] = Table("rows", src_rows, len(branches[0]))
                t[f"nbr{b}"] = Table("nbr", geometry.ball_query(centers, src_pos, local, r, spec.k),
                                     len(src_pos))
                t[f"pos{b}"] = Table("pos", centers)
                new.append(centers)
                if st.multires:
                    src_rows, src_pos = src_rows[local], centers
            branches = new
            if st.crosslink:
                _add_links(t, branches, memo)
        elif st.op == "pyramid":
            new = [branches[0]]
            for b, c in enumerate(st.counts[1:], start=1):
                rows = sample(new[-1], c)
                t[f"rows{b}"] = Table("rows", rows, len(new[-1]))
                new.append(new[-1][rows])
            branches = new
            for b, p in enumerate(branches):
                t[f"pos{b}"] = Table("pos", p)
        elif st.op == "conv":
            for b, (p, r) in enumerate(zip(branches, st.radii)):
                key = ("ball", id(p), r)
                if key not in memo:
                    memo["pinned"].append(p)
                    memo[key] = Table("nbr", geometry.ball_query(p, p, np.arange(len(p)), r, spec.k), len(p))
                t[f"nbr{b}"] = memo[key]
            if st.crosslink:
                _add_links(t, branches, memo)
        elif st.op == "sample":
            new = []
            for b, (p, c) in enumerate(zip(branches, st.counts)):
                rows = sample(p, c)
                t[f"rows{b}"] = Table("rows", rows, len(p))
                new.append(p[rows])
                t[f"pos{b}"] = Table("pos", p[rows])
            branches = new
        elif st.op == "combine":
            for b in range(1, len(branches)):
                t[f"up{b}"] = _interp_table(branches[0], branches[b])
            branches = [branches[0]]
            levels.append(branches[0])
        elif st.op == "global":
            branches = [np.zeros((1, 3))]
            t["pos0"] = Table("pos", branches[0])
            levels.append(branches[0])
        out.append(t)
    dec = [_interp_table(levels[-2 - j], levels[-1 - j]) for j in range(len(levels) - 1)]
    return Plan(1, out, dec)


def _add_links(t, branches, memo):
    for b in range(len(branches) - 1):
        fine, coarse = branches[b], branches[b + 1]
        key = ("link", id(fine), id(coarse))
        if key not in memo:
            memo["pinned"] += [fine, coarse]
            memo[key] = Table("link", layers.link_geometry(fine, coarse), (len(fine), len(coarse)))
        t[f"link{b}"] = memo[key]


# ------------------------------------------------------------------ network


@dataclass
class PointCloud:
    positions: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    category: int = 0

    @property
    def n(self) -> int:
        return len(self.positions)


@dataclass
class ForwardRecord:
    """Per-stage contexts of one forward call, consumed by :meth:`Network.backward`."""

    plan: Plan
    stages: list = field(default_factory=list)
    decoder: list = field(default_factory=list)
    head: list = field(default_factory=list)
    level_stage: list = field(default_factory=list)
    used: bool = False


class Network:
    """Parameter store plus executor for an :class:`ArchSpec`.

    ``mode`` selects lean or reference grouping blocks; both use the same
    parameters and produce the same values.
    """

    def __init__(self, spec: ArchSpec, seed: int = 0, mode: str = "lean", ledger: MemoryLedger | None = None):
        if mode not in ("lean", "reference"):
            raise InvalidInputError(f"mode must be lean or reference, got {mode!r}")
        self.spec = spec
        self.mode = mode
        shapes = compile_spec(spec)
        rng = make_rng(seed)
        self.params: dict[str, SlpParams] = {
            name: SlpParams.init(rng, a, b, zero=".x" in name) for name, (a, b) in shapes.items()
        }
        # without normalisation layers a residual stack grows with depth;
        # shrink each residual branch by 1/sqrt(number of residual blocks)
        res = [i for i, st in enumerate(spec.stages) if st.op == "conv" and st.residual]
        for i in res:
            for name, p in self.params.items():
                if name.startswith(f"s{i}.b"):
                    p.weight *= 1.0 / np.sqrt(len(res))
        self.ledger = ledger if ledger is not None else MemoryLedger()
        self.ledger.retain("params", self.param_bytes, "param")

    @property
    def param_bytes(self) -> int:
        return sum(2 * (p.weight.nbytes + p.bias.nbytes) for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def copy_params_from(self, other: "Network") -> None:
        for name, p in self.params.items():
            q = other.params[name]
            if p.weight.shape != q.weight.shape:
                raise DimensionError(f"parameter {name}: {p.weight.shape} vs {q.weight.shape}")
            p.weight[...] = q.weight
            p.bias[...] = q.bias

    # -------------------------------------------------------------- planning

    def plan(self, clouds, start="zero", rng=None) -> Plan:
        for c in clouds:
            if c.n != self.spec.n_points:
                raise InvalidInputError(
                    f"cloud has {c.n} points but the network expects {self.spec.n_points}; resample first")
        return merge_plans([plan_cloud(self.spec, c.positions, start, rng) for c in clouds])

    # --------------------------------------------------------------- forward

    def forward(self, clouds, plan: Plan | None = None, training: bool = False, rng=None):
        """Logits for one cloud or a list of clouds (rows concatenated)."""
        if isinstance(clouds, PointCloud):
            clouds = [clouds]
        if plan is None:
            plan = self.plan(clouds)
        feats = np.concatenate([np.asarray(c.features, dtype=FLOAT) for c in clouds])
        pos = np.concatenate([np.asarray(c.positions, dtype=FLOAT) for c in clouds])
        if feats.shape[1] != self.spec.in_dim:
            raise DimensionError(f"features have {feats.shape[1]} channels, spec expects {self.spec.in_dim}")
        rec = ForwardRecord(plan)
        state = [(pos, feats)]
        levels = [state[0]]
        rec.level_stage.append(-1)
        for i, st in enumerate(self.spec.stages):
            state, ctx = getattr(self, f"_fwd_{st.op}")(i, st, plan.stages[i], state, plan.n_clouds)
            rec.stages.append(ctx)
            if st.op in ("combine", "global"):
                levels.append(state[0])
                rec.level_stage.append(i)
        x = levels[-1][1]
        for j, step in enumerate(plan.decoder):
            lo_pos, lo_feat = levels[-2 - j]
            up = geometry.interpolate(x, step.value)
            cat = np.concatenate([up, lo_feat], axis=1)
            names = self._dec_names(j)
            x, ctxs = layers.mlp_forward(cat, [self.params[n] for n in names], self.ledger, f"dec{j}")
            rec.decoder.append((ctxs, x.shape[0], levels[-1 - j][1].shape, lo_feat.shape[1]))
        h, c1 = layers.slp_forward(x, self.params["head.hidden"], "relu", self.ledger, "head.hidden")
        h, c2 = layers.dropout(h, self.spec.dropout, training, rng, self.ledger, "head.dropout")
        logits, c3 = layers.slp_forward(h, self.params["head.out"], "none", self.ledger, "head.out")
        rec.head = [c1, c2, c3]
        return logits, rec

    def _dec_names(self, j):
        return [f"dec{j}.m{m}" for m in range(len(self.spec.decoder[j]))]

    def _group(self, feat, pos, nbr, pre, tail_n, tag):
        pf, ps = self.params[f"{pre}.f"], self.params[f"{pre}.s"]
        tail = [self.params[f"{pre}.t{j}"] for j in range(1, tail_n)]
        return layers.group_forward(self.mode, feat, pos, nbr, pf, ps, tail, ledger=self.ledger, tag=tag)

    def _links(self, pre, n):
        return [(self.params[f"{pre}.x{b}.down"], self.params[f"{pre}.x{b}.up"]) for b in range(n - 1)]

    def _fwd_sa(self, i, st, t, state, nc):
        pos, feat = state[0]
        outs, ctxs = [], []
        for b, mlp in enumerate(st.mlps):
            rows = t[f"src{b}"].value
            nbr = t[f"nbr{b}"].value
            y, c = self._group(feat[rows], pos[rows], nbr, f"s{i}.b{b}", len(mlp), f"s{i}.b{b}")
            outs.append(y)
            ctxs.append(c)
        xc = None
        if st.crosslink:
            links = [t[f"link{b}"].value for b in range(len(outs) - 1)]
            branches = [(y, t[f"pos{b}"].value) for b, y in enumerate(outs)]
            outs, xc = layers.crosslink_forward(branches, self._links(f"s{i}", len(outs)), links,
                                                ledger=self.ledger, tag=f"s{i}.x")
        new = [(t[f"pos{b}"].value, y) for b, y in enumerate(outs)]
        return new, {"groups": ctxs, "xlink": xc, "n_in": feat.shape[0]}

    def _fwd_pyramid(self, i, st, t, state, nc):
        new = [state[0]]
        for b in range(1, len(st.counts)):
            rows = t[f"rows{b}"].value
            new.append((t[f"pos{b}"].value, new[-1][1][rows]))
        return new, {"sizes": [f.shape[0] for _, f in new]}

    def _fwd_transition(self, i, st, t, state, nc):
        new, ctxs = [], []
        for b, (p, f) in enumerate(state):
            y, c = layers.transition_forward(f, self.params[f"s{i}.b{b}"], self.ledger, f"s{i}.b{b}")
            new.append((p, y))
            ctxs.append(c)
        return new, ctxs

    def _fwd_conv(self, i, st, t, state, nc):
        outs, ctxs = [], []
        for b, (p, f) in enumerate(state):
            y, c = self._group(f, p, t[f"nbr{b}"].value, f"s{i}.b{b}", 1, f"s{i}.b{b}")
            outs.append(y)
            ctxs.append(c)
        xc = None
        if st.crosslink and len(outs) > 1:
            links = [t[f"link{b}"].value for b in range(len(outs) - 1)]
            branches = [(y, p) for y, (p, _) in zip(outs, state)]
            outs, xc = layers.crosslink_forward(branches, self._links(f"s{i}", len(outs)), links,
                                                ledger=self.ledger, tag=f"s{i}.x")
        if st.residual:
            outs = [layers.residual_apply(y, f) for y, (_, f) in zip(outs, state)]
        return [(p, y) for (p, _), y in zip(state, outs)], {"groups": ctxs, "xlink": xc}

    def _fwd_sample(self, i, st, t, state, nc):
        new = []
        for b, (p, f) in enumerate(state):
            new.append((t[f"pos{b}"].value, f[t[f"rows{b}"].value]))
        return new, {"sizes": [f.shape[0] for _, f in state]}

    def _fwd_combine(self, i, st, t, state, nc):
        pos0, f0 = state[0]
        parts = [f0] + [geometry.interpolate(f, t[f"up{b}"].value) for b, (_, f) in enumerate(state) if b]
        return [(pos0, np.concatenate(parts, axis=1))], {
            "widths": [f.shape[1] for _, f in state], "sizes": [f.shape[0] for _, f in state]}

    def _fwd_global(self, i, st, t, state, nc):
        pos, feat = state[0]
        x = np.concatenate([feat, pos], axis=1)
        names = [f"s{i}.m{j}" for j in range(len(st.mlp))]
        x, ctxs = layers.mlp_forward(x, [self.params[n] for n in names], self.ledger, f"s{i}")
        pooled, pc = layers.segment_maxpool_forward(x, nc, self.ledger, f"s{i}.pool")
        return [(np.zeros((nc, 3)), pooled)], {"mlp": ctxs, "pool": pc, "d_in": feat.shape[1]}

    # -------------------------------------------------------------- backward

    def backward(self, grad_logits, rec: ForwardRecord) -> None:
        """Accumulate parameter gradients; consumes every context in ``rec``."""
        if rec.used:
            raise ContractError("forward record was already used for a backward pass")
        rec.used = True
        c1, c2, c3 = rec.head
        g = layers.slp_backward(grad_logits, c3, self.params["head.out"])
        g = layers.dropout_backward(g, c2)
        g = layers.slp_backward(g, c1, self.params["head.hidden"])
        skip_grads = {}
        n_levels = len(rec.level_stage)
        for j in reversed(range(len(rec.decoder))):
            ctxs, _, hi_shape, lo_width = rec.decoder[j]
            g = layers.mlp_backward(g, ctxs, [self.params[n] for n in self._dec_names(j)])
            lo = n_levels - 2 - j
            skip_grads[lo] = g[:, -lo_width:]
            g = geometry.interpolate_adjoint(g[:, :-lo_width], rec.plan.decoder[j].value, hi_shape[0])
        # g is now the gradient of the top (global) level
        grads = [g]
        stage_level = {s: lvl for lvl, s in enumerate(rec.level_stage)}
        for i in reversed(range(len(self.spec.stages))):
            st = self.spec.stages[i]
            if i in stage_level and stage_level[i] < n_levels - 1:
                grads[0] = grads[0] + skip_grads[stage_level[i]]
            grads = getattr(self, f"_bwd_{st.op}")(i, st, rec.plan.stages[i], rec.stages[i], grads)

    def _bwd_group(self, g, ctx, pre, tail_n):
        pf, ps = self.params[f"{pre}.f"], self.params[f"{pre}.s"]
        tail = [self.params[f"{pre}.t{j}"] for j in range(1, tail_n)]
        gx, _ = layers.group_backward(g, ctx, pf, ps, tail)
        return gx

    def _bwd_sa(self, i, st, t, rec, grads):
        if rec["xlink"] is not None:
            grads = layers.crosslink_backward(grads, rec["xlink"], self._links(f"s{i}", len(grads)))
        out = None
        for b, mlp in enumerate(st.mlps):
            gx = self._bwd_group(grads[b], rec["groups"][b], f"s{i}.b{b}", len(mlp))
            part = geometry.scatter_rows(gx, t[f"src{b}"].value, rec["n_in"])
            out = part if out is None else out + part
        return [out]

    def _bwd_pyramid(self, i, st, t, rec, grads):
        grads = list(grads)
        for b in reversed(range(1, len(grads))):
            rows = t[f"rows{b}"].value
            grads[b - 1] = grads[b - 1] + geometry.scatter_rows(grads[b], rows, rec["sizes"][b - 1])
        return [grads[0]]

    def _bwd_transition(self, i, st, t, rec, grads):
        return [layers.transition_backward(g, c, self.params[f"s{i}.b{b}"])
                for b, (g, c) in enumerate(zip(grads, rec))]

    def _bwd_conv(self, i, st, t, rec, grads):
        skip = grads if st.residual else None
        if rec["xlink"] is not None:
            grads = layers.crosslink_backward(grads, rec["xlink"], self._links(f"s{i}", len(grads)))
        out = [self._bwd_group(g, c, f"s{i}.b{b}", 1) for b, (g, c) in enumerate(zip(grads, rec["groups"]))]
        if skip is not None:
            out = [a + s for a, s in zip(out, skip)]
        return out

    def _bwd_sample(self, i, st, t, rec, grads):
        return [geometry.scatter_rows(g, t[f"rows{b}"].value, rec["sizes"][b]) for b, g in enumerate(grads)]

    def _bwd_combine(self, i, st, t, rec, grads):
        g = grads[0]
        edges = np.cumsum([0] + rec["widths"])
        out = [g[:, edges[0]:edges[1]]]
        for b in range(1, len(rec["widths"])):
            out.append(geometry.interpolate_adjoint(g[:, edges[b]:edges[b + 1]], t[f"up{b}"].value,
                                                    rec["sizes"][b]))
        return out

    def _bwd_global(self, i, st, t, rec, grads):
        g = layers.segment_maxpool_backward(grads[0], rec["pool"])
        names = [f"s{i}.m{j}" for j in range(len(st.mlp))]
        g = layers.mlp_backward(g, rec["mlp"], [self.params[n] for n in names])
        return [g[:, :rec["d_in"]]]


def param_vector(net: Network) -> np.ndarray:
    return np.concatenate([np.concatenate([p.weight.ravel(), p.bias.ravel()]) for p in net.params.values()])


def grad_vector(net: Network) -> np.ndarray:
    return np.concatenate([np.concatenate([p.grad_w.ravel(), p.grad_b.ravel()]) for p in net.params.values()])
