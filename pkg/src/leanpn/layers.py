"""Forward/backward building blocks with explicit saved-tensor contexts.

Every ``*_forward`` returns its output plus a :class:`LayerContext` holding
exactly what the matching ``*_backward`` needs. Contexts register their
payload with a :class:`~leanpn.memledger.MemoryLedger` on creation and
release it when consumed; consuming a context twice is an error.

Grouping blocks come in two flavours with identical maths:

* ``lean_group_*`` lifts features and positions on the flat (N, D) tensors,
  gathers the neighbourhood only transiently for pooling, and keeps
  {features, positions, neighbour table, argmax}. The backward pass rebuilds
  what it needs from those.
* ``reference_group_*`` materialises the grouped (M, K+1, D+3) tensor and keeps
  it, as a conventional set-abstraction layer does.

Grouped tensors are laid out (M, K+1, D) internally; :func:`geometry.index_lookup`
exposes the (M, D, K+1) view.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .geometry import InterpWeights, NeighborIndex
from .memledger import MemoryLedger, NullLedger
from .tensor_core import FLOAT, INDEX, ContractError, DimensionError, InvalidInputError, kaiming_uniform

_NULL = NullLedger(keep_log=False)


@dataclass
class SlpParams:
    weight: np.ndarray
    bias: np.ndarray
    grad_w: np.ndarray = field(default=None, repr=False)
    grad_b: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=FLOAT)
        self.bias = np.asarray(self.bias, dtype=FLOAT)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise DimensionError(f"bad SLP shapes: weight {self.weight.shape}, bias {self.bias.shape}")
        if self.grad_w is None:
            self.grad_w = np.zeros_like(self.weight)
        if self.grad_b is None:
            self.grad_b = np.zeros_like(self.bias)

    @classmethod
    def init(cls, rng, d_in: int, d_out: int, zero: bool = False) -> "SlpParams":
        if zero:
            return cls(np.zeros((d_in, d_out)), np.zeros(d_out))
        return cls(kaiming_uniform(rng, d_in, (d_in, d_out)), np.zeros(d_out))

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]

    @property
    def size(self) -> int:
        return self.weight.size + self.bias.size

    def zero_grad(self) -> None:
        self.grad_w[...] = 0.0
        self.grad_b[...] = 0.0


def _payload(value) -> tuple[str, int] | None:
    if isinstance(value, NeighborIndex):
        return "index", value.indices.nbytes + value.valid.nbytes
    if isinstance(value, np.ndarray):
        return ("index" if np.issubdtype(value.dtype, np.integer) else "activation"), value.nbytes
    return None


class LayerContext:
    """Tensors a layer keeps for its backward pass."""

    def __init__(self, op: str, tag: str, ledger: MemoryLedger | None = None, **retained):
        self.op = op
        self.tag = tag
        self.ledger = ledger if ledger is not None else _NULL
        self.retained = retained
        self.by_kind: dict[str, int] = {}
        for value in retained.values():
            p = _payload(value)
            if p is not None:
                self.by_kind[p[0]] = self.by_kind.get(p[0], 0) + p[1]
        for kind, b in self.by_kind.items():
            self.ledger.retain(tag, b, kind)
        self.consumed = False

    @property
    def bytes(self) -> int:
        return sum(self.by_kind.values())

    @contextmanager
    def consume(self, op: str):
        if op != self.op:
            raise ContractError(f"context from {self.op!r} passed to {op!r} backward")
        if self.consumed:
            raise ContractError(f"context {self.tag!r} was already consumed")
        self.consumed = True
        try:
            yield self.retained
        finally:
            for kind, b in self.by_kind.items():
                self.ledger.release(self.tag, b, kind)
            self.retained = {}


# ---------------------------------------------------------------- SLP


def slp_forward(x, p: SlpParams, activation: str = "relu", ledger=None, tag: str = "slp"):
    x = np.asarray(x, dtype=FLOAT)
    if x.ndim != 2 or x.shape[1] != p.d_in:
        raise DimensionError(f"slp: input {x.shape} does not match weight {p.weight.shape}")
    y = x @ p.weight
    y += p.bias
    if activation == "relu":
        mask = y > 0
        np.maximum(y, 0.0, out=y)
        return y, LayerContext("slp", tag, ledger, x=x, mask=mask)
    if activation != "none":
        raise InvalidInputError(f"unknown activation {activation!r}")
    return y, LayerContext("slp", tag, ledger, x=x)


def slp_backward(grad_y, ctx: LayerContext, p: SlpParams):
    with ctx.consume("slp") as saved:
        g = np.asarray(grad_y, dtype=FLOAT)
        if "mask" in saved:
            g = g * saved["mask"]
        p.grad_w += saved["x"].T @ g
        p.grad_b += g.sum(axis=0)
        return g @ p.weight.T


def transition_forward(x, p: SlpParams, ledger=None, tag: str = "transition"):
    """Width-changing SLP (with ReLU) placed ahead of residual blocks."""
    return slp_forward(x, p, "relu", ledger, tag)


transition_backward = slp_backward


def mlp_forward(x, params, ledger=None, tag: str = "mlp", last_activation: str = "relu"):
    ctxs = []
    for i, p in enumerate(params):
        act = last_activation if i == len(params) - 1 else "relu"
        x, c = slp_forward(x, p, act, ledger, f"{tag}.{i}")
        ctxs.append(c)
    return x, ctxs


def mlp_backward(grad, ctxs, params):
    for c, p in zip(reversed(ctxs), reversed(params)):
        grad = slp_backward(grad, c, p)
    return grad


# ------------------------------------------------------- neighbourhood pooling


def nbr_maxpool_forward(grouped, ledger=None, tag: str = "maxpool"):
    """Max over the trailing neighbour axis of an (M, D, K+1) tensor."""
    g = np.asarray(grouped, dtype=FLOAT)
    if g.ndim != 3 or g.shape[2] < 1:
        raise DimensionError(f"maxpool expects (M, D, K+1), got {g.shape}")
    argmax = np.argmax(g, axis=2).astype(INDEX)
    pooled = np.take_along_axis(g, argmax[:, :, None], axis=2)[:, :, 0]
    return pooled, argmax, LayerContext("maxpool", tag, ledger, argmax=argmax)


def nbr_maxpool_backward(grad_pooled, argmax, nbr) -> np.ndarray:
    """Route each pooled gradient to its argmax slot: (M, D) -> dense (M, D, K+1)."""
    width = nbr.width if isinstance(nbr, NeighborIndex) else int(nbr)
    argmax = np.asarray(argmax)
    if argmax.size and (argmax.min() < 0 or argmax.max() >= width):
        raise ContractError(f"argmax outside [0, {width})")
    g = np.asarray(grad_pooled, dtype=FLOAT)
    out = np.zeros(g.shape + (width,), dtype=FLOAT)
    np.put_along_axis(out, argmax[:, :, None], g[:, :, None], axis=2)
    return out


# ------------------------------------------------------------ grouping blocks


def _check_group_args(feat, pos, nbr, pf, ps):
    feat = np.asarray(feat, dtype=FLOAT)
    pos = np.asarray(pos, dtype=FLOAT)
    if feat.ndim != 2 or pos.shape != (feat.shape[0], 3):
        raise DimensionError(f"features {feat.shape} and positions {pos.shape} disagree")
    if pf.d_in != feat.shape[1] or ps.d_in != 3:
        raise DimensionError(f"lift weights {pf.weight.shape}/{ps.weight.shape} do not match inputs")
    if pf.d_out != ps.d_out:
        raise ContractError(f"feature lift width {pf.d_out} != spatial lift width {ps.d_out}")
    geometry._check_table(nbr.indices, feat.shape[0])
    return feat, pos


def _first_argmax(h):
    """(max, first argmax) over axis 1 of an (M, K+1, D) tensor.

    Same result as ``np.argmax`` but locates the winner after a plain max,
    which is much faster for a short middle axis.
    """
    mx = h.max(axis=1)
    width = h.shape[1]
    small = np.int8 if width <= 127 else INDEX
    am = np.full(mx.shape, width - 1, dtype=small)
    eq = np.empty(mx.shape, dtype=bool)
    step = np.empty(mx.shape, dtype=small)
    # walk slots right to left; am -= (am - j) * eq is a branch-free masked store
    for j in range(width - 2, -1, -1):
        np.equal(h[:, j], mx, out=eq)
        np.subtract(am, j, out=step)
        step *= eq
        am -= step
    return mx, am.astype(INDEX)


def _tail_chain(h, tail, ledger, tag):
    """Run grouped activations through the tail SLPs; returns (pre-pool, acts)."""
    acts = []
    for p in tail:
        a = np.maximum(h, 0.0)
        ledger.retain(f"{tag}.grouped", a.nbytes, "scratch")
        acts.append(a)
        h = a @ p.weight + p.bias
    return h, acts


def lean_group_forward(feat, pos, nbr: NeighborIndex, pf: SlpParams, ps: SlpParams, tail=(),
                       ledger=None, tag: str = "lean"):
    """Memory-lean neighbourhood block.

    Computes ``max_j relu-chain(feat[j] Wf + (pos[j] - pos[i]) Ws + b)`` over the
    neighbours ``j`` of each centre ``i``. With an empty ``tail`` the lift is a
    single SLP and only the flat lifted tensor is gathered; extra ``tail`` SLPs
    run on a transient grouped tensor. The ReLU of the final layer is applied
    after pooling, which gives the same values since ReLU is monotone. The
    saved argmax is -1 wherever that ReLU outputs zero.
    """
    ledger = ledger if ledger is not None else _NULL
    feat, pos = _check_group_args(feat, pos, nbr, pf, ps)
    idx = nbr.indices
    centers = idx[:, 0]
    g = feat @ pf.weight
    g += pos @ ps.weight
    cterm = pos[centers] @ ps.weight - (pf.bias + ps.bias)
    h = np.take(g, idx, axis=0)
    ledger.retain(f"{tag}.grouped", h.nbytes, "scratch")
    scratch = [h.nbytes]
    if tail:
        h -= cterm[:, None, :]
        h, acts = _tail_chain(h, tail, ledger, tag)
        scratch += [a.nbytes for a in acts]
        pooled, argmax = _first_argmax(h)
    else:
        pooled, argmax = _first_argmax(h)
        pooled -= cterm
    del h
    for b in scratch:
        ledger.release(f"{tag}.grouped", b, "scratch")
    # -1 marks outputs the final relu zeroes, so backward needs no pre-activation
    argmax[pooled <= 0] = -1
    out = np.maximum(pooled, 0.0)
    ctx = LayerContext("lean_group", tag, ledger, feat=feat, pos=pos, nbr=nbr, argmax=argmax)
    return out, ctx


def lean_group_backward(grad_out, ctx: LayerContext, pf: SlpParams, ps: SlpParams, tail=()):
    """Backward of :func:`lean_group_forward`; returns (grad_feat, None).

    Positions are inputs, never learned, so no position gradient is formed.
    """
    with ctx.consume("lean_group") as saved:
        feat, pos, nbr, argmax = saved["feat"], saved["pos"], saved["nbr"], saved["argmax"]
        ledger, tag = ctx.ledger, ctx.tag
        idx = nbr.indices
        centers = idx[:, 0]
        n, m = feat.shape[0], idx.shape[0]
        grad_out = np.asarray(grad_out, dtype=FLOAT)
        active = argmax >= 0
        slot = np.maximum(argmax, 0)
        gp = grad_out * active
        if not tail:
            src = np.take_along_axis(idx, slot, axis=1)
            d = gp.shape[1]
            lin = src * d
            lin += np.arange(d)
            # route each pooled gradient straight to the row that won the max
            g_flat = np.bincount(lin.ravel(), weights=gp.ravel(), minlength=n * d).reshape(n, d)
            g_center = gp
        else:
            g = feat @ pf.weight
            g += pos @ ps.weight
            cterm = pos[centers] @ ps.weight - (pf.bias + ps.bias)
            h0 = np.take(g, idx, axis=0)
            h0 -= cterm[:, None, :]
            del g
            ledger.retain(f"{tag}.grouped", h0.nbytes, "scratch")
            scratch = [h0.nbytes]
            # rebuild the tail inputs; h0 is ours, so its relu can be taken in place
            a, acts = np.maximum(h0, 0.0, out=h0), [h0]
            for p in tail[:-1]:
                a = a @ p.weight
                a += p.bias
                np.maximum(a, 0.0, out=a)
                ledger.retain(f"{tag}.grouped", a.nbytes, "scratch")
                scratch.append(a.nbytes)
                acts.append(a)
            gh = np.zeros((m, idx.shape[1], gp.shape[1]))
            np.put_along_axis(gh, slot[:, None, :], gp[:, None, :], axis=1)
            for p, a in zip(reversed(tail), reversed(acts)):
                p.grad_w += a.reshape(-1, a.shape[2]).T @ gh.reshape(-1, gh.shape[2])
                p.grad_b += gh.sum(axis=(0, 1))
                gh = gh @ p.weight.T
                gh *= a > 0
            # same sum as inverse_index_lookup; the table was checked in forward
            g_flat = geometry.scatter_rows(gh.reshape(-1, gh.shape[2]), idx.ravel(), n)
            g_center = gh.sum(axis=1)
            del gh, acts, h0
            for b in scratch:
                ledger.release(f"{tag}.grouped", b, "scratch")
        pf.grad_w += feat.T @ g_flat
        pf.grad_b += g_center.sum(axis=0)
        ps.grad_w += pos.T @ g_flat - pos[centers].T @ g_center
        ps.grad_b += g_center.sum(axis=0)
        return g_flat @ pf.weight.T, None


def reference_group_forward(feat, pos, nbr: NeighborIndex, pf: SlpParams, ps: SlpParams, tail=(),
                            ledger=None, tag: str = "reference"):
    """Conventional grouping: build and keep the (M, K+1, D+3) neighbourhood tensor.

    The last SLP is evaluated one neighbour slot at a time and folded into a
    running max, so no extra K-fold output tensor is created.
    """
    ledger = ledger if ledger is not None else _NULL
    feat, pos = _check_group_args(feat, pos, nbr, pf, ps)
    idx = nbr.indices
    t_feat = feat[idx]
    t_rel = pos[idx] - pos[idx[:, 0]][:, None, :]
    acts = []
    if tail:
        a = np.maximum(t_feat @ pf.weight + t_rel @ ps.weight + (pf.bias + ps.bias), 0.0)
        for p in tail[:-1]:
            acts.append(a)
            a = np.maximum(a @ p.weight + p.bias, 0.0)
        acts.append(a)
        last = tail[-1]

        def slot(j):
            return acts[-1][:, j, :] @ last.weight + last.bias
    else:
        bias = pf.bias + ps.bias

        def slot(j):
            return t_feat[:, j, :] @ pf.weight + t_rel[:, j, :] @ ps.weight + bias

    pooled = slot(0)
    argmax = np.zeros(pooled.shape, dtype=INDEX)
    for j in range(1, idx.shape[1]):
        h = slot(j)
        better = h > pooled  # strict: ties keep the lowest slot
        pooled = np.where(better, h, pooled)
        argmax[better] = j
    out = np.maximum(pooled, 0.0)
    kept = {f"act{i}": a for i, a in enumerate(acts)}
    ctx = LayerContext("reference_group", tag, ledger, t_feat=t_feat, t_rel=t_rel, nbr=nbr,
                       argmax=argmax, mask=pooled > 0, n_src=feat.shape[0], **kept)
    return out, ctx


def reference_group_backward(grad_out, ctx: LayerContext, pf: SlpParams, ps: SlpParams, tail=()):
    with ctx.consume("reference_group") as saved:
        t_feat, t_rel, nbr, argmax = saved["t_feat"], saved["t_rel"], saved["nbr"], saved["argmax"]
        idx, n = nbr.indices, saved["n_src"]
        gp = np.where(saved["mask"], np.asarray(grad_out, dtype=FLOAT), 0.0)
        grad_feat = None
        if not tail:
            for j in range(idx.shape[1]):
                gj = np.where(argmax == j, gp, 0.0)
                pf.grad_w += t_feat[:, j, :].T @ gj
                ps.grad_w += t_rel[:, j, :].T @ gj
                part = geometry.scatter_rows(gj @ pf.weight.T, idx[:, j], n)
                grad_feat = part if grad_feat is None else grad_feat + part
            pf.grad_b += gp.sum(axis=0)
            ps.grad_b += gp.sum(axis=0)
            return grad_feat, None
        acts = [saved[f"act{i}"] for i in range(len(tail))]
        gh = np.zeros((idx.shape[0], idx.shape[1], gp.shape[1]))
        np.put_along_axis(gh, argmax[:, None, :], gp[:, None, :], axis=1)
        with ctx.ledger.scratch(f"{ctx.tag}.grad", gh.nbytes):
            for p, a in zip(reversed(tail), reversed(acts)):
                p.grad_w += a.reshape(-1, a.shape[2]).T @ gh.reshape(-1, gh.shape[2])
                p.grad_b += gh.sum(axis=(0, 1))
                gh = gh @ p.weight.T
                gh *= a > 0
            flat = gh.reshape(-1, gh.shape[2])
            pf.grad_w += t_feat.reshape(-1, t_feat.shape[2]).T @ flat
            ps.grad_w += t_rel.reshape(-1, 3).T @ flat
            pf.grad_b += flat.sum(axis=0)
            ps.grad_b += flat.sum(axis=0)
            grad_feat = geometry.scatter_rows(flat @ pf.weight.T, idx.ravel(), n)
        return grad_feat, None


def group_forward(mode, *args, **kwargs):
    if mode == "lean":
        return lean_group_forward(*args, **kwargs)
    if mode == "reference":
        return reference_group_forward(*args, **kwargs)
    raise InvalidInputError(f"unknown execution mode {mode!r}")


def group_backward(grad_out, ctx, pf, ps, tail=()):
    if ctx.op == "lean_group":
        return lean_group_backward(grad_out, ctx, pf, ps, tail)
    return reference_group_backward(grad_out, ctx, pf, ps, tail)


# ---------------------------------------------------------- residual / links


def residual_apply(f_out, skip):
    f_out = np.asarray(f_out, dtype=FLOAT)
    skip = np.asarray(skip, dtype=FLOAT)
    if f_out.shape != skip.shape:
        raise DimensionError(
            f"residual link between {f_out.shape} and {skip.shape}: insert a transition block "
            "to match widths"
        )
    return f_out + skip


def residual_backward(grad):
    return grad, grad


@dataclass
class LinkGeometry:
    """Resampling maps between resolution ``i`` (fine) and ``i+1`` (coarse)."""

    down: np.ndarray  # coarse point -> row of the fine point it came from
    up: InterpWeights  # fine queries interpolated from coarse sources


def link_geometry(fine_pos, coarse_pos) -> LinkGeometry:
    down, _ = geometry.knn(coarse_pos, fine_pos, 1)
    if len(coarse_pos) >= 3:
        up = geometry.interp_weights(fine_pos, coarse_pos)
    else:
        up = geometry.broadcast_weights(len(fine_pos))
    return LinkGeometry(down[:, 0], up)


def crosslink_forward(branches, params, links=None, pairs=None, ledger=None, tag: str = "xlink"):
    """Sum adjacent-resolution messages into each branch.

    ``branches`` is a fine-to-coarse list of ``(features, positions)``;
    ``params[i]`` is the ``(down, up)`` SLP pair for link ``i <-> i+1``. The
    fine-to-coarse message is resampled first and lifted at the coarse
    resolution; the coarse-to-fine message is lifted at the coarse resolution
    and then interpolated up.
    """
    n = len(branches)
    if pairs is not None:
        for a, b in pairs:
            if abs(a - b) != 1:
                raise ContractError(f"cross-links join adjacent resolutions only, got {a}<->{b}")
    if len(params) != n - 1:
        raise ContractError(f"{n} branches need {n - 1} link parameter pairs, got {len(params)}")
    feats = [np.asarray(f, dtype=FLOAT) for f, _ in branches]
    if links is None:
        links = [link_geometry(branches[i][1], branches[i + 1][1]) for i in range(n - 1)]
    outs = [f.copy() for f in feats]
    sub = []
    for i, (pd, pu) in enumerate(params):
        down_y, down_ctx = slp_forward(feats[i][links[i].down], pd, "none", ledger, f"{tag}.{i}.down")
        outs[i + 1] += down_y
        up_y, up_ctx = slp_forward(feats[i + 1], pu, "none", ledger, f"{tag}.{i}.up")
        outs[i] += geometry.interpolate(up_y, links[i].up)
        sub.append((down_ctx, up_ctx))
    ctx = LayerContext("crosslink", tag, ledger, sub=sub, links=links,
                       sizes=[f.shape[0] for f in feats])
    return outs, ctx


def crosslink_backward(grads, ctx: LayerContext, params):
    with ctx.consume("crosslink") as saved:
        sizes, links = saved["sizes"], saved["links"]
        out = [np.asarray(g, dtype=FLOAT).copy() for g in grads]
        for i in reversed(range(len(params))):
            pd, pu = params[i]
            down_ctx, up_ctx = saved["sub"][i]
            g_up = geometry.interpolate_adjoint(grads[i], links[i].up, sizes[i + 1])
            out[i + 1] += slp_backward(g_up, up_ctx, pu)
            g_down = slp_backward(grads[i + 1], down_ctx, pd)
            out[i] += geometry.scatter_rows(g_down, links[i].down, sizes[i])
        return out


# ------------------------------------------------------------- head pieces


def dropout(x, p_zero: float, training: bool, rng=None, ledger=None, tag: str = "dropout"):
    x = np.asarray(x, dtype=FLOAT)
    if not 0.0 <= p_zero < 1.0:
        raise InvalidInputError(f"dropout probability must be in [0, 1), got {p_zero}")
    if not training or p_zero == 0.0:
        return x, LayerContext("dropout", tag, ledger, scale=None)
    # single-precision uniforms are plenty to draw a Bernoulli mask
    keep = rng.random(x.shape, dtype=np.float32) >= p_zero
    return x * keep * (1.0 / (1.0 - p_zero)), LayerContext(
        "dropout", tag, ledger, keep=keep, scale=1.0 / (1.0 - p_zero))


def dropout_backward(grad, ctx: LayerContext):
    with ctx.consume("dropout") as saved:
        if saved["scale"] is None:
            return grad
        return grad * saved["keep"] * saved["scale"]


def softmax_xent(logits, labels):
    """Mean cross-entropy over rows and its gradient w.r.t. the logits."""
    z = np.asarray(logits, dtype=FLOAT)
    labels = np.asarray(labels)
    n, c = z.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels {labels.shape} do not match logits {z.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise InvalidInputError(f"labels must lie in [0, {c})")
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return float(loss), grad / n


def segment_maxpool_forward(x, n_segments: int, ledger=None, tag: str = "globalpool"):
    """Max over equal-length consecutive row blocks: (S*n, D) -> (S, D)."""
    x = np.asarray(x, dtype=FLOAT)
    if x.shape[0] % n_segments:
        raise DimensionError(f"{x.shape[0]} rows do not split into {n_segments} segments")
    blocks = x.reshape(n_segments, -1, x.shape[1])
    argmax = np.argmax(blocks, axis=1).astype(INDEX)
    pooled = np.take_along_axis(blocks, argmax[:, None, :], axis=1)[:, 0, :]
    return pooled, LayerContext("segment_maxpool", tag, ledger, argmax=argmax, n_rows=x.shape[0])


def segment_maxpool_backward(grad, ctx: LayerContext):
    with ctx.consume("segment_maxpool") as saved:
        argmax, n_rows = saved["argmax"], saved["n_rows"]
        s, d = argmax.shape
        out = np.zeros((s, n_rows // s, d))
        np.put_along_axis(out, argmax[:, None, :], np.asarray(grad)[:, None, :], axis=1)
        return out.reshape(n_rows, d)
