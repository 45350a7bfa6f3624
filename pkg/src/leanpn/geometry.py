"""Point-set kernels: sampling, neighbour search, gather/scatter, interpolation.

All neighbour searches are brute force over pairwise squared distances. That
is O(N^2) memory per call, which is fine for the point counts used here
(a few thousand at most).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .tensor_core import FLOAT, INDEX, DimensionError, InvalidInputError, Tensor


@dataclass
class NeighborIndex:
    """Self + neighbour lookup table, one row per centre.

    ``indices[i, 0]`` is the centre itself; rows with fewer than ``k`` real
    neighbours are right-padded with the centre index. ``valid[i]`` counts the
    centre plus the real neighbours.
    """

    indices: np.ndarray
    valid: np.ndarray
    k: int
    radius: float | None = None

    @property
    def n_rows(self) -> int:
        return self.indices.shape[0]

    @property
    def width(self) -> int:
        return self.indices.shape[1]

    def offset(self, by: int) -> "NeighborIndex":
        return NeighborIndex(self.indices + by, self.valid, self.k, self.radius)


@dataclass
class InterpWeights:
    indices: np.ndarray  # M x 3 source rows
    weights: np.ndarray  # M x 3, rows sum to one

    def offset(self, by: int) -> "InterpWeights":
        return InterpWeights(self.indices + by, self.weights)


def _check_points(x: Tensor, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=FLOAT)
    if x.ndim != 2 or x.shape[1] != 3:
        raise DimensionError(f"{name} must be (n, 3), got {x.shape}")
    return x


def sq_dists(a: Tensor, b: Tensor) -> np.ndarray:
    """Exact squared Euclidean distances, (len(a), len(b))."""
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def fps(positions: Tensor, m: int, start: int = 0) -> np.ndarray:
    """Greedy farthest point sampling, returned in pick order."""
    pos = _check_points(positions, "positions")
    n = pos.shape[0]
    if not 1 <= m <= n:
        raise InvalidInputError(f"fps: need 1 <= m <= {n}, got m={m}")
    if not 0 <= start < n:
        raise InvalidInputError(f"fps: start {start} out of range for {n} points")
    picks = np.empty(m, dtype=INDEX)
    picks[0] = start
    d = np.full(n, np.inf)
    d[start] = -np.inf
    last = start
    for t in range(1, m):
        diff = pos - pos[last]
        d = np.minimum(d, np.einsum("ij,ij->i", diff, diff))
        last = int(np.argmax(d))  # first index on ties
        d[last] = -np.inf  # coincident points must not be picked twice
        picks[t] = last
    return picks


def canonical_start(positions: Tensor) -> int:
    """Index of the lexicographically smallest point (order-independent seed)."""
    pos = np.asarray(positions)
    return int(np.lexsort(pos.T[::-1])[0])


def ball_query(centers: Tensor, positions: Tensor, center_ids, r: float, k: int) -> NeighborIndex:
    """Up to ``k`` points within ``r`` of each centre, ascending index order.

    The centre itself (``center_ids[i]``) occupies column 0 and is not counted
    again among the neighbours.
    """
    c = _check_points(centers, "centers")
    p = _check_points(positions, "positions")
    ids = np.asarray(center_ids, dtype=INDEX)
    if ids.shape != (c.shape[0],):
        raise DimensionError(f"center_ids must have shape ({c.shape[0]},), got {ids.shape}")
    if r <= 0 or k < 1:
        raise InvalidInputError("ball_query needs r > 0 and k >= 1")
    m = c.shape[0]
    inside = sq_dists(c, p) <= r * r
    inside[np.arange(m), ids] = False
    # rank of each in-ball point within its row; keep the first k in index order
    rank = np.cumsum(inside, axis=1)
    rows, cols = np.nonzero(inside & (rank <= k))
    found = np.minimum(rank[:, -1], k)
    table = np.repeat(ids[:, None], k + 1, axis=1)
    table[rows, rank[rows, cols]] = cols
    return NeighborIndex(table, (found + 1).astype(INDEX), k, float(r))


def knn(queries: Tensor, sources: Tensor, k: int) -> tuple[np.ndarray, np.ndarray]:
    """``k`` nearest sources per query: (indices, squared distances), nearest first."""
    q = _check_points(queries, "queries")
    s = _check_points(sources, "sources")
    if not 1 <= k <= s.shape[0]:
        raise InvalidInputError(f"knn: need 1 <= k <= {s.shape[0]}, got {k}")
    d = sq_dists(q, s)
    # stable sort: equal distances keep ascending index order
    order = np.argsort(d, axis=1, kind="stable")[:, :k].astype(INDEX)
    return order, np.take_along_axis(d, order, axis=1)


def knn_index(positions: Tensor, k: int) -> NeighborIndex:
    """Self + ``k`` nearest other points for every point."""
    pos = _check_points(positions, "positions")
    n = pos.shape[0]
    if k > n - 1:
        raise InvalidInputError(f"knn_index: k={k} needs at least {k + 1} points")
    d = sq_dists(pos, pos)
    d[np.arange(n), np.arange(n)] = -1.0
    order = np.argsort(d, axis=1, kind="stable")[:, : k + 1].astype(INDEX)
    return NeighborIndex(order, np.full(n, k + 1, dtype=INDEX), k)


def _check_table(table: np.ndarray, n: int) -> None:
    bad = (table < 0) | (table >= n)
    if bad.any():
        row = int(np.argwhere(bad)[0, 0])
        raise IndexError(f"neighbour index out of range in row {row} (source has {n} rows)")


def index_lookup(flat: Tensor, nbr: NeighborIndex) -> Tensor:
    """Gather neighbourhood features: (N, D) -> (M, D, K+1)."""
    flat = np.asarray(flat, dtype=FLOAT)
    _check_table(nbr.indices, flat.shape[0])
    return np.moveaxis(flat[nbr.indices], 2, 1)


def scatter_rows(values: np.ndarray, rows: np.ndarray, n: int) -> np.ndarray:
    """out[p] = sum of values[q] over q with rows[q] == p, summed in q order.

    ``values`` is (Q, D) and ``rows`` is (Q,). Done as a product with a CSC
    one-hot matrix, one column per q; the product walks columns in order, so
    the sums are deterministic.
    """
    q, d = values.shape
    if q == 0:
        return np.zeros((n, d), dtype=FLOAT)
    onehot = sparse.csc_matrix((np.ones(q), rows, np.arange(q + 1)), shape=(n, q))
    return np.asarray(onehot @ values)


def inverse_index_lookup(grouped_grad: Tensor, nbr: NeighborIndex, n: int | None = None) -> Tensor:
    """Scatter-add adjoint of :func:`index_lookup`: (M, D, K+1) -> (N, D)."""
    g = np.asarray(grouped_grad, dtype=FLOAT)
    m, width = nbr.indices.shape
    if g.ndim != 3 or g.shape[0] != m or g.shape[2] != width:
        raise DimensionError(f"grouped grad {g.shape} does not match table {nbr.indices.shape}")
    if n is None:
        n = int(nbr.indices.max()) + 1
    _check_table(nbr.indices, n)
    # iterate (i, j) in row-major order
    vals = np.moveaxis(g, 2, 1).reshape(m * width, g.shape[1])
    return scatter_rows(vals, nbr.indices.ravel(), n)


def interp_weights(queries: Tensor, sources: Tensor, eps: float = 1e-10) -> InterpWeights:
    """Inverse squared distance weights over the 3 nearest sources."""
    q = _check_points(queries, "queries")
    s = _check_points(sources, "sources")
    if s.shape[0] < 3:
        raise InvalidInputError(f"interp_weights needs at least 3 sources, got {s.shape[0]}")
    idx, d2 = knn(q, s, 3)
    w = 1.0 / (d2 + eps)
    w /= w.sum(axis=1, keepdims=True)
    hit = np.sqrt(d2[:, 0]) < 1e-12
    w[hit] = (1.0, 0.0, 0.0)
    return InterpWeights(idx, w)


def broadcast_weights(m: int) -> InterpWeights:
    """Weights copying a single source row to ``m`` queries."""
    return InterpWeights(np.zeros((m, 3), dtype=INDEX), np.tile([1.0, 0.0, 0.0], (m, 1)))


def interpolate(features: Tensor, w: InterpWeights) -> Tensor:
    f = np.asarray(features, dtype=FLOAT)
    _check_table(w.indices, f.shape[0])
    return np.einsum("mj,mjd->md", w.weights, f[w.indices])


def interpolate_adjoint(grad: Tensor, w: InterpWeights, n: int) -> Tensor:
    g = np.asarray(grad, dtype=FLOAT)
    vals = (w.weights[:, :, None] * g[:, None, :]).reshape(-1, g.shape[1])
    return scatter_rows(vals, w.indices.ravel(), n)
