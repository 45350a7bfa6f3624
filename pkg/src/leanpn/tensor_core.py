"""Dense float64 array helpers shared by every other module.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. This module
adds the few operations whose exact semantics matter to the rest of the
package (fixed-order matmul, first-index argmax, bias broadcasting rules)
plus seeded initialisation.
"""

from __future__ import annotations

import numpy as np

Tensor = np.ndarray
FLOAT = np.float64
INDEX = np.int64


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class InvalidInputError(ValueError):
    """An argument is outside the operation's domain."""


class ContractError(RuntimeError):
    """A calling-protocol violation (stale context, double release, ...)."""


def as_tensor(x) -> Tensor:
    return np.ascontiguousarray(x, dtype=FLOAT)


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; the stream is stable across numpy versions."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product accumulated over the inner axis in index order.

    Every output entry is ``((a[i,0]*b[0,j] + a[i,1]*b[1,j]) + ...)``, the same
    order as a naive triple loop, so results are bitwise reproducible and
    independent of the BLAS build.
    """
    a = np.asarray(a, dtype=FLOAT)
    b = np.asarray(b, dtype=FLOAT)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=FLOAT)
    for k in range(a.shape[1]):
        out += a[:, k, None] * b[None, k, :]
    return out


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    # bias add: b is a vector matching a's trailing axis
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


def ewise(op: str, a: Tensor, b: Tensor | None = None, c: float | None = None) -> Tensor:
    """Elementwise ``add``, ``sub``, ``mul``, ``relu`` or ``scale`` (by ``c``)."""
    a = np.asarray(a, dtype=FLOAT)
    if op == "relu":
        return np.maximum(a, 0.0)
    if op == "scale":
        if c is None:
            raise InvalidInputError("scale needs a constant")
        return a * float(c)
    if op not in ("add", "sub", "mul"):
        raise InvalidInputError(f"unknown elementwise op {op!r}")
    if b is None:
        raise InvalidInputError(f"{op} needs two operands")
    b = np.asarray(b, dtype=FLOAT)
    _check_binary(a, b, op)
    if op == "add":
        return a + b
    if op == "sub":
        return a - b
    return a * b


def reduce_max_axis(a: Tensor, axis: int) -> tuple[Tensor, np.ndarray]:
    """Max along ``axis`` and the index of the first maximal element."""
    a = np.asarray(a, dtype=FLOAT)
    if not -a.ndim <= axis < a.ndim:
        raise InvalidInputError(f"axis {axis} out of range for rank {a.ndim}")
    if a.shape[axis] == 0:
        raise InvalidInputError("cannot reduce over an empty axis")
    # np.argmax returns the first occurrence on ties
    idx = np.argmax(a, axis=axis)
    vals = np.take_along_axis(a, np.expand_dims(idx, axis), axis=axis)
    return np.squeeze(vals, axis=axis), idx.astype(INDEX)


def kaiming_uniform(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    bound = np.sqrt(6.0 / max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape).astype(FLOAT)


def nbytes(*arrays) -> int:
    return int(sum(np.asarray(x).size * 8 for x in arrays))
