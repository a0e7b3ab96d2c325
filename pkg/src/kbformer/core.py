"""Dense float64 matrix primitives.

Every public function takes and returns ``numpy.ndarray`` values of dtype
float64. Two-dimensional arrays are the contract; leading batch axes are
accepted wherever the operation acts on the last one or two axes, which is
how the model handles heads and batches.

Matrix products use a deterministic kernel by default: the shared index is
accumulated in ascending order with no blocking, so results do not depend on
BLAS internals. ``matmul_mode("parallel")`` switches to ``numpy.matmul``.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numba
import numpy as np

MASK_VALUE = -1e30
LN_EPS = 1e-5

_MODES = ("deterministic", "parallel")
_matmul_mode = "deterministic"


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


# -- flop accounting ---------------------------------------------------------


@dataclass
class FlopCounter:
    total: int = 0
    by_op: dict = field(default_factory=dict)

    def add(self, op: str, n: int) -> None:
        self.total += int(n)
        self.by_op[op] = self.by_op.get(op, 0) + int(n)


_counters: list[FlopCounter] = []


@contextlib.contextmanager
def count_flops():
    """Count FLOPs of core primitives executed inside the block.

    Products cost 2 per multiply-add, elementwise ops 1 per output element,
    transposes and gathers are free.
    """
    counter = FlopCounter()
    _counters.append(counter)
    try:
        yield counter
    finally:
        _counters.pop()


def charge(op: str, n: int) -> None:
    for c in _counters:
        c.add(op, n)


# -- helpers -----------------------------------------------------------------


def matrix(data, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Build a float64 matrix from nested lists, a flat sequence or an array."""
    a = np.array(data, dtype=np.float64)
    if rows is not None or cols is not None:
        a = a.reshape(rows if rows is not None else -1, cols if cols is not None else -1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise ShapeError(f"expected 2-D data, got shape {a.shape}")
    return checked(a)


def checked(a: np.ndarray, what: str = "result") -> np.ndarray:
    if not np.isfinite(a).all():
        raise NonFiniteError(f"non-finite values in {what}")
    return a


def identity(n: int) -> np.ndarray:
    return np.eye(n, dtype=np.float64)


def zeros(rows: int, cols: int) -> np.ndarray:
    return np.zeros((rows, cols), dtype=np.float64)


def _require_row(v: np.ndarray, cols: int, what: str) -> None:
    if v.ndim != 2 or v.shape[0] != 1 or v.shape[1] != cols:
        raise ShapeError(f"{what} must be 1x{cols}, got {v.shape}")


# -- matmul --------------------------------------------------------------------


def set_matmul_mode(mode: str) -> None:
    global _matmul_mode
    if mode not in _MODES:
        raise ValueError(f"unknown matmul mode {mode!r}")
    _matmul_mode = mode


def get_matmul_mode() -> str:
    return _matmul_mode


@contextlib.contextmanager
def matmul_mode(mode: str):
    prev = _matmul_mode
    set_matmul_mode(mode)
    try:
        yield
    finally:
        set_matmul_mode(prev)


def ordered_matmul_reference(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pure-numpy ascending-order product; the kernel below must match it bitwise."""
    inner = a.shape[-1]
    out_shape = np.broadcast_shapes(a.shape[:-2], b.shape[:-2]) + (a.shape[-2], b.shape[-1])
    if inner == 0:
        return np.zeros(out_shape)
    acc = np.empty(out_shape)
    tmp = np.empty(out_shape)
    np.multiply(a[..., :, 0:1], b[..., 0:1, :], out=acc)
    for k in range(1, inner):
        np.multiply(a[..., :, k : k + 1], b[..., k : k + 1, :], out=tmp)
        acc += tmp
    return acc


@numba.njit(cache=True)
def _ordered_kernel(a, b, out):  # pragma: no cover - compiled
    # no fastmath: LLVM may vectorize over j but must keep the k order
    for t in range(a.shape[0]):
        m, k = a.shape[1], a.shape[2]
        n = b.shape[2]
        for i in range(m):
            for j in range(n):
                out[t, i, j] = a[t, i, 0] * b[t, 0, j]
            for p in range(1, k):
                aip = a[t, i, p]
                for j in range(n):
                    out[t, i, j] += aip * b[t, p, j]


def _ordered_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k, n = a.shape[-2], a.shape[-1], b.shape[-1]
    batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    if k == 0:
        return np.zeros(batch + (m, n))
    if b.ndim == 2:
        # fold the batch into rows: same per-element k order
        a3 = np.ascontiguousarray(a.reshape(1, -1, k))
        b3 = np.ascontiguousarray(b.reshape(1, k, n))
    else:
        a3 = np.ascontiguousarray(np.broadcast_to(a, batch + (m, k)).reshape(-1, m, k))
        b3 = np.ascontiguousarray(np.broadcast_to(b, batch + (k, n)).reshape(-1, k, n))
    out = np.empty((a3.shape[0], a3.shape[1], n))
    _ordered_kernel(a3, b3, out)
    return out.reshape(batch + (m, n))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product ``a @ b`` (batched over leading axes).

    In deterministic mode each output element is accumulated over the
    shared index in ascending order.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise ShapeError(f"matmul: batch axes {a.shape} vs {b.shape}") from exc
    m, k, n = a.shape[-2], a.shape[-1], b.shape[-1]
    charge("matmul", 2 * math.prod(batch) * m * k * n)
    if _matmul_mode == "parallel":
        out = np.matmul(a, b)
    else:
        out = _ordered_matmul(a, b)
    return checked(out, "matmul")


# -- elementwise / structural --------------------------------------------------


def transpose(a: np.ndarray) -> np.ndarray:
    """Swap the last two axes."""
    return np.ascontiguousarray(np.swapaxes(a, -1, -2))


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise sum; ``b`` may broadcast over leading axes of ``a``."""
    if a.shape[a.ndim - b.ndim :] != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    charge("add", a.size)
    return checked(a + b, "add")


def scale(a: np.ndarray, s: float) -> np.ndarray:
    charge("scale", a.size)
    return checked(a * s, "scale")


def add_row(a: np.ndarray, row: np.ndarray) -> np.ndarray:
    """Add a 1xC row to every row of ``a``."""
    _require_row(row, a.shape[-1], "add_row bias")
    charge("add_row", a.size)
    return checked(a + row[0], "add_row")


def relu(a: np.ndarray) -> np.ndarray:
    charge("relu", a.size)
    # np.maximum keeps -0.0 for -0.0 inputs; force a clean +0.0
    return np.where(a > 0.0, a, 0.0)


def softmax_rows(a: np.ndarray) -> np.ndarray:
    shifted = a - a.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return checked(e / e.sum(axis=-1, keepdims=True), "softmax_rows")


def layer_norm(a: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = LN_EPS) -> np.ndarray:
    cols = a.shape[-1]
    _require_row(gain, cols, "layer_norm gain")
    _require_row(bias, cols, "layer_norm bias")
    mean = a.mean(axis=-1, keepdims=True)
    centered = a - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        normed = centered / np.sqrt(var + eps)
    return checked(normed * gain[0] + bias[0], "layer_norm")


def mean_rows(a: np.ndarray) -> np.ndarray:
    """Mean over rows as a 1xC matrix; rows are summed in ascending order."""
    if a.ndim != 2 or a.shape[0] == 0:
        raise ShapeError(f"mean_rows needs a non-empty matrix, got {a.shape}")
    charge("mean_rows", a.size)
    acc = a[0].copy()
    for r in range(1, a.shape[0]):
        acc += a[r]
    return checked((acc / a.shape[0]).reshape(1, -1), "mean_rows")


def embedding_lookup(table: np.ndarray, ids) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding id out of range [0, {table.shape[0]})")
    return table[ids]


def causal_mask_fill(scores: np.ndarray) -> np.ndarray:
    """Set strictly-future entries (col > row) of the last two axes to MASK_VALUE."""
    n, m = scores.shape[-2], scores.shape[-1]
    future = np.triu(np.ones((n, m), dtype=bool), k=1)
    return np.where(future, MASK_VALUE, scores)


def cross_entropy(logits: np.ndarray, targets) -> float:
    """Mean next-token cross-entropy in nats; ``targets`` indexes the last axis."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1))
    picked = np.take_along_axis(shifted, targets[..., None], axis=-1)[..., 0]
    return float(checked(np.mean(logz - picked), "cross_entropy"))


def split_heads(a: np.ndarray, heads: int) -> np.ndarray:
    """(..., N, h*dk) -> (..., h, N, dk)."""
    *lead, n, width = a.shape
    if width % heads:
        raise ShapeError(f"width {width} not divisible by {heads} heads")
    out = a.reshape(*lead, n, heads, width // heads)
    return np.ascontiguousarray(np.moveaxis(out, -2, -3))


def merge_heads(a: np.ndarray) -> np.ndarray:
    """(..., h, N, dk) -> (..., N, h*dk)."""
    *lead, h, n, dk = a.shape
    return np.ascontiguousarray(np.moveaxis(a, -3, -2)).reshape(*lead, n, h * dk)
