"""Dense 2-D tensor engine with tape-based reverse-mode differentiation.

Everything in the model is a 2-D float32 matrix (scalars are 1x1, row
vectors 1xN). Primitives compute eagerly; when a tape is supplied and any
input requires gradients, the application is recorded so that `backward`
can replay the tape in reverse. A float64 mode (inputs carrying float64
buffers) is used by the finite-difference checker.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class EngineError(Exception):
    """Numeric contract violation (non-finite values, bad domains)."""


class ShapeError(EngineError):
    """Operands do not conform to a primitive's shape rule."""


def _as_2d(values, dtype=None) -> np.ndarray:
    if isinstance(values, np.ndarray) and dtype is None:
        dtype = values.dtype if values.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
    arr = np.asarray(values, dtype=dtype or DEFAULT_DTYPE)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"tensors are 2-D; got array of rank {arr.ndim}")
    return np.ascontiguousarray(arr)


class Tensor:
    """A 2-D value buffer with an optional gradient buffer of the same shape."""

    __slots__ = ("values", "grad", "requires_grad")

    def __init__(self, values, requires_grad: bool = False, dtype=None):
        self.values = _as_2d(values, dtype)
        if not np.all(np.isfinite(self.values)):
            raise EngineError("non-finite values in tensor")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = (
            np.zeros_like(self.values) if requires_grad else None
        )

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.values[0, 0])

    def ensure_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.values)

    def accumulate(self, g: np.ndarray) -> None:
        self.ensure_grad()
        self.grad += g

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def detach(self) -> "Tensor":
        return Tensor(self.values.copy(), requires_grad=False, dtype=self.dtype)

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.values.dtype}{req})"


class TapeEntry:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op: str, inputs: tuple, output: Tensor, backward: Callable):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of primitive applications, topologically sorted by
    construction (eager execution appends producers before consumers)."""

    def __init__(self):
        self.entries: list[TapeEntry] = []

    def record(self, op: str, inputs: tuple, output: Tensor, backward: Callable) -> None:
        self.entries.append(TapeEntry(op, inputs, output, backward))

    def __len__(self) -> int:
        return len(self.entries)


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate gradient buffers of every tensor on a path to `loss`.

    Walks the tape once in reverse. Tensors recorded on the tape but not on
    any path to the loss keep (or receive) zero gradients.
    """
    if loss.shape != (1, 1):
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise EngineError("loss is not recorded on the tape")
    loss.ensure_grad()
    loss.grad += np.ones_like(loss.values)
    for entry in reversed(tape.entries):
        g = entry.output.grad
        if g is None:
            continue
        entry.backward(g)


def _finite(vals: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(vals)):
        raise EngineError(f"{op}: non-finite output")
    return vals


def _record(tape: Tape | None, op: str, inputs: tuple, vals: np.ndarray,
            backward_fn: Callable) -> Tensor:
    out = Tensor(_finite(vals, op), dtype=vals.dtype)
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(op, inputs, out, backward_fn)
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise primitives

def add(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    _same_shape("add", a, b)

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(g)

    return _record(tape, "add", (a, b), a.values + b.values, bwd)


def sub(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    _same_shape("sub", a, b)

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(-g)

    return _record(tape, "sub", (a, b), a.values - b.values, bwd)


def mul(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """Hadamard product of equal-shape tensors."""
    _same_shape("mul", a, b)
    av, bv = a.values, b.values

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g * bv)
        if b.requires_grad:
            b.accumulate(g * av)

    return _record(tape, "mul", (a, b), av * bv, bwd)


def div(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    _same_shape("div", a, b)
    av, bv = a.values, b.values
    if np.any(bv == 0.0):
        raise EngineError("div: zero denominator")

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g / bv)
        if b.requires_grad:
            b.accumulate(-g * av / (bv * bv))

    return _record(tape, "div", (a, b), av / bv, bwd)


def scale(a: Tensor, c: float, tape: Tape | None = None) -> Tensor:
    c = float(c)

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g * c)

    return _record(tape, "scale", (a,), a.values * c, bwd)


def add_scalar(a: Tensor, c: float, tape: Tape | None = None) -> Tensor:
    def bwd(g):
        if a.requires_grad:
            a.accumulate(g)

    return _record(tape, "add_scalar", (a,), a.values + float(c), bwd)


def sigmoid(a: Tensor, tape: Tape | None = None) -> Tensor:
    x = a.values
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g * out * (1.0 - out))

    return _record(tape, "sigmoid", (a,), out, bwd)


def relu(a: Tensor, tape: Tape | None = None) -> Tensor:
    """max(x, 0); subgradient 0 at the kink."""
    x = a.values
    out = np.maximum(x, 0.0)

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g * (x > 0.0))

    return _record(tape, "relu", (a,), out, bwd)


def log(a: Tensor, tape: Tape | None = None) -> Tensor:
    x = a.values
    if np.any(x <= 0.0):
        raise EngineError("log: nonpositive input")

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g / x)

    return _record(tape, "log", (a,), np.log(x), bwd)


def sqrt(a: Tensor, tape: Tape | None = None) -> Tensor:
    x = a.values
    if np.any(x <= 0.0):
        raise EngineError("sqrt: input must be strictly positive")
    out = np.sqrt(x)

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g / (2.0 * out))

    return _record(tape, "sqrt", (a,), out, bwd)


def clamp(a: Tensor, lo: float, hi: float, tape: Tape | None = None) -> Tensor:
    """Clip into [lo, hi]; zero subgradient at and beyond the bounds."""
    x = a.values
    out = np.clip(x, lo, hi)
    inside = (x > lo) & (x < hi)

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g * inside)

    return _record(tape, "clamp", (a,), out, bwd)


# ---------------------------------------------------------------------------
# structural primitives

def matmul(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims of {a.shape} and {b.shape} differ")
    av, bv = a.values, b.values

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g @ bv.T)
        if b.requires_grad:
            b.accumulate(av.T @ g)

    return _record(tape, "matmul", (a, b), av @ bv, bwd)


def transpose(a: Tensor, tape: Tape | None = None) -> Tensor:
    def bwd(g):
        if a.requires_grad:
            a.accumulate(g.T)

    return _record(tape, "transpose", (a,), a.values.T.copy(), bwd)


def concat_rows(parts: Sequence[Tensor], tape: Tape | None = None) -> Tensor:
    if not parts:
        raise ShapeError("concat_rows: empty input list")
    cols = parts[0].shape[1]
    for p in parts:
        if p.shape[1] != cols:
            raise ShapeError(
                f"concat_rows: column counts differ ({p.shape[1]} vs {cols})")
    sizes = [p.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for p, i0, i1 in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p.accumulate(g[i0:i1])

    vals = np.concatenate([p.values for p in parts], axis=0)
    return _record(tape, "concat_rows", tuple(parts), vals, bwd)


def concat_cols(parts: Sequence[Tensor], tape: Tape | None = None) -> Tensor:
    if not parts:
        raise ShapeError("concat_cols: empty input list")
    rows = parts[0].shape[0]
    for p in parts:
        if p.shape[0] != rows:
            raise ShapeError(
                f"concat_cols: row counts differ ({p.shape[0]} vs {rows})")
    sizes = [p.shape[1] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for p, j0, j1 in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p.accumulate(g[:, j0:j1])

    vals = np.concatenate([p.values for p in parts], axis=1)
    return _record(tape, "concat_cols", tuple(parts), vals, bwd)


def slice_rows(a: Tensor, i0: int, i1: int, tape: Tape | None = None) -> Tensor:
    m = a.shape[0]
    if not (0 <= i0 < i1 <= m):
        raise ShapeError(f"slice_rows: range [{i0}, {i1}) invalid for {m} rows")

    def bwd(g):
        if a.requires_grad:
            z = np.zeros_like(a.values)
            z[i0:i1] = g
            a.accumulate(z)

    return _record(tape, "slice_rows", (a,), a.values[i0:i1].copy(), bwd)


def slice_cols(a: Tensor, j0: int, j1: int, tape: Tape | None = None) -> Tensor:
    n = a.shape[1]
    if not (0 <= j0 < j1 <= n):
        raise ShapeError(f"slice_cols: range [{j0}, {j1}) invalid for {n} cols")

    def bwd(g):
        if a.requires_grad:
            z = np.zeros_like(a.values)
            z[:, j0:j1] = g
            a.accumulate(z)

    return _record(tape, "slice_cols", (a,), a.values[:, j0:j1].copy(), bwd)


def repeat_rows(a: Tensor, k: int, tape: Tape | None = None) -> Tensor:
    """Repeat each row k consecutive times: (m, n) -> (m*k, n)."""
    if k < 1:
        raise ShapeError(f"repeat_rows: k must be >= 1, got {k}")
    m, n = a.shape

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g.reshape(m, k, n).sum(axis=1))

    return _record(tape, "repeat_rows", (a,), np.repeat(a.values, k, axis=0), bwd)


# ---------------------------------------------------------------------------
# reductions and normalizations

def avg_rows(a: Tensor, tape: Tape | None = None) -> Tensor:
    """Column-wise mean over rows: (m, n) -> (1, n)."""
    m = a.shape[0]

    def bwd(g):
        if a.requires_grad:
            a.accumulate(np.broadcast_to(g / m, a.shape).astype(g.dtype))

    return _record(tape, "avg_rows", (a,), a.values.mean(axis=0, keepdims=True), bwd)


def max_rows(a: Tensor, tape: Tape | None = None) -> Tensor:
    """Column-wise max over rows: (m, n) -> (1, n); grad to first argmax."""
    idx = np.argmax(a.values, axis=0)

    def bwd(g):
        if a.requires_grad:
            z = np.zeros_like(a.values)
            z[idx, np.arange(a.shape[1])] = g[0]
            a.accumulate(z)

    return _record(tape, "max_rows", (a,), a.values.max(axis=0, keepdims=True), bwd)


def group_max_rows(a: Tensor, k: int, tape: Tape | None = None) -> Tensor:
    """Max within consecutive groups of k rows: (m*k, n) -> (m, n)."""
    mk, n = a.shape
    if k < 1 or mk % k != 0:
        raise ShapeError(f"group_max_rows: {mk} rows not divisible into groups of {k}")
    m = mk // k
    blocks = a.values.reshape(m, k, n)
    idx = np.argmax(blocks, axis=1)  # (m, n)

    def bwd(g):
        if a.requires_grad:
            z = np.zeros((m, k, n), dtype=a.values.dtype)
            np.put_along_axis(z, idx[:, None, :], g[:, None, :], axis=1)
            a.accumulate(z.reshape(mk, n))

    return _record(tape, "group_max_rows", (a,), blocks.max(axis=1), bwd)


def sum_all(a: Tensor, tape: Tape | None = None) -> Tensor:
    def bwd(g):
        if a.requires_grad:
            a.accumulate(np.full_like(a.values, g[0, 0]))

    return _record(tape, "sum_all", (a,),
                   np.array([[a.values.sum()]], dtype=a.values.dtype), bwd)


def mean_all(a: Tensor, tape: Tape | None = None) -> Tensor:
    size = a.values.size

    def bwd(g):
        if a.requires_grad:
            a.accumulate(np.full_like(a.values, g[0, 0] / size))

    return _record(tape, "mean_all", (a,),
                   np.array([[a.values.mean()]], dtype=a.values.dtype), bwd)


def broadcast_add(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """Add a (1, n) row to every row of an (m, n) tensor."""
    if b.shape != (1, a.shape[1]):
        raise ShapeError(f"broadcast_add: row {b.shape} does not fit {a.shape}")

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(g.sum(axis=0, keepdims=True))

    return _record(tape, "broadcast_add", (a, b), a.values + b.values, bwd)


def broadcast_mul(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """Multiply every row of an (m, n) tensor by a (1, n) row."""
    if b.shape != (1, a.shape[1]):
        raise ShapeError(f"broadcast_mul: row {b.shape} does not fit {a.shape}")
    av, bv = a.values, b.values

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g * bv)
        if b.requires_grad:
            b.accumulate((g * av).sum(axis=0, keepdims=True))

    return _record(tape, "broadcast_mul", (a, b), av * bv, bwd)


def softmax_rows(a: Tensor, tape: Tape | None = None) -> Tensor:
    """Row-wise softmax, stabilized by subtracting the row max."""
    x = a.values
    e = np.exp(x - x.max(axis=1, keepdims=True))
    y = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        if a.requires_grad:
            dot = (g * y).sum(axis=1, keepdims=True)
            a.accumulate((g - dot) * y)

    return _record(tape, "softmax_rows", (a,), y, bwd)


def masked_softmax_rows(a: Tensor, mask: np.ndarray, tape: Tape | None = None) -> Tensor:
    """Row-wise softmax restricted to entries where mask is nonzero.

    Rows whose mask is entirely zero come out as all-zero rows (an empty
    neighborhood contributes nothing downstream).
    """
    if mask.shape != a.shape:
        raise ShapeError(f"masked_softmax_rows: mask {mask.shape} vs input {a.shape}")
    keep = mask != 0
    x = a.values
    neg = np.where(keep, x, -np.inf)
    rowmax = neg.max(axis=1, keepdims=True)
    rowmax = np.where(np.isfinite(rowmax), rowmax, 0.0)
    e = np.where(keep, np.exp(x - rowmax), 0.0)
    s = e.sum(axis=1, keepdims=True)
    y = np.divide(e, s, out=np.zeros_like(e), where=s > 0).astype(x.dtype)

    def bwd(g):
        if a.requires_grad:
            dot = (g * y).sum(axis=1, keepdims=True)
            a.accumulate((g - dot) * y)

    return _record(tape, "masked_softmax_rows", (a,), y, bwd)


# ---------------------------------------------------------------------------
# loss primitives

def smooth_l1(pred: Tensor, target: Tensor, tape: Tape | None = None) -> Tensor:
    """Sum of Huber distances: 0.5*d^2 for |d| < 1, |d| - 0.5 otherwise."""
    _same_shape("smooth_l1", pred, target)
    d = pred.values - target.values
    quad = np.abs(d) < 1.0
    vals = np.where(quad, 0.5 * d * d, np.abs(d) - 0.5)
    out = np.array([[vals.sum()]], dtype=d.dtype)

    def bwd(g):
        gd = np.where(quad, d, np.sign(d)) * g[0, 0]
        if pred.requires_grad:
            pred.accumulate(gd)
        if target.requires_grad:
            target.accumulate(-gd)

    return _record(tape, "smooth_l1", (pred, target), out, bwd)


KL_FLOOR = 1e-12
_ROW_SUM_TOL = 1e-5


def _check_distribution_rows(op: str, name: str, vals: np.ndarray) -> None:
    if np.any(vals < -1e-7):
        raise EngineError(f"{op}: {name} has negative entries")
    sums = vals.sum(axis=1)
    bad = np.abs(sums - 1.0) > _ROW_SUM_TOL
    if np.any(bad):
        i = int(np.argmax(bad))
        raise EngineError(
            f"{op}: row {i} of {name} is not a probability distribution "
            f"(sum={sums[i]:.6f})")


def kl_rows(p: Tensor, q: Tensor, tape: Tape | None = None) -> Tensor:
    """Mean over rows of sum_j P_ij * ln(P_ij / Q_ij).

    Rows of both inputs must be probability distributions. Terms with
    P_ij = 0 contribute 0; Q is floored at 1e-12 against log-of-zero.
    """
    _same_shape("kl_rows", p, q)
    _check_distribution_rows("kl_rows", "P", p.values)
    _check_distribution_rows("kl_rows", "Q", q.values)
    m = p.shape[0]
    pv = p.values
    qf = np.maximum(q.values, KL_FLOOR)
    pos = pv > 0
    ratio = np.where(pos, pv / qf, 1.0)
    terms = np.where(pos, pv * np.log(ratio), 0.0)
    out = np.array([[terms.sum() / m]], dtype=pv.dtype)

    def bwd(g):
        c = g[0, 0] / m
        if p.requires_grad:
            p.accumulate(np.where(pos, np.log(ratio) + 1.0, 0.0) * c)
        if q.requires_grad:
            q.accumulate(np.where(q.values > KL_FLOOR, -ratio, 0.0) * c)

    return _record(tape, "kl_rows", (p, q), out, bwd)


def cross_entropy_mean(logits: Tensor, labels: np.ndarray,
                       tape: Tape | None = None) -> Tensor:
    """Mean negative log-softmax probability of the given class per row."""
    labels = np.asarray(labels, dtype=np.int64).ravel()
    m, v = logits.shape
    if labels.shape[0] != m:
        raise ShapeError(f"cross_entropy_mean: {labels.shape[0]} labels for {m} rows")
    if np.any(labels < 0) or np.any(labels >= v):
        raise EngineError(f"cross_entropy_mean: label outside vocabulary of size {v}")
    x = logits.values
    xs = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(xs).sum(axis=1, keepdims=True))
    ll = xs[np.arange(m), labels] - lse[:, 0]
    out = np.array([[-ll.mean()]], dtype=x.dtype)
    probs = np.exp(xs - lse)

    def bwd(g):
        if logits.requires_grad:
            d = probs.copy()
            d[np.arange(m), labels] -= 1.0
            logits.accumulate(d * (g[0, 0] / m))

    return _record(tape, "cross_entropy_mean", (logits,), out, bwd)


# ---------------------------------------------------------------------------
# constants and dispatch

def const(values, dtype=None) -> Tensor:
    """Shorthand for a non-differentiable tensor."""
    return Tensor(values, requires_grad=False, dtype=dtype)


PRIMITIVES: dict[str, Callable] = {
    "add": add, "sub": sub, "mul": mul, "div": div, "scale": scale,
    "add_scalar": add_scalar, "sigmoid": sigmoid, "relu": relu, "log": log,
    "sqrt": sqrt, "clamp": clamp, "matmul": matmul, "transpose": transpose,
    "concat_rows": concat_rows, "concat_cols": concat_cols,
    "slice_rows": slice_rows, "slice_cols": slice_cols,
    "repeat_rows": repeat_rows, "avg_rows": avg_rows, "max_rows": max_rows,
    "group_max_rows": group_max_rows, "sum_all": sum_all, "mean_all": mean_all,
    "broadcast_add": broadcast_add, "broadcast_mul": broadcast_mul,
    "softmax_rows": softmax_rows, "masked_softmax_rows": masked_softmax_rows,
    "smooth_l1": smooth_l1, "kl_rows": kl_rows,
    "cross_entropy_mean": cross_entropy_mean,
}


def evaluate(op: str, inputs: Sequence[Tensor], tape: Tape | None = None, **kwargs) -> Tensor:
    """Apply a primitive by name (used by the gradient-check harness)."""
    if op not in PRIMITIVES:
        raise EngineError(f"unknown primitive: {op}")
    fn = PRIMITIVES[op]
    if op in ("concat_rows", "concat_cols"):
        return fn(list(inputs), tape=tape, **kwargs)
    return fn(*inputs, tape=tape, **kwargs)
