"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the shapes the classifiers actually need are supported: scalars,
vectors and matrices. Broadcasting is restricted to scalar-vs-tensor and
equal shapes; anything wider must be written out with explicit ops (e.g.
a ones-matmul for a row broadcast), which keeps every backward rule short
enough to audit by eye.

Ops executed inside a ``with Tape():`` block are recorded in execution
order, which is already a topological order of the graph.  Outside a tape
the same ops run forward-only, so evaluation pays no recording cost.
"""

from __future__ import annotations

import threading

import numpy as np
from scipy.special import expit


class AutogradError(Exception):
    """Base class for tensor library failures."""


class ShapeError(AutogradError):
    """Operands have incompatible shapes."""


class NumericError(AutogradError):
    """An operation produced NaN or Inf."""


class GraphError(AutogradError):
    """Backward was asked for an invalid target (non-scalar or detached)."""


_local = threading.local()

_finite_checks = True


def set_finite_checks(enabled: bool) -> None:
    """Toggle NaN/Inf detection on op outputs. On by default; turning it
    off is safe once a pipeline is trusted and shaves per-op overhead."""
    global _finite_checks
    _finite_checks = enabled


def finite_checks_enabled() -> bool:
    return _finite_checks


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A dense float64 array plus an optional same-shape gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if _finite_checks and not np.all(np.isfinite(arr)):
            raise NumericError("tensor initialized with non-finite values")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def grad_array(self) -> np.ndarray:
        """The accumulated gradient, or zeros if none ever arrived."""
        if self.grad is None:
            return np.zeros_like(self.data)
        return self.grad

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


class Tape:
    """Ordered record of operations for one reverse pass.

    ``backward`` walks the record once, in reverse, accumulating d(loss)/dx
    into ``x.grad`` for every requires_grad leaf that contributed to the
    loss. Gradients add across reuse of a tensor and across repeated
    backward calls; callers that want fresh gradients zero them first.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple, object]] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        popped = _tape_stack().pop()
        if popped is not self:  # pragma: no cover - misuse guard
            raise GraphError("tape stack corrupted by unbalanced enter/exit")
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, out: Tensor, inputs: tuple, backward_fn) -> None:
        self._nodes.append((out, inputs, backward_fn))
        self._produced.add(id(out))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise GraphError(f"loss must be scalar, got shape {loss.data.shape}")
        if id(loss) not in self._produced:
            raise GraphError("loss tensor was not produced on this tape")
        flowing: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, backward_fn in reversed(self._nodes):
            g = flowing.pop(id(out), None)
            if g is None:
                continue
            for t, dt in zip(inputs, backward_fn(g)):
                if dt is None:
                    continue
                if id(t) in self._produced:
                    acc = flowing.get(id(t))
                    flowing[id(t)] = dt if acc is None else acc + dt
                elif t.requires_grad:
                    t.grad = dt.copy() if t.grad is None else t.grad + dt


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


def _make(data: np.ndarray, requires_grad: bool, op: str) -> Tensor:
    if _finite_checks and not np.all(np.isfinite(data)):
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = requires_grad
    out.grad = None
    return out


def _record(out: Tensor, inputs: tuple, backward_fn) -> Tensor:
    if out.requires_grad:
        tape = active_tape()
        if tape is not None:
            tape.record(out, inputs, backward_fn)
    return out


def _require_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects matrices")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner dims {a.data.shape} x {b.data.shape}")
    out = _make(a.data @ b.data, a.requires_grad or b.requires_grad, "matmul")

    def grads(g):
        return (
            g @ b.data.T if a.requires_grad else None,
            a.data.T @ g if b.requires_grad else None,
        )

    return _record(out, (a, b), grads)


def transpose(a: Tensor) -> Tensor:
    out = _make(a.data.T.copy(), a.requires_grad, "transpose")
    return _record(out, (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    out = _make(a.data.reshape(shape).copy(), a.requires_grad, "reshape")
    return _record(out, (a,), lambda g: (g.reshape(a.data.shape),))


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select rows by index; backward scatter-adds into the source rows."""
    idx = np.asarray(indices, dtype=np.intp)
    if a.data.ndim != 2:
        raise ShapeError("gather_rows expects a matrix")
    out = _make(a.data[idx], a.requires_grad, "gather_rows")

    def grads(g):
        da = np.zeros_like(a.data)
        np.add.at(da, idx, g)
        return (da,)

    return _record(out, (a,), grads)


def pad_rows(a: Tensor, before: int, after: int) -> Tensor:
    """Prepend/append all-zero rows."""
    if a.data.ndim != 2:
        raise ShapeError("pad_rows expects a matrix")
    out = _make(
        np.pad(a.data, ((before, after), (0, 0))), a.requires_grad, "pad_rows"
    )
    n = a.data.shape[0]
    return _record(out, (a,), lambda g: (g[before : before + n],))


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[0] != b.data.shape[0]:
        raise ShapeError("concat_cols expects matrices with equal row counts")
    out = _make(
        np.concatenate([a.data, b.data], axis=1),
        a.requires_grad or b.requires_grad,
        "concat_cols",
    )
    ca = a.data.shape[1]

    def grads(g):
        return (
            g[:, :ca] if a.requires_grad else None,
            g[:, ca:] if b.requires_grad else None,
        )

    return _record(out, (a, b), grads)


def concat_rows(tensors) -> Tensor:
    """Stack row vectors / matrices vertically."""
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat_rows of empty list")
    mats = [t.data if t.data.ndim == 2 else t.data.reshape(1, -1) for t in tensors]
    rg = any(t.requires_grad for t in tensors)
    out = _make(np.concatenate(mats, axis=0), rg, "concat_rows")
    offsets = np.cumsum([0] + [m.shape[0] for m in mats])

    def grads(g):
        return tuple(
            g[offsets[i] : offsets[i + 1]].reshape(t.data.shape)
            if t.requires_grad
            else None
            for i, t in enumerate(tensors)
        )

    return _record(out, tuple(tensors), grads)


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "add")
    out = _make(a.data + b.data, a.requires_grad or b.requires_grad, "add")

    def grads(g):
        return (g if a.requires_grad else None, g if b.requires_grad else None)

    return _record(out, (a, b), grads)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "sub")
    out = _make(a.data - b.data, a.requires_grad or b.requires_grad, "sub")

    def grads(g):
        return (g if a.requires_grad else None, -g if b.requires_grad else None)

    return _record(out, (a, b), grads)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "mul")
    out = _make(a.data * b.data, a.requires_grad or b.requires_grad, "mul")

    def grads(g):
        return (
            g * b.data if a.requires_grad else None,
            g * a.data if b.requires_grad else None,
        )

    return _record(out, (a, b), grads)


def affine(a: Tensor, scale_by: float = 1.0, shift: float = 0.0) -> Tensor:
    """scale_by * a + shift, both python scalars."""
    out = _make(a.data * scale_by + shift, a.requires_grad, "affine")
    return _record(out, (a,), lambda g: (g * scale_by,))


def scale(a: Tensor, c: float) -> Tensor:
    return affine(a, scale_by=c)


def add_scalar(a: Tensor, c: float) -> Tensor:
    return affine(a, shift=c)


def one_minus(a: Tensor) -> Tensor:
    return affine(a, scale_by=-1.0, shift=1.0)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = _make(y, a.requires_grad, "tanh")
    return _record(out, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    y = expit(a.data)
    out = _make(y, a.requires_grad, "sigmoid")
    return _record(out, (a,), lambda g: (g * y * (1.0 - y),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    out = _make(y, a.requires_grad, "exp")
    return _record(out, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    out = _make(np.log(a.data), a.requires_grad, "log")
    return _record(out, (a,), lambda g: (g / a.data,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes through inside the bounds."""
    mask = (a.data >= lo) & (a.data <= hi)
    out = _make(np.clip(a.data, lo, hi), a.requires_grad, "clip")
    return _record(out, (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# reductions and normalizations


def sum_all(a: Tensor) -> Tensor:
    out = _make(np.asarray(a.data.sum()), a.requires_grad, "sum_all")
    return _record(out, (a,), lambda g: (np.full_like(a.data, float(g)),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = _make(np.asarray(a.data.mean()), a.requires_grad, "mean_all")
    return _record(out, (a,), lambda g: (np.full_like(a.data, float(g) / n),))


def sum_cols(a: Tensor) -> Tensor:
    """Row-wise sum of a matrix, kept as a column."""
    if a.data.ndim != 2:
        raise ShapeError("sum_cols expects a matrix")
    out = _make(a.data.sum(axis=1, keepdims=True), a.requires_grad, "sum_cols")
    return _record(out, (a,), lambda g: (np.broadcast_to(g, a.data.shape).copy(),))


def softmax(scores: Tensor) -> Tensor:
    """Stable softmax of a vector (max-subtracted)."""
    if scores.data.ndim != 1:
        raise ShapeError("softmax expects a vector")
    if scores.data.size == 0:
        raise ShapeError("softmax of empty input")
    z = scores.data - scores.data.max()
    e = np.exp(z)
    y = e / e.sum()
    out = _make(y, scores.requires_grad, "softmax")
    return _record(out, (scores,), lambda g: (y * (g - np.dot(g, y)),))


def softmax_rows(scores: Tensor, mask=None) -> Tensor:
    """Row-wise stable softmax of a matrix.

    ``mask`` is an optional boolean vector over columns; False columns get
    weight exactly 0 and receive no gradient. Every row must keep at least
    one valid column.
    """
    if scores.data.ndim != 2:
        raise ShapeError("softmax_rows expects a matrix")
    if scores.data.shape[1] == 0:
        raise ShapeError("softmax_rows of empty rows")
    if mask is None:
        z = scores.data - scores.data.max(axis=1, keepdims=True)
        e = np.exp(z)
    else:
        m = np.asarray(mask, dtype=bool)
        if m.shape != (scores.data.shape[1],):
            raise ShapeError("mask must cover the columns")
        if not m.any():
            raise ShapeError("softmax_rows mask excludes every column")
        masked = np.where(m, scores.data, -np.inf)
        z = masked - masked.max(axis=1, keepdims=True)
        with np.errstate(invalid="ignore"):
            e = np.exp(z)
        e = np.where(m, e, 0.0)
    y = e / e.sum(axis=1, keepdims=True)
    out = _make(y, scores.requires_grad, "softmax_rows")

    def grads(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return (y * (g - dot),)

    return _record(out, (scores,), grads)


def maxpool_rows(p: Tensor) -> Tensor:
    """Column-wise maximum of a matrix; the gradient flows only to each
    column's first-reached maximum row."""
    if p.data.ndim != 2:
        raise ShapeError("maxpool_rows expects a matrix")
    if p.data.shape[0] == 0:
        raise ShapeError("maxpool_rows of zero rows")
    arg = p.data.argmax(axis=0)
    y = p.data[arg, np.arange(p.data.shape[1])]
    out = _make(y, p.requires_grad, "maxpool_rows")

    def grads(g):
        dp = np.zeros_like(p.data)
        dp[arg, np.arange(p.data.shape[1])] = g
        return (dp,)

    return _record(out, (p,), grads)
