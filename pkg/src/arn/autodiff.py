"""Dense float64 tensors with a reverse-mode tape and a finite-difference checker.

Recording is explicit: ops are written to the tape opened with ``with Tape():``.
Outside a tape every op still computes its value, it just leaves no trace, which
is what evaluation and finite differencing want.

    >>> x = Tensor([3.0], requires_grad=True)
    >>> with Tape():
    ...     loss = l2_sq(x)
    ...     backward(loss)
    >>> x.grad
    array([6.])
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import (
    ArnError,
    EmptyInput,
    IndexOutOfRange,
    InvalidSlope,
    NonScalarLoss,
    NotADistribution,
    ShapeMismatch,
    TapeConsumed,
)

LOG_FLOOR = 1e-12

_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("arn_tape", default=None)


class MissingTape(ArnError, RuntimeError):
    code = "missing_tape"


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_tape", "_op")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        # leaves that need gradients own a buffer from the start, so an unreached
        # leaf reads as zero after backward
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._tape = None
        self._op = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._op is None

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Op:
    name: str
    inputs: tuple
    out: Tensor
    backward: Callable


class Tape:
    """Ordered record of executed ops; single use per forward pass."""

    def __init__(self):
        self.ops: list[_Op] = []
        self.consumed = False
        self._tokens = []

    def __enter__(self):
        self._tokens.append(_active_tape.set(self))
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._tokens.pop())
        return False

    def __len__(self):
        return len(self.ops)

    def reset(self):
        self.ops.clear()
        self.consumed = False

    def record(self, name, inputs, out, backward_fn):
        if self.consumed:
            raise TapeConsumed("tape already replayed; call reset() before recording again")
        op = _Op(name, inputs, out, backward_fn)
        self.ops.append(op)
        out._tape = self
        out._op = op


def current_tape():
    return _active_tape.get()


class no_tape:
    """Suspend recording, e.g. for evaluation inside a training step."""

    def __enter__(self):
        self._token = _active_tape.set(None)

    def __exit__(self, *exc):
        _active_tape.reset(self._token)
        return False


def _emit(name, out_data, inputs, backward_fn) -> Tensor:
    requires = any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = requires
    out.grad = None
    out.name = None
    out._tape = None
    out._op = None
    tape = _active_tape.get()
    if requires and tape is not None:
        tape.record(name, inputs, out, backward_fn)
    return out


def unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as e:
        raise ShapeMismatch(f"add: {a.shape} vs {b.shape}") from e
    return _emit("add", out, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError as e:
        raise ShapeMismatch(f"sub: {a.shape} vs {b.shape}") from e
    return _emit("sub", out, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as e:
        raise ShapeMismatch(f"mul: {a.shape} vs {b.shape}") from e

    def back(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit("mul", out, (a, b), back)


def leaky_relu(x, slope=0.2) -> Tensor:
    """Identity for x >= 0, ``slope * x`` below; the derivative at 0 is taken as 1."""
    if not 0.0 < slope < 1.0:
        raise InvalidSlope(f"slope must lie in (0, 1), got {slope}")
    x = as_tensor(x)
    pos = x.data >= 0
    out = np.where(pos, x.data, slope * x.data)
    return _emit("leaky_relu", out, (x,), lambda g: (np.where(pos, g, slope * g),))


# ---------------------------------------------------------------------------
# linear algebra and structure


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def back(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _emit("matmul", out, (a, b), back)


def concat(xs: Sequence, axis=0) -> Tensor:
    if len(xs) == 0:
        raise EmptyInput("concat of an empty list")
    xs = tuple(as_tensor(x) for x in xs)
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as e:
        raise ShapeMismatch(f"concat along {axis}: {[x.shape for x in xs]}") from e
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", out, xs, back)


def total(x) -> Tensor:
    """Sum of every entry, as a 0-d tensor."""
    x = as_tensor(x)
    return _emit("sum", np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)
    return _emit("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def scatter_rows(index, values, n_rows):
    """Sum ``values`` rows into ``n_rows`` buckets; deterministic, faster than ``np.add.at``."""
    out = np.zeros((n_rows,) + values.shape[1:])
    if len(index) == 0:
        return out
    order = np.argsort(index, kind="stable")
    idx = index[order]
    starts = np.flatnonzero(np.r_[True, idx[1:] != idx[:-1]])
    out[idx[starts]] = np.add.reduceat(values[order], starts, axis=0)
    return out


def take(x, key) -> Tensor:
    """Basic numpy indexing (slices, ints) with a scatter-back gradient."""
    x = as_tensor(x)
    out = np.array(x.data[key])

    def back(g):
        gx = np.zeros_like(x.data)
        gx[key] = g
        return (gx,)

    return _emit("take", out, (x,), back)


def gather_rows(x, index) -> Tensor:
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.intp)
    if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
        raise IndexOutOfRange(f"row index outside [0, {x.shape[0]})")
    out = x.data[index]

    return _emit("gather_rows", out, (x,), lambda g: (scatter_rows(index, g, x.shape[0]),))


def segment_sum(x, segment, n_segments) -> Tensor:
    """Row-wise sum of ``x`` into ``n_segments`` buckets given per-row bucket ids."""
    x = as_tensor(x)
    segment = np.asarray(segment, dtype=np.intp)
    if segment.shape[0] != x.shape[0]:
        raise ShapeMismatch(f"segment ids {segment.shape} for rows {x.shape}")
    out = scatter_rows(segment, x.data, n_segments)
    return _emit("segment_sum", out, (x,), lambda g: (g[segment],))


# ---------------------------------------------------------------------------
# normalisers and losses


def _softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(x) -> Tensor:
    """Softmax along the last axis with max subtraction."""
    x = as_tensor(x)
    y = _softmax_np(x.data)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit("softmax_rows", y, (x,), back)


def segment_softmax(x, segment, n_segments) -> Tensor:
    """Softmax over the entries of a 1-d ``x`` sharing a segment id."""
    x = as_tensor(x)
    segment = np.asarray(segment, dtype=np.intp)
    if x.data.ndim != 1 or segment.shape != x.shape:
        raise ShapeMismatch(f"segment_softmax wants matching 1-d inputs, got {x.shape}, {segment.shape}")
    peak = np.full(n_segments, -np.inf)
    np.maximum.at(peak, segment, x.data)
    e = np.exp(x.data - peak[segment])
    denom = np.bincount(segment, weights=e, minlength=n_segments)
    y = e / denom[segment]

    def back(g):
        gy = g * y
        s = np.bincount(segment, weights=gy, minlength=n_segments)
        return (gy - y * s[segment],)

    return _emit("segment_softmax", y, (x,), back)


def cross_entropy(probs, target) -> Tensor:
    """Summed ``-log p[target]`` over rows; probabilities floored at 1e-12.

    ``probs`` is one distribution (1-d, ``target`` an int) or a stack of them
    (2-d, ``target`` an int array).
    """
    probs = as_tensor(probs)
    p = probs.data
    single = p.ndim == 1
    p2 = p[None, :] if single else p
    tgt = np.atleast_1d(np.asarray(target, dtype=np.intp))
    if tgt.shape[0] != p2.shape[0]:
        raise ShapeMismatch(f"{tgt.shape[0]} targets for {p2.shape[0]} rows")
    if tgt.size and (tgt.min() < 0 or tgt.max() >= p2.shape[1]):
        raise IndexOutOfRange(f"class index outside [0, {p2.shape[1]})")
    if np.any(np.abs(p2.sum(axis=1) - 1.0) > 1e-6) or np.any(p2 < 0):
        raise NotADistribution("rows must be non-negative and sum to 1")
    rows = np.arange(p2.shape[0])
    picked = p2[rows, tgt]
    clamped = np.maximum(picked, LOG_FLOOR)
    out = np.array(-np.log(clamped).sum())

    def back(g):
        gp = np.zeros_like(p2)
        live = picked > LOG_FLOOR
        gp[rows[live], tgt[live]] = -g / picked[live]
        return (gp[0] if single else gp,)

    return _emit("cross_entropy", out, (probs,), back)


def l2_sq(x) -> Tensor:
    x = as_tensor(x)
    return _emit("l2_sq", np.array(np.sum(x.data * x.data)), (x,), lambda g: (2.0 * g * x.data,))


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor) -> None:
    """Replay the loss's tape in reverse, accumulating into leaf ``grad`` buffers."""
    if loss.data.size != 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        if loss.is_leaf and loss.requires_grad:
            loss.grad = loss.grad + np.ones_like(loss.data)
            return
        raise MissingTape("loss was not computed under an active Tape")
    if tape.consumed:
        raise TapeConsumed("backward already ran on this tape")

    pending = {id(loss): np.ones_like(loss.data)}
    for op in reversed(tape.ops):
        g = pending.pop(id(op.out), None)
        if g is None:
            continue
        in_grads = op.backward(g)
        for t, gi in zip(op.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t._op is None:
                if t.grad is None or t.grad.shape != t.data.shape:
                    t.grad = np.zeros_like(t.data)
                t.grad += gi
            else:
                key = id(t)
                pending[key] = pending[key] + gi if key in pending else gi
    tape.consumed = True
    tape.ops.clear()


# ---------------------------------------------------------------------------
# finite-difference oracle


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    n_checked: int
    worst: tuple | None = None
    per_param: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error <= self.tol)

    def to_dict(self):
        return {
            "passed": self.passed,
            "max_rel_error": self.max_rel_error,
            "tol": self.tol,
            "n_checked": self.n_checked,
            "worst": list(self.worst) if self.worst else None,
            "per_param": self.per_param,
        }


def analytic_grads(f: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    for p in params:
        p.zero_grad()
    with Tape():
        loss = f()
        backward(loss)
    return [p.grad.copy() for p in params]


def grad_check(f, params, h=1e-5, tol=1e-4, floor=1e-3, analytic=None, max_entries=None, seed=0):
    """Compare analytic gradients of scalar ``f()`` with central differences.

    The per-entry error is ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps
    round-off on near-zero gradients from reading as a large relative error.
    ``analytic`` overrides the tape gradients (negative controls).
    ``max_entries`` samples that many entries per parameter instead of all.
    Failures are reported, never raised.
    """
    params = list(params)
    if analytic is None:
        analytic = analytic_grads(f, params)
    rng = np.random.default_rng(seed)
    token = _active_tape.set(None)
    try:
        return _fd_compare(f, params, analytic, h, tol, floor, max_entries, rng)
    finally:
        _active_tape.reset(token)


def _fd_compare(f, params, analytic, h, tol, floor, max_entries, rng):
    worst_err, worst, n = 0.0, None, 0
    per_param = []
    for k, (p, a) in enumerate(zip(params, analytic)):
        flat = p.data.reshape(-1)
        a_flat = np.asarray(a, dtype=np.float64).reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        p_err = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up = float(f().data)
            flat[i] = orig - h
            down = float(f().data)
            flat[i] = orig
            num = (up - down) / (2.0 * h)
            err = abs(a_flat[i] - num) / max(abs(a_flat[i]), abs(num), floor)
            if not np.isfinite(err):
                err = np.inf
            n += 1
            p_err = max(p_err, err)
            if worst is None or err > worst_err:
                worst_err, worst = err, (p.name or k, int(i), float(a_flat[i]), float(num))
        per_param.append({"param": p.name or k, "max_rel_error": p_err})
    return GradCheckReport(float(worst_err), tol, n, worst, per_param)
