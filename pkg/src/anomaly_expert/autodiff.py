"""Dense tensors with reverse-mode differentiation.

Only the handful of operations the anomaly expert needs are provided.  Every
op records its parents and a closure that pushes the output gradient back to
them; :func:`backward` walks the recorded graph once in reverse order.

Two numeric modes exist: ``float32`` for training and ``float64`` for gradient
checking.  The mode is global (see :func:`set_precision` / :func:`precision`).
"""
from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "NumericError",
    "Tensor",
    "add",
    "backward",
    "clamp",
    "concat",
    "cosine_similarity",
    "div",
    "exp",
    "get_dtype",
    "grad_check",
    "linear",
    "log",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "precision",
    "relu",
    "rows",
    "cols",
    "scale",
    "scale_rows",
    "set_precision",
    "sigmoid",
    "softmax_pair",
    "softmax_rows",
    "sub",
    "sum",
    "topo_order",
]


class NumericError(ArithmeticError):
    """Raised when an op produces NaN/Inf or receives a degenerate input."""


_DTYPES = {"single": np.float32, "double": np.float64}
_state = {"dtype": np.float32}
_local = threading.local()


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


def set_precision(mode: str) -> None:
    if mode not in _DTYPES:
        raise ValueError(f"unknown precision {mode!r}; expected 'single' or 'double'")
    _state["dtype"] = _DTYPES[mode]


def get_dtype() -> type:
    return _state["dtype"]


@contextlib.contextmanager
def precision(mode: str):
    previous = _state["dtype"]
    set_precision(mode)
    try:
        yield
    finally:
        _state["dtype"] = previous


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    previous = _grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


class Tensor:
    """A row-major array plus an optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, *, dtype=None):
        arr = np.array(data, dtype=dtype or _state["dtype"], copy=True)
        if not np.isfinite(arr).all():
            raise NumericError("tensor constructed from non-finite values")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar()

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar for the common elementwise cases
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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _not_scalar():
    raise ValueError("item() requires a single-element tensor")


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    data = np.asarray(data, dtype=_state["dtype"])
    if not np.isfinite(data).all():
        raise NumericError(f"non-finite values produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    track = _grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.data.dtype).reshape(t.data.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if b.size == 1 and a.shape != b.shape:
        return _scalar_add(a, b)
    if a.size == 1 and b.size != 1:
        return _scalar_add(b, a)
    _check_same_shape(a, b, "add")

    def bw(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _result(a.data + b.data, (a, b), bw, "add")


def _scalar_add(t: Tensor, s: Tensor) -> Tensor:
    def bw(g):
        _accumulate(t, g)
        _accumulate(s, np.sum(g))

    return _result(t.data + s.data.reshape(()), (t, s), bw, "add")


def sub(a, b) -> Tensor:
    return add(a, scale(_as_tensor(b), -1.0))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if b.size == 1 and a.shape != b.shape:
        return _scalar_mul(a, b)
    if a.size == 1 and b.size != 1:
        return _scalar_mul(b, a)
    _check_same_shape(a, b, "mul")

    def bw(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _result(a.data * b.data, (a, b), bw, "mul")


def _scalar_mul(t: Tensor, s: Tensor) -> Tensor:
    sv = s.data.reshape(())

    def bw(g):
        _accumulate(t, g * sv)
        _accumulate(s, np.sum(g * t.data))

    return _result(t.data * sv, (t, s), bw, "mul")


def scale(t: Tensor, c: float) -> Tensor:
    """Multiply by a constant python scalar."""
    t = _as_tensor(t)
    c = float(c)

    def bw(g):
        _accumulate(t, g * c)

    return _result(t.data * c, (t,), bw, "scale")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if (b.data == 0).any():
        raise NumericError("division by zero")
    if b.size == 1 and a.shape != b.shape:
        bv = b.data.reshape(())

        def bw_s(g):
            _accumulate(a, g / bv)
            _accumulate(b, -np.sum(g * a.data) / (bv * bv))

        return _result(a.data / bv, (a, b), bw_s, "div")
    _check_same_shape(a, b, "div")

    def bw(g):
        _accumulate(a, g / b.data)
        _accumulate(b, -g * a.data / (b.data * b.data))

    return _result(a.data / b.data, (a, b), bw, "div")


def relu(t: Tensor) -> Tensor:
    mask = t.data > 0

    def bw(g):
        _accumulate(t, g * mask)

    return _result(np.where(mask, t.data, 0.0), (t,), bw, "relu")


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(t: Tensor) -> Tensor:
    y = _stable_sigmoid(t.data)

    def bw(g):
        _accumulate(t, g * y * (1.0 - y))

    return _result(y, (t,), bw, "sigmoid")


def exp(t: Tensor) -> Tensor:
    y = np.exp(t.data)

    def bw(g):
        _accumulate(t, g * y)

    return _result(y, (t,), bw, "exp")


def log(t: Tensor) -> Tensor:
    if (t.data <= 0).any():
        raise NumericError("log of non-positive value")

    def bw(g):
        _accumulate(t, g / t.data)

    return _result(np.log(t.data), (t,), bw, "log")


def clamp(t: Tensor, lo: float, hi: float) -> Tensor:
    inside = (t.data >= lo) & (t.data <= hi)

    def bw(g):
        _accumulate(t, g * inside)

    return _result(np.clip(t.data, lo, hi), (t,), bw, "clamp")


# ---------------------------------------------------------------------------
# reductions and structure


def sum(t: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    shape = t.shape

    def bw(g):
        if axis is None:
            _accumulate(t, np.broadcast_to(g, shape))
        else:
            _accumulate(t, np.broadcast_to(np.expand_dims(g, axis), shape))

    return _result(np.sum(t.data, axis=axis), (t,), bw, "sum")


def mean(t: Tensor, axis: int | None = None) -> Tensor:
    n = t.size if axis is None else t.shape[axis]
    return scale(sum(t, axis), 1.0 / n)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ValueError("concat of zero tensors")
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                _accumulate(p, np.take(g, np.arange(lo, hi), axis=axis))

    return _result(np.concatenate([p.data for p in parts], axis=axis), parts, bw, "concat")


def rows(t: Tensor, start: int, stop: int) -> Tensor:
    """Slice ``t[start:stop]`` along the first axis."""
    shape = t.shape

    def bw(g):
        full = np.zeros(shape, dtype=t.data.dtype)
        full[start:stop] = g
        _accumulate(t, full)

    return _result(t.data[start:stop], (t,), bw, "rows")


def cols(t: Tensor, start: int, stop: int) -> Tensor:
    """Slice ``t[:, start:stop]`` of a matrix."""
    shape = t.shape

    def bw(g):
        full = np.zeros(shape, dtype=t.data.dtype)
        full[:, start:stop] = g
        _accumulate(t, full)

    return _result(t.data[:, start:stop], (t,), bw, "cols")


def scale_rows(x: Tensor, w: Tensor) -> Tensor:
    """Multiply row ``t`` of matrix ``x`` by ``w[t]`` (channel broadcast of a token weight)."""
    if x.data.ndim != 2 or w.shape != (x.shape[0],):
        raise ValueError(f"scale_rows: incompatible shapes {x.shape} and {w.shape}")

    def bw(g):
        _accumulate(x, g * w.data[:, None])
        _accumulate(w, np.sum(g * x.data, axis=1))

    return _result(x.data * w.data[:, None], (x, w), bw, "scale_rows")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor, transpose_b: bool = False) -> Tensor:
    """``a @ b`` (or ``a @ b.T``) for a vector or matrix ``a`` and a matrix ``b``."""
    a, b = _as_tensor(a), _as_tensor(b)
    bd = b.data.T if transpose_b else b.data
    if bd.ndim != 2 or a.data.ndim not in (1, 2) or a.shape[-1] != bd.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {bd.shape}")

    def bw(g):
        if a.data.ndim == 1:
            ga, gb = bd @ g, np.outer(a.data, g)
        else:
            ga, gb = g @ bd.T, a.data.T @ g
        _accumulate(a, ga)
        _accumulate(b, gb.T if transpose_b else gb)

    return _result(a.data @ bd, (a, b), bw, "matmul")


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ W + b`` with ``b`` added to every row."""
    if x.shape[-1] != W.shape[0]:
        raise ValueError(f"linear: input width {x.shape[-1]} does not match weight {W.shape}")
    if b is not None and b.shape != (W.shape[1],):
        raise ValueError(f"linear: bias shape {b.shape} does not match weight {W.shape}")
    squeeze = x.data.ndim == 1
    xd = x.data[None, :] if squeeze else x.data
    out = xd @ W.data
    if b is not None:
        out = out + b.data

    def bw(g):
        g2 = g[None, :] if squeeze else g
        _accumulate(x, (g2 @ W.data.T).reshape(x.shape))
        _accumulate(W, xd.T @ g2)
        if b is not None:
            _accumulate(b, np.sum(g2, axis=0))

    parents = (x, W) if b is None else (x, W, b)
    return _result(out[0] if squeeze else out, parents, bw, "linear")


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of two vectors, or of every row of ``a`` with vector ``b``.

    No epsilon is added: a zero-norm operand raises :class:`NumericError`.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if b.data.ndim != 1 or a.shape[-1] != b.shape[0]:
        raise ValueError(f"cosine_similarity: incompatible shapes {a.shape} and {b.shape}")
    na = np.linalg.norm(a.data, axis=-1)
    nb = np.linalg.norm(b.data)
    if nb == 0 or np.any(na == 0):
        raise NumericError("cosine_similarity: degenerate (zero-norm) vector")
    dots = a.data @ b.data
    c = dots / (na * nb)

    def bw(g):
        if a.data.ndim == 1:
            if a.requires_grad:
                _accumulate(a, g * (b.data / (na * nb) - c * a.data / (na * na)))
            if b.requires_grad:
                _accumulate(b, g * (a.data / (na * nb) - c * b.data / (nb * nb)))
            return
        if a.requires_grad:
            ga = b.data[None, :] / (na * nb)[:, None] - (c / (na * na))[:, None] * a.data
            _accumulate(a, g[:, None] * ga)
        if b.requires_grad:
            gb = (g / (na * nb)) @ a.data - np.sum(g * c) * b.data / (nb * nb)
            _accumulate(b, gb)

    return _result(c, (a, b), bw, "cosine_similarity")


def softmax_pair(s_plus: Tensor, s_minus: Tensor, tau: float | Tensor) -> Tensor:
    """``exp(s+/tau) / (exp(s+/tau) + exp(s-/tau))`` elementwise, max-subtracted."""
    s_plus, s_minus = _as_tensor(s_plus), _as_tensor(s_minus)
    _check_same_shape(s_plus, s_minus, "softmax_pair")
    tau_t = tau if isinstance(tau, Tensor) else None
    tv = float(tau_t.data.reshape(())) if tau_t is not None else float(tau)
    if not tv > 0:
        raise ValueError(f"softmax_pair: temperature must be positive, got {tv}")
    a = s_plus.data / tv
    b = s_minus.data / tv
    m = np.maximum(a, b)
    ea = np.exp(a - m)
    eb = np.exp(b - m)
    y = ea / (ea + eb)

    def bw(g):
        dy = g * y * (1.0 - y)
        _accumulate(s_plus, dy / tv)
        _accumulate(s_minus, -dy / tv)
        if tau_t is not None:
            _accumulate(tau_t, np.sum(-dy * (s_plus.data - s_minus.data) / (tv * tv)))

    parents = (s_plus, s_minus) if tau_t is None else (s_plus, s_minus, tau_t)
    return _result(y, parents, bw, "softmax_pair")


def softmax_rows(t: Tensor) -> Tensor:
    """Softmax over the last axis of a matrix."""
    z = t.data - np.max(t.data, axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=-1, keepdims=True)

    def bw(g):
        _accumulate(t, y * (g - np.sum(g * y, axis=-1, keepdims=True)))

    return _result(y, (t,), bw, "softmax_rows")


# ---------------------------------------------------------------------------
# graph traversal


def topo_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` in execution (topological) order."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad.

    The recorded graph is consumed: interior nodes drop their closures so a
    second call on the same loss is an error.
    """
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    if loss._backward is None and loss._parents == () and loss.op != "leaf":
        raise RuntimeError("graph already consumed by a previous backward()")
    order = topo_order(loss)
    loss.grad = np.ones(loss.shape, dtype=loss.data.dtype)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for node in order:
        if node._parents:
            node._parents = ()
            node._backward = None
            node.grad = None


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(
    f: Callable[..., Tensor],
    inputs: Iterable[Tensor],
    h: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps the given tensors to a scalar tensor.  Relative error per
    coordinate is ``|a - n| / max(1e-8, |a| + |n|)``.  Run under double
    precision; perturbations are applied in place and restored.
    """
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = f(*inputs)
    backward(out)
    analytic = [
        t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs
    ]
    worst = 0.0
    with no_grad():
        for t, ga in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            gflat = ga.reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + h
                fp = float(f(*inputs).data.reshape(()))
                flat[k] = orig - h
                fm = float(f(*inputs).data.reshape(()))
                flat[k] = orig
                num = (fp - fm) / (2.0 * h)
                ana = float(gflat[k])
                err = abs(ana - num) / max(1e-8, abs(ana) + abs(num))
                if not math.isfinite(err):
                    raise NumericError("grad_check produced a non-finite error")
                worst = max(worst, err)
    for t in inputs:
        t.grad = None
    return worst
