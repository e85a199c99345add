"""Dense 2-D tensors with define-by-run reverse-mode differentiation.

Operations record onto the innermost active :class:`Tape` whenever one of
their inputs requires a gradient.  Outside a tape every op is a plain numpy
computation, which is what evaluation and finite-difference probing use.

    >>> w = Tensor([[1.0, 2.0, 3.0]], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = tsum(w * w)
    >>> tape.backward(loss)[w]
    array([[2., 4., 6.]])
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import NumericError, ParameterError, ShapeError, UsageError

BCE_EPS = 1e-12

_state = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """A 2-D float64 array, optionally tracked on a gradient tape."""

    __slots__ = ("data", "requires_grad", "name", "_tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got array of shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._tape = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        out.data = arr
        out.requires_grad = False
        out.name = None
        out._tape = None
        return out

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def tape_id(self) -> int | None:
        return None if self._tape is None else id(self._tape)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, so the list is already
    topologically sorted and backward is a single reverse sweep.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.grads: dict[int, np.ndarray] = {}

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable) -> None:
        out.requires_grad = True
        out._tape = self
        self.nodes.append((out, inputs, backward_fn))

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Propagate d(loss)/d(.) to every leaf that requires a gradient.

        Returns a mapping from leaf tensor to its adjoint.  ``self.grads``
        keeps the same adjoints keyed by ``id``.
        """
        if loss._tape is not self:
            raise UsageError("backward() called on a value that is not recorded on this tape")
        if loss.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for out, inputs, fn in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for t, gi in zip(inputs, fn(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if t._tape is None:
                    leaves[key] = t
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
        self.grads = {k: grads[k] for k in leaves}
        return {t: grads[k] for k, t in leaves.items()}


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse sweep over the tape that produced ``loss``."""
    if loss._tape is None:
        raise UsageError("backward() called on a detached value; run the forward pass inside a Tape")
    return loss._tape.backward(loss)


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    out = Tensor._wrap(data)
    tape = _active_tape()
    if tape is not None:
        for t in inputs:
            if t.requires_grad:
                tape.record(out, inputs, backward_fn)
                break
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    (r1, c1), (r2, c2) = a.data.shape, b.data.shape
    if (r1 == r2 or r1 == 1 or r2 == 1) and (c1 == c2 or c1 == 1 or c2 == 1):
        return
    raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}")


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not conformable")
    ad, bd = a.data, b.data

    def back(g):
        return (g @ bd.T if a.requires_grad else None, ad.T @ g if b.requires_grad else None)

    return _make(ad @ bd, (a, b), back)


def spmm(mat, x: Tensor, mat_t=None) -> Tensor:
    """Multiply a constant (sparse or dense) matrix by a tensor.

    ``mat_t`` may carry a precomputed transpose for the backward pass.
    """
    x = as_tensor(x)
    if mat.shape[1] != x.data.shape[0]:
        raise ShapeError(f"spmm: shapes {mat.shape} and {x.shape} are not conformable")
    out = mat @ x.data
    if sp.issparse(out):
        out = out.toarray()

    def back(g):
        mt = mat.T if mat_t is None else mat_t
        return (np.asarray(mt @ g),)

    return _make(np.asarray(out), (x,), back)


def transpose(x: Tensor) -> Tensor:
    return _make(x.data.T.copy(), (x,), lambda g: (g.T,))


# -- elementwise ----------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.data.shape, b.data.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.data.shape, b.data.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def back(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _make(ad * bd, (a, b), back)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _make(out, (a, b), back)


def neg(x: Tensor) -> Tensor:
    return _make(-x.data, (x,), lambda g: (-g,))


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    # split by sign so neither branch overflows exp
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ez = np.exp(xd[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    scale = np.where(x.data > 0, 1.0, slope)
    return _make(x.data * scale, (x,), lambda g: (g * scale,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,))


def clamp_min(x: Tensor, floor: float) -> Tensor:
    mask = x.data > floor
    return _make(np.where(mask, x.data, floor), (x,), lambda g: (g * mask,))


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p) at train time."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise UsageError("training-mode dropout needs a random generator")
    scale = (rng.random(x.data.shape) >= p) / (1.0 - p)
    return _make(x.data * scale, (x,), lambda g: (g * scale,))


# -- reductions and indexing ---------------------------------------------------------


def tsum(x: Tensor, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    shape = x.data.shape
    if axis is None:
        out = np.array([[x.data.sum()]])
        return _make(out, (x,), lambda g: (np.broadcast_to(g, shape).copy(),))
    out = x.data.sum(axis=axis, keepdims=True)
    return _make(out, (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.data.size if axis is None else x.data.shape[axis]
    return tsum(x, axis) * (1.0 / n)


def norm(x: Tensor) -> Tensor:
    """Frobenius norm as a 1x1 tensor."""
    xd = x.data
    val = float(np.sqrt((xd * xd).sum()))

    def back(g):
        if val == 0.0:
            return (np.zeros_like(xd),)
        return (g * xd / val,)

    return _make(np.array([[val]]), (x,), back)


def take_rows(x: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)
    nrows = x.data.shape[0]

    def back(g):
        out = np.zeros((nrows, g.shape[1]))
        np.add.at(out, idx, g)
        return (out,)

    return _make(x.data[idx], (x,), back)


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    xs = tuple(as_tensor(x) for x in xs)
    sizes = [x.data.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([x.data for x in xs], axis=axis)
    return _make(out, xs, lambda g: tuple(np.split(g, splits, axis=axis)))


def segment_softmax(logits: Tensor, starts: np.ndarray) -> Tensor:
    """Softmax of a column vector within contiguous segments.

    ``starts`` holds the first row of each non-empty segment, ascending.
    """
    if logits.data.shape[1] != 1:
        raise ShapeError(f"segment_softmax expects a column vector, got {logits.shape}")
    z = logits.data[:, 0]
    starts = np.asarray(starts, dtype=np.intp)
    counts = np.diff(np.append(starts, z.size))
    zmax = np.repeat(np.maximum.reduceat(z, starts), counts)
    e = np.exp(z - zmax)
    denom = np.repeat(np.add.reduceat(e, starts), counts)
    alpha = (e / denom)[:, None]

    def back(g):
        dot = np.repeat(np.add.reduceat((alpha * g)[:, 0], starts), counts)[:, None]
        return (alpha * (g - dot),)

    return _make(alpha, (logits,), back)


# -- loss -----------------------------------------------------------------------------


def bce_loss(pred: Tensor, target) -> Tensor:
    """Mean binary cross-entropy over all entries of ``pred``."""
    pred = as_tensor(pred)
    y = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if y.ndim == 1:
        y = y.reshape(pred.data.shape) if y.size == pred.data.size else y
    if y.shape != pred.data.shape:
        raise ShapeError(f"bce_loss: prediction shape {pred.shape} vs target shape {y.shape}")
    p = pred.data
    pc = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    n = p.size
    val = -np.mean(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))
    inside = (p > BCE_EPS) & (p < 1.0 - BCE_EPS)

    def back(g):
        d = -(y / pc - (1.0 - y) / (1.0 - pc)) / n
        return (g * d * inside,)

    return _make(np.array([[val]]), (pred,), back)


# -- gradient oracle ----------------------------------------------------------------------


def check_gradients(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Largest relative gap between tape gradients and central differences.

    The gap for one entry is ``|analytic - numeric| / max(1, |numeric|)``.
    ``f`` must be deterministic; it is evaluated twice up front to check.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if x0.ndim < 2:
        x0 = Tensor(x0).data
    v1 = f(Tensor(x0.copy())).item()
    v2 = f(Tensor(x0.copy())).item()
    if not (v1 == v2 or (np.isnan(v1) and np.isnan(v2))):
        raise UsageError("function under check is not deterministic (two evaluations differ)")

    xt = Tensor(x0.copy(), requires_grad=True)
    with Tape() as tape:
        out = f(xt)
    if out.requires_grad:
        analytic = tape.backward(out).get(xt, np.zeros_like(x0))
    else:
        analytic = np.zeros_like(x0)

    numeric = np.zeros_like(x0)
    probe = x0.copy()
    for idx in np.ndindex(*x0.shape):
        orig = probe[idx]
        probe[idx] = orig + h
        fp = f(Tensor(probe.copy())).item()
        probe[idx] = orig - h
        fm = f(Tensor(probe.copy())).item()
        probe[idx] = orig
        numeric[idx] = (fp - fm) / (2.0 * h)
    gap = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(gap.max()) if gap.size else 0.0


def assert_finite(named: Iterable[tuple[str, np.ndarray]]) -> None:
    for name, arr in named:
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite values in {name}")
