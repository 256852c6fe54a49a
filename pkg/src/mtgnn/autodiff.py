"""Small dense reverse-mode autodiff engine on top of numpy.

Every tensor is a 2-D float64 array. Operations executed while a :class:`Tape`
is active, and with at least one input requiring gradients, are recorded on
that tape; :func:`backward` walks the record in exact reverse order.

    >>> with Tape():
    ...     x = Tensor(np.ones((2, 2)), requires_grad=True)
    ...     loss = tsum(mul(x, x))
    >>> backward(loss)
    >>> x.grad
    array([[2., 2.],
           [2., 2.]])
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
from scipy import sparse, special


class ShapeMismatch(ValueError):
    pass


class IndexOutOfRange(IndexError):
    pass


class NotScalar(ValueError):
    pass


class TapeConsumed(RuntimeError):
    pass


class DegenerateBatch(ValueError):
    pass


class InvalidProbability(ValueError):
    pass


class Tensor:
    __slots__ = ("values", "requires_grad", "grad", "name", "_tape")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        arr = np.array(values, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(-1, 1)
        elif arr.ndim != 2:
            raise ShapeMismatch(f"tensors are 2-D, got ndim={arr.ndim}")
        self.values = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.values.size != 1:
            raise NotScalar(f"item() on shape {self.shape}")
        return float(self.values[0, 0])

    def numpy(self) -> np.ndarray:
        return self.values

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


class _Record:
    __slots__ = ("inputs", "output", "rule")

    def __init__(self, inputs, output, rule):
        self.inputs = inputs
        self.output = output
        self.rule = rule


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations run inside the block are appended in
    execution order. A tape can be walked backward once.
    """

    _local = threading.local()

    def __init__(self):
        self.records: list[_Record] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        stack = self._stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        self._stack().pop()

    @classmethod
    def _stack(cls) -> list["Tape"]:
        if not hasattr(cls._local, "stack"):
            cls._local.stack = []
        return cls._local.stack

    @classmethod
    def active(cls) -> "Tape | None":
        stack = cls._stack()
        return stack[-1] if stack else None

    def __len__(self) -> int:
        return len(self.records)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(values: np.ndarray, inputs: Sequence[Tensor], rule: Callable) -> Tensor:
    """Wrap ``values`` and record ``rule`` when any input needs a gradient.

    ``rule(g)`` maps the upstream gradient to one gradient per input
    (``None`` where an input does not need one).
    """
    needs = any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.values = values
    out.requires_grad = needs
    out.grad = None
    out.name = None
    out._tape = None
    tape = Tape.active()
    if needs and tape is not None:
        if tape.consumed:
            raise TapeConsumed("cannot record on a tape that was already walked backward")
        tape.records.append(_Record(tuple(inputs), out, rule))
        out._tape = tape
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    # only row/column-vector and scalar broadcasting is supported
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise ShapeMismatch(f"{op}: cannot combine {a.shape} and {b.shape}")


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    av, bv = a.values, b.values

    def rule(g):
        return (g @ bv.T if a.requires_grad else None, av.T @ g if b.requires_grad else None)

    return _make(av @ bv, (a, b), rule)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.values + b.values, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.values - b.values, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with row/column-vector broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    av, bv = a.values, b.values

    def rule(g):
        ga = _unbroadcast(g * bv, av.shape) if a.requires_grad else None
        gb = _unbroadcast(g * av, bv.shape) if b.requires_grad else None
        return ga, gb

    return _make(av * bv, (a, b), rule)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.values * c, (x,), lambda g: (g * c,))


def add_scalar(x: Tensor, c: float) -> Tensor:
    return _make(x.values + float(c), (x,), lambda g: (g,))


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[0] != b.shape[0]:
        raise ShapeMismatch(f"concat_cols: {a.shape} and {b.shape}")
    k = a.shape[1]
    return _make(np.hstack([a.values, b.values]), (a, b), lambda g: (g[:, :k], g[:, k:]))


def tsum(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.array([[x.values.sum()]]), (x,), lambda g: (np.full(shape, g[0, 0]),))


# ---------------------------------------------------------------- elementwise


def relu(x: Tensor) -> Tensor:
    mask = x.values > 0
    return _make(x.values * mask, (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    factor = np.where(x.values > 0, 1.0, slope)
    return _make(x.values * factor, (x,), lambda g: (g * factor,))


def sigmoid(x: Tensor) -> Tensor:
    out = special.expit(x.values)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.values)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),))


def square(x: Tensor) -> Tensor:
    v = x.values
    return _make(v * v, (x,), lambda g: (2.0 * v * g,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.values)

    def rule(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out > 0, 0.5 / out, 0.0)
        return (g * d,)

    return _make(out, (x,), rule)


# ---------------------------------------------------------------- graph ops


def _check_index(index: np.ndarray, segments: int) -> np.ndarray:
    index = np.asarray(index, dtype=np.int64).ravel()
    if index.size and (index.min() < 0 or index.max() >= segments):
        raise IndexOutOfRange(f"index outside [0, {segments})")
    return index


def _segment_rows(values: np.ndarray, index: np.ndarray, segments: int) -> np.ndarray:
    """Row sums grouped by ``index``; same addition order as ``np.add.at``, much faster."""
    if values.shape[0] == 0:
        return np.zeros((segments, values.shape[1]))
    ones = np.ones(index.size)
    sel = sparse.csr_matrix((ones, (index, np.arange(index.size))), shape=(segments, index.size))
    return np.asarray(sel @ values)


def gather_rows(x: Tensor, index) -> Tensor:
    """out[i] = x[index[i]]."""
    index = _check_index(index, x.shape[0])
    n = x.shape[0]

    def rule(g):
        return (_segment_rows(g, index, n),)

    return _make(x.values[index], (x,), rule)


def scatter_sum(src: Tensor, index, segments: int) -> Tensor:
    """out[s] = sum of src rows whose index equals s; empty segments are zero."""
    index = _check_index(index, segments)
    if index.size != src.shape[0]:
        raise ShapeMismatch(f"scatter_sum: {index.size} indices for {src.shape[0]} rows")
    out = _segment_rows(src.values, index, segments)
    return _make(out, (src,), lambda g: (g[index],))


def softmax_segments(scores: Tensor, index, segments: int | None = None) -> Tensor:
    """Softmax of a column of scores within each segment, max-stabilized."""
    if scores.shape[1] != 1:
        raise ShapeMismatch(f"softmax_segments expects n x 1 scores, got {scores.shape}")
    index = np.asarray(index, dtype=np.int64).ravel()
    if segments is None:
        segments = int(index.max()) + 1 if index.size else 0
    index = _check_index(index, segments)
    if index.size != scores.shape[0]:
        raise ShapeMismatch("softmax_segments: index length differs from score count")
    s = scores.values[:, 0]
    seg_max = np.full(segments, -np.inf)
    np.maximum.at(seg_max, index, s)
    e = np.exp(s - seg_max[index])
    denom = np.zeros(segments)
    np.add.at(denom, index, e)
    out = (e / denom[index]).reshape(-1, 1)

    def rule(g):
        dot = np.zeros(segments)
        np.add.at(dot, index, out[:, 0] * g[:, 0])
        return (out * (g - dot[index].reshape(-1, 1)),)

    return _make(out, (scores,), rule)


# ---------------------------------------------------------------- normalization / noise


class BatchNormState:
    """Running statistics for one batchnorm layer (not trained by the optimizer)."""

    def __init__(self, width: int, momentum: float = 0.1, eps: float = 1e-5):
        self.running_mean = np.zeros((1, width))
        self.running_var = np.ones((1, width))
        self.momentum = momentum
        self.eps = eps


def batchnorm(x: Tensor, state: BatchNormState, gamma: Tensor, beta: Tensor,
              mode: str = "train") -> Tensor:
    """Column-wise batch normalization followed by ``gamma * xhat + beta``.

    Train mode normalizes with the batch's population variance and folds the
    unbiased variance into the running estimate; eval mode uses the running
    estimate only.
    """
    n = x.shape[0]
    if mode == "train":
        if n < 2:
            raise DegenerateBatch(f"batchnorm needs >= 2 rows in train mode, got {n}")
        mu = x.values.mean(axis=0, keepdims=True)
        var = x.values.var(axis=0, keepdims=True)
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mu
        state.running_var = (1 - m) * state.running_var + m * var * n / (n - 1)
        inv = 1.0 / np.sqrt(var + state.eps)
        xhat = (x.values - mu) * inv
        gv = gamma.values

        def rule(g):
            gx = None
            if x.requires_grad:
                dxhat = g * gv
                gx = inv / n * (n * dxhat - dxhat.sum(0, keepdims=True)
                                - xhat * (dxhat * xhat).sum(0, keepdims=True))
            ggamma = (g * xhat).sum(0, keepdims=True) if gamma.requires_grad else None
            gbeta = g.sum(0, keepdims=True) if beta.requires_grad else None
            return gx, ggamma, gbeta

        return _make(xhat * gv + beta.values, (x, gamma, beta), rule)
    if mode != "eval":
        raise ValueError(f"unknown mode {mode!r}")
    inv = 1.0 / np.sqrt(state.running_var + state.eps)
    xhat = (x.values - state.running_mean) * inv
    gv = gamma.values

    def rule_eval(g):
        return (g * gv * inv if x.requires_grad else None,
                (g * xhat).sum(0, keepdims=True) if gamma.requires_grad else None,
                g.sum(0, keepdims=True) if beta.requires_grad else None)

    return _make(xhat * gv + beta.values, (x, gamma, beta), rule_eval)


def dropout(x: Tensor, p: float, mode: str, rng: np.random.Generator | None) -> Tensor:
    if not 0.0 <= p < 1.0:
        raise InvalidProbability(f"dropout probability must be in [0, 1), got {p}")
    if mode == "eval" or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _make(x.values * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------- backward


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor upstream of ``loss`` that requires it."""
    if loss.shape != (1, 1):
        raise NotScalar(f"backward needs a 1x1 loss, got {loss.shape}")
    tape = loss._tape
    if tape is None:
        if not loss.requires_grad:
            return  # constant loss: nothing upstream is trainable
        raise ValueError("loss was not produced on a tape")
    if tape.consumed:
        raise TapeConsumed("tape already walked backward; run a fresh forward pass")
    tape.consumed = True
    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.rule(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if inp._tape is None:
                # leaf: accumulate into .grad
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
                del grads[key]
    # records and outputs reference each other; drop them so the arrays free promptly
    tape.records.clear()
