"""Dense tensors with reverse-mode automatic differentiation.

Working precision is float32 for parameters and activations. Every kernel is
dtype-generic, so the test suite can run the same code in float64 when
checking gradients against a finite-difference oracle.

Usage pattern::

    with Tape() as tape:
        loss = cross_entropy_logits(matmul(x, w), targets)
        backward(loss)
    # x.grad / w.grad now hold dloss/dx, dloss/dw

Ops executed outside a Tape context run as plain forward computations and
record nothing.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence, Union

import numpy as np

DEFAULT_DTYPE = np.float32

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class GradientError(RuntimeError):
    """A gradient is missing, non-finite, or requested outside a tape."""


class Tensor:
    """A dense n-d float array plus an optional same-shape gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Small amount of operator sugar; the functional API below is primary.
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other, self.dtype), -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, dtype) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x), dtype=dtype)


class Tape:
    """Ordered record of differentiable operations.

    Ops executed inside a ``with tape:`` block append themselves in forward
    order, which is automatically topological. ``backward`` makes a single
    reverse sweep, visiting each recorded op exactly once and accumulating
    gradients additively across fan-out.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple, Callable]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        _TAPE_STACK.pop()
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, out: Tensor, inputs: tuple, backward_fn: Callable) -> None:
        self._nodes.append((out, inputs, backward_fn))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise GradientError("loss is not connected to any tensor requiring gradients")
        _accumulate(loss, np.ones_like(loss.data))
        for out, inputs, backward_fn in reversed(self._nodes):
            if out.grad is None:
                continue
            grads = backward_fn(out.grad)
            for inp, g in zip(inputs, grads):
                if g is not None and inp.requires_grad:
                    _accumulate(inp, g)


_TAPE_STACK: list[Tape] = []


def _active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    # Never accumulate in place: adopted gradients may alias another
    # tensor's buffer (pass-through backwards), and nothing ever mutates a
    # grad array once set, so aliasing is harmless and copies unnecessary.
    t.grad = g if t.grad is None else t.grad + g


def _record(out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(i.requires_grad for i in inputs):
        out.requires_grad = True
        tape.record(out, tuple(inputs), backward_fn)
    return out


def backward(loss: Tensor) -> None:
    """Reverse sweep of the innermost active tape from a scalar loss."""
    tape = _active_tape()
    if tape is None:
        raise GradientError("backward() called outside of a Tape context")
    tape.backward(loss)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (undo numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _swap_last(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes; leading axes broadcast."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got shapes {a.shape} and {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree for shapes {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data)

    def bw(g):
        ga = _unbroadcast(g @ _swap_last(b.data), a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(_swap_last(a.data) @ g, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """x @ w (+ b) over the last axis of a 2-d or 3-d ``x``.

    Leading axes are flattened so both the forward and the backward pass
    run as single large GEMMs.
    """
    shape = x.data.shape
    if shape[-1] != w.data.shape[0]:
        raise ShapeError(f"linear: inner dimensions disagree for shapes {x.shape} and {w.shape}")
    flat = x.data.reshape(-1, shape[-1])
    out_data = flat @ w.data
    if b is not None:
        out_data += b.data
    out = Tensor(out_data.reshape(shape[:-1] + (w.data.shape[1],)))

    def bw(g):
        gf = g.reshape(-1, g.shape[-1])
        gx = (gf @ w.data.T).reshape(shape) if x.requires_grad else None
        gw = flat.T @ gf if w.requires_grad else None
        if b is None:
            return gx, gw
        gb = gf.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return _record(out, inputs, bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)

    def bw(g):
        ga = _unbroadcast(g, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), bw)


def mul(a: Tensor, b: Union[Tensor, float, int]) -> Tensor:
    if isinstance(b, Tensor):
        out = Tensor(a.data * b.data)

        def bw(g):
            ga = _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None
            gb = _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None
            return ga, gb

        return _record(out, (a, b), bw)

    s = float(b)
    out = Tensor(a.data * s)
    return _record(out, (a,), lambda g: (g * s,))


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    return _record(out, (x,), lambda g: (g.reshape(x.data.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(int(i) for i in np.argsort(axes))
    out = Tensor(np.transpose(x.data, axes))
    return _record(out, (x,), lambda g: (np.transpose(g, inverse),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        grads = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                grads.append(g[tuple(index)])
            else:
                grads.append(None)
        return grads

    return _record(out, tuple(tensors), bw)


def take_index(x: Tensor, axis: int, index: int) -> Tensor:
    """Select one slice along ``axis`` (the axis disappears)."""
    out = Tensor(x.data.take(index, axis=axis))

    def bw(g):
        gx = np.zeros_like(x.data)
        sel = [slice(None)] * x.data.ndim
        sel[axis] = index
        gx[tuple(sel)] = g
        return (gx,)

    return _record(out, (x,), bw)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: output shape = ids.shape + (d,). Repeated ids accumulate grads."""
    ids = np.asarray(ids)
    out = Tensor(table.data[ids])

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
        return (gt,)

    return _record(out, (table,), bw)


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows of a 2-d tensor; repeated indices accumulate gradients."""
    idx = np.asarray(idx)
    out = Tensor(x.data[idx])

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _record(out, (x,), bw)


def gather_2d(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Elementwise pick x[rows, cols]; rows/cols are equal-shape int arrays."""
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    out = Tensor(x.data[rows, cols])

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (rows, cols), g)
        return (gx,)

    return _record(out, (x,), bw)


def _softmax_forward(xm: np.ndarray, axis: int) -> np.ndarray:
    mx = xm.max(axis=axis, keepdims=True)
    e = np.exp(xm - mx)
    return e / e.sum(axis=axis, keepdims=True)


def _softmax_backward(y: np.ndarray, g: np.ndarray, axis: int) -> np.ndarray:
    return y * (g - (g * y).sum(axis=axis, keepdims=True))


def softmax(x: Tensor, axis: int) -> Tensor:
    """Stable softmax along ``axis`` (max-subtraction before exponentiation)."""
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {x.shape}")
    y = _softmax_forward(x.data, axis)
    out = Tensor(y)
    return _record(out, (x,), lambda g: (_softmax_backward(y, g, axis),))


def masked_softmax(x: Tensor, mask: np.ndarray, axis: int) -> Tensor:
    """Softmax where positions with mask 0 score -inf, i.e. get probability
    exactly 0. Every row must keep at least one valid position."""
    mask = np.asarray(mask, dtype=bool)
    valid = np.broadcast_to(mask, x.data.shape).any(axis=axis)
    if not valid.all():
        raise ShapeError("masked_softmax: some row has no valid entries")
    xm = np.where(mask, x.data, -np.inf)
    y = _softmax_forward(xm, axis)
    out = Tensor(y)
    return _record(out, (x,), lambda g: (_softmax_backward(y, g, axis),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to mean 0 / variance 1, then scale and shift.

    ``eps`` is added to the variance inside the square root.
    """
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain/bias shapes {gain.shape}/{bias.shape} do not match last dim {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gbias = g.sum(axis=lead) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gain.data
            gx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, ggain, gbias

    return _record(out, (x, gain, bias), bw)


def gelu(x: Tensor) -> Tensor:
    """Elementwise GELU, tanh approximation."""
    v = x.data
    sq = v * v
    t = np.tanh(_GELU_C * (v + _GELU_A * (sq * v)))
    out = Tensor(0.5 * v * (1.0 + t))

    def bw(g):
        # deriv = 0.5*(1+t) + 0.5*v*(1-t^2)*C*(1+3A*v^2), built in place
        du = sq * np.asarray(3.0 * _GELU_A * _GELU_C, dtype=v.dtype)
        du += np.asarray(_GELU_C, dtype=v.dtype)
        w = t * t
        np.subtract(1.0, w, out=w)
        w *= du
        w *= v
        w += t
        w += 1.0
        w *= 0.5
        w *= g
        return (w,)

    return _record(out, (x,), bw)


def cross_entropy_logits(logits: Tensor, targets: np.ndarray, ignore_index: int = -1) -> Tensor:
    """Mean of -log softmax(logits)[target] over rows whose target is not the
    sentinel ``ignore_index``. All rows ignored yields 0 with zero gradient."""
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy_logits needs 2-d logits, got shape {logits.shape}")
    targets = np.asarray(targets)
    n, c = logits.data.shape
    if targets.shape != (n,):
        raise ShapeError(f"cross_entropy_logits: {n} logit rows but targets shape {targets.shape}")
    valid = targets != ignore_index
    if valid.any():
        t = targets[valid]
        if t.min() < 0 or t.max() >= c:
            raise ValueError(f"cross_entropy_logits: target out of range [0, {c})")
    m = int(valid.sum())
    if m == 0:
        out = Tensor(np.zeros((), dtype=logits.dtype))
        return _record(out, (logits,), lambda g: (None,))

    mx = logits.data.max(axis=1, keepdims=True)
    lse = mx[:, 0] + np.log(np.exp(logits.data - mx).sum(axis=1))
    picked = logits.data[np.arange(n)[valid], targets[valid]]
    loss = (lse[valid] - picked).sum() / m
    out = Tensor(np.asarray(loss, dtype=logits.dtype))

    def bw(g):
        p = np.exp(logits.data - lse[:, None])
        p[np.arange(n)[valid], targets[valid]] -= 1.0
        p[~valid] = 0.0
        return (p * (g / m),)

    return _record(out, (logits,), bw)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when p <= 0."""
    if p <= 0.0:
        return x
    draw_dtype = x.dtype if x.dtype in (np.float32, np.float64) else np.float32
    keep = rng.random(x.data.shape, dtype=draw_dtype) >= p
    scale = keep.astype(x.dtype) * np.asarray(1.0 / (1.0 - p), dtype=x.dtype)
    out = Tensor(x.data * scale)
    return _record(out, (x,), lambda g: (g * scale,))


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.sum(), dtype=x.dtype))
    return _record(out, (x,), lambda g: (np.full_like(x.data, 1.0) * g,))
