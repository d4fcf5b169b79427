"""Dense float64 tensors with tape-based reverse-mode differentiation.

Values are plain numpy arrays wrapped in :class:`Tensor`.  A :class:`Tape`
records every primitive applied to tensors that live on it, and
:func:`backward` walks the tape in reverse to produce gradients for the
registered parameters.  Tensors that are not on any tape behave as
constants and cost nothing to differentiate through.

Every primitive accepts an optional leading batch axis where that makes
sense (``conv3d``, ``dense``, ``global_avg_pool``, ``euclidean_distance``),
so a mini-batch of volumes can be pushed through one call.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "NumericError",
    "ShapeError",
    "TapeError",
    "Tensor",
    "Tape",
    "backward",
    "add",
    "sub",
    "mul",
    "neg",
    "tensor_sum",
    "mean",
    "relu",
    "conv3d",
    "dense",
    "global_avg_pool",
    "euclidean_distance",
    "take_rows",
]


class NumericError(FloatingPointError):
    """An operation produced NaN or infinite values."""


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


_handles = itertools.count(1)

ArrayLike = Union[np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray, tuple], tuple]


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"{op} produced non-finite values")


class Tensor:
    """N-dimensional float64 value, optionally bound to a tape.

    ``grad_id`` is the handle identifying this value on its tape; it is
    ``None`` for constants.
    """

    __slots__ = ("data", "grad_id", "tape")

    def __init__(self, data: ArrayLike, *, grad_id: Optional[int] = None,
                 tape: Optional["Tape"] = None):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        _check_finite("Tensor", arr)
        self.data = arr
        self.grad_id = grad_id
        self.tape = tape

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        tag = f", grad_id={self.grad_id}" if self.grad_id is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)


@dataclass
class Node:
    op: str
    inputs: tuple  # handles, or None for constant inputs
    output: int
    backward_fn: BackwardFn = field(repr=False)


class Tape:
    """Ordered record of primitive operations.

    Nodes are appended as operations execute, so inputs always precede the
    node that consumes them.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.params: dict[int, Tensor] = {}

    def watch(self, value: ArrayLike) -> Tensor:
        """Register ``value`` as a parameter and return it as a taped tensor.

        The array is not copied.
        """
        data = value.data if isinstance(value, Tensor) else value
        t = Tensor(data, grad_id=next(_handles), tape=self)
        self.params[t.grad_id] = t
        return t

    def __len__(self) -> int:
        return len(self.nodes)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, inputs: Sequence[Tensor], out: np.ndarray,
            backward_fn: BackwardFn) -> Tensor:
    _check_finite(op, out)
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise TapeError(f"{op}: inputs live on different tapes")
            tape = t.tape
    if tape is None:
        return Tensor(out)
    result = Tensor(out, grad_id=next(_handles), tape=tape)
    handles = tuple(t.grad_id if t.tape is tape else None for t in inputs)
    tape.nodes.append(Node(op, handles, result.grad_id, backward_fn))
    return result


def backward(tape: Tape, loss: Tensor) -> dict[int, Tensor]:
    """Gradients of scalar ``loss`` for every parameter watched by ``tape``.

    Parameters with no path to the loss get a zero gradient.
    """
    if loss.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    if loss.tape is not tape or loss.grad_id is None:
        raise TapeError("loss was not produced on this tape")

    grads: dict[int, np.ndarray] = {loss.grad_id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.output, None)
        if g is None:
            continue
        needs = tuple(h is not None for h in node.inputs)
        input_grads = node.backward_fn(g, needs)
        for h, ig in zip(node.inputs, input_grads):
            if h is None or ig is None:
                continue
            if h in grads:
                grads[h] = grads[h] + ig
            else:
                grads[h] = ig

    out = {}
    for h, p in tape.params.items():
        g = grads.get(h)
        out[h] = Tensor(np.zeros_like(p.data) if g is None else g)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None,
                _unbroadcast(g, sb) if needs[1] else None)

    return _record("add", (a, b), a.data + b.data, bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None,
                _unbroadcast(-g, sb) if needs[1] else None)

    return _record("sub", (a, b), a.data - b.data, bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g, needs):
        return (_unbroadcast(g * bd, ad.shape) if needs[0] else None,
                _unbroadcast(g * ad, bd.shape) if needs[1] else None)

    return _record("mul", (a, b), ad * bd, bw)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _record("neg", (a,), -a.data, lambda g, needs: (-g,))


def tensor_sum(a) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape

    def bw(g, needs):
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", (a,), np.asarray(a.data.sum()), bw)


def mean(a) -> Tensor:
    a = _as_tensor(a)
    shape, n = a.shape, a.size

    def bw(g, needs):
        return (np.full(shape, float(g) / n),)

    return _record("mean", (a,), np.asarray(a.data.sum() / n), bw)


def relu(a) -> Tensor:
    """Elementwise ``max(x, 0)``; the gradient at exactly zero is zero."""
    a = _as_tensor(a)
    mask = a.data > 0

    def bw(g, needs):
        return (g * mask,)

    return _record("relu", (a,), np.where(mask, a.data, 0.0), bw)


# structural --------------------------------------------------------------

def take_rows(a, start: int, stop: int) -> Tensor:
    """Rows ``start:stop`` along the leading axis."""
    a = _as_tensor(a)
    shape = a.shape
    if not 0 <= start < stop <= shape[0]:
        raise ShapeError(f"row range {start}:{stop} outside leading extent {shape[0]}")

    def bw(g, needs):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return _record("take_rows", (a,), a.data[start:stop].copy(), bw)


def global_avg_pool(a) -> Tensor:
    """Mean over the three trailing spatial axes: [.., C, D, H, W] -> [.., C]."""
    a = _as_tensor(a)
    if a.ndim not in (4, 5):
        raise ShapeError(f"global_avg_pool expects [C,D,H,W] or [N,C,D,H,W], got {a.shape}")
    shape = a.shape
    n = shape[-1] * shape[-2] * shape[-3]
    out = a.data.reshape(shape[:-3] + (n,)).sum(axis=-1) / n

    def bw(g, needs):
        return (np.broadcast_to((g / n)[..., None, None, None], shape).copy(),)

    return _record("global_avg_pool", (a,), out, bw)


# linear algebra ----------------------------------------------------------

def dense(x, weights, bias) -> Tensor:
    """Affine map ``bias + weights @ x`` for x of shape [n] or [N, n]."""
    x, weights, bias = _as_tensor(x), _as_tensor(weights), _as_tensor(bias)
    if weights.ndim != 2 or bias.shape != (weights.shape[0],):
        raise ShapeError(f"dense: weights {weights.shape} incompatible with bias {bias.shape}")
    if x.ndim not in (1, 2) or x.shape[-1] != weights.shape[1]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weights {weights.shape}")
    xd, wd = x.data, weights.data
    out = xd @ wd.T + bias.data

    def bw(g, needs):
        gx = g @ wd if needs[0] else None
        if g.ndim == 1:
            gw = np.outer(g, xd) if needs[1] else None
            gb = g if needs[2] else None
        else:
            gw = g.T @ xd if needs[1] else None
            gb = g.sum(axis=0) if needs[2] else None
        return gx, gw, gb

    return _record("dense", (x, weights, bias), out, bw)


def conv3d(x, kernels, stride: int = 1, padding: int = 0) -> Tensor:
    """3-D cross-correlation (no kernel flip).

    ``x`` is [C_in, D, H, W] or [N, C_in, D, H, W]; ``kernels`` is
    [C_out, C_in, kd, kh, kw].  Output extents follow
    ``floor((D + 2*padding - kd) / stride) + 1``.
    """
    x, kernels = _as_tensor(x), _as_tensor(kernels)
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv3d: bad stride={stride} or padding={padding}")
    unbatched = x.ndim == 4
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 5 or kernels.ndim != 5:
        raise ShapeError(f"conv3d: input {x.shape} / kernels {kernels.shape} have wrong rank")
    n, c_in, d, h, w = xd.shape
    c_out, kc, kd, kh, kw = kernels.shape
    if kc != c_in:
        raise ShapeError(f"conv3d: input has {c_in} channels, kernels expect {kc}")
    pd, ph, pw = d + 2 * padding, h + 2 * padding, w + 2 * padding
    if kd > pd or kh > ph or kw > pw:
        raise ShapeError("conv3d: kernel larger than padded input")
    od = (pd - kd) // stride + 1
    oh = (ph - kh) // stride + 1
    ow = (pw - kw) // stride + 1

    if padding:
        xp = np.zeros((n, c_in, pd, ph, pw))
        xp[:, :, padding:padding + d, padding:padding + h, padding:padding + w] = xd
    else:
        xp = xd
    win = sliding_window_view(xp, (kd, kh, kw), axis=(2, 3, 4))
    win = win[:, :, ::stride, ::stride, ::stride][:, :, :od, :oh, :ow]
    # rows: (n, od, oh, ow); cols: (c_in, kd, kh, kw)
    cols = win.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(n * od * oh * ow, c_in * kd * kh * kw)
    wmat = kernels.data.reshape(c_out, -1)
    out = (cols @ wmat.T).reshape(n, od, oh, ow, c_out).transpose(0, 4, 1, 2, 3)
    out = np.ascontiguousarray(out)
    if unbatched:
        out = out[0]

    kshape = kernels.shape

    def bw(g, needs):
        g5 = g[None] if unbatched else g
        gmat = g5.transpose(0, 2, 3, 4, 1).reshape(-1, c_out)
        gk = (gmat.T @ cols).reshape(kshape) if needs[1] else None
        gx = None
        if needs[0]:
            gcols = (gmat @ wmat).reshape(n, od, oh, ow, c_in, kd, kh, kw)
            gxp = np.zeros((n, c_in, pd, ph, pw))
            span_d, span_h, span_w = stride * (od - 1) + 1, stride * (oh - 1) + 1, stride * (ow - 1) + 1
            for i in range(kd):
                for j in range(kh):
                    for k in range(kw):
                        gxp[:, :, i:i + span_d:stride, j:j + span_h:stride, k:k + span_w:stride] += \
                            gcols[..., i, j, k].transpose(0, 4, 1, 2, 3)
            gx = gxp[:, :, padding:padding + d, padding:padding + h, padding:padding + w]
            gx = np.ascontiguousarray(gx[0] if unbatched else gx)
        return gx, gk

    return _record("conv3d", (x, kernels), out, bw)


def euclidean_distance(a, b) -> Tensor:
    """Euclidean distance over the last axis.

    Vectors of shape [n] give a scalar; batches [N, n] give [N].  The
    gradient at coincident points is zero.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"euclidean_distance: shapes {a.shape} and {b.shape} differ")
    if a.ndim not in (1, 2):
        raise ShapeError(f"euclidean_distance expects [n] or [N, n], got {a.shape}")
    diff = a.data - b.data
    dist = np.sqrt((diff * diff).sum(axis=-1))

    def bw(g, needs):
        safe = np.where(dist > 0, dist, 1.0)
        scale = np.where(dist > 0, g / safe, 0.0)
        ga = diff * np.expand_dims(scale, -1)
        return (ga if needs[0] else None, -ga if needs[1] else None)

    return _record("euclidean_distance", (a, b), np.asarray(dist), bw)
