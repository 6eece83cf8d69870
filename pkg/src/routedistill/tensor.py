"""Dense float64 tensors with taped reverse-mode differentiation.

The engine is deliberately small: eager numpy forward evaluation, a Tape
that records every differentiable primitive in execution order, and a
single reverse sweep that accumulates adjoints into leaf gradients.
Everything is float64; non-finite values are rejected at op boundaries.

Shapes are generic: primitives act on the last one or two axes and
broadcast over any leading (batch) axes, with gradients reduced back to
the operand shapes. A model written for a single [N, d] token matrix
therefore also runs on a [B, N, d] batch with no code changes.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an op contract."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared at an op boundary."""


class DetachedLossError(ValueError):
    """backward() was asked to differentiate a value the tape never produced."""


_PRIMITIVES: dict[str, str] = {}


def _primitive(name: str, doc: str):
    _PRIMITIVES[name] = doc
    def deco(fn):
        return fn
    return deco


def primitive_set() -> list[tuple[str, str]]:
    """Registered differentiable primitives as (name, description) pairs."""
    return sorted(_PRIMITIVES.items())


def _check_finite(op: str, arr: np.ndarray) -> None:
    # Cheap reduction first; only scan elementwise on suspicion.
    s = arr.sum()
    if not math.isfinite(s):
        raise NonFiniteError(f"{op}: non-finite value in output of shape {arr.shape}")


class Tensor:
    """A dense float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite("tensor", arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: "Tape | None" = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return stop_grad(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def __add__(self, other):
        return add(self, _coerce(other))

    def __radd__(self, other):
        return add(_coerce(other), self)

    def __sub__(self, other):
        return sub(self, _coerce(other))

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, _coerce(other))

    def __rmul__(self, other):
        return mul(_coerce(other), self)

    def __truediv__(self, other):
        return div(self, _coerce(other))

    def __matmul__(self, other):
        return matmul(self, _coerce(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _coerce(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


_TAPES: list["Tape"] = []


class Tape:
    """Execution-ordered record of primitive applications.

    Entries are appended eagerly as ops run, so the list is topologically
    ordered by construction: every input of entry i is either a leaf or
    the output of an earlier entry. The reverse sweep in backward() visits
    each entry at most once, in reverse order.
    """

    __slots__ = ("entries",)

    def __init__(self):
        # (output, inputs, backward_fn); backward_fn maps the output adjoint
        # to per-input adjoint arrays (None for non-differentiable slots).
        self.entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False

    def __len__(self) -> int:
        return len(self.entries)


def _active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _make(op: str, out_data: np.ndarray, inputs: tuple[Tensor, ...], back: Callable) -> Tensor:
    _check_finite(op, out_data)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out._tape = None
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape.entries.append((out, inputs, back))
    else:
        out.requires_grad = False
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcasted adjoint back onto an operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


@_primitive("add", "elementwise addition with broadcasting")
def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}") from None

    def back(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))

    return _make("add", out, (a, b), back)


@_primitive("sub", "elementwise subtraction with broadcasting")
def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}") from None

    def back(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))

    return _make("sub", out, (a, b), back)


@_primitive("mul", "elementwise (Hadamard) product with broadcasting")
def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}") from None
    ad, bd = a.data, b.data

    def back(g):
        return (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape))

    return _make("mul", out, (a, b), back)


@_primitive("div", "elementwise division with broadcasting")
def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    try:
        out = a.data / b.data
    except ValueError:
        raise ShapeError(f"div: incompatible shapes {a.shape} and {b.shape}") from None
    ad, bd = a.data, b.data

    def back(g):
        return (_unbroadcast(g / bd, a.shape), _unbroadcast(-g * ad / (bd * bd), b.shape))

    return _make("div", out, (a, b), back)


@_primitive("scale", "multiplication by a Python scalar")
def scale(a: Tensor, c: float) -> Tensor:
    a = _coerce(a)
    c = float(c)

    def back(g):
        return (g * c,)

    return _make("scale", a.data * c, (a,), back)


# ---------------------------------------------------------------------------
# linear algebra


@_primitive("matmul", "matrix product over the last two axes, batched over leading axes")
def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must have ndim >= 2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims disagree for {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible batch shapes {a.shape} @ {b.shape}") from None
    ad, bd = a.data, b.data

    def back(g):
        ga = np.matmul(g, bd.swapaxes(-1, -2))
        gb = np.matmul(ad.swapaxes(-1, -2), g)
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _make("matmul", out, (a, b), back)


@_primitive("transpose", "swap the last two axes")
def transpose(a: Tensor) -> Tensor:
    a = _coerce(a)
    if a.ndim < 2:
        raise ShapeError(f"transpose: ndim >= 2 required, got {a.shape}")

    def back(g):
        return (g.swapaxes(-1, -2),)

    return _make("transpose", a.data.swapaxes(-1, -2), (a,), back)


@_primitive("swapaxes", "swap two arbitrary axes")
def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    a = _coerce(a)

    def back(g):
        return (g.swapaxes(ax1, ax2),)

    return _make("swapaxes", a.data.swapaxes(ax1, ax2), (a,), back)


# ---------------------------------------------------------------------------
# nonlinearities


@_primitive("exp", "elementwise exponential")
def exp(a: Tensor) -> Tensor:
    a = _coerce(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    outd = out

    def back(g):
        return (g * outd,)

    return _make("exp", out, (a,), back)


_RELU_MARGINS: list[float] | None = None


class relu_margin_probe:
    """Records min |x| seen by relu inside the context; gradient-check harness only."""

    def __enter__(self) -> list[float]:
        global _RELU_MARGINS
        _RELU_MARGINS = []
        return _RELU_MARGINS

    def __exit__(self, *exc):
        global _RELU_MARGINS
        _RELU_MARGINS = None
        return False


@_primitive("relu", "rectifier max(x, 0)")
def relu(a: Tensor) -> Tensor:
    a = _coerce(a)
    if _RELU_MARGINS is not None and a.size:
        _RELU_MARGINS.append(float(np.abs(a.data).min()))
    out = np.maximum(a.data, 0.0)
    mask = a.data > 0.0

    def back(g):
        return (g * mask,)

    return _make("relu", out, (a,), back)


@_primitive("sigmoid", "logistic function 1 / (1 + exp(-x))")
def sigmoid(a: Tensor) -> Tensor:
    a = _coerce(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    outd = out

    def back(g):
        return (g * outd * (1.0 - outd),)

    return _make("sigmoid", out, (a,), back)


@_primitive("softmax", "row-wise softmax over the last axis, max-shifted")
def softmax(a: Tensor) -> Tensor:
    a = _coerce(a)
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)
    outd = out

    def back(g):
        dot = (g * outd).sum(axis=-1, keepdims=True)
        return (outd * (g - dot),)

    return _make("softmax", out, (a,), back)


@_primitive("pow_scalar", "elementwise power with a constant exponent")
def pow_scalar(a: Tensor, p: float) -> Tensor:
    a = _coerce(a)
    p = float(p)
    if p != round(p) and np.any(a.data < 0.0):
        raise ShapeError(f"pow_scalar: negative base with fractional exponent {p}")
    out = a.data ** p
    ad = a.data

    def back(g):
        return (g * p * ad ** (p - 1.0),)

    return _make("pow_scalar", out, (a,), back)


# ---------------------------------------------------------------------------
# reductions


@_primitive("sum", "summation over an axis (or all axes)")
def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.shape

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make("sum", np.asarray(out), (a,), back)


@_primitive("mean", "arithmetic mean over an axis (or all axes)")
def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    shape = a.shape
    if axis is None:
        n = a.size
    else:
        n = shape[axis]

    def back(g):
        if axis is None:
            return (np.broadcast_to(g / n, shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _make("mean", np.asarray(out), (a,), back)


# ---------------------------------------------------------------------------
# shape surgery


@_primitive("reshape", "reinterpret the value buffer under a new shape")
def reshape(a: Tensor, shape) -> Tensor:
    a = _coerce(a)
    shape = tuple(shape)
    old = a.shape

    def back(g):
        return (g.reshape(old),)

    return _make("reshape", a.data.reshape(shape), (a,), back)


@_primitive("concat", "concatenation of tensors along an axis")
def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [_coerce(p) for p in parts]
    if not parts:
        raise ShapeError("concat: empty input list")
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise ShapeError(
            f"concat: incompatible shapes {[p.shape for p in parts]} along axis {axis}"
        ) from None
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _make("concat", out, tuple(parts), back)


@_primitive("slice_axis", "contiguous slice along one axis")
def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    a = _coerce(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    shape = a.shape

    def back(g):
        full = np.zeros(shape, dtype=np.float64)
        full[idx] = g
        return (full,)

    return _make("slice_axis", a.data[idx].copy(), (a,), back)


# ---------------------------------------------------------------------------
# selection


def topk_indices(a, k: int) -> np.ndarray:
    """Indices of the k largest entries along the last axis.

    Ties break toward the smaller index (stable sort on the negated
    values), and the selected indices are returned in ascending order.
    Pure index computation: never recorded on a tape.
    """
    x = a.data if isinstance(a, Tensor) else np.asarray(a)
    n = x.shape[-1]
    if not 1 <= k <= n:
        raise ShapeError(f"topk_indices: k={k} out of range for last axis of size {n}")
    order = np.argsort(-x, axis=-1, kind="stable")[..., :k]
    return np.sort(order, axis=-1)


@_primitive("take_along_last", "differentiable gather along the last axis")
def take_along_last(a: Tensor, idx: np.ndarray) -> Tensor:
    a = _coerce(a)
    idx = np.asarray(idx)
    if idx.shape[:-1] != a.shape[:-1]:
        raise ShapeError(f"take_along_last: index shape {idx.shape} vs data {a.shape}")
    out = np.take_along_axis(a.data, idx, axis=-1)
    shape = a.shape

    def back(g):
        m = shape[-1]
        rows = int(np.prod(shape[:-1], dtype=np.int64)) if len(shape) > 1 else 1
        flat = np.zeros((rows, m), dtype=np.float64)
        r = np.arange(rows)[:, None]
        np.add.at(flat, (r, idx.reshape(rows, -1)), g.reshape(rows, -1))
        return (flat.reshape(shape),)

    return _make("take_along_last", out, (a,), back)


@_primitive("sparse_aggregate", "weighted gather-sum of rows over per-row neighbor lists")
def sparse_aggregate(values: Tensor, weights: Tensor, idx: np.ndarray) -> Tensor:
    """out[..., i, :] = sum_k weights[..., i, k] * values[..., idx[..., i, k], :].

    idx is a constant integer array; gradients flow to values (scatter-add)
    and weights.
    """
    values, weights = _coerce(values), _coerce(weights)
    idx = np.asarray(idx)
    if weights.shape != idx.shape:
        raise ShapeError(f"sparse_aggregate: weights {weights.shape} vs idx {idx.shape}")
    if values.shape[:-2] != weights.shape[:-2] or values.shape[-2] != weights.shape[-2]:
        raise ShapeError(
            f"sparse_aggregate: values {values.shape} vs weights {weights.shape}"
        )
    gathered = np.take_along_axis(
        values.data[..., None, :, :], idx[..., :, :, None], axis=-2
    )  # [..., N, k, d]
    out = (weights.data[..., None] * gathered).sum(axis=-2)
    vshape, wd = values.shape, weights.data

    def back(g):
        gw = (gathered * g[..., :, None, :]).sum(axis=-1)
        dgathered = wd[..., None] * g[..., :, None, :]
        n, d = vshape[-2], vshape[-1]
        b = int(np.prod(vshape[:-2], dtype=np.int64)) if len(vshape) > 2 else 1
        gv = np.zeros((b, n, d), dtype=np.float64)
        bi = np.arange(b)[:, None, None]
        np.add.at(gv, (bi, idx.reshape(b, n, -1)), dgathered.reshape(b, n, -1, d))
        return (gv.reshape(vshape), gw)

    return _make("sparse_aggregate", out, (values, weights), back)


# ---------------------------------------------------------------------------
# gradient control and regularization


@_primitive("stop_grad", "identity forward, zero backward")
def stop_grad(a: Tensor) -> Tensor:
    a = _coerce(a)
    return Tensor(a.data)


@_primitive("dropout", "train-mode inverted dropout, eval-mode identity")
def dropout(a: Tensor, rate: float, rng: np.random.Generator, train: bool) -> Tensor:
    a = _coerce(a)
    if not 0.0 <= rate < 1.0:
        raise ShapeError(f"dropout: rate {rate} outside [0, 1)")
    if not train or rate == 0.0:
        return a
    keep = rng.random(a.shape) >= rate
    factor = keep / (1.0 - rate)
    out = a.data * factor

    def back(g):
        return (g * factor,)

    return _make("dropout", out, (a,), back)


# ---------------------------------------------------------------------------
# composites used across the model code


@_primitive("l1_normalize", "row-wise L1 normalization with an additive epsilon")
def l1_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    a = _coerce(a)
    denom = add(tsum(a, axis=-1, keepdims=True), _coerce(eps))
    return div(a, denom)


def sumsq(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Sum of squared entries (squared L2 norm) over an axis."""
    a = _coerce(a)
    return tsum(mul(a, a), axis=axis, keepdims=keepdims)


@_primitive("cosine", "cosine similarity of vector pairs over the last axis")
def cosine(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.shape != b.shape:
        raise ShapeError(f"cosine: shapes {a.shape} and {b.shape} differ")
    na = np.sqrt((a.data * a.data).sum(axis=-1))
    nb = np.sqrt((b.data * b.data).sum(axis=-1))
    if np.any(na < 1e-12) or np.any(nb < 1e-12):
        raise ShapeError("cosine: zero-norm operand, similarity undefined")
    num = tsum(mul(a, b), axis=-1)
    da = pow_scalar(sumsq(a, axis=-1), 0.5)
    db = pow_scalar(sumsq(b, axis=-1), 0.5)
    return div(num, mul(da, db))


def frob_diff_sq(a: Tensor, b: Tensor) -> Tensor:
    """Squared Frobenius norm of a matrix difference."""
    return sumsq(sub(a, b))


# ---------------------------------------------------------------------------
# reverse sweep


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate dloss/dleaf for every reachable grad-requiring leaf.

    The loss must be a scalar produced on this tape. Each tape entry is
    visited at most once, in reverse creation order; intermediate adjoints
    are dropped as soon as they have been propagated. Leaf gradients are
    added into .grad (allocating it when absent) and also returned.
    """
    if loss.data.shape != ():
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._tape is not tape:
        raise DetachedLossError("backward: loss was not produced by this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    holders: dict[int, Tensor] = {}
    for out, inputs, back in reversed(tape.entries):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        holders.pop(id(out), None)
        contribs = back(g)
        for t, c in zip(inputs, contribs):
            if c is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + c
            else:
                grads[key] = c
                holders[key] = t

    result: dict[Tensor, np.ndarray] = {}
    for key, g in grads.items():
        t = holders.get(key)
        if t is None:
            continue  # the loss itself when it is a leaf-less constant chain
        g = np.asarray(g, dtype=np.float64).reshape(t.shape)
        t.grad = g if t.grad is None else t.grad + g
        result[t] = g
    return result


# ---------------------------------------------------------------------------
# finite-difference oracle


def finite_diff_grad(f: Callable[[Tensor], float], theta: Tensor, eps: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar function at theta.

    Coordinates of theta are perturbed in place and restored afterwards,
    so f may either use its argument or close over the same Tensor.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError(f"finite_diff_grad: eps {eps} outside [1e-7, 1e-4]")
    flat = theta.data.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + eps
        fp = float(f(theta))
        flat[i] = saved - eps
        fm = float(f(theta))
        flat[i] = saved
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NonFiniteError(f"finite_diff_grad: non-finite value at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * eps)
    return Tensor(grad.reshape(theta.shape))


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-relative disagreement used by every gradient check."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    """Fan-in scaled uniform initialization for trainable weights."""
    bound = math.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)
