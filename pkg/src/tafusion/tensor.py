"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable primitive records its inputs and a backward rule as it
executes.  ``backward(loss)`` replays those records in exact reverse
execution order and accumulates d(loss)/d(leaf) into the ``grad`` buffer of
every tensor created with ``requires_grad=True``.  Gradient accumulation is
additive, so a tensor feeding several downstream paths receives the sum of
all contributions.

Conventions:
  * everything is float64,
  * tensors are 2-D matrices or 0-D scalars (no general broadcasting; the
    single exception is adding a length-N bias row to an M x N matrix),
  * any non-finite value produced by an op raises ``NonFiniteError``.
"""

from __future__ import annotations

import contextlib
import itertools
import math
import threading

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "matmul",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "mul_const",
    "transpose",
    "concat_rows",
    "concat_cols",
    "slice_rows",
    "slice_cols",
    "sum_all",
    "mean_rows",
    "softmax",
    "log_softmax",
    "layer_norm",
    "gelu",
    "rope_pairs",
    "l2norm_rows",
    "backward",
    "zero_grad",
    "no_grad",
]

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

# execution-order stamp; next() is atomic under the GIL
_SEQ = itertools.count()

_GRAD_STATE = threading.local()


def _grad_enabled() -> bool:
    return getattr(_GRAD_STATE, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Suspend op recording on this thread (pure inference, no backward)."""
    prev = _grad_enabled()
    _GRAD_STATE.enabled = False
    try:
        yield
    finally:
        _GRAD_STATE.enabled = prev


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared in an op output (or in tensor creation)."""


def _ensure_finite(arr: np.ndarray, where: str) -> None:
    # a single reduction: any NaN/Inf in arr makes the sum non-finite
    if not np.isfinite(arr.sum()):
        raise NonFiniteError(f"non-finite value produced by {where}")


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse-mode grads."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, copy=True)
        _ensure_finite(arr, "tensor creation")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._seq = next(_SEQ)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

    # light operator sugar; the module-level functions are the primitives
    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __neg__(self) -> "Tensor":
        return neg(self)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, where: str) -> Tensor:
    _ensure_finite(data, where)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = _grad_enabled() and any(p.requires_grad for p in parents)
    out.grad = None
    out._seq = next(_SEQ)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        raise ShapeError(f"gradient shape {g.shape} != tensor shape {t.data.shape}")
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of an M x K and a K x N tensor."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects matrices, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward_fn(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _result(out_data, (a, b), backward_fn, "matmul")


def _is_bias_row(x_shape, b_shape) -> bool:
    if len(x_shape) != 2:
        return False
    if b_shape == (x_shape[1],):
        return True
    return b_shape == (1, x_shape[1]) and x_shape[0] != 1


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts a length-N bias row added to M x N."""
    if a.shape == b.shape:
        def backward_fn(g):
            _accumulate(a, g)
            _accumulate(b, g)

        return _result(a.data + b.data, (a, b), backward_fn, "add")
    if _is_bias_row(a.shape, b.shape):
        def backward_fn(g):
            _accumulate(a, g)
            _accumulate(b, g.sum(axis=0).reshape(b.shape))

        return _result(a.data + b.data.reshape(1, -1), (a, b), backward_fn, "add")
    raise ShapeError(f"add shapes incompatible: {a.shape} + {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub shapes differ: {a.shape} - {b.shape}")

    def backward_fn(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _result(a.data - b.data, (a, b), backward_fn, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes differ: {a.shape} * {b.shape}")

    def backward_fn(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _result(a.data * b.data, (a, b), backward_fn, "mul")


def neg(a: Tensor) -> Tensor:
    def backward_fn(g):
        _accumulate(a, -g)

    return _result(-a.data, (a,), backward_fn, "neg")


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar (not differentiated w.r.t. ``s``)."""
    s = float(s)

    def backward_fn(g):
        _accumulate(a, g * s)

    return _result(a.data * s, (a,), backward_fn, "scale")


def mul_const(a: Tensor, c: np.ndarray) -> Tensor:
    """Elementwise product with a constant array of the same shape."""
    c = np.asarray(c, dtype=np.float64)
    if c.shape != a.shape:
        raise ShapeError(f"mul_const shapes differ: {a.shape} * {c.shape}")

    def backward_fn(g):
        _accumulate(a, g * c)

    return _result(a.data * c, (a,), backward_fn, "mul_const")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError("transpose expects a matrix")

    def backward_fn(g):
        _accumulate(a, g.T)

    return _result(a.data.T.copy(), (a,), backward_fn, "transpose")


def concat_rows(parts: list[Tensor]) -> Tensor:
    """Stack matrices with equal column counts along axis 0."""
    if not parts:
        raise ShapeError("concat_rows of nothing")
    ncols = parts[0].shape[1]
    for p in parts:
        if p.ndim != 2 or p.shape[1] != ncols:
            raise ShapeError("concat_rows column counts differ")
    sizes = [p.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _accumulate(p, g[lo:hi])

    return _result(np.concatenate([p.data for p in parts], axis=0),
                   tuple(parts), backward_fn, "concat_rows")


def concat_cols(parts: list[Tensor]) -> Tensor:
    """Stack matrices with equal row counts along axis 1."""
    if not parts:
        raise ShapeError("concat_cols of nothing")
    nrows = parts[0].shape[0]
    for p in parts:
        if p.ndim != 2 or p.shape[0] != nrows:
            raise ShapeError("concat_cols row counts differ")
    sizes = [p.shape[1] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _accumulate(p, g[:, lo:hi])

    return _result(np.concatenate([p.data for p in parts], axis=1),
                   tuple(parts), backward_fn, "concat_cols")


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    if a.ndim != 2 or not (0 <= start <= stop <= a.shape[0]):
        raise ShapeError(f"slice_rows [{start}:{stop}] of {a.shape}")

    def backward_fn(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        _accumulate(a, full)

    return _result(a.data[start:stop].copy(), (a,), backward_fn, "slice_rows")


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.ndim != 2 or not (0 <= start <= stop <= a.shape[1]):
        raise ShapeError(f"slice_cols [{start}:{stop}] of {a.shape}")

    def backward_fn(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        _accumulate(a, full)

    return _result(a.data[:, start:stop].copy(), (a,), backward_fn, "slice_cols")


def sum_all(a: Tensor) -> Tensor:
    def backward_fn(g):
        _accumulate(a, np.full_like(a.data, float(g)))

    return _result(np.asarray(a.data.sum()), (a,), backward_fn, "sum_all")


def mean_rows(a: Tensor) -> Tensor:
    """Mean over axis 0 of an M x N matrix, returned as 1 x N."""
    if a.ndim != 2 or a.shape[0] == 0:
        raise ShapeError(f"mean_rows of {a.shape}")
    m = a.shape[0]

    def backward_fn(g):
        _accumulate(a, np.repeat(g / m, m, axis=0))

    return _result(a.data.mean(axis=0, keepdims=True), (a,), backward_fn, "mean_rows")


def softmax(a: Tensor, axis: int) -> Tensor:
    """Max-stabilized softmax along ``axis`` of a matrix."""
    if a.ndim != 2 or axis not in (0, 1):
        raise ShapeError(f"softmax axis {axis} of {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accumulate(a, y * (g - dot))

    return _result(y, (a,), backward_fn, "softmax")


def log_softmax(a: Tensor, axis: int) -> Tensor:
    if a.ndim != 2 or axis not in (0, 1):
        raise ShapeError(f"log_softmax axis {axis} of {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    sm = np.exp(y)

    def backward_fn(g):
        _accumulate(a, g - sm * g.sum(axis=axis, keepdims=True))

    return _result(y, (a,), backward_fn, "log_softmax")


_LN_EPS = 1e-5


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Per-row standardization followed by an affine map.

    Rows with zero variance map to the bias alone (the 1e-5 epsilon absorbs
    the division), so constant inputs come out as zeros under gain=1, bias=0.
    """
    if a.ndim != 2:
        raise ShapeError("layer_norm expects a matrix")
    n = a.shape[1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(f"layer_norm gain/bias must be ({n},)")
    mu = a.data.mean(axis=1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * inv
    y = xhat * gain.data + bias.data

    def backward_fn(g):
        _accumulate(gain, (g * xhat).sum(axis=0))
        _accumulate(bias, g.sum(axis=0))
        h = g * gain.data
        hmean = h.mean(axis=1, keepdims=True)
        hxmean = (h * xhat).mean(axis=1, keepdims=True)
        _accumulate(a, inv * (h - hmean - xhat * hxmean))

    return _result(y, (a, gain, bias), backward_fn, "layer_norm")


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    phi = 0.5 * (1.0 + erf(a.data / _SQRT2))
    y = a.data * phi

    def backward_fn(g):
        pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT_2PI
        _accumulate(a, g * (phi + a.data * pdf))

    return _result(y, (a,), backward_fn, "gelu")


def rope_pairs(a: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate consecutive coordinate pairs of each row by given angles.

    ``cos``/``sin`` are constant T x D/2 arrays (one angle per pair per row).
    The rotation is orthogonal, so the backward pass rotates the incoming
    gradient by the negated angles.
    """
    if a.ndim != 2 or a.shape[1] % 2 != 0:
        raise ShapeError(f"rope_pairs needs an even width, got {a.shape}")
    t, d = a.shape
    if cos.shape != (t, d // 2) or sin.shape != (t, d // 2):
        raise ShapeError("rope_pairs cos/sin must be T x D/2")
    xe = a.data[:, 0::2]
    xo = a.data[:, 1::2]
    y = np.empty_like(a.data)
    y[:, 0::2] = xe * cos - xo * sin
    y[:, 1::2] = xe * sin + xo * cos

    def backward_fn(g):
        ge = g[:, 0::2]
        go = g[:, 1::2]
        out = np.empty_like(g)
        out[:, 0::2] = ge * cos + go * sin
        out[:, 1::2] = -ge * sin + go * cos
        _accumulate(a, out)

    return _result(y, (a,), backward_fn, "rope_pairs")


def l2norm_rows(a: Tensor, eps: float = 1e-8) -> Tensor:
    """Scale each row to unit L2 norm, with a smooth epsilon guard.

    Rows are divided by sqrt(||x||^2 + eps^2): zero rows map to zero instead
    of NaN, and for any non-degenerate row the output norm is 1 to within
    machine precision.
    """
    if a.ndim != 2:
        raise ShapeError("l2norm_rows expects a matrix")
    ss = (a.data * a.data).sum(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(ss + eps * eps)
    y = a.data * inv

    def backward_fn(g):
        gd = (g * a.data).sum(axis=1, keepdims=True)
        _accumulate(a, g * inv - a.data * (gd * inv ** 3))

    return _result(y, (a,), backward_fn, "l2norm_rows")


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) for every requires_grad tensor feeding ``loss``.

    ``loss`` must be a scalar (size-1) tensor; its own gradient seeds at 1.0.
    Ops are replayed in exact reverse execution order.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any requires_grad tensor")

    nodes: list[Tensor] = []
    seen: set[int] = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._parents)
    nodes.sort(key=lambda t: t._seq, reverse=True)

    loss.grad = np.ones_like(loss.data)
    for node in nodes:
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grad(tensors) -> None:
    """Clear grad buffers (accepts any iterable of tensors)."""
    for t in tensors:
        t.grad = None
