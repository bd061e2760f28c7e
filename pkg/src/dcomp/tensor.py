"""Reverse-mode automatic differentiation on numpy arrays.

A Tensor wraps an ndarray plus an optional gradient buffer. Differentiable
operations record their inputs and a backward closure on the node they
produce; ``backward`` on a scalar replays those records in reverse
topological order, visiting each node exactly once, then frees them.
Leaf gradients accumulate additively across backward passes until
``zero_grad`` is called.

Conventions fixed here so gradient tests are deterministic:
  * abs has subgradient 0 at 0,
  * elementwise minimum routes the gradient to the smaller operand and to
    the first operand on ties,
  * relu has subgradient 0 at 0.

Training runs float32; gradient checking runs float64 (finite-difference
tolerances are unreachable in float32).
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import NumericalError, ShapeError

__all__ = [
    "Tensor",
    "as_tensor",
    "constant",
    "backward",
    "concat",
    "finite_difference_check",
]

Array = np.ndarray

FLOAT_DTYPES = (np.float32, np.float64)

# Sentinel stored in place of a backward closure once a node's tape record
# has been replayed and freed.
_CONSUMED = object()


def _coerce(data, dtype=None) -> Array:
    arr = np.asarray(data)
    if dtype is not None:
        return np.ascontiguousarray(arr, dtype=dtype)
    if arr.dtype not in FLOAT_DTYPES:
        return np.ascontiguousarray(arr, dtype=np.float32)
    return np.ascontiguousarray(arr)


class Tensor:
    """N-dimensional array with an optional gradient buffer.

    ``data`` is immutable by convention after creation; only ``grad`` is
    mutated (by backward passes and ``zero_grad``).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data: Array = _coerce(data, dtype)
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[Array], Sequence[Array | None]] | None = None

    # -- node construction -------------------------------------------------

    @staticmethod
    def _node(data: Array, parents: tuple["Tensor", ...], backward_fn) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._backward_fn = backward_fn
        else:
            out._parents = ()
            out._backward_fn = None
        return out

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.item())

    def numpy(self) -> Array:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # -- arithmetic sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, like=self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other, like=self), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    # -- method sugar for common ops -----------------------------------------

    def sum(self, axes=None, keepdims=False):
        return reduce_sum(self, axes, keepdims)

    def mean(self, axes=None, keepdims=False):
        return reduce_mean(self, axes, keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def as_tensor(value, like: Tensor | None = None) -> Tensor:
    """Wrap scalars/arrays as constant tensors; pass tensors through."""
    if isinstance(value, Tensor):
        return value
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype), requires_grad=False)


def constant(value, dtype=None) -> Tensor:
    return Tensor(value, requires_grad=False, dtype=dtype)


# ---------------------------------------------------------------------------
# Broadcasting support (limited: scalar, or numpy-compatible shapes such as
# per-channel bias (1,C,1,1); general broadcasting semantics are a non-goal).
# ---------------------------------------------------------------------------


def _check_broadcast(op: str, sa: tuple, sb: tuple) -> None:
    try:
        np.broadcast_shapes(sa, sb)
    except ValueError:
        raise ShapeError(op, sa, sb) from None


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Elementwise primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, like=a)
    _check_broadcast("add", a.shape, b.shape)
    data = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._node(data, (a, b), bwd)


def sub(a: Tensor, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, like=a)
    _check_broadcast("sub", a.shape, b.shape)
    data = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._node(data, (a, b), bwd)


def mul(a: Tensor, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, like=a)
    _check_broadcast("mul", a.shape, b.shape)
    data = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._node(data, (a, b), bwd)


def div(a: Tensor, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, like=a)
    _check_broadcast("div", a.shape, b.shape)
    data = a.data / b.data

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return Tensor._node(data, (a, b), bwd)


def absolute(x: Tensor) -> Tensor:
    """|x| with subgradient 0 at exactly 0."""
    data = np.abs(x.data)
    sign = np.sign(x.data)

    def bwd(g):
        return (g * sign,)

    return Tensor._node(data, (x,), bwd)


def exp(x: Tensor) -> Tensor:
    data = np.exp(x.data)

    def bwd(g):
        return (g * data,)

    return Tensor._node(data, (x,), bwd)


def power(x: Tensor, exponent: float) -> Tensor:
    """x**n for a scalar exponent n."""
    exponent = float(exponent)
    data = x.data ** exponent

    def bwd(g):
        return (g * exponent * x.data ** (exponent - 1.0),)

    return Tensor._node(data, (x,), bwd)


def sqrt(x: Tensor) -> Tensor:
    data = np.sqrt(x.data)

    def bwd(g):
        return (g * (0.5 / data),)

    return Tensor._node(data, (x,), bwd)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; gradient goes to the smaller operand, ties to `a`."""
    a, b = as_tensor(a), as_tensor(b, like=a)
    _check_broadcast("minimum", a.shape, b.shape)
    take_a = a.data <= b.data
    data = np.where(take_a, a.data, b.data)

    def bwd(g):
        ga = _unbroadcast(np.where(take_a, g, 0.0), a.shape)
        gb = _unbroadcast(np.where(take_a, 0.0, g), b.shape)
        return ga, gb

    return Tensor._node(data, (a, b), bwd)


def relu(x: Tensor) -> Tensor:
    """max(x, 0) with subgradient 0 at 0."""
    mask = x.data > 0
    data = np.where(mask, x.data, 0.0)

    def bwd(g):
        return (np.where(mask, g, 0.0),)

    return Tensor._node(data, (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    """1/(1+exp(-x)), evaluated in a form stable for large |x|."""
    z = x.data
    data = np.empty_like(z)
    pos = z >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    data[~pos] = ez / (1.0 + ez)

    def bwd(g):
        return (g * data * (1.0 - data),)

    return Tensor._node(data, (x,), bwd)


def where(condition, a: Tensor, b) -> Tensor:
    """Select by a constant boolean mask; gradient routes per-element."""
    cond = condition.data if isinstance(condition, Tensor) else np.asarray(condition)
    cond = cond.astype(bool)
    a, b = as_tensor(a), as_tensor(b, like=a)
    _check_broadcast("where", a.shape, b.shape)
    data = np.where(cond, a.data, b.data)

    def bwd(g):
        ga = _unbroadcast(np.where(cond, g, 0.0), a.shape)
        gb = _unbroadcast(np.where(cond, 0.0, g), b.shape)
        return ga, gb

    return Tensor._node(data, (a, b), bwd)


def greater(a: Tensor, b) -> Array:
    """Non-differentiable comparison; returns a plain boolean array."""
    b = as_tensor(b, like=a)
    return a.data > b.data


def less(a: Tensor, b) -> Array:
    b = as_tensor(b, like=a)
    return a.data < b.data


# ---------------------------------------------------------------------------
# Reductions and shape ops
# ---------------------------------------------------------------------------


def _normalize_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(ax % ndim for ax in axes)
    if len(set(axes)) != len(axes) or any(ax >= ndim for ax in axes):
        raise ShapeError("reduce", (ndim,), axes)
    return axes


def reduce_sum(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axes, x.ndim)
    if x.size == 0:
        raise NumericalError("reduce over an empty tensor; caller must guard")
    data = x.data.sum(axis=axes, keepdims=keepdims)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._node(data, (x,), bwd)


def reduce_mean(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axes, x.ndim)
    count = int(np.prod([x.shape[ax] for ax in axes])) if axes else 1
    if count == 0 or x.size == 0:
        raise NumericalError("mean over an empty reduction set; caller must guard")
    data = x.data.mean(axis=axes, keepdims=keepdims)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return Tensor._node(data, (x,), bwd)


def masked_mean(x: Tensor, mask) -> Tensor:
    """Mean of x over mask==1 entries. Mask is a constant 0/1 array."""
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    m = m.astype(x.data.dtype)
    n = m.sum()
    if n == 0:
        raise NumericalError("masked_mean over an empty mask; caller must guard")
    data = np.asarray((x.data * m).sum() / n)

    def bwd(g):
        return (g * m / n,)

    return Tensor._node(data, (x,), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    data = x.data.reshape(shape)

    def bwd(g):
        return (g.reshape(x.shape),)

    return Tensor._node(data, (x,), bwd)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = tuple(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return Tensor._node(data, tensors, bwd)


def crop2d(x: Tensor, h0: int, h1: int, w0: int, w1: int) -> Tensor:
    """Slice the two trailing (spatial) axes: x[..., h0:h1, w0:w1]."""
    data = x.data[..., h0:h1, w0:w1]

    def bwd(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[..., h0:h1, w0:w1] = g
        return (full,)

    return Tensor._node(data, (x,), bwd)


# ---------------------------------------------------------------------------
# Spatial primitives (NCHW layout)
# ---------------------------------------------------------------------------


def _require_nchw(op: str, x: Tensor) -> None:
    if x.ndim != 4:
        raise ShapeError(op, x.shape, ("N", "C", "H", "W"))


def _im2col(x: Array, k: int, stride: int, padding: int):
    """Return patches of shape (N, C, k, k, Ho, Wo)."""
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    cols = np.empty((n, c, k, k, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = x[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols, ho, wo


def _col2im(cols: Array, x_shape, k: int, stride: int, padding: int) -> Array:
    """Scatter-add patches (N, C, k, k, Ho, Wo) back to the input shape."""
    n, c, h, w = x_shape
    ho, wo = cols.shape[-2:]
    padded = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            padded[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, i, j]
    if padding:
        return padded[:, :, padding : padding + h, padding : padding + w]
    return padded


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with zero padding; weight is (out, in, k, k)."""
    _require_nchw("conv2d", x)
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError("conv2d weight", weight.shape, ("O", "I", "k", "k"))
    if x.shape[1] != weight.shape[1]:
        raise ShapeError("conv2d channels", x.shape, weight.shape)
    o, c, k, _ = weight.shape
    cols, ho, wo = _im2col(x.data, k, stride, padding)
    n = x.shape[0]
    flat = cols.reshape(n, c * k * k, ho * wo)
    w2d = weight.data.reshape(o, c * k * k)
    out = np.matmul(w2d[None], flat).reshape(n, o, ho, wo)
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1, 1)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        gflat = np.ascontiguousarray(g.reshape(n, o, ho * wo))
        gw = gx = None
        if weight.requires_grad:
            gw = np.matmul(gflat, flat.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if x.requires_grad:
            gcols = np.matmul(w2d.T[None], gflat)
            gx = _col2im(gcols.reshape(n, c, k, k, ho, wo), x.shape, k, stride, padding)
        if bias is None:
            return gx, gw
        gb = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        return gx, gw, gb

    return Tensor._node(out, parents, bwd)


def reflect_pad2d(x: Tensor, pad: int) -> Tensor:
    """Reflection-pad the two trailing axes by `pad` (NumPy 'reflect' mode)."""
    _require_nchw("reflect_pad2d", x)
    h, w = x.shape[2], x.shape[3]
    if h < pad + 1 or w < pad + 1:
        raise ShapeError("reflect_pad2d", x.shape, (pad,))
    idx_h = np.pad(np.arange(h), pad, mode="reflect")
    idx_w = np.pad(np.arange(w), pad, mode="reflect")
    data = x.data[:, :, idx_h[:, None], idx_w[None, :]]

    def bwd(g):
        if pad == 1:
            # Closed-form scatter for the common pooling case.
            gx = g[:, :, 1:-1, 1:-1].copy()
            gx[:, :, 1, :] += g[:, :, 0, 1:-1]
            gx[:, :, -2, :] += g[:, :, -1, 1:-1]
            gx[:, :, :, 1] += g[:, :, 1:-1, 0]
            gx[:, :, :, -2] += g[:, :, 1:-1, -1]
            gx[:, :, 1, 1] += g[:, :, 0, 0]
            gx[:, :, 1, -2] += g[:, :, 0, -1]
            gx[:, :, -2, 1] += g[:, :, -1, 0]
            gx[:, :, -2, -2] += g[:, :, -1, -1]
        else:
            gx = np.zeros(x.shape, dtype=g.dtype)
            np.add.at(gx, (slice(None), slice(None), idx_h[:, None], idx_w[None, :]), g)
        return (gx,)

    return Tensor._node(data, (x,), bwd)


def _box3_valid(x: Tensor) -> Tensor:
    """Valid 3x3 box mean: (N,C,H+2,W+2) -> (N,C,H,W); adjoint is the full
    3x3 correlation (slice sums over a zero-padded gradient)."""
    n, c, hp, wp = x.shape
    h, w = hp - 2, wp - 2
    acc = np.zeros((n, c, h, w), dtype=x.data.dtype)
    for i in range(3):
        for j in range(3):
            acc += x.data[:, :, i : i + h, j : j + w]
    acc /= 9.0

    def bwd(g):
        gz = np.pad(g, ((0, 0), (0, 0), (2, 2), (2, 2)))
        gx = np.zeros(x.shape, dtype=g.dtype)
        for i in range(3):
            for j in range(3):
                gx += gz[:, :, i : i + hp, j : j + wp]
        gx /= 9.0
        return (gx,)

    return Tensor._node(acc, (x,), bwd)


def avg_pool_3x3(x: Tensor) -> Tensor:
    """3x3 box filter, stride 1, reflection padding; size-preserving."""
    _require_nchw("avg_pool_3x3", x)
    if x.shape[2] < 3 or x.shape[3] < 3:
        raise ShapeError("avg_pool_3x3 needs spatial dims >= 3", x.shape)
    return _box3_valid(reflect_pad2d(x, 1))


def upsample_nearest2(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x spatial upsampling."""
    _require_nchw("upsample_nearest2", x)
    data = x.data.repeat(2, axis=2).repeat(2, axis=3)
    n, c, h, w = x.shape

    def bwd(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return Tensor._node(data, (x,), bwd)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited and parent.requires_grad:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad leaf reachable from `loss`.

    `loss` must be a scalar produced on the active graph. Interior records
    are freed afterwards (a second backward through the same nodes raises).
    Leaf gradients accumulate across calls until zeroed.
    """
    if loss.size != 1:
        raise ShapeError("backward expects a scalar loss", loss.shape)
    if not loss.requires_grad:
        raise NumericalError("backward on a tensor with no differentiable inputs")
    if loss._backward_fn is None and loss._parents == ():
        # A lone leaf: its gradient is the seed itself.
        loss.grad = (loss.grad if loss.grad is not None else 0.0) + np.ones_like(loss.data)
        return

    order = _toposort(loss)
    grads: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward_fn is _CONSUMED:
            raise NumericalError("backward through an already-consumed tape")
        if node._backward_fn is None:
            if g is not None:
                # Leaf: accumulate into the persistent buffer.
                node.grad = np.array(g) if node.grad is None else node.grad + g
            continue
        if g is not None:
            parent_grads = node._backward_fn(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
        # Consume the tape: free the record so memory is released and a
        # second replay through it is impossible.
        node._parents = ()
        node._backward_fn = _CONSUMED


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    step: float = 1e-5,
    exclude: Array | None = None,
    sample: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error per coordinate is |analytic - numeric| / max(1, |analytic|).
    `exclude` marks coordinates to skip (e.g. within 1e-6 of a
    nondifferentiability). `sample` limits the check to a random coordinate
    subset, which keeps large compositions affordable.
    """
    base = x.data.astype(np.float64)
    probe = Tensor(base, requires_grad=True)
    out = f(probe)
    backward(out)
    analytic = probe.grad.reshape(-1).copy()

    coords = np.arange(base.size)
    if exclude is not None:
        coords = coords[~np.asarray(exclude).reshape(-1)]
    if sample is not None and sample < coords.size:
        rng = np.random.default_rng(seed)
        coords = rng.choice(coords, size=sample, replace=False)

    flat = base.reshape(-1)
    max_err = 0.0
    for idx in coords:
        saved = flat[idx]
        flat[idx] = saved + step
        hi = f(Tensor(base.copy())).data.item()
        flat[idx] = saved - step
        lo = f(Tensor(base.copy())).data.item()
        flat[idx] = saved
        numeric = (hi - lo) / (2.0 * step)
        err = abs(analytic[idx] - numeric) / max(1.0, abs(analytic[idx]))
        max_err = max(max_err, err)
    return max_err
