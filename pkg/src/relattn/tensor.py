"""Dense tensors with reverse-mode automatic differentiation.

A small eager tape: every differentiable operation records its parent
nodes and a backward closure on the output. ``Tensor.backward()`` walks
the graph in reverse topological order and accumulates gradients into
``.grad``. Storage is numpy, 64-bit floats by default.
"""

from __future__ import annotations

import contextlib

import numpy as np


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class DomainError(ValueError):
    """Input lies outside the mathematical domain of an operation."""


_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True


def set_default_dtype(dtype) -> None:
    """Switch the storage dtype for newly created tensors (float32 or float64)."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dt}; use float32 or float64")
    _DEFAULT_DTYPE = dt.type


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block. Used for inference and
    finite-difference probes where the tape would only cost memory."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the shape of the operand."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad) and _GRAD_ENABLED
        self._parents = ()
        self._backward = None

    # -- basic introspection -------------------------------------------------

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._item_err()

    def _item_err(self):
        raise DimensionError(f"item() requires a single-element tensor, got shape {self.shape}")

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff ------------------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self, grad=None) -> None:
        """Backpropagate from this node. Without an explicit seed gradient
        the tensor must hold a single element."""
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a gradient requires a scalar output")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.data.shape:
                raise DimensionError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        self._accumulate(grad)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar --------------------------------------------------

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, *shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, *axes)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims=False) -> "Tensor":
        return tmax(self, axis=axis, keepdims=keepdims)


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE))


def _node(data: np.ndarray, parents: tuple, backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


# -- arithmetic ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    data = a.data + b.data

    def backward(g):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(g, b.data.shape))

    return _node(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    data = a.data - b.data

    def backward(g):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(-g, b.data.shape))

    return _node(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    data = a.data * b.data

    def backward(g):
        a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _node(data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    data = a.data / b.data

    def backward(g):
        a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _node(data, (a, b), backward)


def power(a, p: float) -> Tensor:
    a = _coerce(a)
    p = float(p)
    data = a.data ** p

    def backward(g):
        a._accumulate(g * p * a.data ** (p - 1.0))

    return _node(data, (a,), backward)


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = _coerce(a), _coerce(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul requires >=2-d operands, got {a.shape} @ {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(g):
        a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    return _node(data, (a, b), backward)


# -- shape ops ---------------------------------------------------------------


def reshape(a, *shape) -> Tensor:
    a = _coerce(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    data = a.data.reshape(shape)
    src_shape = a.data.shape

    def backward(g):
        a._accumulate(g.reshape(src_shape))

    return _node(data, (a,), backward)


def transpose(a, *axes) -> Tensor:
    a = _coerce(a)
    if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    if not axes:
        axes = tuple(range(a.ndim))[::-1]
    inv = np.argsort(axes)
    data = a.data.transpose(axes)

    def backward(g):
        a._accumulate(g.transpose(inv))

    return _node(data, (a,), backward)


def swap_last(a) -> Tensor:
    """Transpose the trailing two axes, keeping batch axes fixed."""
    a = _coerce(a)
    axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    return transpose(a, axes)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [_coerce(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            t._accumulate(piece)

    return _node(data, tuple(tensors), backward)


def take(a, idx) -> Tensor:
    """Indexing. Integer-array indices gather along the first axis with
    scatter-add on the backward pass; anything else is basic indexing."""
    a = _coerce(a)
    if isinstance(idx, (list, np.ndarray)) and not isinstance(idx, tuple):
        idx = np.asarray(idx)
        if idx.dtype == bool:
            raise DimensionError("boolean mask indexing is not supported; multiply by a mask instead")
        idx = idx.astype(np.intp)
        data = a.data[idx]

        def backward(g):
            buf = np.zeros_like(a.data)
            np.add.at(buf, idx, g)
            a._accumulate(buf)

        return _node(data, (a,), backward)

    data = a.data[idx]

    def backward_basic(g):
        buf = np.zeros_like(a.data)
        buf[idx] = g
        a._accumulate(buf)

    return _node(data, (a,), backward_basic)


# -- reductions --------------------------------------------------------------


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _coerce(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)
    src_shape = a.data.shape

    def backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, src_shape))
            return
        if not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            axes = tuple(ax % len(src_shape) for ax in axes)
            shape = tuple(1 if i in axes else s for i, s in enumerate(src_shape))
            g = g.reshape(shape)
        a._accumulate(np.broadcast_to(g, src_shape))

    return _node(data, (a,), backward)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = _coerce(a)
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.data.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def tmax(a, axis=None, keepdims=False) -> Tensor:
    """Maximum reduction. Ties split the gradient equally, a valid
    subgradient that keeps the check deterministic."""
    a = _coerce(a)
    data = a.data.max(axis=axis, keepdims=keepdims)
    src_shape = a.data.shape

    def backward(g):
        full = data if keepdims or axis is None else np.expand_dims(
            data, axis if isinstance(axis, tuple) else (axis,))
        mask = (a.data == full).astype(a.data.dtype)
        counts = mask.sum(axis=axis, keepdims=True) if axis is not None else mask.sum()
        gg = g if keepdims or axis is None else np.expand_dims(
            g, axis if isinstance(axis, tuple) else (axis,))
        a._accumulate(np.broadcast_to(gg, src_shape) * mask / counts)

    return _node(data, (a,), backward)


# -- elementwise nonlinearities ---------------------------------------------


def exp(a) -> Tensor:
    a = _coerce(a)
    data = np.exp(a.data)

    def backward(g):
        a._accumulate(g * data)

    return _node(data, (a,), backward)


def log(a) -> Tensor:
    a = _coerce(a)
    if np.any(a.data <= 0):
        raise DomainError("log requires strictly positive input")
    data = np.log(a.data)

    def backward(g):
        a._accumulate(g / a.data)

    return _node(data, (a,), backward)


def sqrt(a) -> Tensor:
    a = _coerce(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt requires non-negative input")
    data = np.sqrt(a.data)

    def backward(g):
        a._accumulate(g * 0.5 / np.maximum(data, 1e-300))

    return _node(data, (a,), backward)


def tanh(a) -> Tensor:
    a = _coerce(a)
    data = np.tanh(a.data)

    def backward(g):
        a._accumulate(g * (1.0 - data * data))

    return _node(data, (a,), backward)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = _coerce(a)
    data = _sigmoid_np(a.data)

    def backward(g):
        a._accumulate(g * data * (1.0 - data))

    return _node(data, (a,), backward)


def relu(a) -> Tensor:
    a = _coerce(a)
    data = np.maximum(a.data, 0.0)

    def backward(g):
        a._accumulate(g * (a.data > 0))

    return _node(data, (a,), backward)


def softplus(a) -> Tensor:
    """log(1 + exp(x)), computed stably for large |x|."""
    a = _coerce(a)
    data = np.logaddexp(0.0, a.data)

    def backward(g):
        a._accumulate(g * _sigmoid_np(a.data))

    return _node(data, (a,), backward)


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes where the input is inside the
    closed interval and is zero outside."""
    a = _coerce(a)
    if lo > hi:
        raise ValueError(f"clamp bounds reversed: [{lo}, {hi}]")
    data = np.clip(a.data, lo, hi)

    def backward(g):
        a._accumulate(g * ((a.data >= lo) & (a.data <= hi)))

    return _node(data, (a,), backward)


# -- fused layers ------------------------------------------------------------


def linear(x, weight, bias=None) -> Tensor:
    """Affine map over the last axis: x @ weight + bias."""
    x, weight = _coerce(x), _coerce(weight)
    if weight.ndim != 2:
        raise DimensionError(f"linear weight must be 2-d, got {weight.shape}")
    if x.data.shape[-1] != weight.data.shape[0]:
        raise DimensionError(
            f"linear input width {x.data.shape[-1]} != weight rows {weight.data.shape[0]}")
    flat = x.ndim == 1
    if flat:
        x = reshape(x, (1, x.data.shape[0]))
    out = matmul(x, weight)
    if bias is not None:
        bias = _coerce(bias)
        if bias.data.shape != (weight.data.shape[1],):
            raise DimensionError(
                f"linear bias shape {bias.data.shape} != ({weight.data.shape[1]},)")
        out = add(out, bias)
    if flat:
        out = reshape(out, (weight.data.shape[1],))
    return out


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax with a fused backward pass."""
    a = _coerce(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    ez = np.exp(shifted)
    data = ez / ez.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        a._accumulate(data * (g - inner))

    return _node(data, (a,), backward)


def layer_norm(x, gain, shift, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale
    and shift. Composed from primitive ops so the tape differentiates it."""
    x, gain, shift = _coerce(x), _coerce(gain), _coerce(shift)
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or shift.data.shape != (d,):
        raise DimensionError(
            f"layer_norm gain/shift must have shape ({d},), got {gain.shape} and {shift.shape}")
    mu = tmean(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = tmean(mul(centered, centered), axis=-1, keepdims=True)
    norm = mul(centered, power(add(var, eps), -0.5))
    return add(mul(norm, gain), shift)


# -- sampling helpers ----------------------------------------------------


def standard_gumbel(rng: np.random.Generator, shape) -> np.ndarray:
    """Draw standard Gumbel noise as -log(-log(u)) with u clipped away
    from {0, 1} so both logs stay finite."""
    u = rng.random(shape)
    u = np.clip(u, 1e-12, 1.0 - 1e-12)
    return -np.log(-np.log(u))


def _straight_through(soft: Tensor, hard_data: np.ndarray) -> Tensor:
    def backward(g):
        soft._accumulate(g)

    return _node(hard_data, (soft,), backward)


def gumbel_softmax(logits, tau: float, rng: np.random.Generator = None,
                   hard: bool = False, noise: np.ndarray = None) -> Tensor:
    """Sample from softmax((logits + Gumbel noise) / tau) over the last axis.

    With hard=True the output is exactly one-hot at the argmax while the
    gradient is taken from the soft sample (straight-through estimator).
    Pass `noise` to pin the perturbation; otherwise `rng` must be given.
    """
    if tau <= 0:
        raise ValueError(f"gumbel_softmax temperature must be positive, got {tau}")
    logits = _coerce(logits)
    if noise is None:
        if rng is None:
            raise ValueError("gumbel_softmax needs an rng when noise is not supplied")
        noise = standard_gumbel(rng, logits.data.shape)
    else:
        noise = np.asarray(noise, dtype=logits.data.dtype)
        if noise.shape != logits.data.shape:
            raise DimensionError(f"noise shape {noise.shape} != logits shape {logits.shape}")
    soft = softmax(div(add(logits, Tensor(noise)), tau), axis=-1)
    if not hard:
        return soft
    flat = soft.data.reshape(-1, soft.data.shape[-1])
    hard_data = np.zeros_like(flat)
    hard_data[np.arange(flat.shape[0]), flat.argmax(axis=1)] = 1.0
    return _straight_through(soft, hard_data.reshape(soft.data.shape))


# -- feature volume sampling ---------------------------------------------


def point_sample(volume, coords) -> Tensor:
    """Sample a feature volume at fractional 3-d points.

    volume: S x H x W x d tensor; coords: [... x 3] points in [0,1]^3
    ordered (x, y, s). x spans the W axis, y the H axis, s the scale
    axis; each coordinate maps to a continuous index u * (size - 1) and
    the eight surrounding corners blend trilinearly. Coordinates outside
    [0,1] clamp to the border. Returns [... x d] features.
    """
    volume, coords = _coerce(volume), _coerce(coords)
    if volume.ndim != 4:
        raise DimensionError(f"volume must be S x H x W x d, got {volume.shape}")
    if coords.data.shape[-1] != 3:
        raise DimensionError(f"coords must end in 3 (x, y, s), got {coords.shape}")
    S, H, W, d = volume.data.shape
    lead = coords.data.shape[:-1]
    pts = coords.data.reshape(-1, 3)
    n = pts.shape[0]

    sizes = np.array([W, H, S], dtype=volume.data.dtype)
    cont = pts * (sizes - 1.0)
    cont_cl = np.clip(cont, 0.0, sizes - 1.0)
    lo = np.floor(cont_cl).astype(np.intp)
    lo = np.minimum(lo, (sizes - 2).clip(min=0).astype(np.intp))
    frac = cont_cl - lo
    inside = ((cont >= 0.0) & (cont <= sizes - 1.0)).astype(volume.data.dtype)

    x0, y0, s0 = lo[:, 0], lo[:, 1], lo[:, 2]
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    s1 = np.minimum(s0 + 1, S - 1)
    fx, fy, fs = frac[:, 0], frac[:, 1], frac[:, 2]

    corner_idx = []
    corner_w = []
    for ds, sidx in ((0, s0), (1, s1)):
        ws = (1.0 - fs) if ds == 0 else fs
        for dy, yidx in ((0, y0), (1, y1)):
            wy = (1.0 - fy) if dy == 0 else fy
            for dx, xidx in ((0, x0), (1, x1)):
                wx = (1.0 - fx) if dx == 0 else fx
                corner_idx.append((sidx, yidx, xidx))
                corner_w.append(ws * wy * wx)
    weights = np.stack(corner_w, axis=0)  # 8 x n
    gathered = np.stack([volume.data[s, y, x] for s, y, x in corner_idx], axis=0)  # 8 x n x d
    out_flat = (weights[:, :, None] * gathered).sum(axis=0)
    data = out_flat.reshape(lead + (d,))

    def backward(g):
        gf = g.reshape(n, d)
        if volume.requires_grad:
            buf = np.zeros_like(volume.data)
            for (sidx, yidx, xidx), w in zip(corner_idx, corner_w):
                np.add.at(buf, (sidx, yidx, xidx), w[:, None] * gf)
            volume._accumulate(buf)
        if coords.requires_grad:
            # d/du of trilinear interpolation: the corner-difference form
            # along each axis, scaled by (size - 1), zeroed where the raw
            # coordinate fell outside [0, 1] (border clamp).
            gcorner = [np.einsum("nd,nd->n", gf, c) for c in gathered]  # 8 scalars per point
            ws0, ws1 = 1.0 - fs, fs
            wy0, wy1 = 1.0 - fy, fy
            wx0, wx1 = 1.0 - fx, fx
            # order: index bit pattern s*4 + y*2 + x
            c000, c001, c010, c011, c100, c101, c110, c111 = gcorner
            d_dx = (ws0 * (wy0 * (c001 - c000) + wy1 * (c011 - c010))
                    + ws1 * (wy0 * (c101 - c100) + wy1 * (c111 - c110)))
            d_dy = (ws0 * (wx0 * (c010 - c000) + wx1 * (c011 - c001))
                    + ws1 * (wx0 * (c110 - c100) + wx1 * (c111 - c101)))
            d_ds = (wy0 * (wx0 * (c100 - c000) + wx1 * (c101 - c001))
                    + wy1 * (wx0 * (c110 - c010) + wx1 * (c111 - c011)))
            gc = np.stack([d_dx * (W - 1), d_dy * (H - 1), d_ds * (S - 1)], axis=-1)
            gc *= inside
            coords._accumulate(gc.reshape(lead + (3,)))

    return _node(data, (volume, coords), backward)
