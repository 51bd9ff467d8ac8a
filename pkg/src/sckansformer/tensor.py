"""Dense tensors with reverse-mode automatic differentiation.

Every layer in the package expresses its forward math through the
primitives in this module, so a single gradient implementation serves the
whole model. The tape is built eagerly during the forward pass: each
differentiable op stamps its output with a monotonically increasing node
index, which makes "sort by index, descending" a valid reverse-topological
order for backpropagation.

Default precision is 64-bit; 32-bit is opt-in via the ``dtype`` argument
or :func:`set_default_dtype`.
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "ConfigError",
    "ContractError",
    "set_default_dtype",
    "get_default_dtype",
    "no_grad",
    "is_grad_enabled",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "reshape",
    "transpose",
    "broadcast_to",
    "concatenate",
    "split",
    "tsum",
    "tmean",
    "exp",
    "log",
    "sqrt",
    "sigmoid",
    "silu",
    "softmax",
    "conv2d",
    "layer_norm",
    "group_norm",
    "batch_norm",
    "global_avg_pool",
    "cross_entropy_with_logits",
    "tape_nodes",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class ConfigError(ValueError):
    """A structural parameter (group count, width chain, ...) is invalid."""


class ContractError(ValueError):
    """An op precondition other than a shape/config rule was violated."""


_DEFAULT_DTYPE = np.float64
_FLOAT_DTYPES = (np.float32, np.float64)


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in _FLOAT_DTYPES:
        raise ContractError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype


def get_default_dtype():
    return _DEFAULT_DTYPE


_grad_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


class no_grad:
    """Context manager that suppresses tape recording."""

    def __enter__(self):
        self._prev = is_grad_enabled()
        _grad_state.enabled = False
        return self

    def __exit__(self, *exc):
        _grad_state.enabled = self._prev
        return False


_node_counter = itertools.count()


class Tensor:
    """A dense n-dimensional array, optionally tracked on the gradient tape.

    ``data`` is always a contiguous numpy float array. Tensors produced by
    differentiable ops carry ``_parents`` (the input tensors), ``_grad_fn``
    (a closure mapping the output gradient to per-parent gradients) and
    ``_node`` (the eager tape index). Leaf tensors with
    ``requires_grad=False`` never appear as differentiable nodes.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn", "_node", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.type not in _FLOAT_DTYPES:
            arr = arr.astype(_DEFAULT_DTYPE)
        # ascontiguousarray would promote 0-d to 1-d, so go through asarray
        self.data = np.asarray(arr, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._grad_fn: Optional[Callable] = None
        self._node: Optional[int] = None
        self._op: str = "leaf"

    # -- introspection ------------------------------------------------

    @property
    def shape(self) -> tuple:
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
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    # -- operator sugar -----------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other, self.dtype))

    # -- autodiff -----------------------------------------------------

    def backward(self) -> dict:
        """Reverse-accumulate gradients from this scalar.

        Returns a map from participating tensor to its gradient array;
        every reachable tensor with ``requires_grad=True`` also gets the
        array assigned to its ``.grad`` (summed with any existing value,
        matching multi-consumer accumulation semantics).
        """
        if self.data.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {self.shape}"
            )
        order = tape_nodes(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        gradient_map: dict[Tensor, np.ndarray] = {}
        for t in order:
            g = grads.pop(id(t), None)
            if g is None:
                continue
            gradient_map[t] = g
            if t.requires_grad:
                t.grad = g if t.grad is None else t.grad + g
            if t._grad_fn is None:
                continue
            parent_grads = t._grad_fn(g)
            for parent, pg in zip(t._parents, parent_grads):
                if pg is None or not _tracks(parent):
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return gradient_map


def tape_nodes(root: Tensor) -> list:
    """Tensors reachable from ``root``, in reverse tape order.

    Because the tape is stamped eagerly during the forward pass, every
    node's inputs carry strictly smaller indices, so descending index
    order is a valid reverse-topological order.
    """
    seen = set()
    nodes = []
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(p for p in t._parents if _tracks(p))
    nodes.sort(key=lambda t: -1 if t._node is None else t._node, reverse=True)
    return nodes


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else _DEFAULT_DTYPE))


def _tracks(t: Tensor) -> bool:
    """True if the tensor participates in the tape (leaf param or op output)."""
    return t.requires_grad or t._grad_fn is not None


def _make_output(data: np.ndarray, parents: Sequence[Tensor], grad_fn, op: str) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(_tracks(p) for p in parents):
        out.requires_grad = False  # grads land on leaves; out is an interior node
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
        out._node = next(_node_counter)
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient over axes that were broadcast in the forward op."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a_shape: tuple, b_shape: tuple, op: str) -> None:
    try:
        np.broadcast_shapes(a_shape, b_shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a_shape} and {b_shape} do not broadcast")


# -- elementwise arithmetic -------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape, "add")

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make_output(a.data + b.data, (a, b), grad_fn, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape, "sub")

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make_output(a.data - b.data, (a, b), grad_fn, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape, "mul")
    a_data, b_data = a.data, b.data

    def grad_fn(g):
        return _unbroadcast(g * b_data, a.shape), _unbroadcast(g * a_data, b.shape)

    return _make_output(a_data * b_data, (a, b), grad_fn, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape, "div")
    a_data, b_data = a.data, b.data

    def grad_fn(g):
        ga = _unbroadcast(g / b_data, a.shape)
        gb = _unbroadcast(-g * a_data / (b_data * b_data), b.shape)
        return ga, gb

    return _make_output(a_data / b_data, (a, b), grad_fn, "div")


def neg(a: Tensor) -> Tensor:
    def grad_fn(g):
        return (-g,)

    return _make_output(-a.data, (a,), grad_fn, "neg")


# -- matmul ------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Supports stacked (batched) operands via numpy rules."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    a_data, b_data = a.data, b.data

    def grad_fn(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b_data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a_data, -1, -2), g), b.shape)
        return ga, gb

    return _make_output(np.matmul(a_data, b_data), (a, b), grad_fn, "matmul")


# -- shape manipulation -------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old_shape = a.shape

    def grad_fn(g):
        return (g.reshape(old_shape),)

    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {old_shape} to {shape}")
    return _make_output(np.ascontiguousarray(data), (a,), grad_fn, "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose axes {axes} invalid for rank {a.ndim}")
    inverse = tuple(np.argsort(axes))

    def grad_fn(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return _make_output(np.ascontiguousarray(a.data.transpose(axes)), (a,), grad_fn, "transpose")


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    _check_broadcast(a.shape, shape, "broadcast_to")
    if np.broadcast_shapes(a.shape, shape) != shape:
        raise ShapeError(f"cannot broadcast {a.shape} to {shape}")
    old_shape = a.shape

    def grad_fn(g):
        return (_unbroadcast(g, old_shape),)

    return _make_output(np.ascontiguousarray(np.broadcast_to(a.data, shape)), (a,), grad_fn, "broadcast")


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concatenate of zero tensors")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        return tuple(
            np.ascontiguousarray(np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis))
            for i in range(len(tensors))
        )

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _make_output(data, tensors, grad_fn, "concat")


def split(a: Tensor, sizes: Sequence[int], axis: int = 0) -> list:
    """Split along ``axis`` into chunks of the given sizes."""
    sizes = list(sizes)
    if sum(sizes) != a.shape[axis]:
        raise ShapeError(f"split sizes {sizes} do not cover axis of length {a.shape[axis]}")
    offsets = np.cumsum([0] + sizes)
    outs = []
    for i in range(len(sizes)):
        idx = np.arange(offsets[i], offsets[i + 1])

        def grad_fn(g, _i=i):
            full = np.zeros_like(a.data)
            sl = [slice(None)] * a.ndim
            sl[axis] = slice(int(offsets[_i]), int(offsets[_i + 1]))
            full[tuple(sl)] = g
            return (full,)

        piece = np.ascontiguousarray(np.take(a.data, idx, axis=axis))
        outs.append(_make_output(piece, (a,), grad_fn, "split"))
    return outs


# -- reductions ----------------------------------------------------------


def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    in_shape = a.shape

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, in_shape).copy(),)

    return _make_output(a.data.sum(axis=axes, keepdims=keepdims), (a,), grad_fn, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    in_shape = a.shape

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, in_shape).copy(),)

    return _make_output(a.data.mean(axis=axes, keepdims=keepdims), (a,), grad_fn, "mean")


# -- elementwise nonlinearities -------------------------------------------


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def grad_fn(g):
        return (g * out_data,)

    return _make_output(out_data, (a,), grad_fn, "exp")


def log(a: Tensor) -> Tensor:
    a_data = a.data

    def grad_fn(g):
        return (g / a_data,)

    return _make_output(np.log(a_data), (a,), grad_fn, "log")


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def grad_fn(g):
        return (g / (2.0 * out_data),)

    return _make_output(out_data, (a,), grad_fn, "sqrt")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def grad_fn(g):
        return (g * out_data * (1.0 - out_data),)

    return _make_output(out_data, (a,), grad_fn, "sigmoid")


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x); also the KAN base activation."""
    return mul(a, sigmoid(a))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Exp-normalize along ``axis`` with max-subtraction for stability."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        return (out_data * (g - dot),)

    return _make_output(out_data, (a,), grad_fn, "softmax")


# -- convolution ----------------------------------------------------------


def _conv_cols(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Gather sliding-window patches: [B,C,kh,kw,oh,ow]."""
    b, c = xp.shape[:2]
    cols = np.empty((b, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return cols


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """Grouped 2-D cross-correlation.

    ``x`` is [B,C,H,W], ``kernel`` is [O,C/groups,kH,kW]. Depthwise
    convolution is the ``groups=C, O=C`` case.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D operands, got {x.shape} and {kernel.shape}")
    b, c, h, w = x.shape
    o, cg, kh, kw = kernel.shape
    if c % groups != 0 or o % groups != 0:
        raise ConfigError(f"conv2d: channels {c} and filters {o} must both divide by groups={groups}")
    if cg != c // groups:
        raise ShapeError(f"conv2d: kernel expects {cg} channels per group, input provides {c // groups}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _conv_cols(xp, kh, kw, stride, oh, ow)
    colsg = cols.reshape(b, groups, cg, kh, kw, oh, ow)
    wg = kernel.data.reshape(groups, o // groups, cg, kh, kw)
    out = np.einsum("bgcijhw,gocij->bgohw", colsg, wg, optimize=True)
    out = np.ascontiguousarray(out.reshape(b, o, oh, ow))

    hp, wp = xp.shape[2], xp.shape[3]

    def grad_fn(g):
        gg = g.reshape(b, groups, o // groups, oh, ow)
        gk = np.einsum("bgcijhw,bgohw->gocij", colsg, gg, optimize=True)
        gk = gk.reshape(o, cg, kh, kw)
        gcols = np.einsum("gocij,bgohw->bgcijhw", wg, gg, optimize=True)
        gcols = gcols.reshape(b, c, kh, kw, oh, ow)
        gxp = np.zeros((b, c, hp, wp), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += gcols[:, :, i, j]
        gx = gxp[:, :, padding : hp - padding, padding : wp - padding] if padding else gxp
        return np.ascontiguousarray(gx), gk

    return _make_output(out, (x, kernel), grad_fn, "conv2d")


# -- normalization ----------------------------------------------------------


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize over the last axis, then apply the affine pair."""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match width {x.shape[-1]}")
    m = tmean(x, axis=-1, keepdims=True)
    centered = sub(x, m)
    var = tmean(mul(centered, centered), axis=-1, keepdims=True)
    inv = div(centered, sqrt(add(var, _as_tensor(eps, x.dtype))))
    return add(mul(inv, gamma), beta)


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-(sample, channel-group) standardization of a [B,C,H,W] map."""
    if x.ndim != 4:
        raise ShapeError(f"group_norm expects [B,C,H,W], got {x.shape}")
    b, c, h, w = x.shape
    if c % groups != 0:
        raise ConfigError(f"group_norm: channels {c} not divisible by groups={groups}")
    if eps <= 0:
        raise ContractError("group_norm: eps must be positive")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"group_norm affine shapes {gamma.shape}/{beta.shape} do not match channels {c}")
    xg = reshape(x, (b, groups, c // groups, h, w))
    m = tmean(xg, axis=(2, 3, 4), keepdims=True)
    centered = sub(xg, m)
    var = tmean(mul(centered, centered), axis=(2, 3, 4), keepdims=True)
    normed = div(centered, sqrt(add(var, _as_tensor(eps, x.dtype))))
    normed = reshape(normed, (b, c, h, w))
    gamma_map = reshape(gamma, (1, c, 1, 1))
    beta_map = reshape(beta, (1, c, 1, 1))
    return add(mul(normed, gamma_map), beta_map)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization of a [B,C,H,W] map.

    Training mode standardizes with batch statistics and updates the
    running arrays in place with the given momentum; eval mode uses the
    running statistics. Training requires a batch of at least 2.
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm expects [B,C,H,W], got {x.shape}")
    b, c, h, w = x.shape
    if train:
        if b < 2:
            raise ContractError("batch_norm in training mode requires batch size >= 2")
        m = tmean(x, axis=(0, 2, 3), keepdims=True)
        centered = sub(x, m)
        var = tmean(mul(centered, centered), axis=(0, 2, 3), keepdims=True)
        running_mean *= 1.0 - momentum
        running_mean += momentum * m.data.reshape(c)
        running_var *= 1.0 - momentum
        running_var += momentum * var.data.reshape(c)
        normed = div(centered, sqrt(add(var, _as_tensor(eps, x.dtype))))
    else:
        m = Tensor(running_mean.reshape(1, c, 1, 1))
        v = Tensor(running_var.reshape(1, c, 1, 1))
        normed = div(sub(x, m), sqrt(add(v, _as_tensor(eps, x.dtype))))
    gamma_map = reshape(gamma, (1, c, 1, 1))
    beta_map = reshape(beta, (1, c, 1, 1))
    return add(mul(normed, gamma_map), beta_map)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes of a [B,C,H,W] map -> [B,C]."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects [B,C,H,W], got {x.shape}")
    return tmean(x, axis=(2, 3))


# -- loss ---------------------------------------------------------------------


def cross_entropy_with_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy over a [B,K] logit matrix.

    ``labels`` is an integer array of class ids. Uses the log-sum-exp
    shift for stability; the gradient is (softmax - onehot) / B.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [B,K] logits, got {logits.shape}")
    labels = np.asarray(labels)
    b, k = logits.shape
    if labels.shape != (b,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.min() < 0 or labels.max() >= k:
        raise ContractError(f"labels out of range for {k} classes")
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - lse
    loss = -log_probs[np.arange(b), labels].mean()
    probs = np.exp(log_probs)

    def grad_fn(g):
        onehot = np.zeros_like(z)
        onehot[np.arange(b), labels] = 1.0
        return ((probs - onehot) * (g / b),)

    return _make_output(np.asarray(loss, dtype=z.dtype), (logits,), grad_fn, "cross_entropy")
