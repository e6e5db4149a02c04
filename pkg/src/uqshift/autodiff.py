"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every op builds a node that records its parents and a closure mapping the
output gradient to parent gradients. ``Tensor.backward`` walks the graph in
reverse topological order, summing contributions from all consumers before
a node's closure runs, then drops the graph so the next forward starts fresh.

Image-shaped ops accept either ``[C, H, W]`` or batched ``[N, C, H, W]``
arrays; the class axis for softmax and cross-entropy is always ``-3``.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, UsageError, ValidationError

CLASS_AXIS = -3


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Accumulate d(self)/d(leaf) into every leaf with ``requires_grad``."""
        if self.data.size != 1:
            raise UsageError(f"backward() needs a scalar output, got shape {self.shape}")
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _topological_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
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


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward, op) -> Tensor:
    parents = tuple(parents)
    if not any(_needs_grad(p) for p in parents):
        return Tensor(data, op=op)
    out = Tensor(data, _parents=parents, op=op)
    out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def tsum(a: Tensor) -> Tensor:
    return _node(np.sum(a.data), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    return _node(np.mean(a.data), (a,), lambda g: (np.full(a.shape, g / n),), "mean")


# -- linear algebra -------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not align")
    return _node(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` with ``kernel[Cout, Cin, kh, kw]``."""
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or kernel.data.ndim != 4:
        raise DimensionError(f"conv2d expects [N,]C,H,W input and 4-D kernel, got {x.shape}, {kernel.shape}")
    n, cin, h, w = xd.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise DimensionError(f"kernel expects {kcin} input channels, input has {cin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"kernel size must be odd, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise DimensionError("stride must be >= 1 and padding >= 0")
    span_h, span_w = h + 2 * padding - kh, w + 2 * padding - kw
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise DimensionError(f"non-integer conv output size for input {h}x{w}, kernel {kh}x{kw}, "
                             f"stride {stride}, padding {padding}")
    ho, wo = span_h // stride + 1, span_w // stride + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * kh * kw)
    kmat = kernel.data.reshape(cout, -1)
    out = cols @ kmat.T
    if bias is not None:
        bias = _as_tensor(bias)
        out += bias.data.reshape(1, cout)
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))

    def backward(g):
        g4 = g[None] if squeeze else g
        gmat = g4.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        gk = (gmat.T @ cols).reshape(kernel.shape)
        gx = None
        if _needs_grad(x):
            gcols = (gmat @ kmat).reshape(n, ho, wo, cin, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += \
                        gcols[..., i, j].transpose(0, 3, 1, 2)
            if padding:
                gxp = gxp[:, :, padding:padding + h, padding:padding + w]
            gx = gxp[0] if squeeze else gxp
        grads = [gx, gk]
        if bias is not None:
            grads.append(gmat.sum(axis=0).reshape(bias.shape))
        return grads

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _node(out[0] if squeeze else out, parents, backward, "conv2d")


# -- spatial resampling ---------------------------------------------------

def max_pool2d(x: Tensor, k: int = 2) -> Tensor:
    d = x.data
    *lead, h, w = d.shape
    if h % k or w % k:
        raise DimensionError(f"max_pool2d: {h}x{w} not divisible by {k}")
    blocks = d.reshape(*lead, h // k, k, w // k, k)
    blocks = np.moveaxis(blocks, -3, -2).reshape(*lead, h // k, w // k, k * k)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros(blocks.shape)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gb = gb.reshape(*lead, h // k, w // k, k, k)
        return (np.moveaxis(gb, -2, -3).reshape(d.shape),)

    return _node(out, (x,), backward, "max_pool2d")


def upsample_nearest(x: Tensor, k: int = 2) -> Tensor:
    d = x.data
    out = np.repeat(np.repeat(d, k, axis=-2), k, axis=-1)
    *lead, h, w = d.shape

    def backward(g):
        return (g.reshape(*lead, h, k, w, k).sum(axis=(-3, -1)),)

    return _node(out, (x,), backward, "upsample")


def concat(tensors: Sequence[Tensor], axis: int = CLASS_AXIS) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: np.split(g, splits, axis=axis), "concat")


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity when not training or ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ValidationError(f"dropout rate must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise UsageError("dropout in sampling mode needs an rng")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return _node(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


# -- classification heads --------------------------------------------------

def softmax_array(z: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax(logits: Tensor, axis: int = CLASS_AXIS) -> Tensor:
    s = softmax_array(logits.data, axis)
    return _node(s, (logits,),
                 lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),), "softmax")


def log_softmax(logits: Tensor, axis: int = CLASS_AXIS) -> Tensor:
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return _node(out, (logits,), lambda g: (g - s * g.sum(axis=axis, keepdims=True),), "log_softmax")


def _check_labels(labels: np.ndarray, probs_shape, axis: int) -> np.ndarray:
    labels = np.asarray(labels)
    num_classes = probs_shape[axis]
    if num_classes < 2:
        raise ValidationError(f"need at least 2 classes, got {num_classes}")
    expected = tuple(s for i, s in enumerate(probs_shape) if i != axis % len(probs_shape))
    if labels.shape != expected:
        raise DimensionError(f"labels shape {labels.shape} does not match {expected}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValidationError(f"labels must lie in [0, {num_classes})")
    return np.expand_dims(labels.astype(np.intp), axis)


def cross_entropy(probs: Tensor, labels, axis: int = CLASS_AXIS) -> Tensor:
    """Mean over pixels of ``-log probs[label]``."""
    idx = _check_labels(labels, probs.shape, axis)
    picked = np.take_along_axis(probs.data, idx, axis=axis)
    m = picked.size
    loss = -np.mean(np.log(picked))

    def backward(g):
        gp = np.zeros_like(probs.data)
        np.put_along_axis(gp, idx, -g / (m * picked), axis=axis)
        return (gp,)

    return _node(loss, (probs,), backward, "cross_entropy")


def softmax_cross_entropy(logits: Tensor, labels, axis: int = CLASS_AXIS) -> Tensor:
    """Fused ``cross_entropy(softmax(logits))``; stable for confident logits."""
    idx = _check_labels(labels, logits.shape, axis)
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, idx, axis=axis)
    m = picked.size
    loss = -np.mean(picked)

    def backward(g):
        gl = np.exp(logp)
        np.put_along_axis(gl, idx, np.take_along_axis(gl, idx, axis=axis) - 1.0, axis=axis)
        return (gl * (g / m),)

    return _node(loss, (logits,), backward, "softmax_cross_entropy")


# -- finite-difference checking -------------------------------------------

def numerical_gradient(f: Callable[[], float], array: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``array``, perturbed in place."""
    grad = np.zeros_like(array)
    flat, gflat = array.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / (np.abs(numeric) + floor)))
