"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op builds a node holding its parents and a closure that maps the
output gradient to one gradient per parent. ``backward`` walks the graph in
reverse topological order and accumulates into leaf ``.grad`` arrays.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


class _Mode(threading.local):
    # Per thread, so that evaluation workers entering and leaving no_grad
    # cannot leave another thread's graph recording switched off.
    grad_enabled = True
    # When not None, relu appends its activation mask here (used by gradcheck
    # to detect perturbations that straddle a kink).
    relu_probe: list | None = None


_mode = _Mode()


class ShapeError(ValueError):
    pass


class UnsupportedGeometryError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


@contextlib.contextmanager
def no_grad():
    prev = _mode.grad_enabled
    _mode.grad_enabled = False
    try:
        yield
    finally:
        _mode.grad_enabled = prev


@contextlib.contextmanager
def record_relu_masks():
    prev = _mode.relu_probe
    _mode.relu_probe = []
    try:
        yield _mode.relu_probe
    finally:
        _mode.relu_probe = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, c: float):
        return scale(self, 1.0 / c)

    def sum(self, axis=None):
        return sum_(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        return permute(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if _mode.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(x.data * c, (x,), lambda g: (g * c,), "scale")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if _mode.relu_probe is not None:
        _mode.relu_probe.append(mask)
    # subgradient 0 at exactly 0
    return _node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


# -- reductions and layout ---------------------------------------------------


def sum_(x: Tensor, axis=None) -> Tensor:
    shape = x.shape
    if axis is None:
        return _node(np.asarray(x.data.sum()), (x,),
                     lambda g: (np.broadcast_to(g, shape).copy(),), "sum")
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(shape) for a in axes)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axes), shape).copy(),)

    return _node(x.data.sum(axis=axes), (x,), backward, "sum")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"cannot reshape {old} to {tuple(shape)}") from e
    return _node(out, (x,), lambda g: (g.reshape(old),), "reshape")


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"invalid permutation {axes} for rank {x.ndim}")
    inv = tuple(np.argsort(axes))
    return _node(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g: (g.transpose(inv),), "permute")


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    ref = xs[0].shape
    for x in xs:
        if x.ndim != 4 or x.shape[0] != ref[0] or x.shape[2:] != ref[2:]:
            raise ShapeError(f"concat_channels needs equal N,H,W; got {[t.shape for t in xs]}")
    splits = np.cumsum([x.shape[1] for x in xs])[:-1]
    return _node(np.concatenate([x.data for x in xs], axis=1), xs,
                 lambda g: tuple(np.split(g, splits, axis=1)), "concat")


def take2d(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Gather ``x[..., rows, :][..., cols]`` over the last two axes."""
    shape = x.shape

    def backward(g):
        # scatter columns, then rows; add.at accumulates repeated indices
        tmp = np.zeros(shape[:-2] + (len(rows), shape[-1]))
        np.add.at(np.moveaxis(tmp, -1, 0), cols, np.moveaxis(g, -1, 0))
        gx = np.zeros(shape)
        np.add.at(np.moveaxis(gx, -2, 0), rows, np.moveaxis(tmp, -2, 0))
        return (gx,)

    out = x.data[..., rows, :][..., cols]
    return _node(np.ascontiguousarray(out), (x,), backward, "take2d")


def _reflect_index(n: int, total: int) -> np.ndarray:
    idx = np.arange(total)
    if n == 1:
        return np.zeros(total, dtype=int)
    period = 2 * (n - 1)
    idx = idx % period
    return np.where(idx < n, idx, period - idx)


def reflect_pad(x: Tensor, pad_h: int, pad_w: int) -> Tensor:
    """Reflection-pad the bottom/right edges of an NCHW tensor."""
    if pad_h == 0 and pad_w == 0:
        return x
    h, w = x.shape[-2:]
    return take2d(x, _reflect_index(h, h + pad_h), _reflect_index(w, w + pad_w))


def crop(x: Tensor, h: int, w: int) -> Tensor:
    if x.shape[-2:] == (h, w):
        return x
    return take2d(x, np.arange(h), np.arange(w))


# -- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _node(ad @ bd, (a, b), backward, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map on the last axis: ``x @ w.T + b`` with ``w`` shaped [out, in]."""
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input dim {x.shape[-1]} != weight in-dim {w.shape[1]}")
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is not None:
        out = out + b.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = xd.reshape(-1, xd.shape[-1])
        gx = (g2 @ wd).reshape(xd.shape)
        gw = g2.T @ x2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return _node(out, parents, backward, "linear")


def softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return _node(y, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),), "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis with population variance."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def backward(g):
        lead = tuple(range(xd.ndim - 1))
        dxhat = g * gd
        gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _node(xhat * gd + beta.data, (x, gamma, beta), backward, "layer_norm")


# -- convolutions (3x3, pad 1, stride 1 and 1x1) -----------------------------


def _windows3(x: np.ndarray) -> np.ndarray:
    """[N,C,H,W] -> [N,C,H,W,3,3] zero-padded sliding windows (a view)."""
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    return sliding_window_view(xp, (3, 3), axis=(2, 3))


def _check_nchw(x: Tensor, name: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{name} expects NCHW input, got shape {x.shape}")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    _check_nchw(x, "conv2d")
    if w.ndim != 4 or w.shape[2:] != (3, 3):
        raise UnsupportedGeometryError(f"conv2d supports 3x3 kernels only, got {w.shape}")
    if w.shape[1] != x.shape[1]:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, weight expects {w.shape[1]}")
    xd, wd = x.data, w.data
    cols = _windows3(xd)
    out = np.tensordot(cols, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]

    def backward(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        wf = wd[:, :, ::-1, ::-1]
        gx = np.tensordot(_windows3(g), wf, axes=([1, 4, 5], [0, 2, 3])).transpose(0, 3, 1, 2)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, w) if b is None else (x, w, b)
    return _node(np.ascontiguousarray(out), parents, backward, "conv2d")


def depthwise_conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    _check_nchw(x, "depthwise_conv2d")
    if w.ndim != 4 or w.shape[1:] != (1, 3, 3):
        raise UnsupportedGeometryError(f"depthwise_conv2d expects [C,1,3,3] weights, got {w.shape}")
    if w.shape[0] != x.shape[1]:
        raise ShapeError(f"depthwise_conv2d: {x.shape[1]} channels vs {w.shape[0]} filters")
    xd, wd = x.data, w.data[:, 0]
    cols = _windows3(xd)
    out = np.einsum("nchwij,cij->nchw", cols, wd)
    if b is not None:
        out = out + b.data[None, :, None, None]

    def backward(g):
        gw = np.einsum("nchw,nchwij->cij", g, cols)[:, None]
        gx = np.einsum("nchwij,cij->nchw", _windows3(g), wd[:, ::-1, ::-1])
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, w) if b is None else (x, w, b)
    return _node(out, parents, backward, "depthwise_conv2d")


def pointwise_conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    _check_nchw(x, "pointwise_conv2d")
    if w.ndim != 4 or w.shape[2:] != (1, 1):
        raise UnsupportedGeometryError(f"pointwise_conv2d expects [Cout,Cin,1,1], got {w.shape}")
    if w.shape[1] != x.shape[1]:
        raise ShapeError(f"pointwise_conv2d: input has {x.shape[1]} channels, weight expects {w.shape[1]}")
    xd, wd = x.data, w.data[:, :, 0, 0]
    out = np.tensordot(wd, xd, axes=([1], [1])).transpose(1, 0, 2, 3)
    if b is not None:
        out = out + b.data[None, :, None, None]

    def backward(g):
        gx = np.tensordot(wd, g, axes=([0], [1])).transpose(1, 0, 2, 3)
        gw = np.tensordot(g, xd, axes=([0, 2, 3], [0, 2, 3]))[:, :, None, None]
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, w) if b is None else (x, w, b)
    return _node(np.ascontiguousarray(out), parents, backward, "pointwise_conv2d")


# -- graph traversal ---------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor that requires grad")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def parameters_to_list(params: dict[str, Tensor]) -> list[Tensor]:
    return [params[k] for k in sorted(params)]


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
