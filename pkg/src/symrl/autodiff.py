"""Minimal reverse-mode automatic differentiation over numpy arrays.

Float64 throughout. Every op stores a backward closure; Tensor.backward()
runs one reverse topological pass and accumulates gradients into the leaf
tensors that were created with requires_grad=True.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "_backward", "_param_slice")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.parents = parents
        self._backward = backward
        self._param_slice = None  # (offset, size) for network parameter leaves

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={'yes' if self.requires_grad else 'no'})"

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def item(self) -> float:
        return float(self.data)

    def backward(self) -> None:
        """Reverse pass from a scalar root; accumulates into leaf .grad fields."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar, got shape {self.data.shape}")
        order = _topo(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._param_slice is not None or (node.requires_grad and not node.parents):
                node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node.parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _topo(root: Tensor) -> list[Tensor]:
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    return Tensor(
        a.data + b.data,
        parents=(a, b),
        backward=lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    return Tensor(
        a.data - b.data,
        parents=(a, b),
        backward=lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    return Tensor(
        a.data * b.data,
        parents=(a, b),
        backward=lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data
    return Tensor(
        out,
        parents=(a, b),
        backward=lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        ),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    # supports (..., n, k) @ (k, m); enough for dense layers and im2col gemm
    if b.data.ndim != 2:
        raise ValueError("matmul right operand must be 2-D")

    def backward(g):
        da = g @ b.data.T
        ga = g.reshape(-1, g.shape[-1])
        xa = a.data.reshape(-1, a.data.shape[-1])
        db = xa.T @ ga
        return da, db

    return Tensor(a.data @ b.data, parents=(a, b), backward=backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor(out, parents=(a,), backward=lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return Tensor(np.log(a.data), parents=(a,), backward=lambda g: (g / a.data,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor(out, parents=(a,), backward=lambda g: (g * (1.0 - out * out),))


def square(a: Tensor) -> Tensor:
    return Tensor(a.data * a.data, parents=(a,), backward=lambda g: (2.0 * g * a.data,))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return Tensor(a.data.sum(axis=axis, keepdims=keepdims), parents=(a,), backward=backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    choose_a = a.data >= b.data
    return Tensor(
        np.where(choose_a, a.data, b.data),
        parents=(a, b),
        backward=lambda g: (
            _unbroadcast(g * choose_a, a.shape),
            _unbroadcast(g * ~choose_a, b.shape),
        ),
    )


def minimum(a: Tensor, b: Tensor) -> Tensor:
    choose_a = a.data <= b.data
    return Tensor(
        np.where(choose_a, a.data, b.data),
        parents=(a, b),
        backward=lambda g: (
            _unbroadcast(g * choose_a, a.shape),
            _unbroadcast(g * ~choose_a, b.shape),
        ),
    )


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    return minimum(maximum(a, Tensor(lo)), Tensor(hi))


def reshape(a: Tensor, shape) -> Tensor:
    return Tensor(
        a.data.reshape(shape), parents=(a,), backward=lambda g: (g.reshape(a.shape),)
    )


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return Tensor(
        np.concatenate([t.data for t in tensors], axis=axis),
        parents=tuple(tensors),
        backward=lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def stack(tensors: list[Tensor], axis: int) -> Tensor:
    return Tensor(
        np.stack([t.data for t in tensors], axis=axis),
        parents=tuple(tensors),
        backward=lambda g: tuple(np.moveaxis(g, axis, 0)),
    )


def rows(a: Tensor, start: int, stop: int) -> Tensor:
    def backward(g):
        out = np.zeros_like(a.data)
        out[start:stop] = g
        return (out,)

    return Tensor(a.data[start:stop], parents=(a,), backward=backward)


def permute_cols(a: Tensor, perm: np.ndarray) -> Tensor:
    """y[..., i] = x[..., perm[i]] for a fixed permutation of the last axis."""
    perm = np.asarray(perm, dtype=np.intp)

    def backward(g):
        out = np.zeros_like(a.data)
        out[..., perm] = g
        return (out,)

    return Tensor(a.data[..., perm], parents=(a,), backward=backward)


def take_along(a: Tensor, idx: np.ndarray) -> Tensor:
    """y[n] = x[n, idx[n]] for a 2-D tensor and one index per row."""
    n = np.arange(a.data.shape[0])

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, (n, idx), g)
        return (out,)

    return Tensor(a.data[n, idx], parents=(a,), backward=backward)


def gather_axis(a: Tensor, idx: np.ndarray, axis: int) -> Tensor:
    """np.take_along_axis for a per-slice permutation index (bijective along axis)."""

    def backward(g):
        out = np.zeros_like(a.data)
        np.put_along_axis(out, idx, g, axis=axis)
        return (out,)

    return Tensor(np.take_along_axis(a.data, idx, axis=axis), parents=(a,), backward=backward)


def stop_grad(a: Tensor) -> Tensor:
    return Tensor(a.data.copy())


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int, pad: int) -> Tensor:
    """2-D convolution, NCHW layout, square kernel, via im2col."""
    n, cin, h, wid = x.data.shape
    f, cin2, k, k2 = w.data.shape
    if cin != cin2 or k != k2:
        raise ValueError(f"kernel {w.data.shape} does not match input {x.data.shape}")
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wid + 2 * pad - k) // stride + 1
    if oh < 1 or ow < 1:
        raise ValueError(f"conv output would be empty for input {h}x{wid}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (n, cin, oh, ow, k, k)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, oh * ow, cin * k * k)
    wmat = w.data.reshape(f, cin * k * k).T
    out = cols @ wmat + b.data  # (n, oh*ow, f)
    out = out.transpose(0, 2, 1).reshape(n, f, oh, ow)

    def backward(g):
        gp = g.reshape(n, f, oh * ow).transpose(0, 2, 1)  # (n, oh*ow, f)
        db = gp.sum(axis=(0, 1))
        dw = np.tensordot(gp, cols, axes=([0, 1], [0, 1])).reshape(f, cin, k, k)
        dcols = (gp @ wmat.T).reshape(n, oh, ow, cin, k, k).transpose(0, 3, 1, 2, 4, 5)
        dxp = np.zeros_like(xp)
        for ki in range(k):
            for kj in range(k):
                dxp[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride] += dcols[
                    :, :, :, :, ki, kj
                ]
        dx = dxp[:, :, pad : pad + h, pad : pad + wid] if pad else dxp
        return dx, dw, db

    return Tensor(out, parents=(x, w, b), backward=backward)


def sorted_mean(a: Tensor, axis: int) -> Tensor:
    """Mean along an axis, summing in value-sorted order.

    The result depends only on the multiset of values in each slice, so two
    evaluations whose slices are permutations of each other agree bit for bit.
    """
    idx = np.argsort(a.data, axis=axis, kind="stable")
    return tmean(gather_axis(a, idx, axis), axis=axis)
