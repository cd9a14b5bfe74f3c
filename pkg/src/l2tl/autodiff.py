"""Small reverse-mode differentiation engine over float64 numpy arrays.

Every op builds a node holding its output value, its parents and a closure
that pushes the upstream gradient back to the parents. ``Tensor.backward``
walks the graph in reverse topological order. There is no global state, so
independent graphs may be built and differentiated from separate runs.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class NumericError(ArithmeticError):
    """Raised when an op produces NaN or infinite values."""

    def __init__(self, op: str, where: str = "forward"):
        super().__init__(f"non-finite values in {where} pass of op '{op}'")
        self.op = op
        self.where = where


def _check_finite(values: np.ndarray, op: str, where: str = "forward") -> None:
    if not np.all(np.isfinite(values)):
        raise NumericError(op, where)


class Tensor:
    """Dense array with an optional gradient slot.

    Args:
        data: array-like values, stored as float64.
        requires_grad: whether gradients should be accumulated into ``grad``.
        name: optional label, used by checkpoints and error messages.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.array(data, dtype=np.float64)
        _check_finite(self.data, name or "tensor")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], op: str,
                 backward: Callable[[np.ndarray], None]) -> "Tensor":
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = ""
        out.op = op
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = tuple(parents) if out.requires_grad else ()
        out._backward = backward if out.requires_grad else None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        Only scalar tensors can be differentiated. Gradients of intermediate
        nodes are released once they have been propagated.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is None:
                continue
            g = node.grad
            node.grad = None
            if g is None:
                continue
            _check_finite(g, node.op, "backward")
            node._backward(g)

    # operator sugar
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return Tensor._from_op(a.data + b.data, (a, b), "add", backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(-g, b.shape))

    return Tensor._from_op(a.data - b.data, (a, b), "sub", backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return Tensor._from_op(a.data * b.data, (a, b), "mul", backward)


def matmul(a, b) -> Tensor:
    """Product of a (m, k) matrix with a (k, n) matrix."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return Tensor._from_op(a.data @ b.data, (a, b), "matmul", backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        x._accumulate(g * mask)

    return Tensor._from_op(x.data * mask, (x,), "relu", backward)


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    shape = x.shape

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, shape))

    return Tensor._from_op(np.asarray(x.data.sum(axis=axis)), (x,), "sum", backward)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    count = x.size if axis is None else x.shape[axis]
    return mul(sum(x, axis), 1.0 / count)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape

    def backward(g):
        x._accumulate(g.reshape(old))

    return Tensor._from_op(x.data.reshape(shape), (x,), "reshape", backward)


def flatten(x: Tensor) -> Tensor:
    """Collapse every axis after the first."""
    return reshape(x, (x.shape[0], -1))


def log_softmax(x: Tensor) -> Tensor:
    """Log-softmax along the last axis."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - logz
    probs = np.exp(out)

    def backward(g):
        x._accumulate(g - probs * g.sum(axis=-1, keepdims=True))

    return Tensor._from_op(out, (x,), "log_softmax", backward)


def pick(x: Tensor, index: np.ndarray) -> Tensor:
    """Select ``x[..., index]`` along the last axis, one index per row."""
    index = np.asarray(index, dtype=np.int64)
    if index.shape != x.shape[:-1]:
        raise ValueError(f"pick index shape {index.shape} does not match {x.shape[:-1]}")
    if index.size and (index.min() < 0 or index.max() >= x.shape[-1]):
        raise IndexError(f"pick index out of range [0, {x.shape[-1]})")
    expanded = index[..., None]

    def backward(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, expanded, g[..., None], axis=-1)
        x._accumulate(full)

    out = np.take_along_axis(x.data, expanded, axis=-1)[..., 0]
    return Tensor._from_op(out, (x,), "pick", backward)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Per-row cross-entropy of softmax(logits) against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"cross-entropy expects (B, C) logits and (B,) labels, "
                         f"got {logits.shape} and {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise IndexError(f"label out of range [0, {logits.shape[1]})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(labels.size)
    out = logz - shifted[rows, labels]

    def backward(g):
        probs = np.exp(shifted - logz[:, None])
        probs[rows, labels] -= 1.0
        logits._accumulate(probs * g[:, None])

    return Tensor._from_op(out, (logits,), "softmax_cross_entropy", backward)


def sigmoid_bce(logits: Tensor, targets) -> Tensor:
    """Elementwise binary cross-entropy of sigmoid(logits) against targets in [0, 1]."""
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != logits.shape:
        raise ValueError(f"bce target shape {targets.shape} != logits shape {logits.shape}")
    z = logits.data
    # log(1 + exp(-|z|)) + max(z, 0) - z*t, stable for large |z|
    out = np.logaddexp(0.0, -np.abs(z)) + np.maximum(z, 0.0) - z * targets

    def backward(g):
        sig = 0.5 * (1.0 + np.tanh(0.5 * z))
        logits._accumulate(g * (sig - targets))

    return Tensor._from_op(out, (logits,), "sigmoid_bce", backward)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           padding: str = "valid") -> Tensor:
    """Stride-1 2D convolution (cross-correlation).

    Shapes are ``x: (B, C, H, W)``, ``weight: (F, C, k, k)``, ``bias: (F,)``.
    ``padding`` is ``"valid"`` or ``"same"`` (odd kernels only).
    """
    if x.data.ndim != 4 or weight.data.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"conv2d shape mismatch: x {x.shape}, weight {weight.shape}")
    kh, kw = weight.shape[2:]
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError("'same' padding needs odd kernel extents")
        ph, pw = kh // 2, kw // 2
    elif padding == "valid":
        ph = pw = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ValueError(f"conv2d input {x.shape} smaller than kernel {weight.shape}")
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    # windows: (B, C, Ho, Wo, kh, kw)
    out = np.einsum("bchwij,fcij->bfhw", windows, weight.data, optimize=True)
    parents: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
        parents = (x, weight, bias)
    ho, wo = out.shape[2:]

    def backward(g):
        if weight.requires_grad:
            weight._accumulate(np.einsum("bchwij,bfhw->fcij", windows, g, optimize=True))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + ho, j:j + wo] += np.einsum(
                        "bfhw,fc->bchw", g, weight.data[:, :, i, j], optimize=True)
            x._accumulate(gxp[:, :, ph:ph + x.shape[2], pw:pw + x.shape[3]])

    return Tensor._from_op(out, parents, "conv2d", backward)


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping ``size`` x ``size`` max pooling; trailing rows/cols are dropped.

    Gradient goes to the first maximal element of each window.
    """
    b, c, h, w = x.shape
    ho, wo = h // size, w // size
    if ho == 0 or wo == 0:
        raise ValueError(f"max_pool2d window {size} larger than input {x.shape}")
    crop = x.data[:, :, :ho * size, :wo * size]
    blocks = crop.reshape(b, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(b, c, ho, wo, size * size)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(b, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5)
        full = np.zeros_like(x.data)
        full[:, :, :ho * size, :wo * size] = gb.reshape(b, c, ho * size, wo * size)
        x._accumulate(full)

    return Tensor._from_op(out, (x,), "max_pool2d", backward)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
