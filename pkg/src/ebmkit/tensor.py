"""Dense float64 tensors with reverse-mode differentiation.

Just enough machinery for small fully connected energy networks: each
operation records its inputs and a backward closure, and ``backward`` on a
scalar walks the recorded graph once in reverse topological order. Gradients
accumulate additively, so reusing a tensor in several places works out of
the box. Everything is double precision; gradient checks against central
finite differences rely on it.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    """A dense array plus an optional gradient and a backward rule.

    ``data`` is always a float64 ndarray. ``grad`` is lazily allocated,
    matching ``data``'s shape, and only ever written on tensors with
    ``requires_grad`` set.
    """

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = None
        self._parents = ()

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- graph plumbing ----------------------------------------------------

    def _accum(self, delta):
        """Add ``delta`` into grad, allocating zeros on first write."""
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += delta

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Propagate d(self)/d(ancestor) into every requires_grad ancestor.

        The root must be a scalar (a single element). Repeated calls keep
        accumulating, so zero grads between optimization steps.
        """
        if self.data.size != 1:
            raise ValueError(
                f"backward requires a scalar root, got shape {self.data.shape}"
            )
        if not self.requires_grad:
            # Constant root: nothing depends on a requires_grad leaf.
            return
        order = _toposort(self)
        self._accum(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None:
                node._backward()

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other):
        other = _lift(other)
        out = _make(self.data + other.data, (self, other))

        def backward():
            if self.requires_grad:
                self._accum(_unbroadcast(out.grad, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(out.grad, other.data.shape))

        out._backward = backward
        return out

    def __mul__(self, other):
        other = _lift(other)
        out = _make(self.data * other.data, (self, other))

        def backward():
            if self.requires_grad:
                self._accum(_unbroadcast(out.grad * other.data, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(out.grad * self.data, other.data.shape))

        out._backward = backward
        return out

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-_lift(other))

    def __rsub__(self, other):
        return _lift(other) + (-self)

    __radd__ = __add__
    __rmul__ = __mul__

    def square(self):
        return self * self

    def sum(self, axis=None):
        out = _make(np.sum(self.data, axis=axis), (self,))

        def backward():
            if self.requires_grad:
                g = out.grad
                if axis is not None:
                    g = np.expand_dims(g, axis)
                self._accum(np.broadcast_to(g, self.data.shape))

        out._backward = backward
        return out

    def mean(self, axis=None):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis) * (1.0 / n)

    def reshape(self, *shape):
        out = _make(self.data.reshape(*shape), (self,))

        def backward():
            if self.requires_grad:
                self._accum(out.grad.reshape(self.data.shape))

        out._backward = backward
        return out


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents):
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = tuple(parents)
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _toposort(root):
    """Iterative postorder over requires_grad nodes reachable from root."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


# -- network operations ----------------------------------------------------


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Batched fully connected layer: out[i, j] = sum_k x[i,k] w[k,j] + b[j]."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ValueError(
            f"affine shape mismatch: x {x.data.shape} vs w {w.data.shape}"
        )
    if b.data.shape != (w.data.shape[1],):
        raise ValueError(
            f"affine shape mismatch: b {b.data.shape} vs w {w.data.shape}"
        )
    out = _make(x.data @ w.data + b.data, (x, w, b))

    def backward():
        g = out.grad
        if x.requires_grad:
            x._accum(g @ w.data.T)
        if w.requires_grad:
            w._accum(x.data.T @ g)
        if b.requires_grad:
            b._accum(g.sum(axis=0))

    out._backward = backward
    return out


def leaky_relu(x: Tensor, slope: float) -> Tensor:
    """Elementwise max(x, slope*x); the kink at 0 takes the positive branch."""
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"leaky_relu slope must be in [0, 1), got {slope}")
    positive = x.data >= 0
    out = _make(np.where(positive, x.data, slope * x.data), (x,))

    def backward():
        if x.requires_grad:
            x._accum(np.where(positive, out.grad, slope * out.grad))

    out._backward = backward
    return out


def logsumexp(logits: Tensor) -> Tensor:
    """Row-wise log(sum(exp(logits))) over a [B, C] batch, max-subtracted."""
    if logits.data.ndim != 2:
        raise ValueError(f"logsumexp expects a 2-d batch, got {logits.data.shape}")
    m = logits.data.max(axis=1, keepdims=True)
    shifted = np.exp(logits.data - m)
    total = shifted.sum(axis=1)
    out = _make(m[:, 0] + np.log(total), (logits,))

    def backward():
        if logits.requires_grad:
            softmax = shifted / total[:, None]
            logits._accum(softmax * out.grad[:, None])

    out._backward = backward
    return out


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of logsumexp(logits[i]) - logits[i, labels[i]]."""
    labels = np.asarray(labels, dtype=np.int64)
    batch, classes = logits.data.shape
    if labels.shape != (batch,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {batch}")
    if labels.min() < 0 or labels.max() >= classes:
        raise ValueError(
            f"label out of range [0, {classes}): {labels.min()}..{labels.max()}"
        )
    m = logits.data.max(axis=1, keepdims=True)
    shifted = np.exp(logits.data - m)
    total = shifted.sum(axis=1)
    lse = m[:, 0] + np.log(total)
    picked = logits.data[np.arange(batch), labels]
    out = _make(np.mean(lse - picked), (logits,))

    def backward():
        if logits.requires_grad:
            softmax = shifted / total[:, None]
            softmax[np.arange(batch), labels] -= 1.0
            logits._accum(softmax * (out.grad / batch))

    out._backward = backward
    return out
