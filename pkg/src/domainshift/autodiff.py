"""Reverse-mode automatic differentiation over dense 2-D float64 arrays.

A :class:`Tensor` wraps a ``(rows, cols)`` numpy array together with a
gradient accumulator and a closure that propagates gradients to its
parents. Calling :func:`backward` on a scalar (1x1) tensor walks the
graph in reverse topological order and adds each node's contribution
into ``.grad``.

Gradient accumulators of freshly created nodes start at zero, so every
forward pass yields a graph whose intermediate gradients are clean.
Leaf tensors (parameters) persist across passes and therefore accumulate
gradients until :meth:`Tensor.zero_grad` is called, which is what the
optimizers in :mod:`domainshift.nn` rely on.

Only the operations needed by the networks in this package are provided:
matrix product, bias addition, elementwise activations, row softmax,
batch normalization, gradient reversal, and a handful of scalar
reductions and losses. There is no broadcasting beyond bias addition.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "BatchNormState",
    "matmul",
    "add_bias",
    "add",
    "sub",
    "scale",
    "relu",
    "sigmoid",
    "softmax_rows",
    "grad_reverse",
    "batch_norm",
    "tensor_sum",
    "cross_entropy",
    "binary_cross_entropy",
    "discrepancy",
    "backward",
]

_LOG_CLAMP = 1e-12
_BN_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """A node in the compute graph: a 2-D float64 array plus its gradient."""

    __slots__ = ("data", "grad", "parents", "_backward")

    def __init__(self, data, parents: Sequence["Tensor"] = ()):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got shape {arr.shape}")
        self.data = arr
        self.grad = np.zeros_like(arr)
        self.parents: tuple[Tensor, ...] = tuple(parents)
        self._backward: Callable[[], None] = lambda: None

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]

    def zero_grad(self) -> None:
        self.grad[:] = 0.0

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{name} produced non-finite values")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Backward: dA = dC @ B^T, dB = A^T @ dC."""
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data, parents=(a, b))

    def _back() -> None:
        a.grad += out.grad @ b.data.T
        b.grad += a.data.T @ out.grad

    out._backward = _back
    return out


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a 1-row bias to every row of ``x``."""
    if b.shape != (1, x.shape[1]):
        raise ShapeError(f"bias shape {b.shape} does not match input {x.shape}")
    out = Tensor(x.data + b.data, parents=(x, b))

    def _back() -> None:
        x.grad += out.grad
        b.grad += out.grad.sum(axis=0, keepdims=True)

    out._backward = _back
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"add shapes differ: {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data, parents=(a, b))

    def _back() -> None:
        a.grad += out.grad
        b.grad += out.grad

    out._backward = _back
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise difference of two same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"sub shapes differ: {a.shape} vs {b.shape}")
    out = Tensor(a.data - b.data, parents=(a, b))

    def _back() -> None:
        a.grad += out.grad
        b.grad -= out.grad

    out._backward = _back
    return out


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a constant."""
    out = Tensor(x.data * c, parents=(x,))

    def _back() -> None:
        x.grad += out.grad * c

    out._backward = _back
    return out


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0), parents=(x,))

    def _back() -> None:
        x.grad += out.grad * (x.data > 0.0)

    out._backward = _back
    return out


def sigmoid(x: Tensor) -> Tensor:
    """Numerically stable logistic function."""
    d = x.data
    pos = d >= 0
    s = np.empty_like(d)
    s[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    s[~pos] = ex / (1.0 + ex)
    out = Tensor(s, parents=(x,))

    def _back() -> None:
        x.grad += out.grad * s * (1.0 - s)

    out._backward = _back
    return out


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax; each row is shifted by its max before exponentiation."""
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    p = ex / ex.sum(axis=1, keepdims=True)
    out = Tensor(p, parents=(x,))

    def _back() -> None:
        g = out.grad
        dot = (g * p).sum(axis=1, keepdims=True)
        x.grad += p * (g - dot)

    out._backward = _back
    return out


def grad_reverse(x: Tensor, lam: float) -> Tensor:
    """Identity in the forward pass; backward multiplies the gradient by -lam."""
    if lam < 0:
        raise ValueError(f"gradient reversal coefficient must be >= 0, got {lam}")
    out = Tensor(x.data, parents=(x,))

    def _back() -> None:
        x.grad += out.grad * (-lam)

    out._backward = _back
    return out


class BatchNormState:
    """Learnable scale/shift plus running statistics for one batch-norm layer.

    Running mean and variance are updated in train mode with an exponential
    moving average (momentum 0.9 on the old value). Variance is the biased
    batch variance, both for normalization and for the running estimate.
    """

    def __init__(self, width: int, momentum: float = 0.9):
        self.gamma = Tensor(np.ones((1, width)))
        self.beta = Tensor(np.zeros((1, width)))
        self.running_mean = np.zeros((1, width))
        self.running_var = np.ones((1, width))
        self.momentum = momentum

    @property
    def width(self) -> int:
        return self.gamma.shape[1]


def batch_norm(x: Tensor, state: BatchNormState, train: bool) -> Tensor:
    """Batch normalization with learnable scale and shift.

    Train mode normalizes by the batch mean and biased variance and updates
    the running statistics; it requires a batch of at least 2 rows. Eval
    mode normalizes by the running statistics, which are treated as
    constants in the backward pass.
    """
    if x.shape[1] != state.width:
        raise ShapeError(f"batch_norm width {state.width} does not match input {x.shape}")
    gamma, beta = state.gamma, state.beta

    if train:
        m = x.shape[0]
        if m < 2:
            raise ValueError("batch_norm in train mode needs a batch of at least 2 rows")
        mean = x.data.mean(axis=0, keepdims=True)
        var = x.data.var(axis=0, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + _BN_EPS)
        xhat = (x.data - mean) * inv_std
        mom = state.momentum
        state.running_mean = mom * state.running_mean + (1.0 - mom) * mean
        state.running_var = mom * state.running_var + (1.0 - mom) * var
        out = Tensor(xhat * gamma.data + beta.data, parents=(x, gamma, beta))

        def _back_train() -> None:
            g = out.grad
            gamma.grad += (g * xhat).sum(axis=0, keepdims=True)
            beta.grad += g.sum(axis=0, keepdims=True)
            gxhat = g * gamma.data
            x.grad += inv_std * (
                gxhat
                - gxhat.mean(axis=0, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=0, keepdims=True)
            )

        out._backward = _back_train
        return out

    inv_std = 1.0 / np.sqrt(state.running_var + _BN_EPS)
    xhat = (x.data - state.running_mean) * inv_std
    out = Tensor(xhat * gamma.data + beta.data, parents=(x, gamma, beta))

    def _back_eval() -> None:
        g = out.grad
        gamma.grad += (g * xhat).sum(axis=0, keepdims=True)
        beta.grad += g.sum(axis=0, keepdims=True)
        x.grad += g * gamma.data * inv_std

    out._backward = _back_eval
    return out


def tensor_sum(x: Tensor) -> Tensor:
    """Sum all entries into a 1x1 scalar tensor."""
    out = Tensor(np.array([[x.data.sum()]]), parents=(x,))

    def _back() -> None:
        x.grad += out.grad[0, 0]

    out._backward = _back
    return out


def cross_entropy(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-probability of the true class.

    ``probs`` rows must be probability distributions (e.g. softmax output);
    ``labels`` is an integer vector in ``[0, K)``. The log is clamped at
    1e-12, and clamped entries get zero gradient.
    """
    labels = np.asarray(labels)
    m, k = probs.shape
    if labels.shape != (m,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch of {m}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    picked = probs.data[np.arange(m), labels]
    clamped = np.maximum(picked, _LOG_CLAMP)
    out = Tensor(np.array([[-np.log(clamped).mean()]]), parents=(probs,))

    def _back() -> None:
        g = out.grad[0, 0]
        grad = np.zeros_like(probs.data)
        live = picked >= _LOG_CLAMP
        rows = np.arange(m)[live]
        grad[rows, labels[live]] = -1.0 / (m * picked[live])
        probs.grad += g * grad

    out._backward = _back
    return out


def binary_cross_entropy(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Mean binary cross-entropy for a single-column probability tensor.

    ``labels`` is a 0/1 vector. Probabilities are clamped to
    [1e-12, 1 - 1e-12]; clamped entries get zero gradient.
    """
    labels = np.asarray(labels, dtype=np.float64)
    m = probs.shape[0]
    if probs.shape[1] != 1:
        raise ShapeError(f"binary_cross_entropy expects an m x 1 tensor, got {probs.shape}")
    if labels.shape != (m,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch of {m}")
    p = probs.data[:, 0]
    pc = np.clip(p, _LOG_CLAMP, 1.0 - _LOG_CLAMP)
    loss = -(labels * np.log(pc) + (1.0 - labels) * np.log(1.0 - pc)).mean()
    out = Tensor(np.array([[loss]]), parents=(probs,))

    def _back() -> None:
        g = out.grad[0, 0]
        live = (p >= _LOG_CLAMP) & (p <= 1.0 - _LOG_CLAMP)
        grad = np.zeros((m, 1))
        grad[live, 0] = (pc[live] - labels[live]) / (m * pc[live] * (1.0 - pc[live]))
        probs.grad += g * grad

    out._backward = _back
    return out


def discrepancy(p1: Tensor, p2: Tensor) -> Tensor:
    """Mean over the batch of the class-averaged absolute difference.

    For K classes this is ``mean_rows( sum_k |p1_k - p2_k| / K )``, with
    subgradient 0 where the two probabilities tie.
    """
    if p1.shape != p2.shape:
        raise ShapeError(f"discrepancy widths differ: {p1.shape} vs {p2.shape}")
    m, k = p1.shape
    diff = p1.data - p2.data
    out = Tensor(np.array([[np.abs(diff).sum() / (m * k)]]), parents=(p1, p2))

    def _back() -> None:
        g = out.grad[0, 0] * np.sign(diff) / (m * k)
        p1.grad += g
        p2.grad -= g

    out._backward = _back
    return out


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
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Propagate gradients from a scalar loss to every node in its graph.

    Operation nodes get fresh (zeroed) accumulators at the start of each
    pass; leaf tensors such as parameters keep accumulating until the
    caller zeroes them, so two passes without zeroing double their grads.
    """
    if loss.data.shape != (1, 1):
        raise ShapeError(f"backward needs a scalar (1x1) loss, got {loss.shape}")
    _check_finite("loss", loss.data)
    order = _topo_order(loss)
    for node in order:
        if node.parents:
            node.grad[:] = 0.0
    loss.grad += 1.0
    for node in reversed(order):
        node._backward()
