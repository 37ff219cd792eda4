"""Minimal dense-array reverse-mode autodiff on numpy.

Single file, no framework dependency. float32 is the working precision;
float64 is supported everywhere so gradient checks against central finite
differences stay meaningful.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / data prep)."""
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
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A numpy array plus an optional backward closure.

    Graph nodes are created only while grad recording is enabled and at
    least one input requires grad; otherwise ops return detached tensors.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- bookkeeping -------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Reverse-mode sweep from this node.

        `grad` defaults to ones for scalar outputs; non-scalar roots must
        supply a seed of matching shape.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)

        # Iterative topological order (graphs can be thousands of nodes deep
        # across chunked rollouts).
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        self._accumulate(grad)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- graph construction helper -----------------------------------------

    @staticmethod
    def _make(data: np.ndarray, parents: Sequence["Tensor"],
              backward: Callable[[np.ndarray], None] | None) -> "Tensor":
        out = Tensor(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    # -- elementwise arithmetic ---------------------------------------------

    def __add__(self, other):
        other = _as_tensor_like(other, self)
        data = self.data + other.data

        def bwd(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.shape))

        return Tensor._make(data, (self, other), bwd)

    __radd__ = __add__

    def __neg__(self):
        data = -self.data

        def bwd(g):
            if self.requires_grad:
                self._accumulate(-g)

        return Tensor._make(data, (self,), bwd)

    def __sub__(self, other):
        return self + (-_as_tensor_like(other, self))

    def __rsub__(self, other):
        return _as_tensor_like(other, self) + (-self)

    def __mul__(self, other):
        other = _as_tensor_like(other, self)
        data = self.data * other.data

        def bwd(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.shape))

        return Tensor._make(data, (self, other), bwd)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor_like(other, self)
        data = self.data / other.data

        def bwd(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g / other.data, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(-g * self.data / (other.data ** 2), other.shape))

        return Tensor._make(data, (self, other), bwd)

    def __rtruediv__(self, other):
        return _as_tensor_like(other, self) / self

    def __pow__(self, exponent: float):
        data = self.data ** exponent

        def bwd(g):
            if self.requires_grad:
                self._accumulate(g * exponent * self.data ** (exponent - 1))

        return Tensor._make(data, (self,), bwd)

    # -- shape ops -----------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        data = self.data.reshape(shape)

        def bwd(g):
            if self.requires_grad:
                self._accumulate(g.reshape(old))

        return Tensor._make(data, (self,), bwd)

    def transpose(self, axes: Sequence[int]):
        axes = tuple(axes)
        inv = tuple(np.argsort(axes))
        data = np.transpose(self.data, axes)

        def bwd(g):
            if self.requires_grad:
                self._accumulate(np.transpose(g, inv))

        return Tensor._make(data, (self,), bwd)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(axes)

    def __getitem__(self, key):
        data = self.data[key]
        shape = self.shape
        dtype = self.dtype

        def bwd(g):
            if self.requires_grad:
                full = np.zeros(shape, dtype=dtype)
                np.add.at(full, key, g)
                self._accumulate(full)

        return Tensor._make(data, (self,), bwd)

    # -- reductions ------------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        data = self.data.sum(axis=axis, keepdims=keepdims)
        shape = self.shape

        def bwd(g):
            if not self.requires_grad:
                return
            if axis is None:
                self._accumulate(np.broadcast_to(g, shape).copy())
                return
            if not keepdims:
                axes = axis if isinstance(axis, tuple) else (axis,)
                g = np.expand_dims(g, axes)
            self._accumulate(np.broadcast_to(g, shape).copy())

        return Tensor._make(data, (self,), bwd)

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            n = self.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            n = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- matmul ------------------------------------------------------------------

    def __matmul__(self, other):
        other = _as_tensor_like(other, self)
        data = self.data @ other.data

        def bwd(g):
            if self.requires_grad:
                ga = g @ np.swapaxes(other.data, -1, -2)
                self._accumulate(_unbroadcast(ga, self.shape))
            if other.requires_grad:
                gb = np.swapaxes(self.data, -1, -2) @ g
                other._accumulate(_unbroadcast(gb, other.shape))

        return Tensor._make(data, (self, other), bwd)

    # -- nonlinearities -----------------------------------------------------------

    def exp(self):
        data = np.exp(self.data)

        def bwd(g):
            if self.requires_grad:
                self._accumulate(g * data)

        return Tensor._make(data, (self,), bwd)

    def sqrt(self):
        data = np.sqrt(self.data)

        def bwd(g):
            if self.requires_grad:
                self._accumulate(g * 0.5 / data)

        return Tensor._make(data, (self,), bwd)

    def silu(self):
        s = 1.0 / (1.0 + np.exp(-self.data))
        data = self.data * s

        def bwd(g):
            if self.requires_grad:
                self._accumulate(g * (s + self.data * s * (1.0 - s)))

        return Tensor._make(data, (self,), bwd)


def _as_tensor_like(x, ref: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=ref.dtype))


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return Tensor._make(data, tensors, bwd)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather: out[..., :] = table[ids[...], :]."""
    ids = np.asarray(ids)
    data = table.data[ids]

    def bwd(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, ids, g)
            table._accumulate(full)

    return Tensor._make(data, (table,), bwd)


def masked_softmax(logits: Tensor, additive_mask: np.ndarray | None = None,
                   axis: int = -1) -> Tensor:
    """Numerically stable softmax with an optional additive mask.

    Mask entries of -inf produce exactly-zero attention weights, so hidden
    positions cannot perturb the output even at the bit level.
    """
    x = logits.data
    if additive_mask is not None:
        x = x + additive_mask
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    p = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        if logits.requires_grad:
            inner = (g * p).sum(axis=axis, keepdims=True)
            logits._accumulate(p * (g - inner))

    return Tensor._make(p, (logits,), bwd)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """RMS normalization over the last axis with a learnable scale."""
    n = x.shape[-1]
    ms = np.mean(x.data ** 2, axis=-1, keepdims=True)
    r = 1.0 / np.sqrt(ms + eps)
    y0 = x.data * r

    def bwd(g):
        if gain.requires_grad:
            gain._accumulate(_unbroadcast(g * y0, gain.shape))
        if x.requires_grad:
            gg = g * gain.data
            inner = (gg * x.data).sum(axis=-1, keepdims=True)
            x._accumulate(r * gg - x.data * (r ** 3) * (inner / n))

    return Tensor._make(y0 * gain.data, (x, gain), bwd)


def mse(pred: Tensor, target: np.ndarray | Tensor) -> Tensor:
    """Mean squared error over every element."""
    t = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=pred.dtype))
    diff = pred - t
    return (diff * diff).mean()


def randn(rng: np.random.Generator, shape, dtype=np.float32) -> np.ndarray:
    return rng.standard_normal(shape).astype(dtype)


def finite_difference_grad(f: Callable[..., Tensor], xs: list[np.ndarray],
                           eps: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradient of a scalar-valued f w.r.t. each input.

    Independent oracle for the backward passes; runs f in no-grad mode and
    never touches the autodiff graph.
    """
    grads = []
    with no_grad():
        for i, x in enumerate(xs):
            g = np.zeros_like(x, dtype=np.float64)
            flat = x.reshape(-1)
            gflat = g.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + eps
                hi = float(f(*[Tensor(v) for v in xs]).data)
                flat[j] = orig - eps
                lo = float(f(*[Tensor(v) for v in xs]).data)
                flat[j] = orig
                gflat[j] = (hi - lo) / (2.0 * eps)
            grads.append(g)
    return grads
