"""Reverse-mode automatic differentiation over numpy arrays.

A `Tensor` wraps an ndarray and records the closure needed to push its
output gradient back to its parents. Calling `backward()` on a scalar
loss topologically sorts the graph and accumulates `.grad` arrays on
every tensor with `requires_grad=True`. Tensors with
`requires_grad=False` never build graph edges, which is how frozen
parameters (the EMA target encoder, stage-2 audio encoder) are kept out
of the gradient flow by construction.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidInput


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _vjp=None):
        arr = np.asarray(data)
        if arr.dtype.kind in "iub":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._vjp = _vjp

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def wrap(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph construction ---------------------------------------------------

    @staticmethod
    def _make(data, parents, vjp) -> "Tensor":
        needs = any(p.requires_grad for p in parents)
        if not needs:
            return Tensor(data)
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _vjp=vjp)

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable tensor."""
        if not self.requires_grad:
            raise InvalidInput("loss is detached from all trainable parameters")
        if self.data.size != 1:
            raise InvalidInput("backward requires a scalar loss")

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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is not None:
                for parent, pg in node._vjp(g):
                    if not parent.requires_grad:
                        continue
                    acc = grads.get(id(parent))
                    grads[id(parent)] = pg if acc is None else acc + pg
            else:
                node.grad = g if node.grad is None else node.grad + g

    # -- arithmetic -----------------------------------------------------------

    def __add__(self, other):
        other = Tensor.wrap(other)
        a, b = self, other

        def vjp(g):
            return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

        return Tensor._make(a.data + b.data, (a, b), vjp)

    __radd__ = __add__

    def __sub__(self, other):
        other = Tensor.wrap(other)
        a, b = self, other

        def vjp(g):
            return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape)))

        return Tensor._make(a.data - b.data, (a, b), vjp)

    def __rsub__(self, other):
        return Tensor.wrap(other) - self

    def __neg__(self):
        a = self

        def vjp(g):
            return ((a, -g),)

        return Tensor._make(-a.data, (a,), vjp)

    def __mul__(self, other):
        other = Tensor.wrap(other)
        a, b = self, other
        ad, bd = a.data, b.data

        def vjp(g):
            return ((a, _unbroadcast(g * bd, a.shape)), (b, _unbroadcast(g * ad, b.shape)))

        return Tensor._make(ad * bd, (a, b), vjp)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor.wrap(other)
        a, b = self, other
        ad, bd = a.data, b.data

        def vjp(g):
            return (
                (a, _unbroadcast(g / bd, a.shape)),
                (b, _unbroadcast(-g * ad / (bd * bd), b.shape)),
            )

        return Tensor._make(ad / bd, (a, b), vjp)

    def __rtruediv__(self, other):
        return Tensor.wrap(other) / self

    def __pow__(self, exponent: float):
        if not isinstance(exponent, (int, float)):
            raise InvalidInput("only constant exponents are supported")
        a = self
        ad = a.data

        def vjp(g):
            return ((a, g * exponent * ad ** (exponent - 1)),)

        return Tensor._make(ad ** exponent, (a,), vjp)

    def __matmul__(self, other):
        other = Tensor.wrap(other)
        a, b = self, other
        ad, bd = a.data, b.data
        if ad.ndim < 2 or bd.ndim < 2:
            raise InvalidInput("matmul operands must be at least 2-D")

        def vjp(g):
            ga = g @ bd.swapaxes(-1, -2)
            gb = ad.swapaxes(-1, -2) @ g
            return ((a, _unbroadcast(ga, a.shape)), (b, _unbroadcast(gb, b.shape)))

        return Tensor._make(ad @ bd, (a, b), vjp)

    # -- shape ops ------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        old = a.shape

        def vjp(g):
            return ((a, g.reshape(old)),)

        return Tensor._make(a.data.reshape(shape), (a,), vjp)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        a = self
        inverse = tuple(np.argsort(axes))

        def vjp(g):
            return ((a, g.transpose(inverse)),)

        return Tensor._make(a.data.transpose(axes), (a,), vjp)

    def expand(self, shape):
        """Broadcast to `shape` (no copy of data semantics; grad sums back)."""
        a = self

        def vjp(g):
            return ((a, _unbroadcast(g, a.shape)),)

        return Tensor._make(np.broadcast_to(a.data, shape), (a,), vjp)

    def __getitem__(self, key):
        a = self

        def vjp(g):
            out = np.zeros_like(a.data)
            np.add.at(out, key, g)
            return ((a, out),)

        return Tensor._make(a.data[key], (a,), vjp)

    # -- reductions -----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        a = self

        def vjp(g):
            if axis is None:
                return ((a, np.broadcast_to(g, a.shape).copy()),)
            gx = g if keepdims else np.expand_dims(g, axis)
            return ((a, np.broadcast_to(gx, a.shape).copy()),)

        return Tensor._make(a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            count = self.data.size
        elif isinstance(axis, tuple):
            count = int(np.prod([self.data.shape[ax] for ax in axis]))
        else:
            count = self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- elementwise ----------------------------------------------------------

    def exp(self):
        a = self
        out = np.exp(a.data)

        def vjp(g):
            return ((a, g * out),)

        return Tensor._make(out, (a,), vjp)

    def log(self):
        a = self
        ad = a.data

        def vjp(g):
            return ((a, g / ad),)

        return Tensor._make(np.log(ad), (a,), vjp)

    def sqrt(self):
        a = self
        out = np.sqrt(a.data)

        def vjp(g):
            return ((a, g * 0.5 / out),)

        return Tensor._make(out, (a,), vjp)

    def tanh(self):
        a = self
        out = np.tanh(a.data)

        def vjp(g):
            return ((a, g * (1.0 - out * out)),)

        return Tensor._make(out, (a,), vjp)


# -- free functions ------------------------------------------------------------


def concat(tensors: list[Tensor], axis: int) -> Tensor:
    tensors = [Tensor.wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        pieces = np.split(g, splits, axis=axis)
        return tuple(zip(tensors, pieces))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows along the second-to-last axis.

    For x of shape [N, D] idx is [K]; for x of shape [B, N, D] idx is
    [B, K] (per-batch row selection). Out-of-range indices raise.
    """
    x = Tensor.wrap(x)
    idx = np.asarray(idx)
    n = x.shape[-2]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise InvalidInput(f"index out of range for axis of length {n}")
    if x.ndim == 2:
        key = (idx,)
    elif x.ndim == 3:
        if idx.ndim == 1:
            idx = np.broadcast_to(idx, (x.shape[0], idx.shape[0]))
        key = (np.arange(x.shape[0])[:, None], idx)
    else:
        raise InvalidInput("gather_rows supports 2-D or 3-D inputs")

    def vjp(g):
        out = np.zeros_like(x.data)
        np.add.at(out, key, g)
        return ((x, out),)

    return Tensor._make(x.data[key], (x,), vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax (fused forward and backward)."""
    x = Tensor.wrap(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((x, out * (g - dot)),)

    return Tensor._make(out, (x,), vjp)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = Tensor.wrap(x)
    shifted = x - x.data.max(axis=axis, keepdims=True)  # constant shift
    return shifted - shifted.exp().sum(axis=axis, keepdims=True).log()


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximation GELU (fused forward and backward)."""
    x = Tensor.wrap(x)
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * (xd * xd * xd))
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def vjp(g):
        slope = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        return ((x, g * slope),)

    return Tensor._make(out, (x,), vjp)


def layer_norm_core(x: Tensor, eps: float) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (fused)."""
    x = Tensor.wrap(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    sigma = np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    y = centered / sigma

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return ((x, (g - gm - y * gy) / sigma),)

    return Tensor._make(y, (x,), vjp)


def l2_normalize(x: Tensor, axis: int = -1, check_nonzero: bool = True) -> Tensor:
    x = Tensor.wrap(x)
    norms = np.sqrt((x.data ** 2).sum(axis=axis))
    if check_nonzero and (norms == 0).any():
        raise InvalidInput("zero-norm row cannot be normalized")
    return x / (x * x).sum(axis=axis, keepdims=True).sqrt()


def sigmoid(x: Tensor) -> Tensor:
    return 1.0 / (1.0 + (-x).exp())


def backward(loss: Tensor) -> None:
    """Run reverse-mode differentiation from a scalar loss."""
    Tensor.wrap(loss).backward()
