"""Dense float tensors with tape-based reverse-mode differentiation.

Operations only record themselves while a :class:`Tape` is active and at least
one input requires a gradient, so code run outside a tape (teacher forwards,
evaluation) pays no bookkeeping cost::

    with Tape() as tape:
        loss = reduce_mean(matmul(x, w))
    tape.backward(loss)
    w.grad  # accumulated gradient
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from nvqad import blockquant

__all__ = [
    "Tensor",
    "Tape",
    "active_tape",
    "record",
    "REGISTERED_OPS",
    "matmul",
    "add",
    "mul",
    "scale",
    "embedding_lookup",
    "softmax",
    "log_softmax",
    "rmsnorm",
    "gelu",
    "transpose",
    "reshape",
    "causal_mask_add",
    "reduce_mean",
    "reduce_sum",
    "ste_fake_quant",
]

MASK_VALUE = -1e9


class Tensor:
    """A float array plus an optional accumulated gradient.

    Data is kept as float32 unless a float64 array is passed explicitly (used
    only by the gradient checker).
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != np.float64:
            arr = arr.astype(np.float32, copy=False)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(_wrap(other), -1.0))

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, which is a topological order of
    the graph; :meth:`backward` walks them once in reverse.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if loss.data.size != 1:
                raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
            grad = np.ones_like(loss.data)
        grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.data.dtype)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
        # whatever is left belongs to leaves
        leaves = {id(t): t for n in self.nodes for t in n.inputs if t.requires_grad}
        for key, g in grads.items():
            t = leaves.get(key)
            if t is None:
                if key == id(loss):
                    t = loss
                else:
                    continue
            t.grad = g.copy() if t.grad is None else t.grad + g
        self.nodes.clear()


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def record(
    out_data: np.ndarray,
    inputs: Sequence[Tensor],
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Wrap ``out_data`` in a Tensor and register its backward rule if needed.

    ``backward`` maps the output gradient to one gradient (or None) per input.
    Intermediate outputs are recorded as tape nodes and never become leaves.
    """
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.nodes.append(_Node(out, tuple(inputs), backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}") from None


# -- ops ----------------------------------------------------------------------


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # (..., k) @ (k, n) as one 2-D GEMM rather than a loop of small ones
    if b.ndim == 2 and a.ndim > 2:
        return (a.reshape(-1, a.shape[-1]) @ b).reshape(a.shape[:-1] + (b.shape[-1],))
    return a @ b


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(_mm(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                k = ad.shape[-1]
                gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return record(_mm(ad, bd), (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record(a.data + b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return record(ad * bd, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    c = x.data.dtype.type(c)
    return record(x.data * c, (x,), lambda g: (g * c,))


def embedding_lookup(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ValueError("embedding_lookup: ids must be integers")
    n = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise ValueError(f"embedding_lookup: id out of range [0, {n})")

    def backward(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[-1]))
        return (gw,)

    return record(weight.data[ids], (weight,), backward)


def softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return record(y, (x,), backward)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return record(y, (x,), backward)


def rmsnorm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    if gain.shape != x.shape[-1:]:
        raise ValueError(f"rmsnorm: shape mismatch {x.shape} vs gain {gain.shape}")
    xd = x.data
    r = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + xd.dtype.type(eps))
    xhat = xd * r

    def backward(g):
        gg = None
        if gain.requires_grad:
            gg = (g * xhat).reshape(-1, xd.shape[-1]).sum(axis=0)
        dy = g * gain.data
        gx = r * (dy - xhat * (dy * xhat).mean(axis=-1, keepdims=True))
        return gx, gg

    return record(xhat * gain.data, (x, gain), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    xd = x.data
    f = xd.dtype.type
    c, k = f(_GELU_C), f(0.044715)
    x2 = xd * xd
    t = x2 * k
    t += 1
    t *= xd
    t *= c
    np.tanh(t, out=t)
    y = t + 1
    y *= xd
    y *= f(0.5)

    def backward(g):
        # d/dx = 0.5 (1 + t) + 0.5 x (1 - t^2) c (1 + 3 k x^2)
        inner = x2 * (3 * k)
        inner += 1
        inner *= c
        sech2 = t * t
        np.subtract(1, sech2, out=sech2)
        inner *= sech2
        inner *= xd
        inner += t
        inner += 1
        inner *= f(0.5)
        inner *= g
        return (inner,)

    return record(y, (x,), backward)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim))[:-2] + (x.ndim - 1, x.ndim - 2)
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ValueError(f"transpose: bad axes {axes} for shape {x.shape}")
    inv = tuple(np.argsort(axes))
    return record(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ValueError(f"reshape: cannot reshape {src} to {tuple(shape)}") from None
    return record(out, (x,), lambda g: (g.reshape(src),))


def causal_mask_add(scores: Tensor) -> Tensor:
    """Push scores above the diagonal (future keys) to a large negative value."""
    if scores.ndim < 2 or scores.shape[-1] != scores.shape[-2]:
        raise ValueError(f"causal_mask_add: expected square trailing dims, got {scores.shape}")
    t = scores.shape[-1]
    future = np.triu(np.ones((t, t), dtype=bool), k=1)
    out = np.where(future, scores.data.dtype.type(MASK_VALUE), scores.data)

    def backward(g):
        return (np.where(future, 0, g).astype(g.dtype),)

    return record(out, (scores,), backward)


def reduce_mean(x: Tensor, axis=None) -> Tensor:
    xd = x.data
    out = xd.mean(axis=axis)
    n = xd.size // max(1, np.asarray(out).size)

    def backward(g):
        g = np.asarray(g)
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / xd.dtype.type(n), xd.shape).copy(),)

    return record(np.asarray(out, dtype=xd.dtype), (x,), backward)


def reduce_sum(x: Tensor, axis=None) -> Tensor:
    xd = x.data

    def backward(g):
        g = np.asarray(g)
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xd.shape).copy(),)

    return record(np.asarray(xd.sum(axis=axis), dtype=xd.dtype), (x,), backward)


def ste_fake_quant(
    x: Tensor, config: blockquant.QuantConfig, tensor_scale: float | None = None
) -> Tensor:
    """Fake-quantize with a clipped straight-through gradient.

    Forward is :func:`blockquant.fake_quantize` (``tensor_scale=None`` means
    the scale comes from this tensor's own amax). Backward passes the upstream
    gradient where the input fits its block's representable range and zeroes
    it where the element saturated.
    """
    out, mask = blockquant.fake_quantize_with_mask(x.data, config, tensor_scale)
    if x.data.dtype == np.float64:
        out = out.astype(np.float64)
    return record(out, (x,), lambda g: (g * mask,))


REGISTERED_OPS = (
    "matmul",
    "add",
    "mul",
    "scale",
    "embedding_lookup",
    "softmax",
    "log_softmax",
    "rmsnorm",
    "gelu",
    "transpose",
    "reshape",
    "causal_mask_add",
    "reduce_mean",
    "reduce_sum",
    "ste_fake_quant",
)
