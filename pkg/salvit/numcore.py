"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every operation builds a fresh graph node; `backward` walks the graph from a
scalar root. Between steps parameters live in plain dicts of ndarrays and are
wrapped as leaf tensors at the start of each step (`leaves`).
"""
from __future__ import annotations
import logging
import math
from typing import Callable, Iterable, Mapping, Optional, Sequence, TypeVar, Union

import numpy as np
from scipy.special import erf, expit
from scipy.stats import truncnorm

from .errors import ContractError, DimensionError, ParameterError

logger = logging.getLogger(__name__)

DTYPE = np.float64
EXPORT_DTYPE = np.dtype("<f4")
# exact erf form; recorded in checkpoint manifests
GELU_FORM = "erf"

Params = dict[str, np.ndarray]
Gradient = dict[str, np.ndarray]
T = TypeVar("T")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Immutable array value plus the closure that routes its gradient to its parents."""

    # make ndarray (op) Tensor defer to Tensor's reflected operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 parents: Sequence["Tensor"] = (), backward_fn: Optional[Callable[[np.ndarray], None]] = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.name = name
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(parents)
        self._backward = backward_fn

    @staticmethod
    def _op(data: np.ndarray, parents: Sequence["Tensor"], backward_fn: Callable[[np.ndarray], None]) -> "Tensor":
        if any(p.requires_grad for p in parents):
            return Tensor(data, requires_grad=True, parents=parents, backward_fn=backward_fn)
        return Tensor(data)

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        g = _unbroadcast(np.asarray(g, dtype=DTYPE), self.data.shape)
        self.grad = g if self.grad is None else self.grad + g

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __neg__(self): return mul(self, -1.0)

    def __pow__(self, p: float) -> "Tensor":
        x = self
        y = x.data ** p
        return Tensor._op(y, (x,), lambda g: x._accumulate(g * p * x.data ** (p - 1)))

    def __getitem__(self, idx) -> "Tensor":
        x = self

        def back(g):
            z = np.zeros_like(x.data)
            np.add.at(z, idx, g)
            x._accumulate(z)
        return Tensor._op(x.data[idx], (x,), back)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        x = self
        return Tensor._op(x.data.reshape(shape), (x,), lambda g: x._accumulate(g.reshape(x.shape)))

    def transpose(self, *axes) -> "Tensor":
        x = self
        axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
        inverse = tuple(np.argsort(axes))
        return Tensor._op(x.data.transpose(axes), (x,), lambda g: x._accumulate(g.transpose(inverse)))

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        x = self

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            x._accumulate(np.broadcast_to(g, x.shape))
        return Tensor._op(x.data.sum(axis=axis, keepdims=keepdims), (x,), back)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return self.sum(axis=axis, keepdims=keepdims) / float(count)


TensorLike = Union[Tensor, np.ndarray, float, int]


def as_tensor(x: TensorLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        a._accumulate(g)
        b._accumulate(g)
    return Tensor._op(a.data + b.data, (a, b), back)


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        a._accumulate(g)
        b._accumulate(-g)
    return Tensor._op(a.data - b.data, (a, b), back)


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)
    return Tensor._op(a.data * b.data, (a, b), back)


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        if a.requires_grad:
            a._accumulate(g / b.data)
        if b.requires_grad:
            b._accumulate(-g * a.data / b.data ** 2)
    return Tensor._op(a.data / b.data, (a, b), back)


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise DimensionError("matmul needs at least 1-d operands")
    if a.ndim == 1 and b.ndim == 1:
        if a.shape != b.shape:
            raise DimensionError(f"inner dimensions differ: {a.shape} vs {b.shape}")
        return (a * b).sum()
    if a.ndim == 1:
        out = matmul(a.reshape(1, -1), b)
        return out.reshape(out.shape[:-2] + out.shape[-1:])
    if b.ndim == 1:
        out = matmul(a, b.reshape(-1, 1))
        return out.reshape(out.shape[:-1])
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"inner dimensions differ: {a.shape} @ {b.shape}")

    def back(g):
        if a.requires_grad:
            a._accumulate(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            b._accumulate(np.swapaxes(a.data, -1, -2) @ g)
    return Tensor._op(a.data @ b.data, (a, b), back)


def concat(tensors: Sequence[TensorLike], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in ts], axis=axis)
    cuts = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def back(g):
        for t, part in zip(ts, np.split(g, cuts, axis=axis)):
            t._accumulate(part)
    return Tensor._op(data, ts, back)


def stack(tensors: Sequence[TensorLike], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    return concat([t.reshape(t.shape[:axis] + (1,) + t.shape[axis:]) for t in ts], axis=axis)


def exp(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return Tensor._op(y, (x,), lambda g: x._accumulate(g * y))


def log(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    return Tensor._op(np.log(x.data), (x,), lambda g: x._accumulate(g / x.data))


def sqrt(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    y = np.sqrt(x.data)
    return Tensor._op(y, (x,), lambda g: x._accumulate(g * 0.5 / y))


def absolute(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    return Tensor._op(np.abs(x.data), (x,), lambda g: x._accumulate(g * np.sign(x.data)))


def tanh(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return Tensor._op(y, (x,), lambda g: x._accumulate(g * (1.0 - y * y)))


def sigmoid(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    y = expit(x.data)
    return Tensor._op(y, (x,), lambda g: x._accumulate(g * y * (1.0 - y)))


def relu(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    on = x.data > 0
    return Tensor._op(np.where(on, x.data, 0.0), (x,), lambda g: x._accumulate(g * on))


def clamp_min(x: TensorLike, lo: float) -> Tensor:
    x = as_tensor(x)
    on = x.data > lo
    return Tensor._op(np.where(on, x.data, lo), (x,), lambda g: x._accumulate(g * on))


def gelu(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x.data ** 2) / math.sqrt(2.0 * math.pi)
    return Tensor._op(x.data * cdf, (x,), lambda g: x._accumulate(g * (cdf + x.data * pdf)))


def power(base: TensorLike, exponent: TensorLike) -> Tensor:
    """base ** exponent for base >= 0, with 0 ** e defined as 0 for any exponent."""
    base, exponent = as_tensor(base), as_tensor(exponent)
    b, e = base.data, exponent.data
    if np.any(b < 0):
        raise ParameterError("power base must be non-negative")
    pos = b > 0
    safe = np.where(pos, b, 1.0)
    y = np.where(pos, safe ** e, 0.0)

    def back(g):
        if base.requires_grad:
            base._accumulate(np.where(pos, g * e * safe ** (e - 1.0), 0.0))
        if exponent.requires_grad:
            exponent._accumulate(g * y * np.log(safe))
    return Tensor._op(y, (base, exponent), back)


def amax(x: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    """Maximum along `axis`; tied maxima share the gradient equally."""
    x = as_tensor(x)
    top = x.data.max(axis=axis, keepdims=True)
    hit = (x.data == top).astype(DTYPE)
    hit /= hit.sum(axis=axis, keepdims=True)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(g * hit)
    out = top if keepdims else x.data.max(axis=axis)
    return Tensor._op(out, (x,), back)


def softmax(x: TensorLike, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    return Tensor._op(s, (x,), lambda g: x._accumulate(s * (g - (g * s).sum(axis=axis, keepdims=True))))


def log_softmax(x: TensorLike, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    ls = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    return Tensor._op(ls, (x,), lambda g: x._accumulate(g - np.exp(ls) * g.sum(axis=axis, keepdims=True)))


def softmax_rows(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got shape {x.shape}")
    return softmax(x, axis=-1)


def linear(x: TensorLike, w: TensorLike, b: Optional[TensorLike] = None) -> Tensor:
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.ndim < 1 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: cannot apply weight {w.shape} to input {x.shape}")
    y = matmul(x, w)
    if b is None:
        return y
    b = as_tensor(b)
    if b.shape != (w.shape[1],):
        raise DimensionError(f"linear: bias {b.shape} does not match output width {w.shape[1]}")
    return y + b


def layer_norm(x: TensorLike, gain: TensorLike, bias: TensorLike, eps: float = 1e-5) -> Tensor:
    x = as_tensor(x)
    if x.shape[-1] < 2:
        raise DimensionError("layer_norm needs at least two features per row")
    centered = x - x.mean(axis=-1, keepdims=True)
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / sqrt(var + eps) * gain + bias


def ffn(x: TensorLike, params: Mapping[str, Tensor]) -> Tensor:
    """linear -> GELU -> linear; params hold w1, b1, w2, b2."""
    return linear(gelu(linear(x, params["w1"], params["b1"])), params["w2"], params["b2"])


def conv2d(x: TensorLike, w: TensorLike, b: Optional[TensorLike] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation over (B, C, H, W) or (C, H, W) input with (O, C, kh, kw) weights."""
    x, w = as_tensor(x), as_tensor(w)
    bt = as_tensor(b) if b is not None else None
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or w.ndim != 4 or xd.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
    n, c, h, wd = xd.shape
    o, _, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{wd}")
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    cols = cols.reshape(n, c * kh * kw, ho * wo)
    wmat = w.data.reshape(o, -1)
    out = wmat @ cols
    if bt is not None:
        out = out + bt.data[:, None]
    out = out.reshape(n, o, ho, wo)

    def back(g):
        g2 = (g[None] if squeeze else g).reshape(n, o, ho * wo)
        if w.requires_grad:
            w._accumulate((g2 @ cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape))
        if bt is not None and bt.requires_grad:
            bt._accumulate(g2.sum(axis=(0, 2)))
        if x.requires_grad:
            gcols = (wmat.T @ g2).reshape(n, c, kh, kw, ho, wo)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, i, j]
            gx = gxp[:, :, padding:padding + h, padding:padding + wd]
            x._accumulate(gx[0] if squeeze else gx)

    parents = (x, w) if bt is None else (x, w, bt)
    return Tensor._op(out[0] if squeeze else out, parents, back)


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack_.append((parent, False))
    return order


def backward(root: Tensor, params: Optional[Mapping[str, Tensor]] = None) -> Gradient:
    """Reverse-mode pass from a scalar root.

    Returns name -> gradient for `params` (zeros where the graph does not reach a
    parameter) or, without `params`, for every named leaf reached from the root.
    """
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    order = _topological(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    if params is None:
        return {n.name: n.grad for n in order if n.name and not n._parents and n.grad is not None}
    return {name: (t.grad if t.grad is not None else np.zeros_like(t.data)) for name, t in params.items()}


def leaves(params: Mapping[str, np.ndarray], requires_grad: bool = True) -> dict[str, Tensor]:
    return {name: Tensor(value, requires_grad=requires_grad, name=name) for name, value in params.items()}


def scope(params: Mapping[str, T], prefix: str) -> dict[str, T]:
    """Sub-mapping of `params` under `prefix.`, with the prefix stripped."""
    head = prefix + "."
    return {k[len(head):]: v for k, v in params.items() if k.startswith(head)}


def grad_check(f: Callable[[dict[str, Tensor]], Tensor], point: Mapping[str, np.ndarray], h: float = 1e-5) -> float:
    """Max over all entries of |analytic - central difference| / max(1, |analytic|)."""
    if h <= 0:
        raise ParameterError("finite-difference step must be positive")
    base = {k: np.array(v, dtype=DTYPE) for k, v in point.items()}
    tracked = leaves(base, requires_grad=True)
    analytic = backward(as_tensor(f(tracked)), tracked)

    def value() -> float:
        return as_tensor(f({k: Tensor(v, name=k) for k, v in base.items()})).item()

    worst = 0.0
    for name, arr in base.items():
        flat = arr.reshape(-1)
        grad = analytic[name].reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = value()
            flat[i] = keep - h
            down = value()
            flat[i] = keep
            numeric = (up - down) / (2.0 * h)
            worst = max(worst, abs(grad[i] - numeric) / max(1.0, abs(grad[i])))
    return worst


def trunc_normal(rng: np.random.Generator, shape: Iterable[int], std: float = 0.02) -> np.ndarray:
    shape = tuple(shape)
    return truncnorm.rvs(-2.0, 2.0, scale=std, size=shape, random_state=rng).astype(DTYPE)


def he_normal(rng: np.random.Generator, shape: Iterable[int]) -> np.ndarray:
    """Fan-in scaled normal for conv and ReLU layers; fan-in is every axis but the first."""
    shape = tuple(shape)
    fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape).astype(DTYPE)


def all_finite(params: Mapping[str, np.ndarray]) -> bool:
    return all(np.isfinite(v).all() for v in params.values())
