"""Dense tensors with tape-based reverse-mode gradients.

Only the operator set needed by the model is provided. Every op records a
closure mapping the output gradient to one gradient per parent; `backward`
walks the recorded graph in reverse topological order. The graph is rebuilt
on every forward pass.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numba
import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float32

_grad_enabled = True


class NumericError(FloatingPointError):
    """Raised when a forward or backward pass produces NaN or Inf."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a: int, b: int):
        return swapaxes(self, a, b)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


class Parameter(Tensor):
    """A trainable leaf. `grad` always exists and has the value's shape."""

    __slots__ = ("requires_update", "grad_ready")

    def __init__(self, data, dtype=None, requires_update: bool = True):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.grad = np.zeros_like(self.data)
        self.requires_update = requires_update
        self.grad_ready = False

    def zero_grad(self) -> None:
        self.grad.fill(0.0)
        self.grad_ready = False

    def __repr__(self) -> str:
        return f"Parameter(shape={self.shape}, dtype={self.dtype})"


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return _result(a.data * c, (a,), lambda g: (g * c,))
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    pos = x.data > 0
    return _result(np.maximum(x.data, 0), (x,), lambda g: (g * pos,))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


@numba.njit(fastmath=True, cache=True, error_model="numpy", inline="always")
def _cdf_gauss(xi):  # pragma: no cover - compiled
    # exp(-x^2/2) = 2^k * poly(r), with 2^k built from raw exponent bits
    y = max(np.float32(-0.5) * xi * xi, np.float32(-87.0))
    k = math.floor(y * np.float32(1.4426950408889634) + np.float32(0.5))
    r = y - k * np.float32(0.693145751953125) - k * np.float32(1.428606765330187e-06)
    p = np.float32(1.0) + r * (np.float32(1.0) + r * (np.float32(0.5) + r * (
        np.float32(1.0 / 6) + r * (np.float32(1.0 / 24) + r * (np.float32(1.0 / 120) + r * np.float32(1.0 / 720))))))
    e = p * np.int32((np.int32(k) + np.int32(127)) << 23).view(np.float32)
    # erfc rational approximation (A&S 7.1.26), branch-free select
    a = abs(xi) * np.float32(0.7071067811865476)
    t = np.float32(1.0) / (np.float32(1.0) + np.float32(0.3275911) * a)
    q = np.float32(0.5) * t * (np.float32(0.254829592) + t * (np.float32(-0.284496736) + t * (
        np.float32(1.421413741) + t * (np.float32(-1.453152027) + t * np.float32(1.061405429))))) * e
    h = np.float32(0.5) - q
    return np.float32(0.5) + (h if xi >= 0 else -h), e


@numba.njit(fastmath=True, cache=True, error_model="numpy")
def _gelu_kernel(x, out):  # pragma: no cover - compiled
    for i in range(x.size):
        c, _ = _cdf_gauss(x[i])
        out[i] = x[i] * c


@numba.njit(fastmath=True, cache=True, error_model="numpy")
def _gelu_saving_kernel(x, out, cdf, gauss):  # pragma: no cover - compiled
    for i in range(x.size):
        c, e = _cdf_gauss(x[i])
        out[i] = x[i] * c
        cdf[i] = c
        gauss[i] = e


def _gelu32(x: np.ndarray, save: bool):
    """x * Phi(x) for float32 input, plus Phi(x) and exp(-x^2/2) when `save`.

    Absolute error of Phi is below 5e-7. scipy's erf is scalar and branchy; on
    large random-sign float32 arrays it is several times slower than this kernel.
    """
    xf = np.ascontiguousarray(x).reshape(-1)
    if not np.isfinite(xf).all():
        # the kernel assumes finite input; let inf/NaN propagate through the exact path
        x64 = x.astype(np.float64)
        with np.errstate(invalid="ignore", over="ignore"):
            cdf = (0.5 * (1.0 + erf(x64 * _INV_SQRT2))).astype(np.float32)
            gauss = np.exp(-0.5 * x64 * x64).astype(np.float32)
            return x * cdf, cdf, gauss
    out = np.empty_like(xf)
    if not save:
        _gelu_kernel(xf, out)
        return out.reshape(x.shape), None, None
    cdf, gauss = np.empty_like(xf), np.empty_like(xf)
    _gelu_saving_kernel(xf, out, cdf, gauss)
    return out.reshape(x.shape), cdf.reshape(x.shape), gauss.reshape(x.shape)


def gelu(x: Tensor) -> Tensor:
    """GELU in its erf form, x * Phi(x)."""
    x = _as_tensor(x)
    if x.dtype == np.float32:
        out, cdf, gauss = _gelu32(x.data, _grad_enabled and x.requires_grad)
        if cdf is None:
            return Tensor(out)
    else:
        cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
        gauss = None
        out = x.data * cdf

    def backward(g):
        pdf = gauss if gauss is not None else np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * (pdf * _INV_SQRT2PI)),)

    return _result(out, (x,), backward)


def where(mask: np.ndarray, fill: Tensor, x: Tensor) -> Tensor:
    """Select `fill` (broadcast) where `mask` is true, else `x`."""
    fill = _as_tensor(fill, x.dtype)
    m = np.asarray(mask, dtype=x.dtype)
    keep = 1 - m
    out = x.data * keep + fill.data * m

    def backward(g):
        return _unbroadcast(g * m, fill.shape), g * keep

    return _result(out, (fill, x), backward)


# -------------------------------------------------------------- shape / index


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return _result(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),))


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = [_as_tensor(t) for t in xs]
    sizes = [t.shape[axis] for t in xs]
    cuts = np.cumsum(sizes)[:-1]
    return _result(
        np.concatenate([t.data for t in xs], axis=axis),
        xs,
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


def take_rows(table: Tensor, idx: np.ndarray) -> Tensor:
    """Embedding lookup: table[idx] for an integer index array of any shape."""
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"lookup index out of range for table of {table.shape[0]} rows")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, *table.shape[1:]))
        return (gt,)

    return _result(table.data[idx], (table,), backward)


# ----------------------------------------------------------------- reductions


def sum_all(x: Tensor) -> Tensor:
    return _result(
        np.asarray(x.data.sum(), dtype=x.dtype),
        (x,),
        lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype),),
    )


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return _result(
        np.asarray(x.data.mean(), dtype=x.dtype),
        (x,),
        lambda g: (np.full(x.shape, g / n, dtype=x.dtype),),
    )


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result(a.data @ b.data, (a, b), backward)


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """y[..., j] = sum_i x[..., i] W[i, j] + b[j]."""
    x = _as_tensor(x)
    if x.shape[-1] != W.shape[0]:
        raise ValueError(f"linear: input width {x.shape[-1]} does not match weight {W.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, W.shape[0])
    y = x2 @ W.data
    if b is not None:
        y = y + b.data

    def backward(g):
        g2 = g.reshape(-1, W.shape[1])
        gx = (g2 @ W.data.T).reshape(x.shape) if x.requires_grad else None
        gW = x2.T @ g2 if W.requires_grad else None
        gb = g2.sum(axis=0) if b is not None and b.requires_grad else None
        return (gx, gW, gb) if b is not None else (gx, gW)

    parents = (x, W, b) if b is not None else (x, W)
    return _result(y.reshape(*lead, W.shape[1]), parents, backward)


def time_linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """Linear map over axis -2: [..., L, d] with W [L, H] -> [..., H, d].

    Same as swapping the last two axes, applying `linear`, and swapping back,
    without materializing the transposes.
    """
    x = _as_tensor(x)
    if x.shape[-2] != W.shape[0]:
        raise ValueError(f"time_linear: input length {x.shape[-2]} does not match weight {W.shape}")
    Wt = W.data.T
    y = np.matmul(Wt, x.data)
    if b is not None:
        y += b.data[:, None]

    def backward(g):
        gx = np.matmul(W.data, g) if x.requires_grad else None
        gW = None
        if W.requires_grad:
            xs = x.data.reshape(-1, *x.shape[-2:])
            gs = g.reshape(-1, *g.shape[-2:])
            gW = np.matmul(xs, np.swapaxes(gs, -1, -2)).sum(axis=0)
        gb = g.sum(axis=tuple(range(g.ndim - 2)) + (g.ndim - 1,)) if b is not None and b.requires_grad else None
        return (gx, gW, gb) if b is not None else (gx, gW)

    parents = (x, W, b) if b is not None else (x, W)
    return _result(y, parents, backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        gg = _unbroadcast(g * xhat, gamma.shape)
        gb = _unbroadcast(g, beta.shape)
        gx_hat = g * gamma.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, gg, gb

    return _result(xhat * gamma.data + beta.data, (x, gamma, beta), backward)


def conv1d_same(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Length-preserving convolution along axis -2 of a [..., T, d] tensor.

    y[t] = sum_j x[t + j - (k-1)/2] @ kernel[j] + bias, zero padded.
    """
    k, d_in, d_out = kernel.shape
    if k % 2 == 0:
        raise ValueError(f"conv1d_same requires an odd kernel size, got {k}")
    if x.shape[-1] != d_in:
        raise ValueError(f"conv1d_same: input width {x.shape[-1]} does not match kernel {kernel.shape}")
    pad = (k - 1) // 2
    T = x.shape[-2]
    widths = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (0, 0)]
    xp = np.pad(x.data, widths)
    cols = np.stack([xp[..., j : j + T, :] for j in range(k)], axis=-2)  # [..., T, k, d_in]
    cols2 = cols.reshape(-1, k * d_in)
    K2 = kernel.data.reshape(k * d_in, d_out)
    y = (cols2 @ K2 + bias.data).reshape(*x.shape[:-1], d_out)

    def backward(g):
        g2 = g.reshape(-1, d_out)
        gK = (cols2.T @ g2).reshape(kernel.shape) if kernel.requires_grad else None
        gb = g2.sum(axis=0) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ K2.T).reshape(*x.shape[:-1], k, d_in)
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[..., j : j + T, :] += gcols[..., j, :]
            gx = gxp[..., pad : pad + T, :]
        return gx, gK, gb

    return _result(y, (x, kernel, bias), backward)


def avg_pool_time(x: Tensor, k: int) -> Tensor:
    """Non-overlapping mean pooling along axis -2; a trailing remainder is dropped."""
    if k < 1:
        raise ValueError(f"pooling kernel must be >= 1, got {k}")
    if k == 1:
        return x
    T = x.shape[-2]
    n = T // k
    lead = x.shape[:-2]
    C = x.shape[-1]
    body = x.data[..., : n * k, :].reshape(*lead, n, k, C)
    y = body.mean(axis=-2)

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[..., : n * k, :] = np.repeat(g / k, k, axis=-2)
        return (gx,)

    return _result(y, (x,), backward)


def huber_loss(a: Tensor, b, delta: float = 1.0, weight: np.ndarray | None = None) -> Tensor:
    """Mean Huber penalty of a - b.

    With `weight` given (broadcastable to a), the mean is weighted, which is
    how masked-position-only losses are expressed.
    """
    b = _as_tensor(b, a.dtype)
    if a.shape != b.shape:
        raise ValueError(f"huber_loss: shape mismatch {a.shape} vs {b.shape}")
    e = a.data - b.data
    ae = np.abs(e)
    quad = ae <= delta
    pen = np.where(quad, 0.5 * e * e, delta * (ae - 0.5 * delta))
    if weight is None:
        w = None
        denom = e.size
        val = pen.sum() / denom
    else:
        w = np.broadcast_to(np.asarray(weight, dtype=a.dtype), e.shape)
        denom = float(w.sum())
        if denom <= 0:
            raise ValueError("huber_loss: weight mask selects no elements")
        val = (pen * w).sum() / denom

    def backward(g):
        ge = np.clip(e, -delta, delta) * (g / denom)
        if w is not None:
            ge = ge * w
        return ge, -ge

    return _result(np.asarray(val, dtype=a.dtype), (a, b), backward)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a random generator")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) * (1.0 / (1.0 - rate))
    return _result(x.data * keep, (x,), lambda g: (g * keep,))


# ------------------------------------------------------------------- attention


@dataclass
class MHAParams:
    wq: Parameter
    bq: Parameter
    wk: Parameter
    bk: Parameter
    wv: Parameter
    bv: Parameter
    wo: Parameter
    bo: Parameter

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE) -> "MHAParams":
        def w():
            return Parameter(glorot(rng, d, d), dtype=dtype)

        def z():
            return Parameter(np.zeros(d), dtype=dtype)

        return cls(w(), z(), w(), z(), w(), z(), w(), z())

    def named(self) -> dict[str, Parameter]:
        return dict(self.__dict__)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, w: MHAParams, heads: int) -> Tensor:
    """Scaled dot-product attention with q/k/v/output projections.

    q is [..., Lq, d]; k and v are [..., Lk, d]. Leading axes broadcast, so a
    fixed [m, d] query set can attend over a batch of key sets.
    """
    d = q.shape[-1]
    if d % heads:
        raise ValueError(f"model width {d} is not divisible by {heads} heads")
    dh = d // heads

    def split(t: Tensor) -> Tensor:
        lead = t.shape[:-1]
        return swapaxes(reshape(t, (*lead, heads, dh)), -2, -3)  # [..., h, L, dh]

    Q = split(linear(q, w.wq, w.bq))
    K = split(linear(k, w.wk, w.bk))
    V = split(linear(v, w.wv, w.bv))
    scores = mul(matmul(Q, swapaxes(K, -1, -2)), 1.0 / math.sqrt(dh))
    attn = softmax(scores, axis=-1)
    out = swapaxes(matmul(attn, V), -2, -3)  # [..., Lq, h, dh]
    out = reshape(out, (*out.shape[:-2], d))
    return linear(out, w.wo, w.bo)


# ------------------------------------------------------------------- backward


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def backward(loss: Tensor, check_finite: bool = True) -> None:
    """Accumulate d(loss)/d(leaf) into the `.grad` of every reachable leaf."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: list[Tensor] = []
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            if isinstance(node, Parameter):
                node.grad_ready = True
            leaves.append(node)
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        # graphs are single-use; drop closures so activations can be freed
        node._backward = None
        node._parents = ()
    if check_finite:
        for leaf in leaves:
            if not np.all(np.isfinite(leaf.grad)):
                raise NumericError(f"non-finite gradient for leaf of shape {leaf.shape}")


def assert_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {name}")


# ------------------------------------------------------------------- optimizer


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


def clip_grad_norm(params: Iterable[Parameter], max_norm: float) -> float:
    params = list(params)
    total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params))
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        for p in params:
            p.grad *= scale
    return total


@dataclass
class AdamWState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)


def adamw_step(params: Sequence[Parameter], state: AdamWState) -> None:
    """One decoupled-weight-decay Adam update; zeroes the gradients afterwards."""
    params = [p for p in params if p.requires_update]
    if not any(p.grad_ready for p in params):
        raise RuntimeError("adamw_step called before any backward pass")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for i, p in enumerate(params):
        g = p.grad
        if i not in state.m:
            state.m[i] = np.zeros_like(p.data)
            state.v[i] = np.zeros_like(p.data)
        m, v = state.m[i], state.v[i]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        if state.weight_decay:
            p.data *= 1.0 - state.lr * state.weight_decay
        p.data -= (state.lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)
        p.zero_grad()
