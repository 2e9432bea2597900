"""Dense tensors with reverse-mode autodiff, a finite-difference oracle and AdamW.

Everything the model needs is here: a dynamic graph built as ops run, a
backward pass over that graph, and a handful of fused kernels (softmax,
layer norm, rotary rotation, linear) whose gradients are written by hand so
training stays fast on a single CPU core.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

_DTYPE = np.float32
_GRAD_ENABLED = True


def get_default_dtype():
    return _DTYPE


def set_default_dtype(dtype) -> None:
    """Switch the global float width (float32 for training, float64 for checks)."""
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    old = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


class GraphError(RuntimeError):
    pass


def _as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=_DTYPE)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """An n-d array plus the bookkeeping needed to differentiate through it."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._parents: tuple = ()
        self._backward = None

    @classmethod
    def _make(cls, data: np.ndarray, parents: tuple, backward) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- introspection ---------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- arithmetic ------------------------------------------------------
    def __add__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        a, b = self, other

        def back(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return Tensor._make(a.data + b.data, (a, b), back)

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        a, b = self, other

        def back(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        return Tensor._make(a.data - b.data, (a, b), back)

    def __rsub__(self, other):
        return Tensor(other) - self

    def __mul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        a, b = self, other

        def back(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

        return Tensor._make(a.data * b.data, (a, b), back)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        a, b = self, other

        def back(g):
            ga = _unbroadcast(g / b.data, a.shape)
            gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
            return ga, gb

        return Tensor._make(a.data / b.data, (a, b), back)

    def __rtruediv__(self, other):
        return Tensor(other) / self

    def __pow__(self, exponent: float):
        if isinstance(exponent, Tensor):
            raise TypeError("only scalar exponents are supported")
        a = self

        def back(g):
            return (g * exponent * a.data ** (exponent - 1),)

        return Tensor._make(a.data**exponent, (a,), back)

    def __matmul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        a, b = self, other
        if a.ndim < 2 or b.ndim < 2:
            raise ValueError("matmul operands need at least 2 dims")

        def back(g):
            ga = g @ np.swapaxes(b.data, -1, -2)
            gb = np.swapaxes(a.data, -1, -2) @ g
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

        return Tensor._make(a.data @ b.data, (a, b), back)

    # -- reductions and shape ops ------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        a = self

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return Tensor._make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), back)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.size if axis is None else np.prod([self.shape[i] for i in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        return Tensor._make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    def swapaxes(self, a1: int, a2: int):
        return Tensor._make(
            np.swapaxes(self.data, a1, a2), (self,), lambda g: (np.swapaxes(g, a1, a2),)
        )

    def __getitem__(self, idx):
        a = self

        def back(g):
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g) if _fancy(idx) else full.__setitem__(idx, g)
            return (full,)

        return Tensor._make(np.asarray(a.data[idx]), (a,), back)

    # -- pointwise ---------------------------------------------------------
    def exp(self):
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,))

    def tanh(self):
        out = np.tanh(self.data)
        return Tensor._make(out, (self,), lambda g: (g * (1.0 - out * out),))

    def square(self):
        a = self
        return Tensor._make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def _fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back)


def split(x: Tensor, sizes: list[int], axis: int = 0) -> list[Tensor]:
    """Slice ``x`` into consecutive chunks along ``axis``."""
    if sum(sizes) != x.shape[axis]:
        raise ValueError(f"split sizes {sizes} do not cover axis of length {x.shape[axis]}")
    out, start = [], 0
    ax = axis % x.ndim
    for n in sizes:
        sl = tuple([slice(None)] * ax + [slice(start, start + n)])
        out.append(x[sl])
        start += n
    return out


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x``; leading axes are flattened."""
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear: input width {x.shape[-1]} != weight rows {w.shape[0]}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ w.data
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def back(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape)
        gw = x2.T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return Tensor._make(out.reshape(lead + (w.shape[1],)), parents, back)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=axis, keepdims=True)
    p = z

    def back(g):
        gp = g * p
        gp -= p * gp.sum(axis=axis, keepdims=True)
        return (gp,)

    return Tensor._make(p, (x,), back)


def attention(q: Tensor, k: Tensor, v: Tensor, scale: float | None = None,
              store: list | None = None) -> Tensor:
    """Fused ``softmax(q k^T * scale) v`` over the last two axes.

    Only the probability matrix is kept for the backward pass. When ``store``
    is a list the probabilities are appended to it (for attention probes).
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ValueError(f"attention shape mismatch: q{q.shape} k{k.shape} v{v.shape}")
    if scale is None:
        scale = 1.0 / np.sqrt(q.shape[-1])
    qs = q.data * q.data.dtype.type(scale)
    p = qs @ np.ascontiguousarray(np.swapaxes(k.data, -1, -2))
    p -= p.max(axis=-1, keepdims=True)
    np.exp(p, out=p)
    p /= p.sum(axis=-1, keepdims=True)
    out = p @ v.data
    if store is not None:
        store.append(p)

    def back(g):
        gv = np.swapaxes(p, -1, -2) @ g
        gs = g @ np.ascontiguousarray(np.swapaxes(v.data, -1, -2))
        row = np.einsum("...ij,...ij->...i", p, gs)
        gs -= row[..., None]
        gs *= p
        gq = (gs @ k.data) * gq_scale
        gk = np.swapaxes(gs, -1, -2) @ qs
        return _unbroadcast(gq, q.shape), _unbroadcast(gk, k.shape), _unbroadcast(gv, v.shape)

    gq_scale = q.data.dtype.type(scale)
    return Tensor._make(out, (q, k, v), back)


def layer_norm(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine part)."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def back(g):
        gy_mean = g.mean(axis=-1, keepdims=True)
        gyy_mean = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gy_mean - y * gyy_mean),)

    return Tensor._make(y.astype(x.data.dtype, copy=False), (x,), back)


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    a = x.data
    inner = _GELU_C * (a + 0.044715 * (a * a * a))
    th = np.tanh(inner)
    out = 0.5 * a * (1.0 + th)

    def back(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * a * a)
        return (g * (0.5 * (1.0 + th) + 0.5 * a * (1.0 - th * th) * dinner),)

    return Tensor._make(out.astype(a.dtype, copy=False), (x,), back)


def silu(x: Tensor) -> Tensor:
    a = x.data
    s = 1.0 / (1.0 + np.exp(-a))
    return Tensor._make(a * s, (x,), lambda g: (g * (s * (1.0 + a * (1.0 - s))),))


def rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate consecutive channel pairs of ``x`` by precomputed angles.

    ``cos``/``sin`` have shape ``(..., N, C/2)`` broadcastable against
    ``x`` of shape ``(..., N, C)``; pair ``j`` is channels ``(2j, 2j+1)``.
    """
    xs = x.data.reshape(x.shape[:-1] + (-1, 2))
    xe, xo = xs[..., 0], xs[..., 1]
    out = np.empty_like(xs)
    out[..., 0] = xe * cos - xo * sin
    out[..., 1] = xe * sin + xo * cos

    def back(g):
        gs = g.reshape(xs.shape)
        ge, go = gs[..., 0], gs[..., 1]
        gx = np.empty_like(gs)
        gx[..., 0] = ge * cos + go * sin
        gx[..., 1] = go * cos - ge * sin
        return (gx.reshape(x.shape),)

    return Tensor._make(out.reshape(x.shape), (x,), back)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)

    def back(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return Tensor._make(table.data[ids], (table,), back)


# -- backward -----------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            state[key] = 2
            order.append(node)
            continue
        st = state.get(key)
        if st == 2:
            continue
        if st == 1:
            raise GraphError("cycle detected in computation graph")
        state[key] = 1
        stack.append((node, True))
        for p in node._parents:
            if not p.requires_grad:
                continue
            pst = state.get(id(p))
            if pst == 1:
                raise GraphError("cycle detected in computation graph")
            if pst is None:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params=None) -> dict:
    """Reverse-mode pass from a scalar ``loss``.

    ``params`` may be a mapping name -> Tensor (result keyed by name) or an
    iterable of tensors (result keyed by ``id``). Parameters the loss does not
    reach get zero gradients. Leaf tensors also receive ``.grad``.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if isinstance(params, Mapping):
        wanted = dict(params)
    elif params is None:
        wanted = {}
    else:
        wanted = {id(p): p for p in params}
    wanted_ids = {id(p) for p in wanted.values()}

    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        order = _topo_order(loss)
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(order):
            g = grads.get(id(node))
            if g is None:
                continue
            if node._backward is None:
                node.grad = Tensor(g)
                continue
            if id(node) not in wanted_ids:
                del grads[id(node)]
            pgrads = node._backward(g)
            for p, pg in zip(node._parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                k = id(p)
                prev = grads.get(k)
                grads[k] = pg if prev is None else prev + pg

    out = {}
    for key, p in wanted.items():
        g = grads.get(id(p))
        out[key] = Tensor(np.zeros_like(p.data) if g is None else g)
    return out


def finite_diff_grad(f: Callable[[Tensor], object], x: Tensor, eps: float = 1e-4) -> Tensor:
    """Central-difference gradient of scalar ``f`` with respect to ``x``.

    ``x.data`` is perturbed in place and restored, so ``f`` may also close over
    ``x`` instead of using its argument (handy for model parameters).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")

    def val(out) -> float:
        return float(out.data if isinstance(out, Tensor) else out)

    flat = x.data.reshape(-1)
    grad = np.zeros(flat.shape, dtype=np.float64)
    with no_grad():
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            fp = val(f(x))
            flat[i] = old - eps
            fm = val(f(x))
            flat[i] = old
            grad[i] = (fp - fm) / (2 * eps)
    return Tensor(grad.reshape(x.shape))


def rel_error(a, b) -> float:
    """Norm-wise relative error ``|a-b| / max(|a|, |b|)`` (0 when both vanish)."""
    a = np.asarray(_as_array(a), dtype=np.float64)
    b = np.asarray(_as_array(b), dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


# -- optimizer ----------------------------------------------------------------


@dataclass
class OptimizerState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-3
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: Mapping[str, Tensor], grads: Mapping[str, Tensor], state: OptimizerState):
    """One AdamW update, in place on ``params``; returns ``(params, state)``.

    The bias-corrected Adam step is applied first, then decoupled weight decay
    ``p <- p * (1 - lr * wd)``.
    """
    if state.step < 0:
        raise ValueError("step counter must be non-negative")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        g = _as_array(g)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        if m.shape != p.shape:
            raise ValueError(f"moment shape mismatch for {name}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        upd = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= (state.lr * upd).astype(p.data.dtype, copy=False)
        if state.weight_decay:
            p.data *= p.data.dtype.type(1.0 - state.lr * state.weight_decay)
    return params, state


class AdamW:
    """Thin stateful wrapper around :func:`adamw_step` for a fixed parameter set."""

    def __init__(self, params: Mapping[str, Tensor], lr=1e-4, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=1e-3):
        self.params = dict(params)
        self.state = OptimizerState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps,
                                    weight_decay=weight_decay)

    def step(self, grads: Mapping[str, Tensor]) -> None:
        adamw_step(self.params, grads, self.state)
