"""Dense float64 arrays with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array and remembers the operation that
produced it.  Calling :meth:`Tensor.backward` on a scalar walks the recorded
graph in reverse topological order and accumulates ``.grad`` on every leaf
that has ``requires_grad`` set.  The graph is rebuilt on every forward pass.

Broadcasting is unidirectional: one operand must broadcast to the other's
shape (bias rows over a batch, keepdims reductions).  Anything else raises
:class:`ShapeError`.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class EvaluationError(ArithmeticError):
    """A function under gradient check returned a non-finite value."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "frozen_rows")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim and 0 in arr.shape:
            raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], None] | None = _backward
        # row indices whose gradient is always zeroed (frozen embedding rows)
        self.frozen_rows: tuple[int, ...] = ()

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff ------------------------------------------------------
    def _accumulate(self, g: np.ndarray) -> None:
        if self.frozen_rows:
            g = g.copy()
            g[list(self.frozen_rows)] = 0.0
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
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
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE, copy=True), requires_grad=requires_grad)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    if any(_needs_grad(p) for p in parents):
        return Tensor(data, _parents=tuple(parents), _backward=backward)
    return Tensor(data)


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    try:
        out = np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"cannot combine shapes {a} and {b}") from None
    if out != a and out != b:
        raise ShapeError(f"cannot combine shapes {a} and {b}: only one-sided broadcasting is allowed")
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise binary -------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    return _result(
        ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _result(out, (a, b), backward)


# -- elementwise unary --------------------------------------------------
def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    return _result(ad**exponent, (a,), lambda g: (g * exponent * ad ** (exponent - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _result(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return _result(out, (a,), backward)


# -- reductions and shape ops ------------------------------------------
def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _result(out, (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {src} into {tuple(shape)}") from None
    return _result(out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    return _result(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def getitem(a: Tensor, index) -> Tensor:
    shape = a.shape
    out = a.data[index]

    basic = all(isinstance(i, (slice, int, type(Ellipsis))) for i in (index if isinstance(index, tuple) else (index,)))

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(np.array(out, dtype=DTYPE), (a,), backward)


def take_rows(table: Tensor, ids) -> Tensor:
    """Embedding lookup: ``table[ids]`` for an integer id array of any shape."""
    ids = np.asarray(ids)
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"row id out of range [0, {n})")
    shape = table.shape

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, *shape[1:]))
        return (full,)

    return _result(table.data[ids], (table,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"cannot concatenate shapes {[t.shape for t in tensors]}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tensors, backward)


def stop_gradient(a: Tensor) -> Tensor:
    return Tensor(a.data)


# -- linear algebra -----------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; ``b`` may be a plain 2-D weight."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _result(out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# -- normalisation and probability --------------------------------------
def _softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted."""
    p = _softmax_np(x.data)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _result(p, (x,), backward)


def masked_softmax(x: Tensor, allowed: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to ``allowed`` entries.

    Disallowed entries get exactly zero probability and their scores never
    influence the result.  Rows with no allowed entry are all zero.
    """
    allowed = np.broadcast_to(np.asarray(allowed, dtype=bool), x.shape)
    z = np.where(allowed, x.data, -np.inf)
    zmax = z.max(axis=-1, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.where(allowed, np.exp(z - zmax), 0.0)
    s = e.sum(axis=-1, keepdims=True)
    p = e / np.where(s > 0, s, 1.0)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _result(p, (x,), backward)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _result(out, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = x.shape[-1]

    def backward(g):
        gx = g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).mean(axis=-1, keepdims=True)
        return (gx * inv,)

    y = _result(xhat, (x,), backward)
    if gain is not None:
        if gain.shape != (n,):
            raise ShapeError(f"layer_norm gain {gain.shape} does not match width {n}")
        y = mul(y, gain)
    if bias is not None:
        y = add(y, bias)
    return y


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    norm = sqrt(add(tsum(mul(x, x), axis=-1, keepdims=True), eps))
    return div(x, norm)


def masked_cross_entropy(logits: Tensor, targets, mask, weights=None) -> Tensor:
    """Weighted negative log-likelihood averaged over masked rows.

    ``logits`` is ``(..., V)``; ``targets``, ``mask`` and ``weights`` share its
    leading shape.  Unmasked rows contribute nothing, neither to the value nor
    to the gradient.  With no masked row the loss is 0.
    """
    V = logits.shape[-1]
    lead = logits.shape[:-1]
    targets = np.asarray(targets)
    mask = np.asarray(mask, dtype=bool)
    if targets.shape != lead or mask.shape != lead:
        raise ShapeError(f"targets {targets.shape} / mask {mask.shape} do not match logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise IndexError(f"target id out of vocabulary [0, {V})")
    w = np.ones(lead) if weights is None else np.broadcast_to(np.asarray(weights, dtype=DTYPE), lead)
    flat_logits = logits.data.reshape(-1, V)
    rows = np.flatnonzero(mask.reshape(-1))
    n = rows.size
    if n == 0:
        return _result(np.array(0.0), (logits,), lambda g: (np.zeros(logits.shape),))
    tgt = targets.reshape(-1)[rows]
    wr = w.reshape(-1)[rows]
    sel = flat_logits[rows]
    z = sel - sel.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    nll = lse - z[np.arange(n), tgt]
    value = float((wr * nll).sum() / n)

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), tgt] -= 1.0
        full = np.zeros_like(flat_logits)
        full[rows] = p * (wr / n)[:, None] * g
        return (full.reshape(logits.shape),)

    return _result(np.array(value), (logits,), backward)


# -- convolution --------------------------------------------------------
def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Valid 1-D convolution along axis 1.

    ``x`` is ``(B, L, C_in)``, ``weight`` is ``(K, C_in, C_out)``; the result is
    ``(B, (L - K) // stride + 1, C_out)``.
    """
    if x.ndim != 3 or weight.ndim != 3 or x.shape[2] != weight.shape[1]:
        raise ShapeError(f"conv1d expects (B,L,C_in) x (K,C_in,C_out), got {x.shape} x {weight.shape}")
    B, L, Cin = x.shape
    K, _, Cout = weight.shape
    if K > L:
        raise ShapeError(f"kernel {K} longer than input {L}")
    Lout = (L - K) // stride + 1
    idx = np.arange(Lout)[:, None] * stride + np.arange(K)[None, :]  # (Lout, K)
    cols = x.data[:, idx, :].reshape(B, Lout, K * Cin)
    wmat = weight.data.reshape(K * Cin, Cout)
    out = cols @ wmat

    def backward(g):
        gw = (cols.reshape(-1, K * Cin).T @ g.reshape(-1, Cout)).reshape(K, Cin, Cout)
        gcols = (g @ wmat.T).reshape(B, Lout, K, Cin)
        gx = np.zeros((B, L, Cin), dtype=DTYPE)
        for k in range(K):
            gx[:, idx[:, k], :] += gcols[:, :, k, :]
        return gx, gw

    y = _result(out, (x, weight), backward)
    return y if bias is None else add(y, bias)


# -- gradient check -----------------------------------------------------
def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` is re-evaluated from scratch for every perturbation and must return a
    scalar tensor built from ``params``.  Rows listed in a parameter's
    ``frozen_rows`` have zero gradient by definition and are skipped.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    params = list(params)
    for p in params:
        p.grad = None
    out = f()
    if not np.all(np.isfinite(out.data)):
        raise EvaluationError("f returned a non-finite value")
    out.backward()
    worst = 0.0
    for p in params:
        ad = np.zeros(p.shape) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        skip = np.zeros(p.shape, dtype=bool)
        if p.frozen_rows:
            skip[list(p.frozen_rows)] = True
        skip = skip.reshape(-1)
        for i in range(flat.size):
            if skip[i]:
                continue
            keep = flat[i]
            flat[i] = keep + eps
            fp = float(f().data)
            flat[i] = keep - eps
            fm = float(f().data)
            flat[i] = keep
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise EvaluationError("f returned a non-finite value under perturbation")
            fd = (fp - fm) / (2 * eps)
            ga = float(ad.reshape(-1)[i])
            worst = max(worst, abs(ga - fd) / (abs(ga) + abs(fd) + 1e-12))
    for p in params:
        p.grad = None
    return worst
