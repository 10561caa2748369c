"""Reverse-mode automatic differentiation over dense numpy arrays.

Only the handful of operations the tiny decoder needs are provided. Each op
builds a node holding its parents and a closure that maps the output
gradient to parent gradients. ``backward`` walks the graph in reverse
topological order.

Precision defaults to float32; wrap gradient checks in ``precision(64)``.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPE: list[type] = [np.float32]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class EmptySupervisionError(ValueError):
    """A loss was requested with no supervised positions."""


def get_dtype() -> type:
    return _DTYPE[0]


def set_precision(bits: int) -> None:
    if bits not in (32, 64):
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    _DTYPE[0] = np.float32 if bits == 32 else np.float64


@contextlib.contextmanager
def precision(bits: int):
    """Temporarily switch the float precision used for new tensors."""
    old = _DTYPE[0]
    set_precision(bits)
    try:
        yield
    finally:
        _DTYPE[0] = old


_GRAD_ENABLED = [True]


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block; results are plain constants."""
    old = _GRAD_ENABLED[0]
    _GRAD_ENABLED[0] = False
    try:
        yield
    finally:
        _GRAD_ENABLED[0] = old


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = ""):
        arr = np.asarray(data)
        if arr.dtype != get_dtype():
            arr = arr.astype(get_dtype())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)

    def zero_grad(self) -> None:
        self.grad = None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], fn, op: str) -> Tensor:
    if not _GRAD_ENABLED[0] or not any(p.requires_grad or p._backward is not None for p in parents):
        return Tensor(data, op=op)
    return Tensor(data, _parents=parents, _backward=fn, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, leaves: Iterable[Tensor] | None = None) -> list[np.ndarray] | None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    When ``leaves`` is given the gradients are also returned in that order,
    with exact zeros for leaves the root does not depend on.
    """
    if root.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    order = _topo_order(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not (parent.requires_grad or parent._backward is not None):
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    if leaves is None:
        return None
    return [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]


# ---------------------------------------------------------------------------
# elementwise and linear algebra


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may broadcast (e.g. a bias row)."""
    try:
        out = a.data + b.data
    except ValueError:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from None

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), fn, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from None

    def fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(out, (a, b), fn, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def fn(g):
        return g @ b.data.T, a.data.T @ g

    return _node(out, (a, b), fn, "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose needs a matrix, got {a.shape}")

    def fn(g):
        return (g.T,)

    return _node(a.data.T, (a,), fn, "transpose")


def sum(a: Tensor) -> Tensor:  # noqa: A001
    def fn(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(np.asarray(a.data.sum()), (a,), fn, "sum")


def mean(a: Tensor) -> Tensor:
    n = a.size

    def fn(g):
        return (np.full(a.shape, g / n, dtype=a.data.dtype),)

    return _node(np.asarray(a.data.mean()), (a,), fn, "mean")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def fn(g):
        return (g * (1.0 - y * y),)

    return _node(y, (a,), fn, "tanh")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)

    def fn(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        return (g * dy,)

    return _node(y.astype(x.dtype, copy=False), (a,), fn, "gelu")


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    if weight.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise DimensionError(f"layer_norm params {weight.shape}/{bias.shape} do not match input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * weight.data + bias.data

    def fn(g):
        n = x.shape[-1]
        gw = (g * xhat).reshape(-1, n).sum(axis=0)
        gb = g.reshape(-1, n).sum(axis=0)
        gx_hat = g * weight.data
        gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, gw, gb

    return _node(out, (x, weight, bias), fn, "layer_norm")


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table``; repeated ids accumulate gradient."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise DimensionError(f"embedding table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range for table with {table.shape[0]} rows")
    out = table.data[ids]

    def fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _node(out, (table,), fn, "embedding")


def slice_rows(x: Tensor, n: int) -> Tensor:
    """First ``n`` rows of a matrix (used for positional tables)."""
    if n > x.shape[0]:
        raise DimensionError(f"cannot take {n} rows from shape {x.shape}")

    def fn(g):
        full = np.zeros_like(x.data)
        full[:n] = g
        return (full,)

    return _node(x.data[:n], (x,), fn, "slice_rows")


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def softmax(x: Tensor) -> Tensor:
    y = np.exp(_log_softmax(x.data))

    def fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _node(y, (x,), fn, "softmax")


def causal_attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int) -> Tensor:
    """Multi-head scaled dot-product attention with a strictly causal mask.

    q, k, v are [T, d]; heads split the last axis. Position t attends to
    positions 0..t only.
    """
    if not (q.shape == k.shape == v.shape) or q.data.ndim != 2:
        raise DimensionError(f"attention operands differ: {q.shape}, {k.shape}, {v.shape}")
    T, d = q.shape
    if d % n_heads:
        raise DimensionError(f"width {d} not divisible by {n_heads} heads")
    hd = d // n_heads
    scale = 1.0 / np.sqrt(hd)
    qh = q.data.reshape(T, n_heads, hd).transpose(1, 0, 2)
    kh = k.data.reshape(T, n_heads, hd).transpose(1, 0, 2)
    vh = v.data.reshape(T, n_heads, hd).transpose(1, 0, 2)
    scores = (qh @ kh.transpose(0, 2, 1)) * scale
    future = np.triu(np.ones((T, T), dtype=bool), k=1)
    scores = np.where(future, -np.inf, scores)
    p = np.exp(_log_softmax(scores)).astype(q.data.dtype, copy=False)
    out = (p @ vh).transpose(1, 0, 2).reshape(T, d)

    def fn(g):
        gh = g.reshape(T, n_heads, hd).transpose(1, 0, 2)
        gv = p.transpose(0, 2, 1) @ gh
        gp = gh @ vh.transpose(0, 2, 1)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * scale
        gq = gs @ kh
        gk = gs.transpose(0, 2, 1) @ qh

        def merge(a):
            return a.transpose(1, 0, 2).reshape(T, d)

        return merge(gq), merge(gk), merge(gv)

    return _node(out, (q, k, v), fn, "causal_attention")


def masked_cross_entropy(logits: Tensor, targets, mask) -> Tensor:
    """Mean of -log softmax(logits[t])[targets[t]] over positions where mask is true."""
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if logits.data.ndim != 2 or targets.shape != (logits.shape[0],) or mask.shape != targets.shape:
        raise DimensionError(
            f"cross entropy expects logits [T, V] with T targets and T mask entries; "
            f"got logits {logits.shape}, targets {targets.shape}, mask {mask.shape}"
        )
    n = int(mask.sum())
    if n == 0:
        raise EmptySupervisionError("mask selects no positions")
    rows = np.nonzero(mask)[0]
    tgt = targets[rows]
    if tgt.max() >= logits.shape[1] or tgt.min() < 0:
        raise IndexError(f"target id out of range for vocabulary of {logits.shape[1]}")
    logp = _log_softmax(logits.data[rows])
    loss = -logp[np.arange(n), tgt].sum() / n

    def fn(g):
        grad = np.zeros_like(logits.data)
        sub = np.exp(logp)
        sub[np.arange(n), tgt] -= 1.0
        grad[rows] = sub * (g / n)
        return (grad,)

    return _node(np.asarray(loss, dtype=logits.data.dtype), (logits,), fn, "masked_cross_entropy")


# ---------------------------------------------------------------------------
# finite-difference checking


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """Elementwise |a - n| / max(|a|, |n|), falling back to |a - n| when both are below ``floor``.

    An exactly zero analytic gradient where the numeric one is not small
    yields inf.
    """
    a = np.abs(analytic)
    n = np.abs(numeric)
    diff = np.abs(analytic - numeric)
    scale = np.maximum(a, n)
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(scale < floor, diff, diff / scale)
    rel = np.where((analytic == 0) & (n >= floor), np.inf, rel)
    return rel


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    eps: float = 1e-5,
    max_elements: int | None = None,
    seed: int = 0,
) -> float:
    """Worst relative error between backprop and central differences.

    ``f`` receives one Tensor per input and returns a scalar Tensor. Runs in
    64-bit. ``max_elements`` caps the number of coordinates probed per input
    (sampled with ``seed``).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    rng = np.random.default_rng(seed)
    worst = 0.0
    with precision(64):
        arrays = [np.array(x, dtype=np.float64) for x in inputs]
        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        out = f(*leaves)
        analytic = backward(out, leaves)

        def value() -> float:
            with no_grad():
                return float(f(*[Tensor(a) for a in arrays]).data)

        for arr, ga in zip(arrays, analytic):
            flat = arr.reshape(-1)
            idx = np.arange(flat.size)
            if max_elements is not None and flat.size > max_elements:
                idx = rng.choice(flat.size, size=max_elements, replace=False)
            numeric = np.empty(len(idx))
            for j, i in enumerate(idx):
                old = flat[i]
                flat[i] = old + eps
                hi = value()
                flat[i] = old - eps
                lo = value()
                flat[i] = old
                numeric[j] = (hi - lo) / (2 * eps)
            err = relative_error(ga.reshape(-1)[idx], numeric)
            if err.size:
                worst = max(worst, float(err.max()))
    return worst
