"""Dense float64 arrays with reverse-mode differentiation.

Every node in a computation graph is a :class:`Value`. Operations record
their operands and a backward rule; :meth:`Value.backward` walks the graph
once in reverse topological order and accumulates (``+=``) gradients into
the operands. Leading batch axes are supported throughout, so a ``[B, n, d]``
activation times a ``[d, d]`` weight works as in numpy.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_GRAD_ENABLED = True


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateRowError(ValueError):
    """A softmax row has no unmasked entry."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (evaluation only)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Value:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), op: str = ""):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = np.zeros_like(self.data) if self.requires_grad and not _parents else None
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = op
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Value(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        """Populate ``grad`` on every requires-grad node reachable from this scalar."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar root, got shape {self.shape}")
        if self._consumed:
            raise RuntimeError("backward() already ran on this graph; rebuild it before calling again")
        self._consumed = True
        if not self.requires_grad:
            return
        order = _topological_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_value(other)))

    def __rsub__(self, other):
        return add(as_value(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Value):
            raise TypeError("division by a Value is not supported")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


def as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def parameter(data) -> Value:
    """A trainable leaf."""
    return Value(np.array(data, dtype=DTYPE, copy=True), requires_grad=True)


def _topological_order(root: Value) -> list[Value]:
    order: list[Value] = []
    seen: set[int] = set()
    stack: list[tuple[Value, bool]] = [(root, False)]
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
    return order


def _make(data: np.ndarray, parents: Sequence[Value], op: str, backward) -> Value:
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Value(data, requires_grad=needs, _parents=tuple(parents) if needs else (), op=op)
    if needs:
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _accumulate(node: Value, g: np.ndarray, owned: bool = False) -> None:
    """Add ``g`` into ``node.grad``; ``owned`` means ``g`` is a fresh array nobody else holds."""
    if not node.requires_grad:
        return
    g = _unbroadcast(g, node.shape)
    if node.grad is None:
        node.grad = g if owned and g.flags.writeable and g.flags.owndata else np.array(g, dtype=DTYPE, copy=True)
    else:
        node.grad += g


# ---------------------------------------------------------------- elementwise

def add(*values) -> Value:
    """N-ary broadcasting sum; every operand receives the same upstream gradient."""
    vals = [as_value(v) for v in values]
    if not vals:
        raise ValueError("add() needs at least one operand")
    data = vals[0].data
    for v in vals[1:]:
        data = data + v.data

    def backward(g):
        for v in vals:
            _accumulate(v, g)

    return _make(data, vals, "add", backward)


def neg(x: Value) -> Value:
    return _make(-x.data, [x], "neg", lambda g: _accumulate(x, -g))


def mul(a, b) -> Value:
    a, b = as_value(a), as_value(b)

    def backward(g):
        _accumulate(a, g * b.data, owned=True)
        _accumulate(b, g * a.data, owned=True)

    return _make(a.data * b.data, [a, b], "mul", backward)


def exp(x: Value) -> Value:
    y = np.exp(x.data)
    return _make(y, [x], "exp", lambda g: _accumulate(x, g * y))


def log(x: Value) -> Value:
    return _make(np.log(x.data), [x], "log", lambda g: _accumulate(x, g / x.data))


def clip(x: Value, lo: float, hi: float) -> Value:
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), [x], "clip", lambda g: _accumulate(x, g * inside))


def sigmoid(x: Value) -> Value:
    z = x.data
    e = np.exp(-np.abs(z))
    y = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(y, [x], "sigmoid", lambda g: _accumulate(x, g * y * (1.0 - y)))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Value) -> Value:
    """tanh approximation of GELU."""
    z = x.data
    z2 = z * z
    t = np.tanh(_GELU_C * z * (1.0 + 0.044715 * z2))
    y = 0.5 * z * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * z2)
        _accumulate(x, g * (0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * dinner), owned=True)

    return _make(y, [x], "gelu", backward)


def masked_fill(x: Value, mask: np.ndarray, value: float) -> Value:
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    return _make(np.where(mask, value, x.data), [x], "masked_fill", lambda g: _accumulate(x, np.where(mask, 0.0, g)))


def dropout(x: Value, rate: float, rng: np.random.Generator | None) -> Value:
    """Inverted dropout; identity when ``rate == 0`` or ``rng`` is None."""
    if rate <= 0.0 or rng is None:
        return x
    if rate >= 1.0:
        raise ValueError("dropout rate must be < 1")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make(x.data * keep, [x], "dropout", lambda g: _accumulate(x, g * keep, owned=True))


# ---------------------------------------------------------------- shape ops

def reshape(x: Value, shape: Sequence[int]) -> Value:
    return _make(x.data.reshape(shape), [x], "reshape", lambda g: _accumulate(x, g.reshape(x.shape)))


def swapaxes(x: Value, a: int, b: int) -> Value:
    return _make(np.swapaxes(x.data, a, b), [x], "swapaxes", lambda g: _accumulate(x, np.swapaxes(g, a, b)))


def index(x: Value, key) -> Value:
    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, key, g)
        _accumulate(x, full)

    return _make(x.data[key], [x], "index", backward)


def concat(values: Sequence[Value], axis: int = -1) -> Value:
    vals = [as_value(v) for v in values]
    data = np.concatenate([v.data for v in vals], axis=axis)
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def backward(g):
        for v, part in zip(vals, np.split(g, bounds, axis=axis)):
            _accumulate(v, part)

    return _make(data, vals, "concat", backward)


def stack(values: Sequence[Value], axis: int = 0) -> Value:
    vals = [as_value(v) for v in values]
    data = np.stack([v.data for v in vals], axis=axis)

    def backward(g):
        for i, v in enumerate(vals):
            _accumulate(v, np.take(g, i, axis=axis))

    return _make(data, vals, "stack", backward)


def sum(x: Value, axis=None, keepdims: bool = False) -> Value:  # noqa: A001
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.shape))

    return _make(x.data.sum(axis=axis, keepdims=keepdims), [x], "sum", backward)


def mean(x: Value, axis=None, keepdims: bool = False) -> Value:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


# ---------------------------------------------------------------- linear algebra

def matmul(a: Value, b: Value) -> Value:
    """Batched matrix product over the last two axes (numpy broadcasting on the rest)."""
    a, b = as_value(a), as_value(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if b.ndim == 2:
        # activations times a weight matrix: one flat BLAS call
        k, m = b.shape
        a2 = a.data.reshape(-1, k)
        data = (a2 @ b.data).reshape(*a.shape[:-1], m)

        def backward(g):
            g2 = g.reshape(-1, m)
            if a.requires_grad:
                _accumulate(a, (g2 @ b.data.T).reshape(a.shape), owned=True)
            if b.requires_grad:
                _accumulate(b, a2.T @ g2, owned=True)

        return _make(data, [a, b], "matmul", backward)
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from exc

    def backward(g):
        if a.requires_grad:
            _accumulate(a, np.matmul(g, np.swapaxes(b.data, -1, -2)), owned=True)
        if b.requires_grad:
            _accumulate(b, np.matmul(np.swapaxes(a.data, -1, -2), g), owned=True)

    return _make(data, [a, b], "matmul", backward)


def gather_rows(table: Value, indices) -> Value:
    """``out[..., :] = table[indices[...], :]``; backward scatter-adds."""
    idx = np.asarray(indices)
    if idx.size and not np.issubdtype(idx.dtype, np.integer):
        raise TypeError(f"indices must be integers, got {idx.dtype}")
    idx = idx.astype(np.intp, copy=False)
    n_rows = table.shape[0]
    bad = (idx < 0) | (idx >= n_rows)
    if bad.any():
        raise IndexError(f"row index {int(idx[bad].flat[0])} out of range for table with {n_rows} rows")

    def backward(g):
        if not table.requires_grad:
            return
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, idx.reshape(-1), g.reshape(-1, table.shape[1]))

    return _make(table.data[idx], [table], "gather_rows", backward)


def masked_softmax(logits: Value, mask=None, axis: int = -1) -> Value:
    """Softmax along ``axis``; entries where ``mask`` is False come out exactly 0."""
    x = logits.data
    if mask is None:
        shifted = x - x.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
    else:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not m.any(axis=axis).all():
            raise DegenerateRowError("softmax row is fully masked")
        filled = np.where(m, x, -np.inf)
        shifted = filled - filled.max(axis=axis, keepdims=True)
        e = np.where(m, np.exp(shifted), 0.0)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        _accumulate(logits, y * (g - (g * y).sum(axis=axis, keepdims=True)), owned=True)

    return _make(y, [logits], "softmax", backward)


def layer_norm(x: Value, gain: Value, bias: Value, eps: float = 1e-12) -> Value:
    if eps <= 0:
        raise ValueError("eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        _accumulate(gain, g * xhat)
        _accumulate(bias, g)
        if x.requires_grad:
            gx = g * gain.data
            d = x.shape[-1]
            _accumulate(
                x,
                inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).sum(axis=-1, keepdims=True) / d),
            )

    return _make(out, [x, gain, bias], "layer_norm", backward)


def cross_entropy(logits: Value, targets) -> Value:
    """Mean over rows of ``-log softmax(logits)[target]`` (log-sum-exp stabilised)."""
    t = np.asarray(targets, dtype=np.intp)
    z = logits.data
    if z.ndim != 2 or t.shape != (z.shape[0],):
        raise DimensionError(f"cross_entropy expects [B, C] logits and [B] targets, got {z.shape} and {t.shape}")
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    rows = np.arange(z.shape[0])
    loss = np.mean(lse - z[rows, t])

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, t] -= 1.0
        _accumulate(logits, g * p / z.shape[0])

    return _make(np.asarray(loss), [logits], "cross_entropy", backward)


# ---------------------------------------------------------------- rank

@dataclass(frozen=True)
class RankReport:
    shape: tuple[int, int]
    singular_values: np.ndarray
    rank: int
    rel_tol: float


def numeric_rank(m, rel_tol: float = 1e-8) -> RankReport:
    """Count singular values above ``rel_tol * sigma_max``."""
    if not 0.0 < rel_tol < 1.0:
        raise ValueError("rel_tol must lie in (0, 1)")
    a = m.data if isinstance(m, Value) else np.asarray(m, dtype=DTYPE)
    if a.ndim != 2:
        raise DimensionError(f"numeric_rank expects a matrix, got shape {a.shape}")
    s = np.linalg.svd(a, compute_uv=False) if a.size else np.zeros(0)
    top = s[0] if s.size else 0.0
    rank = 0 if top == 0.0 else int(np.count_nonzero(s > rel_tol * top))
    return RankReport(shape=a.shape, singular_values=s, rank=rank, rel_tol=rel_tol)


# ---------------------------------------------------------------- gradient checking

def finite_difference_check(
    fn: Callable[[], Value],
    inputs: Iterable[Value],
    h: float = 1e-5,
    max_elements: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
) -> float:
    """Largest element-wise relative error between analytic and central-difference gradients.

    ``fn`` rebuilds the graph from the current ``inputs`` data and returns a
    scalar. Relative error is ``|a - n| / max(|a|, |n|, floor)``; ``floor``
    keeps exactly-zero gradients from dividing by zero. With ``max_elements``
    only a random subset of each input is probed.
    """
    inputs = list(inputs)
    for v in inputs:
        v.zero_grad()
    fn().backward()
    analytic = [v.grad.copy() for v in inputs]
    worst = 0.0
    for v, ga in zip(inputs, analytic):
        flat = v.data.reshape(-1)
        positions = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            positions = (rng or np.random.default_rng(0)).choice(flat.size, max_elements, replace=False)
        for i in positions:
            orig = flat[i]
            flat[i] = orig + h
            up = float(fn().data)
            flat[i] = orig - h
            down = float(fn().data)
            flat[i] = orig
            num = (up - down) / (2 * h)
            a = ga.reshape(-1)[i]
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
    return worst
