"""Dense float64 arrays with a reverse-mode gradient tape.

Arrays are numpy-backed and immutable once wrapped in a :class:`Tensor`.
Operations executed while a :class:`Tape` is active, and touching at least
one tensor with ``requires_grad``, are recorded together with a local
vector-Jacobian rule.  :func:`backward` replays the tape in reverse.

Usage::

    w = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = esum(mul(w, w))
    grads = tape.gradient(loss, [w])
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


_ids = itertools.count()
_active: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".rstrip())
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
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
        return float(self.data.reshape(-1)[0]) if self.size == 1 else _scalar_error(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _scalar_error(t: Tensor):
    raise DimensionError(f"expected a single-element tensor, got shape {t.shape}")


@dataclass
class _Node:
    inputs: tuple[int, ...]
    output: int
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


class Tape:
    """Ordered record of differentiable operations."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _active.append(self)
        return self

    def __exit__(self, *exc):
        _active.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def gradient(self, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
        grads = backward(self, loss)
        return [grads.get(p.id, np.zeros(p.shape)) for p in params]


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: np.ndarray, inputs: Sequence[Tensor], vjp, op: str) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{op} produced non-finite values")
    t = Tensor.__new__(Tensor)
    out = np.asarray(out, dtype=np.float64)
    out.flags.writeable = False
    t.data = out
    t.id = next(_ids)
    t.name = None
    t.requires_grad = False
    if _active and any(x.requires_grad for x in inputs):
        t.requires_grad = True
        _active[-1].nodes.append(_Node(tuple(x.id for x in inputs), t.id, vjp, op))
    return t


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to every recorded tensor id."""
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.nodes:
        raise ValueError("backward called on an empty tape")
    grads: dict[int, np.ndarray] = {loss.id: np.ones(loss.shape)}
    for node in reversed(tape.nodes):
        g = grads.get(node.output)
        if g is None:
            continue
        for i, gi in zip(node.inputs, node.vjp(g)):
            if gi is None:
                continue
            prev = grads.get(i)
            grads[i] = gi if prev is None else prev + gi
    return grads


# ---------------------------------------------------------------- elementwise

def _same_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return _record(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return _record(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _record(a.data * c, (a,), lambda g: (g * c,), "scale")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # branch on sign so exp never overflows
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def relu(a) -> Tensor:
    a = as_tensor(a)
    m = a.data > 0
    return _record(np.where(m, a.data, 0.0), (a,), lambda g: (g * m,), "relu")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        e = np.exp(a.data)
    return _record(e, (a,), lambda g: (g * e,), "exp")


def rsqrt_or_zero(a) -> Tensor:
    """x ** -0.5 for positive entries, 0 where x == 0; negative entries are an error."""
    a = as_tensor(a)
    x = a.data
    if np.any(x < 0):
        raise NonFiniteError("rsqrt_or_zero: negative input")
    pos = x > 0
    r = np.where(pos, 1.0 / np.sqrt(np.where(pos, x, 1.0)), 0.0)
    return _record(r, (a,), lambda g: (g * -0.5 * r ** 3,), "rsqrt")


_UNARY = {"sigmoid": sigmoid, "relu": relu, "exp": exp}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, a, b=None) -> Tensor:
    if op in _BINARY:
        if b is None:
            raise ValueError(f"{op} needs two operands")
        return _BINARY[op](a, b)
    if op in _UNARY:
        return _UNARY[op](a)
    raise ValueError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------- contractions

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _record(ad @ bd, (a, b), vjp, "matmul")


_plans: dict = {}


class _BinaryPlan:
    """Two-operand contraction lowered to transpose -> batched matmul -> transpose."""

    def __init__(self, sa: str, sb: str, so: str, sizes: dict[str, int]):
        # indices found in only one operand and not kept are summed up front
        self.sum_a = tuple(i for i, ch in enumerate(sa) if ch not in sb and ch not in so)
        self.sum_b = tuple(i for i, ch in enumerate(sb) if ch not in sa and ch not in so)
        sa = "".join(ch for ch in sa if ch in sb or ch in so)
        sb = "".join(ch for ch in sb if ch in sa or ch in so)
        batch = [ch for ch in so if ch in sa and ch in sb]
        keep_a = [ch for ch in so if ch in sa and ch not in sb]
        keep_b = [ch for ch in so if ch in sb and ch not in sa]
        contract = [ch for ch in sa if ch in sb and ch not in so]
        # without contracted indices the product is a plain broadcast multiply
        self.broadcast = not contract
        self.view_a = self._view(sa, so, sizes)
        self.view_b = self._view(sb, so, sizes)
        self.perm_a = [sa.index(ch) for ch in batch + keep_a + contract]
        self.perm_b = [sb.index(ch) for ch in batch + contract + keep_b]

        def prod(chs):
            return int(np.prod([sizes[ch] for ch in chs])) if chs else 1

        self.shape_a = (prod(batch), prod(keep_a), prod(contract))
        self.shape_b = (prod(batch), prod(contract), prod(keep_b))
        mid = batch + keep_a + keep_b
        self.mid_shape = tuple(sizes[ch] for ch in mid)
        self.perm_out = [mid.index(ch) for ch in so]

    @staticmethod
    def _view(s: str, so: str, sizes):
        order = [s.index(ch) for ch in so if ch in s]
        shape = tuple(sizes[ch] if ch in s else 1 for ch in so)
        return order, shape

    def __call__(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if self.sum_a:
            a = a.sum(axis=self.sum_a)
        if self.sum_b:
            b = b.sum(axis=self.sum_b)
        if self.broadcast:
            (oa, sa), (ob, sb) = self.view_a, self.view_b
            return a.transpose(oa).reshape(sa) * b.transpose(ob).reshape(sb)
        a = a.transpose(self.perm_a).reshape(self.shape_a)
        b = b.transpose(self.perm_b).reshape(self.shape_b)
        out = np.matmul(a, b).reshape(self.mid_shape)
        return np.ascontiguousarray(out.transpose(self.perm_out))


def _einsum(subs: str, *arrays):
    key = (subs, tuple(x.shape for x in arrays))
    plan = _plans.get(key)
    if plan is None:
        lhs, so = subs.split("->")
        ins = lhs.split(",")
        if len(ins) == 2:
            sizes = {}
            for s, x in zip(ins, arrays):
                sizes.update(zip(s, x.shape))
            plan = _BinaryPlan(ins[0], ins[1], so, sizes)
        else:
            path = np.einsum_path(subs, *arrays, optimize="greedy")[0]
            plan = lambda *xs: np.einsum(subs, *xs, optimize=path)  # noqa: E731
        _plans[key] = plan
    return plan(*arrays)


def einsum(subs: str, *operands) -> Tensor:
    """Explicit-output einsum (``'ij,jk->ik'``); no ellipsis, no repeated index in one operand.

    Every index of an operand must appear in the output or in another operand.
    """
    ops = [as_tensor(x) for x in operands]
    lhs, out_subs = subs.replace(" ", "").split("->")
    in_subs = lhs.split(",")
    if len(in_subs) != len(ops):
        raise DimensionError(f"einsum {subs!r}: expected {len(in_subs)} operands")
    sizes: dict[str, int] = {}
    for s, t in zip(in_subs, ops):
        if len(s) != t.ndim:
            raise DimensionError(f"einsum {subs!r}: operand shape {t.shape} vs {s!r}")
        for ch, n in zip(s, t.shape):
            if sizes.setdefault(ch, n) != n:
                raise DimensionError(f"einsum {subs!r}: index {ch} has extents {sizes[ch]} and {n}")
    arrays = [t.data for t in ops]
    out = _einsum(subs, *arrays)

    def vjp(g):
        grads = []
        for i, t in enumerate(ops):
            if not t.requires_grad:
                grads.append(None)
                continue
            others = [s for j, s in enumerate(in_subs) if j != i]
            rule = ",".join([out_subs] + others) + "->" + in_subs[i]
            grads.append(_einsum(rule, g, *[a for j, a in enumerate(arrays) if j != i]))
        return grads

    return _record(out, ops, vjp, "einsum")


# ---------------------------------------------------------------- reductions

def esum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(out, (a,), vjp, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[x] for x in axes]))
    return scale(esum(a, axis, keepdims), 1.0 / n)


def softmax(a, axis: int = -1) -> Tensor:
    """Max-shifted softmax.

    The normaliser sums the exponentials in sorted order, which makes the
    result exactly equivariant under permutations along ``axis``.
    """
    a = as_tensor(a)
    x = a.data
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    z = np.sum(np.sort(e, axis=axis), axis=axis, keepdims=True)
    s = e / z

    def vjp(g):
        return (s * (g - np.sum(g * s, axis=axis, keepdims=True)),)

    return _record(s, (a,), vjp, "softmax")


def layer_norm(a, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply per-channel scale and shift."""
    a, gamma, beta = as_tensor(a), as_tensor(gamma), as_tensor(beta)
    if gamma.shape != a.shape[-1:] or beta.shape != a.shape[-1:]:
        raise DimensionError(f"layer_norm: gamma/beta {gamma.shape} do not match {a.shape}")
    x = a.data
    n = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xh = xc * inv
    gd = gamma.data
    lead = tuple(range(x.ndim - 1))

    def vjp(g):
        gx = g * gd
        dx = inv / n * (n * gx - gx.sum(-1, keepdims=True) - xh * (gx * xh).sum(-1, keepdims=True))
        return dx, (g * xh).sum(axis=lead), g.sum(axis=lead)

    return _record(xh * gd + beta.data, (a, gamma, beta), vjp, "layer_norm")


# ---------------------------------------------------------------- shape ops

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def broadcast_to(a, shape) -> Tensor:
    """Numpy broadcasting made explicit; the gradient sums over broadcast axes."""
    a = as_tensor(a)
    shape = tuple(shape)
    src = a.shape
    lead = len(shape) - len(src)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(src) if n == 1 and shape[lead + i] != 1
    )

    def vjp(g):
        return (g.sum(axis=axes, keepdims=True).reshape(src),)

    return _record(np.broadcast_to(a.data, shape).copy(), (a,), vjp, "broadcast")


def pad(a, widths) -> Tensor:
    """Zero padding; ``widths`` is one (before, after) pair per axis."""
    a = as_tensor(a)
    idx = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
    return _record(np.pad(a.data, widths), (a,), lambda g: (g[idx],), "pad")


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def vjp(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return _record(a.data[idx], (a,), vjp, "slice")


def concat(tensors: Sequence, axis: int) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def vjp(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return out

    return _record(np.concatenate([t.data for t in ts], axis=axis), ts, vjp, "concat")


def stack(tensors: Sequence, axis: int) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in ts}
    if len(shapes) != 1:
        raise DimensionError(f"stack: shapes differ {sorted(shapes)}")

    def vjp(g):
        return list(np.moveaxis(g, axis, 0))

    return _record(np.stack([t.data for t in ts], axis=axis), ts, vjp, "stack")


def unfold2d(a, axes: tuple[int, int], window: tuple[int, int]) -> Tensor:
    """Sliding windows over two axes, appended as two trailing axes (stride 1)."""
    a = as_tensor(a)
    x = a.data
    ax0, ax1 = (ax % x.ndim for ax in axes)
    w0, w1 = window
    if w0 > x.shape[ax0] or w1 > x.shape[ax1]:
        raise DimensionError(f"unfold2d: window {window} larger than {x.shape} on axes {axes}")
    out = np.lib.stride_tricks.sliding_window_view(x, window, axis=(ax0, ax1))
    n0, n1 = out.shape[ax0], out.shape[ax1]
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape)
        for i in range(w0):
            for j in range(w1):
                idx = [slice(None)] * len(shape)
                idx[ax0] = slice(i, i + n0)
                idx[ax1] = slice(j, j + n1)
                full[tuple(idx)] += g[..., i, j]
        return (full,)

    return _record(np.ascontiguousarray(out), (a,), vjp, "unfold2d")


# ---------------------------------------------------------------- verification

@dataclass
class GradCheck:
    name: str | None
    rel_error: float          # ||analytic - fd|| / max(||analytic||, ||fd||, floor)
    worst_coordinate: float   # largest per-coordinate ratio, same floor


def finite_diff_report(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-6,
                       floor: float = 1e-12) -> list[GradCheck]:
    """Compare tape gradients with central differences, one entry per parameter.

    ``f`` is re-evaluated with each coordinate of each parameter nudged by
    ``±eps``; the parameters' buffers are temporarily made writable for this.
    The tensor-level error is a norm ratio, which stays meaningful when single
    coordinates sit below the roughly ``|f| * 1e-16 / eps`` difference noise.
    """
    if not 0 < eps <= 1e-3:
        raise ValueError(f"eps must lie in (0, 1e-3], got {eps}")
    with Tape() as tape:
        loss = f()
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("objective is not finite")
    analytic = tape.gradient(loss, params)
    report = []
    for p, ga in zip(params, analytic):
        buf = p.data
        fd = np.zeros(buf.size)
        buf.flags.writeable = True
        try:
            flat = buf.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                hi = f().item()
                flat[i] = orig - eps
                lo = f().item()
                flat[i] = orig
                if not (np.isfinite(hi) and np.isfinite(lo)):
                    raise NonFiniteError(f"objective not finite near {p.name}[{i}]")
                fd[i] = (hi - lo) / (2 * eps)
        finally:
            buf.flags.writeable = False
        a = ga.reshape(-1)
        diff = np.abs(a - fd)
        rel = float(np.linalg.norm(diff) / max(np.linalg.norm(a), np.linalg.norm(fd), floor))
        coord = float(np.max(diff / np.maximum(np.maximum(np.abs(a), np.abs(fd)), floor), initial=0.0))
        report.append(GradCheck(p.name, rel, coord))
    return report


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-6,
                      floor: float = 1e-12) -> float:
    """Worst tensor-level relative error over ``params``."""
    return max((r.rel_error for r in finite_diff_report(f, params, eps, floor)), default=0.0)
