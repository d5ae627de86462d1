"""Dense float64 tensors with reverse-mode differentiation.

Every operation the model needs is a primitive here with a hand-written
backward rule. Non-leaf tensors carry a global execution sequence number;
:func:`backward` walks the reachable nodes in exactly the reverse of that
order, so gradients accumulate additively and deterministically.

Per-record computation is kept in ``(batch, tokens, features)`` layout.
``np.matmul`` on stacked operands calls BLAS once per leading slice, so a
record's forward result never depends on which other records share its batch.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "ShapeError",
    "constant",
    "parameter",
    "add",
    "sub",
    "neg",
    "mul",
    "scale",
    "matmul",
    "gelu",
    "identity",
    "layer_norm",
    "softmax",
    "logsumexp",
    "exp",
    "expm1",
    "log",
    "sqrt",
    "l2_normalize",
    "sum",
    "mean",
    "concat",
    "take",
    "reshape",
    "transpose",
    "broadcast_to",
    "pairwise_distance",
    "self_attention",
    "backward",
    "OP_SET",
]

_SEQ = itertools.count()
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse-mode AD."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._seq = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._seq = next(_SEQ)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, opname: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# elementwise arithmetic -----------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _node(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a Python scalar constant."""
    c = float(c)
    return _node(a.data * c, (a,), lambda g: (g * c,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _node(y, (a,), lambda g: (g * y,))


def expm1(a: Tensor) -> Tensor:
    """``exp(a) - 1`` without cancellation near zero."""
    x = a.data
    return _node(np.expm1(x), (a,), lambda g: (g * np.exp(x),))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _node(np.log(x), (a,), lambda g: (g / x,))


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)
    safe = np.where(y > 0, y, 1.0)
    return _node(y, (a,), lambda g: (np.where(y > 0, 0.5 * g / safe, 0.0),))


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _node(x * cdf, (a,), bw)


def identity(a: Tensor) -> Tensor:
    return _node(a.data.copy(), (a,), lambda g: (g,))


# linear algebra -------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes.

    A 2-D right operand is shared across the batch; the backward pass then
    flattens the batch and uses single GEMMs.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    flat = b.ndim == 2 and a.shape[:-1] == out.shape[:-1]

    def bw(g):
        ga = gb = None
        if flat:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                ga = (g2 @ b.data.T).reshape(a.shape)
            if b.requires_grad:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g2
            return ga, gb
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _node(out, (a, b), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-10) -> Tensor:
    """Normalize over the last axis, then apply learned gain and bias."""
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: feature dim {x.shape[-1]} vs gain {gain.shape} bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _node(xhat * gain.data + bias.data, (x, gain, bias), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _node(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    """Row-max-stabilized log-sum-exp; the reduced axis is dropped."""
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)
    p = e / s
    return _node(out, (x,), lambda g: (np.expand_dims(g, axis) * p,))


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    n = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    y = x.data / n

    def bw(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / n,)

    return _node(y, (x,), bw)


def pairwise_distance(a: Tensor, b: Tensor) -> Tensor:
    """Euclidean distances ``D[j, p] = ||a_j - b_p||`` for row sets a (N, D), b (M, D).

    Uses the Gram expansion; entries whose squared distance is small relative
    to the row norms are recomputed from explicit differences, so identical
    rows give exactly zero.
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"pairwise_distance: incompatible shapes {a.shape} and {b.shape}")
    A, Bm = a.data, b.data
    na = (A * A).sum(axis=1)
    nb = (Bm * Bm).sum(axis=1)
    sq = na[:, None] + nb[None, :] - 2.0 * (A @ Bm.T)
    close = sq <= 1e-4 * (na[:, None] + nb[None, :])
    if close.any():
        j, p = np.nonzero(close)
        diff = A[j] - Bm[p]
        sq[j, p] = (diff * diff).sum(axis=1)
    d = np.sqrt(np.maximum(sq, 0.0))

    def bw(g):
        w = np.where(d > 0, g / np.where(d > 0, d, 1.0), 0.0)
        ga = A * w.sum(axis=1)[:, None] - w @ Bm if a.requires_grad else None
        gb = Bm * w.sum(axis=0)[:, None] - w.T @ A if b.requires_grad else None
        return ga, gb

    return _node(d, (a, b), bw)


# reductions and shape manipulation -------------------------------------------


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(out, (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = math.prod(x.shape[i] for i in axes)
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    xs = list(xs)
    ref = list(xs[0].shape)
    for t in xs[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or any(i != axis % len(ref) and p != q for i, (p, q) in enumerate(zip(ref, other))):
            raise ShapeError(f"concat: shapes {tuple(ref)} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(xs)))

    return _node(np.concatenate([t.data for t in xs], axis=axis), xs, bw)


def take(x: Tensor, index, axis: int = 1) -> Tensor:
    """Select an integer position or a slice along ``axis`` (an int drops the axis)."""
    sl = [slice(None)] * x.ndim
    sl[axis] = index
    sl = tuple(sl)

    def bw(g):
        full = np.zeros_like(x.data)
        full[sl] = g
        return (full,)

    return _node(x.data[sl].copy(), (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from None
    return _node(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _node(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inverse),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {x.shape} to {shape}") from None
    return _node(out, (x,), lambda g: (_unbroadcast(g, x.shape),))


# composites ----------------------------------------------------------------


def self_attention(x: Tensor, wq, bq, wk, bk, wv, bv, wo, bo, heads: int) -> Tensor:
    """Multi-head scaled dot-product self-attention over axis 1 of (B, T, E)."""
    B, T, E = x.shape
    if E % heads:
        raise ShapeError(f"self_attention: width {E} not divisible by {heads} heads")
    dh = E // heads

    def split(t):
        return transpose(reshape(t, (B, T, heads, dh)), (0, 2, 1, 3))

    q = split(matmul(x, wq) + bq)
    k = split(matmul(x, wk) + bk)
    v = split(matmul(x, wv) + bv)
    scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    ctx = matmul(softmax(scores, axis=-1), v)
    merged = reshape(transpose(ctx, (0, 2, 1, 3)), (B, T, E))
    return matmul(merged, wo) + bo


OP_SET = (
    "matmul",
    "add",
    "sub",
    "neg",
    "mul",
    "scale",
    "gelu",
    "layer_norm",
    "softmax",
    "logsumexp",
    "self_attention",
    "exp",
    "expm1",
    "log",
    "sqrt",
    "l2_normalize",
    "pairwise_distance",
    "sum",
    "mean",
    "concat",
    "take",
    "reshape",
    "transpose",
    "broadcast_to",
)


# backward ------------------------------------------------------------------


def _leaves(root: Tensor, seen_ids: set[int], nodes: dict[int, Tensor]) -> list[Tensor]:
    out, stack, visited = [], [root], {id(root)}
    while stack:
        t = stack.pop()
        if t._backward is None and t.requires_grad:
            out.append(t)
        for p in t._parents:
            if id(p) not in visited and id(p) in seen_ids:
                visited.add(id(p))
                stack.append(p)
    return out


def backward(loss: Tensor, params: Iterable[Tensor] = ()) -> None:
    """Populate ``.grad`` on every tensor reachable from a scalar ``loss``.

    Gradients are recomputed from scratch on each call, not accumulated
    across calls. Listed ``params`` that the loss does not depend on receive
    zero gradients.
    """
    if loss.data.shape != ():
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    for p in params:
        p.zero_grad()
    if not loss.requires_grad:
        return

    nodes: dict[int, Tensor] = {}
    stack = [loss]
    seen = {id(loss)}
    while stack:
        t = stack.pop()
        if t._backward is not None:
            nodes[id(t)] = t
        for p in t._parents:
            if p.requires_grad and id(p) not in seen:
                seen.add(id(p))
                stack.append(p)
    for t in nodes.values():
        t.grad = None
    for t in _leaves(loss, seen, nodes):
        t.zero_grad()

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    for t in sorted(nodes.values(), key=lambda n: n._seq, reverse=True):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        t.grad = g
        for parent, pg in zip(t._parents, t._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._backward is None:
                parent.grad = parent.grad + pg
            elif id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg


# finite-difference check ---------------------------------------------------------


class GradCheckError(ArithmeticError):
    pass


def grad_check(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor], step: float = 1e-5) -> tuple[float, str]:
    """Compare analytic gradients with central differences for every entry.

    Returns the maximum of ``|analytic - numeric| / max(1, |numeric|)`` and a
    label ``name[index]`` for the worst entry. ``loss_fn`` must be a
    deterministic function of the tensors' current values.
    """
    if not 1e-7 <= step <= 1e-3:
        raise ValueError(f"step must lie in [1e-7, 1e-3], got {step}")
    tensors = list(tensors)
    loss = loss_fn()
    backward(loss, tensors)
    analytic = [t.grad.copy() for t in tensors]
    worst, label = 0.0, ""
    for ti, t in enumerate(tensors):
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = float(loss_fn().data)
            flat[i] = orig - step
            down = float(loss_fn().data)
            flat[i] = orig
            name = f"{t.name or ti}[{i}]"
            if not (math.isfinite(up) and math.isfinite(down)):
                raise GradCheckError(f"non-finite loss when perturbing parameter {name}")
            numeric = (up - down) / (2.0 * step)
            err = abs(analytic[ti].reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            if err > worst:
                worst, label = err, name
    return worst, label
