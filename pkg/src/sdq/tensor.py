"""Dense float tensors with reverse-mode automatic differentiation.

A small tape-based engine backed by numpy, sized for a toy transformer
encoder.  Operations build a DAG of `Tensor` nodes; `backward` walks a
topologically ordered `Tape` of that DAG exactly once.  Elementwise ops
require exact shape matches (no silent broadcasting); the only sanctioned
broadcasts are `add_bias` (1-D bias over the last axis) and standard
batched matmul.  FP-32 is the working dtype; float64 may be requested
explicitly (gradient-check tests use it).
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (teacher/eval forwards)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """Dense float array plus an optional gradient slot and graph links."""

    __slots__ = ("data", "grad", "requires_grad", "_op", "_parents", "_backward", "_forward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._op = "leaf"
        self._parents: tuple = ()
        self._backward = None
        self._forward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, params=None):
        return backward(self, params)

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else mul_scalar(self, other)

    def __rmul__(self, other):
        return mul_scalar(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(op={self._op!r}, shape={self.shape}, requires_grad={self.requires_grad})"


def record_op(name: str, parents: Sequence[Tensor], out_data: np.ndarray,
              backward: Callable, forward: Callable | None = None) -> Tensor:
    """Wrap an op result in a graph node when gradients are live.

    `backward(grad_out)` must return one gradient array (or None) per parent,
    each exactly parent-shaped.  `forward(*parent_arrays)` recomputes the
    output for tape replay.  Other modules (quantizer, quant-noise) register
    their own ops through this hook.
    """
    out = Tensor(out_data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._op = name
        out._parents = tuple(parents)
        out._backward = backward
        out._forward = forward
    return out


class Tape:
    """Topologically ordered record of the ops reaching one output node.

    Inputs always precede the ops consuming them; backward walks the list in
    reverse and visits each node exactly once.
    """

    def __init__(self, nodes: list):
        self.nodes = nodes

    @classmethod
    def trace(cls, output: Tensor) -> "Tape":
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)

    def replay(self) -> np.ndarray:
        """Recompute every recorded forward in order; returns the output array.

        Only forward values are refreshed; backward closures keep the arrays
        they captured at record time.
        """
        for node in self.nodes:
            if node._forward is not None:
                node.data = node._forward(*(p.data for p in node._parents))
        return self.nodes[-1].data


def backward(loss: Tensor, params=None):
    """Reverse-mode sweep from a scalar loss.

    Accumulates into `.grad` of every reachable tensor that requires grad.
    When `params` (a name->Tensor mapping) is given, parameters the loss never
    touched get explicit zero gradients and the full gradient map is returned.
    """
    if loss.shape != ():
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = Tape.trace(loss)
    if loss.grad is None:
        loss.grad = np.zeros_like(loss.data)
    loss.grad = loss.grad + np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if node._backward is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if g.shape != parent.shape:
                raise AssertionError(
                    f"{node._op}: backward produced shape {g.shape} for parent of shape {parent.shape}")
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.data)
            parent.grad += g
    if params is not None:
        for p in params.values():
            if p.requires_grad and p.grad is None:
                p.grad = np.zeros_like(p.data)
        return {name: p.grad for name, p in params.items()}
    return None


def _require_same_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise / arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("add", a, b)
    return record_op("add", (a, b), a.data + b.data,
                     lambda g: (g, g), lambda x, y: x + y)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("sub", a, b)
    return record_op("sub", (a, b), a.data - b.data,
                     lambda g: (g, -g), lambda x, y: x - y)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return record_op("mul", (a, b), ad * bd,
                     lambda g: (g * bd, g * ad), lambda x, y: x * y)


def neg(x: Tensor) -> Tensor:
    return record_op("neg", (x,), -x.data, lambda g: (-g,), lambda v: -v)


def add_scalar(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return record_op("add_scalar", (x,), x.data + c, lambda g: (g,), lambda v: v + c)


def mul_scalar(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return record_op("mul_scalar", (x,), x.data * c, lambda g: (g * c,), lambda v: v * c)


def square(x: Tensor) -> Tensor:
    xd = x.data
    return record_op("square", (x,), xd * xd, lambda g: (2.0 * xd * g,), lambda v: v * v)


def log_clamped(x: Tensor, floor: float = 1e-12) -> Tensor:
    """Natural log with the argument clamped below at `floor` (grad 0 there)."""
    xd = x.data
    clamped = np.maximum(xd, floor)
    inside = xd > floor

    def bwd(g):
        return (np.where(inside, g / clamped, 0.0).astype(xd.dtype, copy=False),)

    return record_op("log_clamped", (x,), np.log(clamped), bwd,
                     lambda v: np.log(np.maximum(v, floor)))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a 1-D bias along the last axis (the one sanctioned broadcast)."""
    if b.ndim != 1 or x.ndim < 1 or b.shape[0] != x.shape[-1]:
        raise ValueError(f"add_bias: shape mismatch {x.shape} vs {b.shape}")
    n = b.shape[0]

    def bwd(g):
        return g, g.reshape(-1, n).sum(axis=0)

    return record_op("add_bias", (x, b), x.data + b.data, bwd, lambda v, w: v + w)


# ---------------------------------------------------------------------------
# linear algebra / structure


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    ok = ad.ndim >= 2 and bd.ndim >= 2 and ad.shape[-1] == bd.shape[-2]
    if ok and ad.ndim > 2 and bd.ndim > 2:
        ok = ad.shape[:-2] == bd.shape[:-2]
    if not ok:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def _sum_to(g, shape):
        while g.ndim > len(shape):
            g = g.sum(axis=0)
        return g

    def bwd(g):
        ga = _sum_to(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _sum_to(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return record_op("matmul", (a, b), ad @ bd, bwd, lambda x, y: x @ y)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return record_op("transpose", (x,), np.transpose(x.data, axes),
                     lambda g: (np.transpose(g, inverse),),
                     lambda v: np.transpose(v, axes))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    old = x.shape
    out = np.reshape(x.data, shape)
    return record_op("reshape", (x,), out,
                     lambda g: (np.reshape(g, old),),
                     lambda v: np.reshape(v, shape))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ValueError("concat: empty input list")
    first = tensors[0]
    for t in tensors[1:]:
        if t.ndim != first.ndim or any(
                i != axis % first.ndim and t.shape[i] != first.shape[i] for i in range(first.ndim)):
            raise ValueError(f"concat: shape mismatch {first.shape} vs {t.shape}")
    ax = axis % first.ndim
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=ax))

    return record_op("concat", tuple(tensors), np.concatenate([t.data for t in tensors], axis=ax),
                     bwd, lambda *vs: np.concatenate(vs, axis=ax))


def select(x: Tensor, axis: int, index: int) -> Tensor:
    """Pick a single index along `axis` (squeezing it); backward scatters."""
    if not 0 <= index < x.shape[axis]:
        raise ValueError(f"select: index {index} out of range for axis {axis} of shape {x.shape}")
    slicer = [slice(None)] * x.ndim
    slicer[axis] = index
    slicer = tuple(slicer)

    def bwd(g):
        out = np.zeros_like(x.data)
        out[slicer] = g
        return (out,)

    return record_op("select", (x,), x.data[slicer], bwd, lambda v: v[slicer])


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup `table[ids]` for an integer id array (embedding gather)."""
    if table.ndim != 2:
        raise ValueError(f"gather_rows: table must be 2-D, got {table.shape}")
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ValueError("gather_rows: ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(
            f"gather_rows: id out of range [0, {table.shape[0]}) for table {table.shape}")

    def bwd(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids, g)
        return (out,)

    return record_op("gather_rows", (table,), table.data[ids], bwd, lambda t: t[ids])


# ---------------------------------------------------------------------------
# reductions


def sum_all(x: Tensor) -> Tensor:
    return record_op("sum_all", (x,), np.sum(x.data),
                     lambda g: (np.ones_like(x.data) * g,), lambda v: np.sum(v))


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    return record_op("mean_all", (x,), np.mean(x.data),
                     lambda g: (np.ones_like(x.data) * (g / n),), lambda v: np.mean(v))


# ---------------------------------------------------------------------------
# nonlinearities


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact erf-based GELU: x * Phi(x)."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))

    def bwd(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
        return ((cdf + xd * pdf) * g,)

    return record_op("gelu", (x,), xd * cdf, bwd,
                     lambda v: v * 0.5 * (1.0 + erf(v * _INV_SQRT2)))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    if gain.ndim != 1 or bias.ndim != 1 or gain.shape[0] != x.shape[-1] or bias.shape != gain.shape:
        raise ValueError(
            f"layer_norm: shape mismatch x={x.shape} gain={gain.shape} bias={bias.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    n = gain.shape[0]

    def bwd(g):
        dgain = (g * xhat).reshape(-1, n).sum(axis=0)
        dbias = g.reshape(-1, n).sum(axis=0)
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx.astype(xd.dtype, copy=False), dgain, dbias

    def fwd(v, gn, bs):
        m = v.mean(axis=-1, keepdims=True)
        iv = 1.0 / np.sqrt(v.var(axis=-1, keepdims=True) + eps)
        return gn * ((v - m) * iv) + bs

    return record_op("layer_norm", (x, gain, bias), gain.data * xhat + bias.data, bwd, fwd)


def dropout_mask(x: Tensor, mask: np.ndarray, rate: float) -> Tensor:
    """Multiply by a caller-supplied 0/1 mask scaled by 1/(1-rate).

    The caller owns mask sampling (and therefore the seed); this op is pure.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout_mask: rate must be in [0, 1), got {rate}")
    mask = np.asarray(mask)
    if mask.shape != x.shape:
        raise ValueError(f"dropout_mask: shape mismatch {x.shape} vs {mask.shape}")
    scale = 1.0 / (1.0 - rate)
    scaled = mask * scale
    return record_op("dropout_mask", (x,), x.data * scaled,
                     lambda g: (g * scaled,), lambda v: v * scaled)


def softmax_t(x: Tensor, axis: int = -1, temperature: float = 1.0) -> Tensor:
    """Temperature-scaled softmax with max-subtraction for stability."""
    if not temperature > 0:
        raise ValueError(f"softmax_t: temperature must be positive, got {temperature}")
    inv_t = 1.0 / temperature

    def fwd(v):
        z = v * inv_t
        z = z - z.max(axis=axis, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=axis, keepdims=True)

    y = fwd(x.data)

    def bwd(g):
        dz = y * (g - (g * y).sum(axis=axis, keepdims=True))
        return ((dz * inv_t).astype(y.dtype, copy=False),)

    return record_op("softmax_t", (x,), y, bwd, fwd)


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with linear learning-rate warmup.

    The effective rate at update i (0-based) is lr * min(1, i / warmup_steps),
    so the very first step of a warmed-up run applies rate 0.  A non-finite
    gradient rejects the whole step before any state is touched, naming the
    offending parameter.
    """

    def __init__(self, params: dict[str, Tensor], lr: float, warmup_steps: int = 0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError(f"adam: lr must be positive, got {lr}")
        if warmup_steps < 0:
            raise ValueError(f"adam: warmup_steps must be >= 0, got {warmup_steps}")
        self.params = params
        self.lr = lr
        self.warmup_steps = warmup_steps
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.steps = 0
        self._m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def effective_lr(self) -> float:
        if self.warmup_steps > 0:
            return self.lr * min(1.0, self.steps / self.warmup_steps)
        return self.lr

    def step(self):
        grads = {}
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise ValueError(f"adam: non-finite gradient for parameter '{name}'")
            grads[name] = g
        lr_t = self.effective_lr()
        self.steps += 1
        k = self.steps
        c1 = 1.0 - self.beta1 ** k
        c2 = 1.0 - self.beta2 ** k
        for name, p in self.params.items():
            g = grads[name]
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = p.data - lr_t * update.astype(p.data.dtype, copy=False)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None
