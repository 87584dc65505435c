"""Small reverse-mode differentiable array engine on top of numpy.

Every value is a float64 :class:`Array`.  Operations executed while a
:class:`Tape` is active record a backward rule for each output that depends on
a parameter (``requires_grad=True``).  Outside a tape the same functions run as
plain numpy, which is what samplers and cached likelihoods use.

Shapes are explicit.  The only implicit expansion is a row bias: a 1-D operand
added to the last axis (``add``), and an attention bias of shape ``(S, S)`` or
``(B, S, S)`` spread over the head axis (``attention_bias_add``).  Matrix
products accept a leading batch shape on the left operand against a 2-D right
operand, or identical batch shapes on both.

Masked attention uses the finite sentinel ``NEG_INF = -1e30`` so that softmax
never sees ``(-inf) - (-inf)``; exp of a sentinel entry underflows to exactly 0.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np

NEG_INF = -1e30

_local = threading.local()


class ConfigurationError(ValueError):
    """Raised on shape mismatches and invalid op arguments."""


class NonFiniteError(FloatingPointError):
    """Raised when a forward or backward value becomes NaN or infinite."""


class Array:
    """A float64 array with an optional gradient accumulator."""

    __slots__ = ("values", "grad", "requires_grad", "name", "_leaf")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Array(shape={self.shape}{tag})"


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops executed inside append entries.  ``backward``
    replays the entries once in reverse order.
    """

    def __init__(self):
        self.entries: list[tuple[Array, tuple, Callable]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def record(self, out: Array, inputs: tuple, rule: Callable) -> None:
        out.requires_grad = True
        out._leaf = False
        self.entries.append((out, inputs, rule))

    def backward(self, loss: Array) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every parameter used."""
        if self._consumed:
            raise RuntimeError("backward already ran on this tape; start a new Tape")
        if loss.size != 1:
            raise ConfigurationError(f"backward needs a scalar loss, got shape {loss.shape}")
        self._consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
        for out, inputs, rule in reversed(self.entries):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = rule(g)
            for inp, ig in zip(inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if inp._leaf:
                    if inp.grad is None:
                        inp.grad = np.array(ig, dtype=np.float64, copy=True)
                    else:
                        inp.grad += ig
                    _check_finite(inp.grad, "backward")
                else:
                    key = id(inp)
                    if key in grads:
                        grads[key] = grads[key] + ig
                    else:
                        grads[key] = ig
        self.entries.clear()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


class FlopCounter:
    """Counts matmul FLOPs (2*m*n*k) for forward products and the backward replay."""

    def __init__(self):
        self.forward = 0
        self.backward = 0

    @property
    def total(self) -> int:
        return self.forward + self.backward

    def reset(self) -> None:
        self.forward = 0
        self.backward = 0


FLOPS = FlopCounter()


def _check_finite(v: np.ndarray, where: str) -> None:
    if not np.isfinite(v).all():
        raise NonFiniteError(f"non-finite value produced in {where}")


def _as_array(x) -> Array:
    return x if isinstance(x, Array) else Array(x)


def _emit(values: np.ndarray, inputs: tuple, rule: Callable, where: str) -> Array:
    _check_finite(values, where)
    out = Array(values)
    tape = current_tape()
    if tape is not None and any(i.requires_grad for i in inputs):
        tape.record(out, inputs, rule)
    return out


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


# ---------------------------------------------------------------------------
# linear algebra and elementwise ops


def matmul(a, b) -> Array:
    a, b = _as_array(a), _as_array(b)
    av, bv = a.values, b.values
    if av.ndim < 2 or bv.ndim < 2:
        raise ConfigurationError("matmul operands need at least 2 dims")
    if av.shape[-1] != bv.shape[-2]:
        raise ConfigurationError(f"matmul inner dims differ: {av.shape} @ {bv.shape}")
    if bv.ndim > 2 and av.shape[:-2] != bv.shape[:-2]:
        raise ConfigurationError(f"matmul batch dims differ: {av.shape} @ {bv.shape}")
    out = av @ bv
    m, k = av.shape[-2:]
    n = bv.shape[-1]
    batch = int(np.prod(av.shape[:-2], dtype=np.int64))
    flops = 2 * batch * m * n * k
    FLOPS.forward += flops

    def rule(g):
        FLOPS.backward += 2 * flops
        ga = gb = None
        if a.requires_grad:
            ga = g @ _swap(bv)
        if b.requires_grad:
            if bv.ndim == 2:
                gb = av.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _swap(av) @ g
        return ga, gb

    return _emit(out, (a, b), rule, "matmul")


def add(a, b) -> Array:
    a, b = _as_array(a), _as_array(b)
    if a.shape == b.shape:
        def rule(g):
            return g, g
    elif b.values.ndim == 1 and a.shape[-1:] == b.shape:
        def rule(g):
            return g, g.reshape(-1, g.shape[-1]).sum(axis=0)
    else:
        raise ConfigurationError(f"add shapes do not conform: {a.shape} + {b.shape}")
    return _emit(a.values + b.values, (a, b), rule, "add")


def sub(a, b) -> Array:
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ConfigurationError(f"sub shapes differ: {a.shape} - {b.shape}")
    return _emit(a.values - b.values, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Array:
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ConfigurationError(f"mul shapes differ: {a.shape} * {b.shape}")
    av, bv = a.values, b.values
    return _emit(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


def scale(a, c: float) -> Array:
    a = _as_array(a)
    c = float(c)
    return _emit(a.values * c, (a,), lambda g: (g * c,), "scale")


def tanh(a) -> Array:
    a = _as_array(a)
    y = np.tanh(a.values)
    return _emit(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Array:
    """GELU, tanh approximation."""
    a = _as_array(a)
    x = a.values
    inner = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    y = 0.5 * x * (1.0 + th)

    def rule(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        dy = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * d_inner
        return (g * dy,)

    return _emit(y, (a,), rule, "gelu")


def exp(a) -> Array:
    a = _as_array(a)
    y = np.exp(a.values)
    return _emit(y, (a,), lambda g: (g * y,), "exp")


def clip(a, lo: float, hi: float) -> Array:
    """Clamp to [lo, hi]; gradient passes only strictly inside the interval."""
    a = _as_array(a)
    x = a.values
    inside = (x > lo) & (x < hi)
    return _emit(np.clip(x, lo, hi), (a,), lambda g: (g * inside,), "clip")


def minimum(a, b) -> Array:
    """Elementwise min; ties route the gradient to ``a``."""
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ConfigurationError(f"minimum shapes differ: {a.shape} vs {b.shape}")
    pick_a = a.values <= b.values
    out = np.where(pick_a, a.values, b.values)
    return _emit(out, (a, b), lambda g: (g * pick_a, g * ~pick_a), "minimum")


# ---------------------------------------------------------------------------
# normalisations


def softmax(a) -> Array:
    a = _as_array(a)
    x = a.values
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _emit(s, (a,), rule, "softmax")


def log_softmax(a) -> Array:
    a = _as_array(a)
    x = a.values
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - lse

    def rule(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _emit(y, (a,), rule, "log_softmax")


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Array:
    x, gain, bias = _as_array(x), _as_array(gain), _as_array(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ConfigurationError(f"layer_norm params must have shape ({d},)")
    xv = x.values
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.values + bias.values

    def rule(g):
        gv = g.reshape(-1, d)
        ggain = (gv * xhat.reshape(-1, d)).sum(axis=0)
        gbias = gv.sum(axis=0)
        gx_hat = g * gain.values
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, ggain, gbias

    return _emit(out, (x, gain, bias), rule, "layer_norm")


# ---------------------------------------------------------------------------
# indexing and reshaping


def embedding(table, ids) -> Array:
    table = _as_array(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.values.ndim != 2:
        raise ConfigurationError("embedding table must be 2-D")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ConfigurationError(f"embedding index out of range [0, {table.shape[0]})")
    out = table.values[ids]

    def rule(g):
        gt = np.zeros_like(table.values)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _emit(out, (table,), rule, "embedding")


def attention_bias_add(scores, bias: np.ndarray) -> Array:
    """Add a {0, NEG_INF} bias to attention scores of shape (..., H, S, S).

    ``bias`` is (S, S) or (B, S, S); it is shared across the head axis.
    """
    scores = _as_array(scores)
    bias = np.asarray(bias, dtype=np.float64)
    sv = scores.values
    if bias.shape[-2:] != sv.shape[-2:]:
        raise ConfigurationError(f"bias {bias.shape} does not match scores {sv.shape}")
    if not np.all((bias == 0.0) | (bias == NEG_INF)):
        raise ConfigurationError("attention bias must be 0 or NEG_INF valued")
    if np.any((bias == NEG_INF).all(axis=-1)):
        raise ConfigurationError("empty attention row: every query must attend to at least one key")
    if bias.ndim == 3:
        if sv.ndim != 4 or bias.shape[0] != sv.shape[0]:
            raise ConfigurationError(f"batched bias {bias.shape} needs scores (B, H, S, S), got {sv.shape}")
        b = bias[:, None, :, :]
    elif bias.ndim == 2:
        b = bias
    else:
        raise ConfigurationError("bias must be (S, S) or (B, S, S)")
    return _emit(sv + b, (scores,), lambda g: (g,), "attention_bias_add")


def gather(logp, idx) -> Array:
    """Pick ``logp[..., idx[...]]`` along the last axis."""
    logp = _as_array(logp)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != logp.shape[:-1]:
        raise ConfigurationError(f"gather index shape {idx.shape} != {logp.shape[:-1]}")
    out = np.take_along_axis(logp.values, idx[..., None], axis=-1)[..., 0]

    def rule(g):
        gl = np.zeros_like(logp.values)
        np.put_along_axis(gl, idx[..., None], g[..., None], axis=-1)
        return (gl,)

    return _emit(out, (logp,), rule, "gather")


def index(a, key) -> Array:
    """Numpy-style indexing (basic or advanced) with a scatter-add backward."""
    a = _as_array(a)
    out = a.values[key]

    def rule(g):
        ga = np.zeros_like(a.values)
        np.add.at(ga, key, g)
        return (ga,)

    return _emit(np.array(out, dtype=np.float64), (a,), rule, "index")


def reshape(a, shape: Sequence[int]) -> Array:
    a = _as_array(a)
    old = a.shape
    return _emit(a.values.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes: Sequence[int]) -> Array:
    a = _as_array(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit(a.values.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


# ---------------------------------------------------------------------------
# reductions


def sum(a, axis: int | None = None) -> Array:  # noqa: A001 - mirrors numpy naming
    a = _as_array(a)
    shape = a.shape
    if axis is None:
        return _emit(np.array(a.values.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")
    ax = axis % len(shape)
    out = a.values.sum(axis=ax)
    return _emit(out, (a,), lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),), "sum")


def mean(a, axis: int | None = None) -> Array:
    a = _as_array(a)
    n = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(
    fn: Callable[[], Array],
    params: Sequence[Array],
    h: float = 1e-6,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` must rebuild the scalar loss from ``params`` on every call.  The error
    per entry is ``|analytic - numeric| / (|analytic| + 1e-12)``.  With
    ``max_entries`` only that many randomly chosen entries per parameter are
    probed (the full sweep costs two evaluations per entry).
    """
    if not 0.0 < h <= 1e-3:
        raise ConfigurationError("grad_check step h must lie in (0, 1e-3]")
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    analytic = [np.zeros_like(p.values) if p.grad is None else p.grad.copy() for p in params]
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.values.reshape(-1)
        if max_entries is None or max_entries >= flat.size:
            entries = np.arange(flat.size)
        else:
            entries = rng.choice(flat.size, size=max_entries, replace=False)
        for i in entries:
            orig = flat[i]
            flat[i] = orig + h
            fp = fn().item()
            flat[i] = orig - h
            fm = fn().item()
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NonFiniteError("non-finite loss during finite differencing")
            numeric = (fp - fm) / (2 * h)
            a = ga.reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / (abs(a) + 1e-12))
    for p in params:
        p.zero_grad()
    return worst
