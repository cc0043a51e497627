"""Dense tensors with reverse-mode gradient accumulation.

Values live in numpy arrays (float64 by default). Differentiable operations
append (output, backward_fn) pairs to the active Tape in execution order;
Tape.backward walks them once, in reverse, accumulating gradients additively
into Tensor.grad buffers. Without an active tape, operations run plain numpy
with no recording, which is the inference fast path.

finite_difference_check is the verification oracle: central differences on
each scalar parameter against the tape gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    DegenerateInputError,
    DimensionError,
    ParameterError,
    ValidationError,
)

DEFAULT_DTYPE = np.float64

# Additive attention-mask value. Large enough to zero the softmax weight at
# float64, small enough that masked logits stay finite.
MASK_VALUE = -1e9


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
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

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False, name=self.name)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar; all route through the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)


class Tape:
    """Ordered record of executed differentiable operations.

    Execution order is a valid topological order, so the backward pass is a
    single reversed walk. A tape can run backward once; reset() re-arms it.
    """

    def __init__(self):
        self._ops: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._spent = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _TAPE_STACK.pop()

    def __len__(self) -> int:
        return len(self._ops)

    def reset(self) -> None:
        self._ops.clear()
        self._spent = False

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise DimensionError(f"backward requires a scalar loss, got shape {loss.shape}")
        if self._spent:
            raise ValidationError("backward already ran on this tape; call reset() or record a new tape")
        if not any(out is loss for out, _ in self._ops):
            raise ValidationError("loss tensor was not recorded on this tape")
        self._spent = True
        loss.grad = np.ones_like(loss.data)
        for out, backward_fn in reversed(self._ops):
            if out.grad is None:
                continue  # side output that never reached the loss
            backward_fn(out.grad)


_TAPE_STACK: list[Tape] = []


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=DEFAULT_DTYPE)


def _record(out: Tensor, inputs: Sequence, backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    tape = active_tape()
    if tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._ops.append((out, backward_fn))
    return out


def _accumulate(t, g: np.ndarray) -> None:
    if not isinstance(t, Tensor) or not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting introduced or stretched."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    av, bv = _as_array(a), _as_array(b)
    out = Tensor(av + bv)

    def backward(g):
        if isinstance(a, Tensor):
            _accumulate(a, _unbroadcast(g, av.shape))
        if isinstance(b, Tensor):
            _accumulate(b, _unbroadcast(g, bv.shape))

    return _record(out, (a, b), backward)


def sub(a, b) -> Tensor:
    av, bv = _as_array(a), _as_array(b)
    out = Tensor(av - bv)

    def backward(g):
        if isinstance(a, Tensor):
            _accumulate(a, _unbroadcast(g, av.shape))
        if isinstance(b, Tensor):
            _accumulate(b, _unbroadcast(-g, bv.shape))

    return _record(out, (a, b), backward)


def mul(a, b) -> Tensor:
    av, bv = _as_array(a), _as_array(b)
    out = Tensor(av * bv)

    def backward(g):
        if isinstance(a, Tensor):
            _accumulate(a, _unbroadcast(g * bv, av.shape))
        if isinstance(b, Tensor):
            _accumulate(b, _unbroadcast(g * av, bv.shape))

    return _record(out, (a, b), backward)


def div(a, b) -> Tensor:
    av, bv = _as_array(a), _as_array(b)
    out = Tensor(av / bv)

    def backward(g):
        if isinstance(a, Tensor):
            _accumulate(a, _unbroadcast(g / bv, av.shape))
        if isinstance(b, Tensor):
            _accumulate(b, _unbroadcast(-g * av / (bv * bv), bv.shape))

    return _record(out, (a, b), backward)


def neg(a) -> Tensor:
    av = _as_array(a)
    out = Tensor(-av)

    def backward(g):
        _accumulate(a, -g)

    return _record(out, (a,), backward)


# ---------------------------------------------------------------------------
# matrix product


def matmul(a, b) -> Tensor:
    """Matrix product with numpy stacking semantics on leading axes.

    Both operands must be at least 2-D; reshape vectors at the call site.
    """
    av, bv = _as_array(a), _as_array(b)
    if av.ndim < 2 or bv.ndim < 2:
        raise DimensionError(f"matmul requires ndim >= 2 operands, got {av.shape} x {bv.shape}")
    if av.shape[-1] != bv.shape[-2]:
        raise DimensionError(f"matmul inner extents disagree: {av.shape} x {bv.shape}")
    out = Tensor(np.matmul(av, bv))

    def backward(g):
        if isinstance(a, Tensor):
            _accumulate(a, _unbroadcast(np.matmul(g, bv.swapaxes(-1, -2)), av.shape))
        if isinstance(b, Tensor):
            _accumulate(b, _unbroadcast(np.matmul(av.swapaxes(-1, -2), g), bv.shape))

    return _record(out, (a, b), backward)


# ---------------------------------------------------------------------------
# nonlinearities


def exp(a) -> Tensor:
    av = _as_array(a)
    ev = np.exp(av)
    out = Tensor(ev)

    def backward(g):
        _accumulate(a, g * ev)

    return _record(out, (a,), backward)


def log(a) -> Tensor:
    av = _as_array(a)
    out = Tensor(np.log(av))

    def backward(g):
        _accumulate(a, g / av)

    return _record(out, (a,), backward)


def sqrt(a) -> Tensor:
    av = _as_array(a)
    sv = np.sqrt(av)
    out = Tensor(sv)

    def backward(g):
        _accumulate(a, g * 0.5 / sv)

    return _record(out, (a,), backward)


def tanh(a) -> Tensor:
    av = _as_array(a)
    tv = np.tanh(av)
    out = Tensor(tv)

    def backward(g):
        _accumulate(a, g * (1.0 - tv * tv))

    return _record(out, (a,), backward)


def sigmoid(a) -> Tensor:
    """Elementwise logistic function, stable for |x| up to at least 1e3.

    Uses exp(-|x|), which never overflows: for x >= 0 the value is
    1/(1+e^-x); for x < 0 it is e^x/(1+e^x).
    """
    av = _as_array(a)
    e = np.exp(-np.abs(av))
    sv = np.where(av >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    out = Tensor(sv)

    def backward(g):
        _accumulate(a, g * sv * (1.0 - sv))

    return _record(out, (a,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """Smooth tanh-form GELU; smoothness keeps finite-difference checks tight."""
    av = _as_array(a)
    inner = _GELU_C * (av + 0.044715 * av**3)
    tv = np.tanh(inner)
    out = Tensor(0.5 * av * (1.0 + tv))

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * av * av)
        _accumulate(a, g * (0.5 * (1.0 + tv) + 0.5 * av * (1.0 - tv * tv) * d_inner))

    return _record(out, (a,), backward)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes through strictly inside."""
    av = _as_array(a)
    cv = np.clip(av, lo, hi)
    out = Tensor(cv)

    def backward(g):
        _accumulate(a, g * ((av > lo) & (av < hi)))

    return _record(out, (a,), backward)


# ---------------------------------------------------------------------------
# reductions


def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    av = _as_array(a)
    out = Tensor(av.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        _accumulate(a, _expand_reduced(g, av.shape, axis, keepdims))

    return _record(out, (a,), backward)


def mean_(a, axis=None, keepdims: bool = False) -> Tensor:
    av = _as_array(a)
    out = Tensor(av.mean(axis=axis, keepdims=keepdims))
    count = av.size if axis is None else np.prod(
        [av.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )

    def backward(g):
        _accumulate(a, _expand_reduced(g, av.shape, axis, keepdims) / count)

    return _record(out, (a,), backward)


def mean_over_axis(a, axis: int) -> Tensor:
    """Arithmetic mean along one axis; each element receives gradient 1/n."""
    av = _as_array(a)
    if not (-av.ndim <= axis < av.ndim):
        raise DimensionError(f"axis {axis} invalid for shape {av.shape}")
    if av.shape[axis] == 0:
        raise DimensionError(f"cannot average over empty axis {axis} of shape {av.shape}")
    return mean_(a, axis=axis)


# ---------------------------------------------------------------------------
# softmax family


def softmax(a, axis: int = -1) -> Tensor:
    """Softmax with max-subtraction; rows sum to one."""
    av = _as_array(a)
    shifted = av - av.max(axis=axis, keepdims=True)
    ev = np.exp(shifted)
    sv = ev / ev.sum(axis=axis, keepdims=True)
    out = Tensor(sv)

    def backward(g):
        inner = (g * sv).sum(axis=axis, keepdims=True)
        _accumulate(a, sv * (g - inner))

    return _record(out, (a,), backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    av = _as_array(a)
    shifted = av - av.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    lv = shifted - lse
    out = Tensor(lv)

    def backward(g):
        _accumulate(a, g - np.exp(lv) * g.sum(axis=axis, keepdims=True))

    return _record(out, (a,), backward)


def softmax_with_temperature(scores, tau: float, axis: int = -1) -> Tensor:
    """Temperature-scaled softmax: exp(s_i/tau) / sum_j exp(s_j/tau)."""
    if not (isinstance(tau, (int, float)) and math.isfinite(tau) and tau > 0):
        raise ParameterError(f"temperature must be a positive finite real, got {tau!r}")
    av = _as_array(scores)
    if av.size == 0 or av.shape[axis] == 0:
        raise DimensionError("softmax_with_temperature requires a nonempty input")
    return softmax(mul(scores, 1.0 / tau) if isinstance(scores, Tensor) else Tensor(av / tau), axis=axis)


# ---------------------------------------------------------------------------
# structural ops


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    av = _as_array(a)
    out = Tensor(av.reshape(shape))

    def backward(g):
        _accumulate(a, g.reshape(av.shape))

    return _record(out, (a,), backward)


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    av = _as_array(a)
    out = Tensor(av.swapaxes(ax1, ax2).copy())

    def backward(g):
        _accumulate(a, g.swapaxes(ax1, ax2))

    return _record(out, (a,), backward)


def concat(parts: Iterable, axis: int = -1) -> Tensor:
    parts = list(parts)
    arrays = [_as_array(p) for p in parts]
    out = Tensor(np.concatenate(arrays, axis=axis))
    offsets = np.cumsum([arr.shape[axis] for arr in arrays])[:-1]

    def backward(g):
        for part, piece in zip(parts, np.split(g, offsets, axis=axis)):
            _accumulate(part, piece)

    return _record(out, tuple(parts), backward)


def broadcast_to(a, shape: tuple[int, ...]) -> Tensor:
    av = _as_array(a)
    out = Tensor(np.broadcast_to(av, shape).copy())

    def backward(g):
        _accumulate(a, _unbroadcast(g, av.shape))

    return _record(out, (a,), backward)


def embedding(table, ids) -> Tensor:
    """Row gather: out[..., :] = table[ids[...], :]; backward scatter-adds."""
    tv = _as_array(table)
    idx = np.asarray(ids, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= tv.shape[0]):
        raise DimensionError(f"embedding ids outside table of {tv.shape[0]} rows")
    out = Tensor(tv[idx])

    def backward(g):
        if isinstance(table, Tensor) and table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(tv)
            np.add.at(table.grad, idx, g)

    return _record(out, (table,), backward)


def layer_norm(a, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last axis with learned scale and shift."""
    av = _as_array(a)
    mu = av.mean(axis=-1, keepdims=True)
    var = av.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (av - mu) * inv
    gv, bv = _as_array(gamma), _as_array(beta)
    out = Tensor(xhat * gv + bv)

    def backward(g):
        if isinstance(gamma, Tensor):
            _accumulate(gamma, _unbroadcast(g * xhat, gv.shape))
        if isinstance(beta, Tensor):
            _accumulate(beta, _unbroadcast(g, bv.shape))
        if isinstance(a, Tensor):
            gg = g * gv
            m1 = gg.mean(axis=-1, keepdims=True)
            m2 = (gg * xhat).mean(axis=-1, keepdims=True)
            _accumulate(a, (gg - m1 - xhat * m2) * inv)

    return _record(out, (a, gamma, beta), backward)


# ---------------------------------------------------------------------------
# non-differentiable helpers


def cosine_similarity(a, b) -> float:
    """Plain scalar cosine similarity between two 1-D vectors (no gradient)."""
    av, bv = _as_array(a).ravel(), _as_array(b).ravel()
    if av.shape != bv.shape:
        raise DimensionError(f"cosine_similarity shapes disagree: {av.shape} vs {bv.shape}")
    na, nb = float(np.linalg.norm(av)), float(np.linalg.norm(bv))
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine_similarity received a zero-norm vector")
    return float(av @ bv) / (na * nb)


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Run reverse-mode accumulation from a scalar loss on the given tape."""
    tape = tape if tape is not None else active_tape()
    if tape is None:
        raise ValidationError("no tape supplied and none active")
    tape.backward(loss)


# ---------------------------------------------------------------------------
# finite-difference verification oracle


@dataclass
class FiniteDifferenceReport:
    per_parameter: dict[str, float] = field(default_factory=dict)
    checked_entries: dict[str, int] = field(default_factory=dict)

    @property
    def max_relative_error(self) -> float:
        return max(self.per_parameter.values()) if self.per_parameter else 0.0

    def worst(self) -> tuple[str, float]:
        name = max(self.per_parameter, key=self.per_parameter.get)
        return name, self.per_parameter[name]


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Sequence[tuple[str, Tensor]],
    epsilon: float = 1e-4,
    max_entries_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> FiniteDifferenceReport:
    """Compare tape gradients of the scalar f() against central differences.

    f must be deterministic and rebuild its graph on every call; params are
    perturbed in place and restored. Relative error uses the denominator
    max(|analytic|, |numeric|, 1e-8). When max_entries_per_param is set, that
    many coordinates per parameter are sampled (seeded) instead of all of
    them, which keeps large checks inside a runtime budget.
    """
    if epsilon <= 0:
        raise ParameterError(f"epsilon must be positive, got {epsilon}")

    for _, p in params:
        p.grad = None
    with Tape() as tape:
        loss = f()
    if loss.data.size != 1:
        raise DimensionError(f"finite_difference_check requires scalar f(), got {loss.shape}")
    tape.backward(loss)
    analytic = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for name, p in params}
    for _, p in params:
        p.grad = None

    if rng is None:
        rng = np.random.default_rng(0)

    report = FiniteDifferenceReport()
    for name, p in params:
        flat = p.data.reshape(-1)
        n = flat.size
        if max_entries_per_param is not None and n > max_entries_per_param:
            coords = rng.choice(n, size=max_entries_per_param, replace=False)
        else:
            coords = range(n)
        worst = 0.0
        count = 0
        ana_flat = analytic[name].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + epsilon
            hi = float(f().data)
            flat[i] = orig - epsilon
            lo = float(f().data)
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * epsilon)
            denom = max(abs(ana_flat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(ana_flat[i] - numeric) / denom)
            count += 1
        report.per_parameter[name] = worst
        report.checked_entries[name] = count
    return report
