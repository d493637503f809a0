"""Define-by-run reverse-mode autodiff over float64 matrices.

Every operation returns a new :class:`Tensor`; when any input requires a
gradient the result remembers its parents and a closure that pushes the
output gradient back to them.  ``Tensor.backward`` runs those closures once
each, in reverse topological order.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import (
    ConfigurationError,
    DimensionError,
    SequenceTooShortError,
    TrainingDivergenceError,
)

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _as_array(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim > 2:
        raise DimensionError(f"tensors are at most 2-D, got shape {arr.shape}")
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A node in the computation graph holding a float64 value."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = _as_array(value)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def item(self) -> float:
        return float(self.value)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if not self.requires_grad:
            return
        g = _unbroadcast(np.asarray(g, dtype=np.float64), self.shape)
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if not self.requires_grad:
            return
        order = _topological_order(self)
        seed = np.ones_like(self.value) if grad is None else _as_array(grad)
        self._accumulate(seed)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        # free interior gradients so repeated backward passes do not double count
        for node in order:
            if node._parents:
                node.grad = None
                node._parents = ()
                node._backward = None

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return take(self, index)


def _topological_order(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    return Tensor(x, requires_grad=False)


def parameter(x, name: str | None = None) -> Tensor:
    return Tensor(np.array(x, dtype=np.float64, copy=True), requires_grad=True, name=name)


_GRAD_STATE = threading.local()


def grad_enabled() -> bool:
    return getattr(_GRAD_STATE, "enabled", True)


@contextmanager
def no_grad():
    """Evaluate without recording the graph (per thread)."""
    previous = grad_enabled()
    _GRAD_STATE.enabled = False
    try:
        yield
    finally:
        _GRAD_STATE.enabled = previous


def _node(value, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(value)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        a._accumulate(g)
        b._accumulate(g)

    return _node(a.value + b.value, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        a._accumulate(g)
        b._accumulate(-g)

    return _node(a.value - b.value, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        a._accumulate(g * b.value)
        b._accumulate(g * a.value)

    return _node(a.value * b.value, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_value = a.value / b.value

    def backward(g):
        a._accumulate(g / b.value)
        b._accumulate(-g * out_value / b.value)

    return _node(out_value, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.value, (a,), lambda g: a._accumulate(-g))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        a._accumulate(g * exponent * a.value ** (exponent - 1))

    return _node(a.value**exponent, (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_value = np.exp(a.value)
    return _node(out_value, (a,), lambda g: a._accumulate(g * out_value))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.value), (a,), lambda g: a._accumulate(g / a.value))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out_value = np.sqrt(a.value)
    return _node(out_value, (a,), lambda g: a._accumulate(g * 0.5 / out_value))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out_value = np.tanh(a.value)
    return _node(out_value, (a,), lambda g: a._accumulate(g * (1.0 - out_value**2)))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0
    return _node(a.value * mask, (a,), lambda g: a._accumulate(g * mask))


def gelu(a) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    a = as_tensor(a)
    x = a.value
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        a._accumulate(g * (cdf + x * pdf))

    return _node(x * cdf, (a,), backward)


# ---------------------------------------------------------------------------
# shape and reduction


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.value.T)
        if b.requires_grad:
            b._accumulate(a.value.T @ g)

    return _node(a.value @ b.value, (a, b), backward)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _node(a.value.T, (a,), lambda g: a._accumulate(g.T))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    original = a.shape
    return _node(a.value.reshape(shape), (a,), lambda g: a._accumulate(g.reshape(original)))


def sum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return _node(a.value.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.value.size if axis is None else a.shape[axis]
    return sum(a, axis=axis, keepdims=keepdims) / float(count)


def take(a, index) -> Tensor:
    """Numpy-style indexing (slices, integer arrays) with scatter-add backward."""
    a = as_tensor(a)
    out_value = a.value[index]

    def backward(g):
        full = np.zeros_like(a.value)
        np.add.at(full, index, g)
        a._accumulate(full)

    return _node(np.array(out_value, copy=True), (a,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return _node(np.concatenate([t.value for t in tensors], axis=axis), tuple(tensors), backward)


# ---------------------------------------------------------------------------
# normalizers


def logsumexp(a, axis: int, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    x = a.value
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    lse = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))

    def backward(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        a._accumulate(gk * np.exp(x - lse))

    out = lse if keepdims else np.squeeze(lse, axis=axis)
    return _node(out, (a,), backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    """Max-shifted log-softmax along ``axis``."""
    a = as_tensor(a)
    x = a.value
    m = np.max(x, axis=axis, keepdims=True)
    shifted = x - m
    out_value = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))

    def backward(g):
        soft = np.exp(out_value)
        a._accumulate(g - soft * np.sum(g, axis=axis, keepdims=True))

    return _node(out_value, (a,), backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = a.value
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    out_value = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        a._accumulate(out_value * (g - np.sum(g * out_value, axis=axis, keepdims=True)))

    return _node(out_value, (a,), backward)


def layer_norm(x, gain=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalize each row to zero mean / unit variance, then scale and shift."""
    x = as_tensor(x)
    v = x.value
    mu = v.mean(axis=-1, keepdims=True)
    centered = v - mu
    var = (centered**2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    d = v.shape[-1]

    def backward(g):
        x._accumulate(
            inv_std
            * (g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).sum(axis=-1, keepdims=True) / d)
        )

    out = _node(xhat, (x,), backward)
    if gain is not None:
        out = out * gain
    if bias is not None:
        out = out + bias
    return out


def l2_normalize_rows(x, eps: float = 1e-12) -> Tensor:
    x = as_tensor(x)
    norms = sqrt(sum(x * x, axis=1, keepdims=True) + eps)
    return x / norms


# ---------------------------------------------------------------------------
# sequence operators


def conv1d_strided(x, kernel, stride: int, bias=None) -> Tensor:
    """Cross-correlate a ``T x d_in`` sequence with a ``width x d_in x d_out`` kernel.

    The kernel is stored flattened as ``(width * d_in) x d_out`` so that the
    operation reduces to a single matmul over extracted windows.  No padding
    is applied: ``T' = (T - width) // stride + 1``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    T, d_in = x.shape
    if kernel.shape[0] % d_in:
        raise DimensionError(f"kernel rows {kernel.shape[0]} not a multiple of d_in={d_in}")
    width = kernel.shape[0] // d_in
    if stride < 1:
        raise ConfigurationError("stride must be >= 1")
    if T < width:
        raise SequenceTooShortError(f"sequence length {T} < kernel width {width}")
    out_len = (T - width) // stride + 1
    rows = np.arange(out_len)[:, None] * stride + np.arange(width)[None, :]
    windows = reshape(take(x, rows.reshape(-1)), (out_len, width * d_in))
    out = matmul(windows, kernel)
    if bias is not None:
        out = out + bias
    return out


def sinusoidal_pe(length: int, dim: int) -> np.ndarray:
    """``pe[t, 2i] = sin(t / 10000^(2i/dim))``, ``pe[t, 2i+1] = cos(...)``."""
    if dim % 2:
        raise ConfigurationError(f"positional encoding dim must be even, got {dim}")
    t = np.arange(length, dtype=np.float64)[:, None]
    freq = 10000.0 ** (np.arange(0, dim, 2, dtype=np.float64) / dim)
    pe = np.empty((length, dim))
    pe[:, 0::2] = np.sin(t / freq)
    pe[:, 1::2] = np.cos(t / freq)
    return pe


def squared_distances(x, y) -> Tensor:
    """Pairwise squared Euclidean distances between rows of ``x`` and ``y``."""
    x, y = as_tensor(x), as_tensor(y)
    if x.shape[1] != y.shape[1]:
        raise DimensionError(f"feature dims differ: {x.shape[1]} vs {y.shape[1]}")
    xx = sum(x * x, axis=1, keepdims=True)
    yy = transpose(sum(y * y, axis=1, keepdims=True))
    return xx + yy - 2.0 * matmul(x, transpose(y))


# ---------------------------------------------------------------------------
# optimization


@dataclass
class AdamState:
    learning_rate: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.98
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigurationError("Adam betas must lie in (0, 1)")
        if self.epsilon <= 0 or self.learning_rate < 0:
            raise ConfigurationError("Adam epsilon must be > 0 and learning rate >= 0")


def adam_step(
    state: AdamState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float | None = None
) -> list[np.ndarray]:
    """Bias-corrected Adam update; returns new parameter arrays and mutates ``state``."""
    if len(params) != len(grads):
        raise DimensionError("params and grads differ in count")
    for p, g in zip(params, grads):
        if np.shape(p) != np.shape(g):
            raise DimensionError(f"gradient shape {np.shape(g)} != parameter shape {np.shape(p)}")
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError("non-finite gradient encountered")
    if not state.first_moment:
        state.first_moment = [np.zeros(np.shape(p)) for p in params]
        state.second_moment = [np.zeros(np.shape(p)) for p in params]
    elif [m.shape for m in state.first_moment] != [np.shape(p) for p in params]:
        raise DimensionError("moment buffers do not match parameter shapes")
    lr = state.learning_rate if lr is None else lr
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    updated = []
    for i, (p, g) in enumerate(zip(params, grads)):
        m = state.first_moment[i] = b1 * state.first_moment[i] + (1 - b1) * g
        v = state.second_moment[i] = b2 * state.second_moment[i] + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        updated.append(p - lr * m_hat / (np.sqrt(v_hat) + state.epsilon))
    return updated


class InverseSqrtSchedule:
    """Linear warm-up to ``base_lr`` then decay proportional to ``1/sqrt(step)``."""

    def __init__(self, base_lr: float, warmup_steps: int = 50):
        if warmup_steps < 1:
            raise ConfigurationError("warmup_steps must be >= 1")
        self.base_lr = base_lr
        self.warmup_steps = warmup_steps

    def __call__(self, step: int) -> float:
        step = max(step, 1)
        return self.base_lr * min(step / self.warmup_steps, math.sqrt(self.warmup_steps / step))


class HoldThenDecaySchedule:
    """Constant ``base_lr`` for the first ``hold_fraction`` of training, then
    geometric decay reaching ``final_lr`` at ``total_steps``."""

    def __init__(self, base_lr: float, final_lr: float, total_steps: int, hold_fraction: float = 0.2):
        if total_steps < 1 or not 0 <= hold_fraction <= 1:
            raise ConfigurationError("invalid hold-then-decay schedule")
        self.base_lr = base_lr
        self.final_lr = final_lr
        self.total_steps = total_steps
        self.hold_steps = int(round(hold_fraction * total_steps))

    def __call__(self, step: int) -> float:
        if step <= self.hold_steps:
            return self.base_lr
        span = max(self.total_steps - self.hold_steps, 1)
        frac = min((step - self.hold_steps) / span, 1.0)
        return self.base_lr * (self.final_lr / self.base_lr) ** frac


class Adam:
    """Adam over a list of parameter tensors, optionally driven by a schedule."""

    def __init__(self, params: Iterable[Tensor], lr: float = 2e-4, betas=(0.9, 0.98),
                 eps: float = 1e-8, schedule: Callable[[int], float] | None = None):
        self.params = [p for p in params if p.requires_grad]
        self.state = AdamState(learning_rate=lr, beta1=betas[0], beta2=betas[1], epsilon=eps)
        self.schedule = schedule

    @property
    def current_lr(self) -> float:
        if self.schedule is None:
            return self.state.learning_rate
        return self.schedule(self.state.step_count + 1)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.value) for p in self.params]
        new_values = adam_step(self.state, [p.value for p in self.params], grads, lr=self.current_lr)
        for p, v in zip(self.params, new_values):
            p.value = v


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_parameter: list[float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5,
               tolerance: float = 1e-4) -> GradCheckReport:
    """Compare autodiff gradients of scalar ``f()`` with central differences.

    The error for each parameter is ``max|auto - numeric| / max(|auto|, |numeric|)``
    with the denominator taken over the whole parameter, so tiny entries do
    not dominate.
    """
    for p in params:
        p.grad = None
    out = f()
    if out.value.size != 1:
        raise DimensionError("grad_check requires a scalar-valued function")
    out.backward()
    auto = [p.grad.copy() if p.grad is not None else np.zeros_like(p.value) for p in params]

    errors = []
    for p, a in zip(params, auto):
        numeric = np.zeros_like(p.value)
        flat = p.value.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            plus = f().item()
            flat[i] = orig - step
            minus = f().item()
            flat[i] = orig
            num_flat[i] = (plus - minus) / (2 * step)
        scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(numeric), initial=0.0), 1e-12)
        errors.append(float(np.max(np.abs(a - numeric), initial=0.0) / scale))
    for p in params:
        p.grad = None
    return GradCheckReport(max(errors, default=0.0), errors, tolerance)
