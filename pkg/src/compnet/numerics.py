"""Dense numerics: activations, softmax, differentiable ops, SGD and LR schedules.

Vectors and matrices are plain float64 numpy arrays. Every differentiable op
used by the model exposes a forward/backward pair so gradients can be checked
against central finite differences with :func:`grad_check`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional

import numpy as np

Array = np.ndarray
DTYPE = np.float64


class NumericsError(ValueError):
    pass


def _float(x) -> Array:
    """Array view of ``x``; integer input becomes float64, float dtypes are kept."""
    arr = np.asarray(x)
    return arr if arr.dtype.kind == "f" else arr.astype(DTYPE)


def as_array(x, ndim: Optional[int] = None) -> Array:
    arr = np.ascontiguousarray(_float(x))
    if ndim is not None and arr.ndim != ndim:
        raise NumericsError(f"expected {ndim}-d array, got shape {arr.shape}")
    return arr


def check_finite(x: Array, what: str = "value") -> Array:
    if not np.all(np.isfinite(x)):
        raise NumericsError(f"non-finite {what}")
    return x


# --- activations -----------------------------------------------------------

def leaky_relu(x, a: float = 0.1):
    if not 0.0 < a < 1.0:
        raise NumericsError(f"leaky relu slope must lie in (0, 1), got {a}")
    x = _float(x)
    out = np.where(x >= 0, x, a * x)
    return float(out) if out.ndim == 0 else out


def leaky_relu_grad(x, a: float = 0.1):
    """Derivative of :func:`leaky_relu`; the kink at 0 takes the positive branch."""
    x = _float(x)
    out = np.where(x >= 0, 1.0, a)
    return float(out) if out.ndim == 0 else out


# --- softmax family --------------------------------------------------------

def logsumexp(x, axis: int = -1, keepdims: bool = False) -> Array:
    x = _float(x)
    m = np.max(x, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
    return out if keepdims else np.squeeze(out, axis=axis)


def log_softmax(x, axis: int = -1) -> Array:
    x = _float(x)
    if x.size == 0 or x.shape[axis] == 0:
        raise NumericsError("softmax of an empty vector")
    return x - logsumexp(x, axis=axis, keepdims=True)


def softmax(x, axis: int = -1) -> Array:
    x = _float(x)
    if x.size == 0 or x.shape[axis] == 0:
        raise NumericsError("softmax of an empty vector")
    check_finite(x, "logits")
    z = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return z / np.sum(z, axis=axis, keepdims=True)


def sigmoid(x) -> Array:
    x = _float(x)
    return np.exp(-np.logaddexp(0.0, -x))


def log_sigmoid(x) -> Array:
    return -np.logaddexp(0.0, -_float(x))


# --- differentiable op contract --------------------------------------------

@dataclass
class DiffOp:
    """A differentiable function of named array inputs.

    ``forward(inputs)`` returns ``(output, cache)`` and
    ``backward(cache, grad_output)`` returns a dict with the gradient for
    every input name.
    """

    name: str
    forward: Callable[[Mapping[str, Array]], tuple]
    backward: Callable[[object, Array], Dict[str, Array]]
    # inputs that should not be perturbed (index sets, masks, ...)
    constants: tuple = ()


def _linear_forward(inp):
    W, b, x = inp["W"], inp["b"], inp["x"]
    return x @ W.T + b, (W, x)


def _linear_backward(cache, g):
    W, x = cache
    g2 = g.reshape(-1, W.shape[0])
    x2 = x.reshape(-1, W.shape[1])
    return {"W": g2.T @ x2, "b": g2.sum(axis=0), "x": (g @ W).reshape(x.shape)}


linear_op = DiffOp("linear", _linear_forward, _linear_backward)


def make_leaky_relu_op(a: float = 0.1) -> DiffOp:
    def fwd(inp):
        x = inp["x"]
        return leaky_relu(x, a), x

    def bwd(x, g):
        return {"x": g * leaky_relu_grad(x, a)}

    return DiffOp("leaky_relu", fwd, bwd)


def _log_softmax_forward(inp):
    out = log_softmax(inp["x"])
    return out, out


def _log_softmax_backward(out, g):
    p = np.exp(out)
    return {"x": g - p * np.sum(g, axis=-1, keepdims=True)}


log_softmax_op = DiffOp("log_softmax", _log_softmax_forward, _log_softmax_backward)


def grad_check(op: DiffOp, point: Mapping[str, Array], eps: float = 1e-5,
               seed: int = 0, dtype=DTYPE) -> float:
    """Max relative error between ``op.backward`` and central differences.

    The (possibly non-scalar) output is reduced to a scalar by a fixed random
    projection so every output coordinate contributes. Where the true
    gradient is exactly zero (shift-invariant directions of a softmax) float64
    round-off alone exceeds the 1e-8 floor; pass ``dtype=np.longdouble`` to
    evaluate the op in extended precision.
    """
    if eps <= 0:
        raise NumericsError("eps must be positive")
    point = {k: np.array(v, dtype=dtype) for k, v in point.items()}
    out, cache = op.forward(point)
    out = np.asarray(out)
    check_finite(out, f"{op.name} forward value")
    proj = np.random.default_rng(seed).standard_normal(out.shape).astype(dtype)
    analytic = op.backward(cache, proj)

    def scalar(p):
        return np.sum(proj * np.asarray(op.forward(p)[0]))

    worst = 0.0
    for name, value in point.items():
        if name in op.constants:
            continue
        flat = value.reshape(-1)
        ga = np.asarray(analytic[name]).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = scalar(point)
            flat[i] = orig - eps
            down = scalar(point)
            flat[i] = orig
            gn = (up - down) / (2 * eps)
            denom = max(abs(ga[i]), abs(gn), 1e-8)
            worst = max(worst, float(abs(ga[i] - gn) / denom))
    return worst


# --- optimisation ----------------------------------------------------------

def sgd_step(params: Dict[str, Array], grads: Mapping[str, Array], rate: float,
             momentum: float = 0.0, velocity: Optional[Dict[str, Array]] = None,
             weight_decay: float = 0.0) -> Dict[str, Array]:
    """In-place SGD update with classical momentum: v <- m*v + g; p <- p - rate*v."""
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if np.shape(g) != np.shape(p):
            raise NumericsError(
                f"gradient shape {np.shape(g)} does not match parameter {name} {np.shape(p)}")
        if weight_decay:
            g = g + weight_decay * p
        if momentum:
            if velocity is None:
                raise NumericsError("momentum requires a velocity buffer")
            v = velocity.get(name)
            if v is None:
                v = velocity[name] = np.zeros_like(p)
            v *= momentum
            v += g
            g = v
        p -= rate * g
    return params


def clip_global_norm(grads: Dict[str, Array], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


@dataclass
class SGD:
    momentum: float = 0.9
    weight_decay: float = 0.0
    clip_norm: float = 0.0
    velocity: Dict[str, Array] = field(default_factory=dict)

    def step(self, params, grads, rate):
        if self.clip_norm:
            clip_global_norm(grads, self.clip_norm)
        return sgd_step(params, grads, rate, self.momentum, self.velocity, self.weight_decay)


@dataclass(frozen=True)
class LrSchedule:
    """Linear-scaling warm-up followed by step or cosine decay.

    ``base_rate`` is per example; the peak rate is ``base_rate * batch_size``.
    """

    base_rate: float = 0.1 / 256
    batch_size: int = 256
    warmup_fraction: float = 0.05
    decay: str = "step"  # "step" | "cosine"
    factor: float = 0.5
    num_steps: int = 10

    def __post_init__(self):
        if self.base_rate < 0 or self.batch_size < 1:
            raise NumericsError("base_rate must be >= 0 and batch_size >= 1")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise NumericsError("warmup_fraction must lie in [0, 1)")
        if self.decay not in ("step", "cosine"):
            raise NumericsError(f"unknown decay {self.decay!r}")
        if self.decay == "step" and (self.num_steps < 0 or not 0 < self.factor <= 1):
            raise NumericsError("step decay needs num_steps >= 0 and factor in (0, 1]")

    @property
    def peak(self) -> float:
        return self.base_rate * self.batch_size


def lr_at(schedule: LrSchedule, step: int, total_steps: int) -> float:
    if total_steps < 1 or not 0 <= step < total_steps:
        raise NumericsError(f"step {step} outside [0, {total_steps})")
    peak = schedule.peak
    warmup = schedule.warmup_fraction * total_steps
    if step < warmup:
        return peak * step / warmup
    span = total_steps - warmup
    t = (step - warmup) / span
    if schedule.decay == "cosine":
        return max(0.0, 0.5 * peak * (1.0 + math.cos(math.pi * t)))
    segment = min(int(math.floor(t * (schedule.num_steps + 1))), schedule.num_steps)
    return peak * schedule.factor ** segment
