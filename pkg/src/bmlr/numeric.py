"""Dense numeric kernel: probability transforms, affine/ReLU layers with
hand-written backward passes, Adam, and a central finite-difference oracle.

Every function accepts a single vector or a batch (leading axis = samples)
unless noted otherwise. Everything is float64.
"""

from dataclasses import dataclass

import numpy as np

TEMPERATURE_MIN = 1e-3
TEMPERATURE_MAX = 1e3
LOG_FLOOR = 1e-12


class NonFiniteError(ValueError):
    """Raised when NaN or Inf shows up where finite values are required."""


class ShapeError(ValueError):
    pass


def _as_float(x):
    return np.asarray(x, dtype=np.float64)


def check_finite(x, what="input"):
    x = _as_float(x)
    bad = ~np.isfinite(x)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        if len(idx) == 1:
            idx = idx[0]
        raise NonFiniteError(f"{what} has non-finite value {x[bad][0]!r} at index {idx}")
    return x


def softmax(logits):
    """Max-subtracted softmax over the last axis."""
    x = check_finite(logits, "logits")
    if x.shape[-1] == 0:
        raise ShapeError("softmax needs at least one logit")
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def clamp_temperature(T):
    return np.clip(T, TEMPERATURE_MIN, TEMPERATURE_MAX)


def tempered_softmax(logits, T):
    """softmax(logits / T), with T clamped to [1e-3, 1e3].

    ``T`` may be a scalar or an array broadcastable against the leading
    (batch) axes of ``logits``. Non-positive raw temperatures are rejected.
    """
    T = _as_float(T)
    if np.any(~(T > 0)):
        raise ValueError(f"temperature must be positive, got {T!r}")
    T = clamp_temperature(T)
    x = check_finite(logits, "logits")
    return softmax(x / T[..., None] if T.ndim else x / T)


def cross_entropy(target, predicted):
    """-sum(target * log(predicted)) over the last axis, log floored at 1e-12."""
    t = _as_float(target)
    p = _as_float(predicted)
    if t.shape != p.shape:
        raise ShapeError(f"target shape {t.shape} != predicted shape {p.shape}")
    return -(t * np.log(np.maximum(p, LOG_FLOOR))).sum(axis=-1)


def affine_forward(x, weight, bias):
    """weight @ x + bias; for a batch ``x`` of shape (N, in) returns (N, out)."""
    x = _as_float(x)
    weight = _as_float(weight)
    bias = _as_float(bias)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1] or bias.shape != (weight.shape[0],):
        raise ShapeError(
            f"affine shapes do not conform: x {x.shape}, W {weight.shape}, b {bias.shape}"
        )
    return x @ weight.T + bias


def affine_backward(upstream, x, weight):
    """Gradients of an affine layer given the upstream gradient.

    Returns (grad_input, grad_weight, grad_bias). Batched inputs sum the
    parameter gradients over samples.
    """
    up = _as_float(upstream)
    x = _as_float(x)
    weight = _as_float(weight)
    if (
        weight.ndim != 2
        or up.shape[-1] != weight.shape[0]
        or x.shape[-1] != weight.shape[1]
        or up.shape[:-1] != x.shape[:-1]
    ):
        raise ShapeError(
            f"affine backward shapes do not conform: up {up.shape}, x {x.shape}, W {weight.shape}"
        )
    grad_input = up @ weight
    if up.ndim == 1:
        return grad_input, np.outer(up, x), up.copy()
    return grad_input, up.T @ x, up.sum(axis=0)


def relu_forward(x):
    return np.maximum(check_finite(x), 0.0)


def relu_backward(upstream, x):
    # subgradient at exactly 0 is 0
    return np.where(_as_float(x) > 0, upstream, 0.0)


def sigmoid(x):
    x = _as_float(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def glorot_uniform(rng, fan_out, fan_in):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params, lr, **kw):
        params = _as_float(params)
        return cls(np.zeros_like(params), np.zeros_like(params), 0, lr, **kw)


def adam_step(params, grads, state):
    """One bias-corrected Adam update. Pure: inputs are never modified.

    Returns (new_params, new_state).
    """
    params = _as_float(params)
    grads = _as_float(grads)
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ShapeError(
            f"adam shapes do not conform: params {params.shape}, grads {grads.shape}, "
            f"state {state.m.shape}"
        )
    check_finite(grads, "gradient")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new, AdamState(m, v, t, state.lr, state.beta1, state.beta2, state.eps)


def finite_diff_grad(f, x, h=1e-5):
    """Central-difference gradient of ``f`` at ``x`` (any shape).

    ``f`` usually returns a scalar; if it returns an array of shape S the
    result has shape ``x.shape + S`` (one gradient per output entry).
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f"step h={h} outside [1e-7, 1e-3]")
    x = _as_float(x).copy()
    flat = x.reshape(-1)
    rows = []
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = _as_float(f(x))
        flat[i] = orig - h
        fm = _as_float(f(x))
        flat[i] = orig
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise NonFiniteError(f"function is non-finite near coordinate {i}")
        rows.append((fp - fm) / (2.0 * h))
    return np.asarray(rows).reshape(x.shape + np.shape(rows[0]) if rows else x.shape)
