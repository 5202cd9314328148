"""Stable elementary functions, AdamW and a finite-difference gradient oracle.

Matrices are plain ``numpy.ndarray`` objects in float64. Activation
sequences are stored token-major, shape ``(n_tokens, d)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Mapping

import numpy as np

PROB_EPS = 1e-12


def log_sum_exp(values) -> float:
    """log(sum(exp(values))) using the max-shift trick."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("log_sum_exp of an empty sequence")
    m = v.max()
    return float(m + np.log(np.exp(v - m).sum()))


def stable_softmax(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("softmax of an empty sequence")
    e = np.exp(v - v.max())
    return e / e.sum()


def sigmoid(x):
    """Logistic function, safe for large |x|. Accepts scalars or arrays."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.logaddexp(0.0, x)


def bce_loss(p, label):
    """Binary cross entropy with p clamped into [1e-12, 1 - 1e-12]."""
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    label = np.asarray(label, dtype=np.float64)
    out = -(label * np.log(p) + (1.0 - label) * np.log1p(-p))
    return out if out.ndim else float(out)


def bce_from_logits(z, labels):
    """Clamped BCE of sigmoid(z) and its derivative with respect to z.

    The derivative is zero where the clamp is active, which keeps it
    consistent with the clamped loss.
    """
    z = np.asarray(z, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    p = np.asarray(sigmoid(z), dtype=np.float64)
    loss = bce_loss(p, labels)
    clamped = (p < PROB_EPS) | (p > 1.0 - PROB_EPS)
    grad = np.where(clamped, 0.0, p - labels)
    return loss, grad


@dataclass(frozen=True)
class AdamWState:
    learning_rate: float = 1e-4
    weight_decay: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first_moment: Mapping[str, np.ndarray] = field(default_factory=dict)
    second_moment: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("AdamW betas must lie in [0, 1)")
        if self.step < 0:
            raise ValueError("AdamW step must be non-negative")


def adamw_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamWState,
) -> tuple[dict[str, np.ndarray], AdamWState]:
    """One AdamW update with bias correction and decoupled weight decay.

    Returns new parameter and state objects; the inputs are not modified.
    """
    if set(params) != set(grads):
        raise ValueError(
            f"parameter/gradient names differ: {sorted(set(params) ^ set(grads))}"
        )
    step = state.step + 1
    lr, wd = state.learning_rate, state.weight_decay
    b1, b2, eps = state.beta1, state.beta2, state.epsilon
    bc1 = 1.0 - b1**step
    bc2 = 1.0 - b2**step

    new_params, m_out, v_out = {}, {}, {}
    for name, p in params.items():
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, expected {p.shape}")
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        elif m.shape != p.shape or v.shape != p.shape:
            raise ValueError(f"optimizer moments for {name!r} do not match shape {p.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        new_params[name] = p - lr * wd * p - lr * m_hat / (np.sqrt(v_hat) + eps)
        m_out[name] = m
        v_out[name] = v

    return new_params, replace(state, step=step, first_moment=m_out, second_moment=v_out)


def finite_diff_grad(f: Callable, params, h: float = 1e-5):
    """Central-difference gradient of a scalar function.

    ``params`` is either a single array or a mapping of named arrays; the
    result has the same structure.
    """
    if h <= 0:
        raise ValueError("step size h must be positive")
    if not isinstance(params, Mapping):
        g = finite_diff_grad(lambda p: f(p["x"]), {"x": params}, h)
        return g["x"]
    base = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    grads = {}
    for name, arr in base.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(base)
            flat[i] = orig - h
            fm = f(base)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads[name] = g
    return grads
