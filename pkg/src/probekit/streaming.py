"""Token-by-token probe inference with bounded state.

Softmax heads keep a running weighted average ``A`` and log-normalizer
``ell`` per head::

    ell_{n+1} = m + log(exp(ell_n - m) + exp(s_{n+1} - m)),  m = max(ell_n, s_{n+1})
    beta      = exp(s_{n+1} - ell_{n+1})
    A_{n+1}   = A_n + beta * (v_{n+1} - A_n)

Hardmax heads keep a running max, rolling heads a ring buffer of the last
``w`` (score, value) pairs plus the running max of the window means. The
logit after every token equals the batch forward pass on that prefix.

A state is updated in place; hand it to one consumer at a time.
"""

from __future__ import annotations

import copy
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .numerics import sigmoid, softplus
from .probes import (
    LAYER_NORM_EPS,
    HEAD_ARCHITECTURES,
    Aggregation,
    Architecture,
    ProbeParams,
    _mlp_forward,
    _mlp_layers,
)


@dataclass
class StreamState:
    params: ProbeParams = field(repr=False)
    n: int = 0
    # linear / mlp mean: running sum of per-token scores
    total: float = 0.0
    # linear EMA
    ema: float = 0.0
    ema_best: float = -math.inf
    # softmax heads
    avg: np.ndarray | None = None
    log_norm: np.ndarray | None = None
    # hardmax heads, rolling heads (max of window means), gated bipolar max
    run_max: np.ndarray | None = None
    # gated bipolar
    run_min: np.ndarray | None = None
    # rolling heads: last w (score, value) pairs
    window: deque | None = None

    @property
    def architecture(self) -> Architecture:
        return self.params.spec.architecture

    @property
    def aggregation(self) -> Aggregation | None:
        return self.params.spec.eval_aggregation

    def copy(self) -> "StreamState":
        return copy.deepcopy(self)

    def size(self) -> int:
        """Number of floats held, excluding the probe parameters."""
        arrays = [self.avg, self.log_norm, self.run_max, self.run_min]
        count = 4 + sum(a.size for a in arrays if a is not None)
        if self.window is not None:
            count += sum(s.size + v.size for s, v in self.window)
        return count


def stream_init(params: ProbeParams) -> StreamState:
    """Fresh state; ``ell`` is set directly from the first token's score."""
    spec = params.spec
    state = StreamState(params)
    if spec.architecture in HEAD_ARCHITECTURES and spec.eval_aggregation is Aggregation.ROLLING_MEAN:
        state.window = deque(maxlen=spec.window)
    return state


def _token_features(params: ProbeParams, x: np.ndarray):
    t = params.tensors
    arch = params.spec.architecture
    if arch in (Architecture.LINEAR_MEAN, Architecture.LINEAR_EMA):
        return float(x @ t["w"])
    if arch is Architecture.GATED_BIPOLAR:
        xc = x - x.mean()
        xh = xc / np.sqrt((xc * xc).mean() + LAYER_NORM_EPS)
        z = xh * t["ln_scale"] + t["ln_shift"]
        h, _ = _mlp_forward(z[None], _mlp_layers(params))
        h = h[0]
        return (h @ t["w_proj"].T) * softplus(h @ t["w_gate"].T)
    y, _ = _mlp_forward(x[None], _mlp_layers(params))
    y = y[0]
    if arch is Architecture.MLP_MEAN:
        return float(y[0])
    return y @ t["query"].T, y @ t["value"].T


def _window_mean(window: deque) -> np.ndarray:
    s = np.array([p[0] for p in window])
    v = np.array([p[1] for p in window])
    e = np.exp(s - s.max(axis=0))
    return (e * v).sum(axis=0) / e.sum(axis=0)


def stream_update(state: StreamState, x) -> tuple[StreamState, float]:
    """Consume one token; return the state and the logit (bias excluded)."""
    params = state.params
    spec = params.spec
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (spec.input_dim,):
        raise ValueError(f"token has shape {x.shape}, expected ({spec.input_dim},)")
    arch = spec.architecture
    feats = _token_features(params, x)
    first = state.n == 0
    state.n += 1

    if arch in (Architecture.LINEAR_MEAN, Architecture.MLP_MEAN):
        state.total += feats
    elif arch is Architecture.LINEAR_EMA:
        a = spec.ema_alpha
        state.ema = a * feats + (1.0 - a) * state.ema
        state.ema_best = max(state.ema_best, state.ema)
    elif arch is Architecture.GATED_BIPOLAR:
        if first:
            state.run_max, state.run_min = feats.copy(), feats.copy()
        else:
            state.run_max = np.maximum(state.run_max, feats)
            state.run_min = np.minimum(state.run_min, feats)
    else:
        s, v = feats
        agg = spec.eval_aggregation
        if agg is Aggregation.SOFTMAX:
            if first:
                state.log_norm, state.avg = s.copy(), v.copy()
            else:
                m = np.maximum(state.log_norm, s)
                state.log_norm = m + np.log(np.exp(state.log_norm - m) + np.exp(s - m))
                beta = np.exp(s - state.log_norm)
                state.avg = state.avg + beta * (v - state.avg)
        elif agg is Aggregation.HARDMAX:
            state.run_max = v.copy() if first else np.maximum(state.run_max, v)
        else:
            state.window.append((s, v))
            cur = _window_mean(state.window)
            state.run_max = cur if first else np.maximum(state.run_max, cur)
    return state, stream_logit(state)


def stream_logit(state: StreamState) -> float:
    if state.n == 0:
        raise ValueError("no tokens consumed yet")
    t = state.params.tensors
    arch = state.architecture
    if arch in (Architecture.LINEAR_MEAN, Architecture.MLP_MEAN):
        return state.total / state.n
    if arch is Architecture.LINEAR_EMA:
        return state.ema_best
    if arch is Architecture.GATED_BIPOLAR:
        return float(np.concatenate([state.run_max, -state.run_min]) @ t["w_out"])
    pooled = state.avg if state.aggregation is Aggregation.SOFTMAX else state.run_max
    if arch is Architecture.ALPHAEVOLVE_EARLY:
        return float(pooled @ t["head_mix"])
    return float(pooled.sum())


def stream_score(state: StreamState, bias: float | None = None) -> float:
    """sigmoid(logit + b); ``bias`` defaults to the probe's own bias."""
    b = state.params.bias if bias is None else bias
    return float(sigmoid(stream_logit(state) + b))


def stream_sequence(params: ProbeParams, X) -> np.ndarray:
    """Logit after every prefix of ``X`` (bias excluded)."""
    state = stream_init(params)
    out = np.empty(len(X))
    for i, x in enumerate(np.asarray(X, dtype=np.float64)):
        _, out[i] = stream_update(state, x)
    return out
