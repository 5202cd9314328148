"""Probe architectures: parameters, batched forward passes and gradients.

Every probe maps a token-major activation sequence ``X`` of shape
``(n, d)`` to a scalar logit ``f(X)``. The learned bias is stored with the
parameters but is *not* part of ``f``; callers classify with
``sigmoid(f(X) + bias)``.

Batched code works on zero-padded arrays ``X[B, T, d]`` with a boolean
``mask[B, T]``. Gradients are written out by hand per architecture and are
checked against central finite differences in the test-suite.
"""

from __future__ import annotations

import enum
import io
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .numerics import bce_from_logits, sigmoid, softplus


class Architecture(str, enum.Enum):
    LINEAR_MEAN = "linear_mean"
    LINEAR_EMA = "linear_ema"
    MLP_MEAN = "mlp_mean"
    ATTENTION = "attention"
    MULTIMAX = "multimax"
    ROLLING_ATTENTION = "rolling_attention"
    ALPHAEVOLVE_EARLY = "alphaevolve_early"
    GATED_BIPOLAR = "gated_bipolar"


class Aggregation(str, enum.Enum):
    SOFTMAX = "softmax"
    HARDMAX = "hardmax"
    ROLLING_MEAN = "rolling_mean"


# Architectures built on MLP -> per-head (query, value) -> aggregation.
HEAD_ARCHITECTURES = frozenset(
    {
        Architecture.ATTENTION,
        Architecture.MULTIMAX,
        Architecture.ROLLING_ATTENTION,
        Architecture.ALPHAEVOLVE_EARLY,
    }
)

_DEFAULT_AGGREGATION = {
    Architecture.ATTENTION: Aggregation.SOFTMAX,
    Architecture.MULTIMAX: Aggregation.HARDMAX,
    Architecture.ROLLING_ATTENTION: Aggregation.ROLLING_MEAN,
    Architecture.ALPHAEVOLVE_EARLY: Aggregation.HARDMAX,
}

# Gated-bipolar constants that the published pseudocode leaves open.
L1_PENALTY = 1e-5
ORTHO_PENALTY = 1e-4
LAYER_NORM_EPS = 1e-6


@dataclass(frozen=True)
class ProbeSpec:
    """Architecture description.

    ``train_aggregation``/``eval_aggregation`` default per architecture and
    only matter for the head-based architectures; e.g. a MultiMax probe
    trained with softmax attention is
    ``ProbeSpec("multimax", d, train_aggregation="softmax")``.
    """

    architecture: Architecture
    input_dim: int
    mlp_widths: tuple[int, ...] = (100, 100)
    heads: int = 10
    window: int = 10
    ema_alpha: float = 0.5
    train_aggregation: Aggregation | None = None
    eval_aggregation: Aggregation | None = None

    def __post_init__(self):
        arch = Architecture(self.architecture)
        object.__setattr__(self, "architecture", arch)
        object.__setattr__(self, "mlp_widths", tuple(int(w) for w in self.mlp_widths))
        default = _DEFAULT_AGGREGATION.get(arch)
        for name in ("train_aggregation", "eval_aggregation"):
            value = getattr(self, name)
            value = default if value is None else Aggregation(value)
            object.__setattr__(self, name, value)
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if self.heads < 1:
            raise ValueError("heads must be >= 1")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if not 0.0 < self.ema_alpha < 1.0:
            raise ValueError("ema_alpha must lie in (0, 1)")
        if any(w < 1 for w in self.mlp_widths):
            raise ValueError("mlp_widths entries must be >= 1")
        if arch in HEAD_ARCHITECTURES or arch is Architecture.GATED_BIPOLAR:
            if not self.mlp_widths:
                raise ValueError(f"{arch.value} needs at least one MLP layer")

    def aggregation(self, mode: str) -> Aggregation | None:
        if mode == "train":
            return self.train_aggregation
        if mode == "eval":
            return self.eval_aggregation
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["architecture"] = self.architecture.value
        out["mlp_widths"] = list(self.mlp_widths)
        for name in ("train_aggregation", "eval_aggregation"):
            out[name] = None if out[name] is None else Aggregation(out[name]).value
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "ProbeSpec":
        data = dict(data)
        data["mlp_widths"] = tuple(data.get("mlp_widths", (100, 100)))
        return cls(**data)


@dataclass
class ProbeParams:
    spec: ProbeSpec
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def bias(self) -> float:
        return float(self.tensors["bias"])

    def with_tensors(self, tensors: Mapping[str, np.ndarray]) -> "ProbeParams":
        return ProbeParams(self.spec, {k: np.asarray(v, dtype=np.float64) for k, v in tensors.items()})

    def copy(self) -> "ProbeParams":
        return ProbeParams(self.spec, {k: v.copy() for k, v in self.tensors.items()})


# ---------------------------------------------------------------------------
# initialization and serialization


def _mlp_layer_shapes(in_dim: int, widths: Sequence[int]) -> list[tuple[int, int]]:
    shapes, prev = [], in_dim
    for w in widths:
        shapes.append((w, prev))
        prev = w
    return shapes


def init_params(spec: ProbeSpec, seed: int) -> ProbeParams:
    """Gaussian init with std 1/sqrt(fan_in) per weight matrix; bias 0."""
    rng = np.random.default_rng(seed)

    def gauss(shape):
        return rng.standard_normal(shape) / np.sqrt(shape[-1])

    arch = spec.architecture
    d = spec.input_dim
    t: dict[str, np.ndarray] = {}
    if arch in (Architecture.LINEAR_MEAN, Architecture.LINEAR_EMA):
        t["w"] = gauss((d,))
    elif arch is Architecture.MLP_MEAN:
        for i, shape in enumerate(_mlp_layer_shapes(d, spec.mlp_widths + (1,))):
            t[f"mlp_{i}"] = gauss(shape)
    else:
        if arch is Architecture.GATED_BIPOLAR:
            t["ln_scale"] = np.ones(d)
            t["ln_shift"] = np.zeros(d)
        for i, shape in enumerate(_mlp_layer_shapes(d, spec.mlp_widths)):
            t[f"mlp_{i}"] = gauss(shape)
        d_out = spec.mlp_widths[-1]
        if arch is Architecture.GATED_BIPOLAR:
            t["w_proj"] = gauss((spec.heads, d_out))
            t["w_gate"] = gauss((spec.heads, d_out))
            t["w_out"] = gauss((2 * spec.heads,))
        else:
            t["query"] = gauss((spec.heads, d_out))
            t["value"] = gauss((spec.heads, d_out))
            if arch is Architecture.ALPHAEVOLVE_EARLY:
                t["head_mix"] = np.ones(spec.heads)
    t["bias"] = np.zeros(())
    return ProbeParams(spec, t)


def save_params(path, params: ProbeParams) -> None:
    """Write spec + named float64 tensors to a ``.npz`` container."""
    arrays = {name: np.asarray(v, dtype="<f8") for name, v in params.tensors.items()}
    arrays["__spec__"] = np.array(json.dumps(params.spec.to_dict(), sort_keys=True))
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_params(path) -> ProbeParams:
    with np.load(path, allow_pickle=False) as data:
        spec = ProbeSpec.from_dict(json.loads(str(data["__spec__"])))
        tensors = {k: data[k].astype(np.float64) for k in data.files if k != "__spec__"}
    return ProbeParams(spec, tensors)


# ---------------------------------------------------------------------------
# padding


@dataclass
class PaddedBatch:
    X: np.ndarray  # (B, T, d) float64
    mask: np.ndarray  # (B, T) bool
    labels: np.ndarray | None = None  # (B,)
    index: np.ndarray | None = None  # positions in the caller's list

    @property
    def size(self) -> int:
        return self.X.shape[0]


def pad_sequences(sequences: Sequence[np.ndarray], labels=None, index=None) -> PaddedBatch:
    if not sequences:
        raise ValueError("cannot pad an empty list of sequences")
    d = sequences[0].shape[1]
    lengths = [s.shape[0] for s in sequences]
    if min(lengths) < 1:
        raise ValueError("every sequence needs at least one token")
    X = np.zeros((len(sequences), max(lengths), d))
    mask = np.zeros((len(sequences), max(lengths)), dtype=bool)
    for i, s in enumerate(sequences):
        if s.ndim != 2 or s.shape[1] != d:
            raise ValueError(f"sequence {i} has shape {s.shape}, expected (n, {d})")
        X[i, : s.shape[0]] = s
        mask[i, : s.shape[0]] = True
    lab = None if labels is None else np.asarray(labels, dtype=np.float64)
    idx = None if index is None else np.asarray(index)
    return PaddedBatch(X, mask, lab, idx)


def make_batches(
    sequences: Sequence[np.ndarray], labels=None, max_tokens: int = 1 << 17, max_ratio: float = 1.25
) -> list[PaddedBatch]:
    """Bucket sequences by length so padded batches stay under ``max_tokens``.

    A bucket's longest sequence is at most ``max_ratio`` times its shortest.
    """
    order = sorted(range(len(sequences)), key=lambda i: (sequences[i].shape[0], i))
    batches, current, first = [], [], 0
    for i in order:
        n = sequences[i].shape[0]
        if current and ((len(current) + 1) * n > max_tokens or n > max_ratio * first):
            batches.append(current)
            current = []
        if not current:
            first = n
        current.append(i)
    if current:
        batches.append(current)
    lab = None if labels is None else np.asarray(labels)
    return [
        pad_sequences(
            [sequences[i] for i in b],
            None if lab is None else lab[b],
            index=np.array(b),
        )
        for b in batches
    ]


# ---------------------------------------------------------------------------
# building blocks (forward returns a cache consumed by the matching backward)


def _mlp_forward(X, layers, final_relu=False):
    """Per-token MLP: ReLU between layers, none after the last unless asked."""
    shape = X.shape[:-1]
    h = X.reshape(-1, X.shape[-1])
    cache = []
    for i, W in enumerate(layers):
        a = h @ W.T
        cache.append((h, a))
        h = np.maximum(a, 0.0) if (i < len(layers) - 1 or final_relu) else a
    return h.reshape(*shape, h.shape[-1]), cache


def _mlp_backward(dY, layers, cache, final_relu=False, rows=None):
    """Weight gradients of the MLP.

    With ``rows`` (flattened token indices) ``dY`` holds only those tokens'
    output gradients; every other token is taken to have zero gradient.
    """
    dh = dY.reshape(-1, dY.shape[-1])
    grads = [None] * len(layers)
    for i in reversed(range(len(layers))):
        h_in, a = cache[i]
        if rows is not None:
            h_in, a = h_in[rows], a[rows]
        da = dh * (a > 0) if (i < len(layers) - 1 or final_relu) else dh
        grads[i] = da.T @ h_in
        if i > 0:
            dh = da @ layers[i]
    return grads


def _softmax_pool(s, v, mask):
    m3 = mask[:, :, None]
    s_m = np.where(m3, s, -np.inf)
    e = np.exp(s_m - s_m.max(axis=1, keepdims=True))
    a = e / e.sum(axis=1, keepdims=True)
    out = (a * np.where(m3, v, 0.0)).sum(axis=1)
    return out, (a, v, out)


def _softmax_pool_backward(dm, cache):
    a, v, out = cache
    dv = a * dm[:, None, :]
    ds = a * (v - out[:, None, :]) * dm[:, None, :]
    return ds, dv


def _hardmax_pool(v, mask):
    v_m = np.where(mask[:, :, None], v, -np.inf)
    idx = v_m.argmax(axis=1)  # first index wins ties
    out = np.take_along_axis(v, idx[:, None, :], axis=1)[:, 0, :]
    return out, (idx, v.shape)


def _hardmax_pool_backward(dm, cache):
    idx, shape = cache
    dv = np.zeros(shape)
    np.put_along_axis(dv, idx[:, None, :], dm[:, None, :], axis=1)
    return np.zeros(shape), dv


def _rolling_window_means(s, v, mask, w):
    """Attention-weighted mean of every window of width w ending at t.

    Windows ending before position w are truncated to the available
    tokens. Returns vbar[B, T, H] (``-inf`` where t is padding).
    """
    B, T, H = s.shape
    s_m = np.where(mask[:, :, None], s, -np.inf)
    s_pad = np.concatenate([np.full((B, w - 1, H), -np.inf), s_m], axis=1)
    v_pad = np.concatenate([np.zeros((B, w - 1, H)), np.where(mask[:, :, None], v, 0.0)], axis=1)
    s_win = sliding_window_view(s_pad, w, axis=1)  # (B, T, H, w)
    v_win = sliding_window_view(v_pad, w, axis=1)
    peak = s_win.max(axis=-1, keepdims=True)
    valid_t = mask[:, :, None]
    peak = np.where(valid_t[..., None], peak, 0.0)
    e = np.exp(s_win - peak)
    with np.errstate(invalid="ignore", divide="ignore"):
        vbar = (e * v_win).sum(axis=-1) / e.sum(axis=-1)
    return np.where(valid_t, vbar, -np.inf)


def _rolling_pool(s, v, mask, w):
    vbar = _rolling_window_means(s, v, mask, w)
    t_star = vbar.argmax(axis=1)  # (B, H)
    out = np.take_along_axis(vbar, t_star[:, None, :], axis=1)[:, 0, :]
    return out, (s, v, t_star, out, w)


def _rolling_pool_backward(dm, cache):
    s, v, t_star, out, w = cache
    B, T, H = s.shape
    bi = np.arange(B)[:, None].repeat(H, axis=1)
    hi = np.arange(H)[None, :].repeat(B, axis=0)
    # window tokens j = t* - k for k < w, j >= 0
    ks = np.arange(w)
    js = t_star[None, :, :] - ks[:, None, None]  # (w, B, H)
    valid = js >= 0
    jc = np.where(valid, js, 0)
    sj = np.where(valid, s[bi[None], jc, hi[None]], -np.inf)
    vj = v[bi[None], jc, hi[None]]
    e = np.exp(sj - sj.max(axis=0, keepdims=True))
    a = e / e.sum(axis=0, keepdims=True)
    ds = np.zeros_like(s)
    dv = np.zeros_like(v)
    g_v = a * dm[None]
    g_s = a * (vj - out[None]) * dm[None]
    for k in range(w):
        sel = valid[k]
        np.add.at(dv, (bi[sel], jc[k][sel], hi[sel]), g_v[k][sel])
        np.add.at(ds, (bi[sel], jc[k][sel], hi[sel]), g_s[k][sel])
    return ds, dv


def _pool(agg, s, v, mask, w):
    if agg is Aggregation.SOFTMAX:
        return _softmax_pool(s, v, mask)
    if agg is Aggregation.HARDMAX:
        return _hardmax_pool(v, mask)
    if agg is Aggregation.ROLLING_MEAN:
        return _rolling_pool(s, v, mask, w)
    raise ValueError(f"unknown aggregation {agg!r}")


def _pool_backward(agg, dm, cache):
    if agg is Aggregation.SOFTMAX:
        return _softmax_pool_backward(dm, cache)
    if agg is Aggregation.HARDMAX:
        return _hardmax_pool_backward(dm, cache)
    return _rolling_pool_backward(dm, cache)


def _ema_max(u, mask, alpha):
    """max_j EMA_j with EMA_0 = 0, EMA_j = alpha*u_j + (1-alpha)*EMA_{j-1}."""
    B, T = u.shape
    ema = np.zeros(B)
    best = np.full(B, -np.inf)
    arg = np.zeros(B, dtype=np.int64)
    for j in range(T):
        ema = alpha * u[:, j] + (1.0 - alpha) * ema
        better = mask[:, j] & (ema > best)
        best = np.where(better, ema, best)
        arg = np.where(better, j, arg)
    return best, arg


def _mlp_layers(params: ProbeParams) -> list[np.ndarray]:
    t = params.tensors
    n = sum(1 for k in t if k.startswith("mlp_"))
    return [t[f"mlp_{i}"] for i in range(n)]


# ---------------------------------------------------------------------------
# batched forward / backward


def _forward(params: ProbeParams, X, mask, mode: str):
    spec = params.spec
    t = params.tensors
    arch = spec.architecture
    agg = spec.aggregation(mode)
    n = mask.sum(axis=1).astype(np.float64)

    if arch is Architecture.LINEAR_MEAN or (arch is Architecture.LINEAR_EMA and mode == "train"):
        u = X @ t["w"]
        logits = (u * mask).sum(axis=1) / n
        return logits, ("mean", X, mask, n)

    if arch is Architecture.LINEAR_EMA:
        u = X @ t["w"]
        logits, arg = _ema_max(u, mask, spec.ema_alpha)
        return logits, ("ema", X, arg)

    layers = _mlp_layers(params)
    if arch is Architecture.MLP_MEAN:
        y, mcache = _mlp_forward(X, layers)
        logits = (y[..., 0] * mask).sum(axis=1) / n
        return logits, ("mlp_mean", mask, n, layers, mcache, y.shape)

    if arch is Architecture.GATED_BIPOLAR:
        mu = X.mean(axis=-1, keepdims=True)
        xc = X - mu
        rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LAYER_NORM_EPS)
        xh = xc * rstd
        z = xh * t["ln_scale"] + t["ln_shift"]
        Hs, mcache = _mlp_forward(z, layers)
        proj = Hs @ t["w_proj"].T
        gpre = Hs @ t["w_gate"].T
        gate = softplus(gpre)
        V = proj * gate
        m3 = mask[:, :, None]
        imax = np.where(m3, V, -np.inf).argmax(axis=1)
        imin = np.where(m3, V, np.inf).argmin(axis=1)
        vmax = np.take_along_axis(V, imax[:, None, :], axis=1)[:, 0, :]
        vmin = np.take_along_axis(V, imin[:, None, :], axis=1)[:, 0, :]
        h_pool = np.concatenate([vmax, -vmin], axis=1)
        logits = h_pool @ t["w_out"]
        cache = ("gated", xh, layers, mcache, Hs, proj, gpre, gate, imax, imin, h_pool, V.shape)
        return logits, cache

    # head-based family
    Y, mcache = _mlp_forward(X, layers)
    s = Y @ t["query"].T
    v = Y @ t["value"].T
    pooled, pcache = _pool(agg, s, v, mask, spec.window)
    if arch is Architecture.ALPHAEVOLVE_EARLY:
        logits = pooled @ t["head_mix"]
    else:
        logits = pooled.sum(axis=1)
    return logits, ("heads", agg, Y, layers, mcache, pooled, pcache)


def _backward(params: ProbeParams, cache, dlogits) -> dict[str, np.ndarray]:
    t = params.tensors
    kind = cache[0]
    grads: dict[str, np.ndarray] = {}

    if kind == "mean":
        _, X, mask, n = cache
        coef = mask * (dlogits / n)[:, None]
        grads["w"] = np.einsum("bt,btd->d", coef, X)
        return grads

    if kind == "ema":
        _, X, arg = cache
        alpha = params.spec.ema_alpha
        T = X.shape[1]
        j = np.arange(T)[None, :]
        lag = arg[:, None] - j
        coef = np.where(lag >= 0, alpha * (1.0 - alpha) ** np.maximum(lag, 0), 0.0)
        grads["w"] = np.einsum("bt,btd->d", coef * dlogits[:, None], X)
        return grads

    if kind == "mlp_mean":
        _, mask, n, layers, mcache, yshape = cache
        dY = (mask * (dlogits / n)[:, None])[..., None]
        for i, g in enumerate(_mlp_backward(dY, layers, mcache)):
            grads[f"mlp_{i}"] = g
        return grads

    if kind == "gated":
        _, xh, layers, mcache, Hs, proj, gpre, gate, imax, imin, h_pool, vshape = cache
        P = proj.shape[-1]
        grads["w_out"] = dlogits @ h_pool
        dh = dlogits[:, None] * t["w_out"][None, :]
        dV = np.zeros(vshape)
        np.put_along_axis(dV, imax[:, None, :], dh[:, None, :P], axis=1)
        # max and min may hit the same token (e.g. n = 1): accumulate
        cur = np.take_along_axis(dV, imin[:, None, :], axis=1)
        np.put_along_axis(dV, imin[:, None, :], cur - dh[:, None, P:], axis=1)
        dproj = dV * gate
        dgpre = dV * proj * sigmoid(gpre)
        d2 = lambda a: a.reshape(-1, a.shape[-1])  # noqa: E731
        grads["w_proj"] = d2(dproj).T @ d2(Hs)
        grads["w_gate"] = d2(dgpre).T @ d2(Hs)
        dH = dproj @ t["w_proj"] + dgpre @ t["w_gate"]
        mlp_grads, dz = _mlp_backward_with_input(dH, layers, mcache)
        for i, g in enumerate(mlp_grads):
            grads[f"mlp_{i}"] = g
        dz = dz.reshape(xh.shape)
        grads["ln_scale"] = (dz * xh).sum(axis=(0, 1))
        grads["ln_shift"] = dz.sum(axis=(0, 1))
        return grads

    _, agg, Y, layers, mcache, pooled, pcache = cache
    if params.spec.architecture is Architecture.ALPHAEVOLVE_EARLY:
        grads["head_mix"] = dlogits @ pooled
        dm = dlogits[:, None] * t["head_mix"][None, :]
    else:
        dm = np.repeat(dlogits[:, None], pooled.shape[1], axis=1)
    ds, dv = _pool_backward(agg, dm, pcache)
    ds2 = ds.reshape(-1, ds.shape[-1])
    dv2 = dv.reshape(-1, dv.shape[-1])
    # max-type pooling touches few tokens; skip the all-zero rows
    rows = np.flatnonzero((ds2 != 0).any(axis=1) | (dv2 != 0).any(axis=1))
    Y2 = Y.reshape(-1, Y.shape[-1])[rows]
    ds2, dv2 = ds2[rows], dv2[rows]
    grads["query"] = ds2.T @ Y2
    grads["value"] = dv2.T @ Y2
    dY = ds2 @ t["query"] + dv2 @ t["value"]
    for i, g in enumerate(_mlp_backward(dY, layers, mcache, rows=rows)):
        grads[f"mlp_{i}"] = g
    return grads


def _mlp_backward_with_input(dY, layers, cache):
    """Like _mlp_backward but also returns the gradient at the MLP input."""
    dh = dY.reshape(-1, dY.shape[-1])
    grads = [None] * len(layers)
    for i in reversed(range(len(layers))):
        h_in, a = cache[i]
        da = dh * (a > 0) if i < len(layers) - 1 else dh
        grads[i] = da.T @ h_in
        dh = da @ layers[i]
    return grads, dh


def forward_batch(params: ProbeParams, batch: PaddedBatch, mode: str = "eval") -> np.ndarray:
    """Logits (without bias) for a padded batch."""
    if batch.X.shape[-1] != params.spec.input_dim:
        raise ValueError(
            f"activation dim {batch.X.shape[-1]} does not match probe input_dim {params.spec.input_dim}"
        )
    logits, _ = _forward(params, batch.X, batch.mask, mode)
    return logits


def regularization(params: ProbeParams) -> tuple[float, dict[str, np.ndarray]]:
    """L1 + orthogonality penalty of the gated-bipolar probe (zero otherwise)."""
    if params.spec.architecture is not Architecture.GATED_BIPOLAR:
        return 0.0, {}
    t = params.tensors
    names = [k for k in t if k.startswith("mlp_")] + ["w_proj", "w_gate", "w_out"]
    loss = L1_PENALTY * sum(np.abs(t[k]).sum() for k in names)
    grads = {k: L1_PENALTY * np.sign(t[k]) for k in names}
    Wp = t["w_proj"]
    gram = Wp.T @ Wp - np.eye(Wp.shape[1])
    loss += ORTHO_PENALTY * float((gram * gram).sum())
    grads["w_proj"] = grads["w_proj"] + ORTHO_PENALTY * 4.0 * Wp @ gram
    return float(loss), grads


def loss_and_grad(
    params: ProbeParams,
    batches: Iterable[PaddedBatch],
    mode: str = "train",
    regularize: bool = True,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean BCE over all examples (+ architecture regularizers) and its gradient."""
    batches = list(batches)
    total = sum(b.size for b in batches)
    if total == 0:
        raise ValueError("no examples")
    grads = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    bias = params.bias
    loss = 0.0
    for b in batches:
        if b.labels is None:
            raise ValueError("training batches need labels")
        logits, cache = _forward(params, b.X, b.mask, mode)
        l, dz = bce_from_logits(logits + bias, b.labels)
        loss += float(np.sum(l)) / total
        dz = dz / total
        grads["bias"] += dz.sum()
        for k, g in _backward(params, cache, dz).items():
            grads[k] += g
    if regularize:
        r, rg = regularization(params)
        loss += r
        for k, g in rg.items():
            grads[k] += g
    return loss, grads


# ---------------------------------------------------------------------------
# single-sequence conveniences


def _single(X, d):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != d:
        raise ValueError(f"expected activations of shape (n, {d}), got {X.shape}")
    if X.shape[0] < 1:
        raise ValueError("sequence must contain at least one token")
    return X[None], np.ones((1, X.shape[0]), dtype=bool)


def forward(params: ProbeParams, X, mode: str = "eval") -> float:
    """Logit (without bias) for one ``(n, d)`` sequence."""
    Xb, mask = _single(X, params.spec.input_dim)
    return float(_forward(params, Xb, mask, mode)[0][0])


def _with_aggregation(params: ProbeParams, agg: Aggregation, **spec_overrides) -> ProbeParams:
    spec = replace(params.spec, eval_aggregation=agg, **spec_overrides)
    return ProbeParams(spec, params.tensors)


def mlp_transform(params: ProbeParams, X) -> np.ndarray:
    """Per-token MLP output y_j, shape (n, d')."""
    Xb, _ = _single(X, params.spec.input_dim)
    y, _ = _mlp_forward(Xb, _mlp_layers(params))
    return y[0]


def forward_linear_mean(params: ProbeParams, X) -> float:
    Xb, _ = _single(X, params.spec.input_dim)
    return float((Xb[0] @ params.tensors["w"]).mean())


def forward_linear_ema(params: ProbeParams, X, alpha: float | None = None) -> float:
    Xb, mask = _single(X, params.spec.input_dim)
    alpha = params.spec.ema_alpha if alpha is None else alpha
    best, _ = _ema_max(Xb @ params.tensors["w"], mask, alpha)
    return float(best[0])


def forward_attention(params: ProbeParams, X) -> float:
    return forward(_with_aggregation(params, Aggregation.SOFTMAX), X)


def forward_multimax(params: ProbeParams, X) -> float:
    return forward(_with_aggregation(params, Aggregation.HARDMAX), X)


def forward_rolling_attention(params: ProbeParams, X, w: int | None = None) -> float:
    w = params.spec.window if w is None else w
    return forward(_with_aggregation(params, Aggregation.ROLLING_MEAN, window=w), X)


def forward_alphaevolve_early(params: ProbeParams, X) -> float:
    if params.spec.architecture is not Architecture.ALPHAEVOLVE_EARLY:
        raise ValueError("params are not an alphaevolve_early probe")
    return forward(params, X)


def forward_gated_bipolar(params: ProbeParams, X) -> float:
    if params.spec.architecture is not Architecture.GATED_BIPOLAR:
        raise ValueError("params are not a gated_bipolar probe")
    return forward(params, X)


def head_outputs(params: ProbeParams, X, aggregation: Aggregation | str | None = None) -> np.ndarray:
    """Per-head pooled values m_h for head-based probes."""
    if params.spec.architecture not in HEAD_ARCHITECTURES:
        raise ValueError("head_outputs needs a head-based probe")
    agg = params.spec.eval_aggregation if aggregation is None else Aggregation(aggregation)
    Xb, mask = _single(X, params.spec.input_dim)
    Y, _ = _mlp_forward(Xb, _mlp_layers(params))
    s = Y @ params.tensors["query"].T
    v = Y @ params.tensors["value"].T
    pooled, _ = _pool(agg, s, v, mask, params.spec.window)
    return pooled[0]


def training_loss(params: ProbeParams, X, label, mode: str = "train"):
    """Loss and gradient for a single labelled sequence."""
    Xb, mask = _single(X, params.spec.input_dim)
    batch = PaddedBatch(Xb, mask, np.array([float(label)]))
    return loss_and_grad(params, [batch], mode=mode)


def predict_proba(params: ProbeParams, sequences: Sequence[np.ndarray], max_tokens: int = 1 << 17) -> np.ndarray:
    """sigmoid(f(X) + b) for each sequence, using the eval aggregation."""
    out = np.empty(len(sequences))
    for b in make_batches(sequences, max_tokens=max_tokens):
        out[b.index] = sigmoid(forward_batch(params, b, "eval") + params.bias)
    return out


def predict_logits(params: ProbeParams, sequences: Sequence[np.ndarray], max_tokens: int = 1 << 17) -> np.ndarray:
    """f(X) + b for each sequence, using the eval aggregation."""
    out = np.empty(len(sequences))
    for b in make_batches(sequences, max_tokens=max_tokens):
        out[b.index] = forward_batch(params, b, "eval") + params.bias
    return out
