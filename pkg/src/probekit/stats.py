"""Seed-sweep comparisons and confidence intervals.

* ``bootstrap_best_of_k_compare``: how often best-of-k selection on sweep A
  beats best-of-k on sweep B.
* ``kde_bootstrap_ci``: smoothed bootstrap of the best-validation seed's test
  loss, with a Gaussian KDE fitted in (validation loss, logit test loss).
* ``binomial_ci``: normal approximation for a fixed classifier's weighted
  error.
* ``cascade_ci``: quadrature combination of probe and expensive-model
  half-widths.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit, logit

from .evaluation import MAIN, RateReport, WeightScheme
from .training import MAX_PENALTY, SeedRecord, SeedSweep

Z_95 = 1.96
LOGIT_CLAMP = 1e-9


@dataclass(frozen=True)
class BootstrapConfig:
    iterations: int = 20000
    k: int = 100
    percentiles: tuple[float, float] = (2.5, 97.5)
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        lo, hi = self.percentiles
        if not 0 <= lo <= hi <= 100:
            raise ValueError("percentiles must satisfy 0 <= low <= high <= 100")


@dataclass(frozen=True)
class ConfidenceInterval:
    low: float
    high: float
    method: str
    center: float = float("nan")

    def __post_init__(self):
        if self.low > self.high:
            raise ValueError(f"low ({self.low}) exceeds high ({self.high})")

    @property
    def halfwidths(self) -> tuple[float, float]:
        """(center - low, high - center)."""
        return self.center - self.low, self.high - self.center

    def contains(self, x: float) -> bool:
        return self.low <= x <= self.high


def usable_pairs(sweep) -> np.ndarray:
    """(validation, test) rows of the non-degenerate records, shape (n, 2).

    Accepts a ``SeedSweep``, a list of ``SeedRecord`` or an (n, 2) array.
    """
    if isinstance(sweep, SeedSweep):
        sweep = sweep.records
    if len(sweep) and isinstance(sweep[0], SeedRecord):
        rows = [
            (r.validation_loss, r.test_loss)
            for r in sweep
            if not r.degenerate and r.validation_loss < MAX_PENALTY
        ]
    else:
        rows = [tuple(r) for r in np.asarray(sweep, dtype=np.float64).reshape(-1, 2) if r[0] < MAX_PENALTY]
    arr = np.asarray(rows, dtype=np.float64).reshape(-1, 2)
    if arr.shape[0] == 0:
        raise ValueError("sweep has no usable (non-degenerate) records")
    return arr


def _best_of_k(pairs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Test loss of the lowest-validation record in each resample.

    ``u`` holds uniform draws in [0, 1); row i picks records floor(u * n).
    """
    idx = np.minimum((u * pairs.shape[0]).astype(np.int64), pairs.shape[0] - 1)
    val = pairs[idx, 0]
    pick = val.argmin(axis=1)
    return pairs[idx[np.arange(idx.shape[0]), pick], 1]


def _beats(a, b) -> np.ndarray:
    return np.where(a < b, 1.0, np.where(a == b, 0.5, 0.0))


def _compare_oriented(a: np.ndarray, b: np.ndarray, config: BootstrapConfig) -> float:
    rng = np.random.default_rng(config.seed)
    total = 0.0
    chunk = max(1, 2_000_000 // config.k)
    done = 0
    while done < config.iterations:
        m = min(chunk, config.iterations - done)
        u1 = rng.random((m, config.k))
        u2 = rng.random((m, config.k))
        # antithetic pairing: each side sees both draws, which makes the
        # estimate exactly 0.5 for identical sweeps
        x = 0.5 * (_beats(_best_of_k(a, u1), _best_of_k(b, u2)) + _beats(_best_of_k(a, u2), _best_of_k(b, u1)))
        total += float(x.sum())
        done += m
    return total / config.iterations


def bootstrap_best_of_k_compare(sweep_a, sweep_b, config: BootstrapConfig = BootstrapConfig()) -> float:
    """Probability that best-of-k on A has lower test loss than best-of-k on B.

    Each iteration resamples k records with replacement from each sweep and
    compares the test losses of the two lowest-validation picks; ties count
    one half. The estimate is computed for a canonical ordering of the two
    sweeps and reflected, so ``compare(A, B) + compare(B, A) == 1`` exactly.
    """
    a, b = usable_pairs(sweep_a), usable_pairs(sweep_b)
    if (a.shape[0], a.tobytes()) <= (b.shape[0], b.tobytes()):
        return _compare_oriented(a, b, config)
    return 1.0 - _compare_oriented(b, a, config)


def kde_bootstrap_ci(sweep, config: BootstrapConfig = BootstrapConfig()) -> ConfidenceInterval:
    """Smoothed-bootstrap CI for the best-validation seed's test loss.

    Test losses are clamped into [1e-9, 1 - 1e-9] and logit-transformed. A
    Gaussian kernel with per-axis bandwidth ``N**(-1/6) * std`` is placed on
    every (val, logit test) point; each iteration draws N synthetic points,
    keeps the lowest-validation one and maps its test value back. ``center``
    is the bootstrap median.
    """
    pairs = usable_pairs(sweep)
    n = pairs.shape[0]
    if n < 2:
        raise ValueError("kde_bootstrap_ci needs at least two usable records")
    val = pairs[:, 0]
    lt = logit(np.clip(pairs[:, 1], LOGIT_CLAMP, 1.0 - LOGIT_CLAMP))
    bw = n ** (-1.0 / 6.0) * np.array([val.std(ddof=1), lt.std(ddof=1)])
    if not bw.any():
        t = float(pairs[0, 1])
        return ConfidenceInterval(t, t, "kde_bootstrap", t)
    rng = np.random.default_rng(config.seed)
    out = np.empty(config.iterations)
    chunk = max(1, 2_000_000 // n)
    for start in range(0, config.iterations, chunk):
        m = min(chunk, config.iterations - start)
        idx = rng.integers(0, n, size=(m, n))
        v = val[idx] + bw[0] * rng.standard_normal((m, n))
        t = lt[idx] + bw[1] * rng.standard_normal((m, n))
        out[start : start + m] = t[np.arange(m), v.argmin(axis=1)]
    losses = expit(out)
    lo, hi = np.percentile(losses, config.percentiles)
    return ConfidenceInterval(float(lo), float(hi), "kde_bootstrap", float(np.median(losses)))


def weighted_error_variance(report: RateReport, scheme: WeightScheme = MAIN) -> float:
    """sum_g (w_g / sum w)^2 * p_g (1 - p_g) / n_g."""
    if not report.rates:
        raise ValueError("empty rate report")
    total = sum(scheme.weight(r) for r in report.rates)
    var = 0.0
    for role, rr in report.rates.items():
        if rr.count < 1:
            raise ValueError(f"role {role.value} has no examples")
        share = scheme.weight(role) / total
        var += share * share * rr.rate * (1.0 - rr.rate) / rr.count
    return var


def binomial_ci(report: RateReport, scheme: WeightScheme = MAIN) -> ConfidenceInterval:
    """Weighted error +- 1.96 standard deviations, clipped to [0, 1]."""
    from .evaluation import weighted_error

    mean = weighted_error(report, scheme)
    half = Z_95 * math.sqrt(weighted_error_variance(report, scheme))
    return ConfidenceInterval(max(0.0, mean - half), min(1.0, mean + half), "binomial", mean)


def cascade_halfwidths(probe: Sequence[float], expensive: Sequence[float], deferral_fraction: float) -> tuple[float, float]:
    """Quadrature of the deferral-weighted (low, high) half-widths."""
    f = deferral_fraction
    if not 0.0 <= f <= 1.0:
        raise ValueError("deferral_fraction must lie in [0, 1]")
    lo = math.hypot((1.0 - f) * probe[0], f * expensive[0])
    hi = math.hypot((1.0 - f) * probe[1], f * expensive[1])
    return lo, hi


def cascade_ci(
    probe: Sequence[float],
    expensive: Sequence[float],
    deferral_fraction: float,
    center: float,
) -> ConfidenceInterval:
    """CI around a cascade's error from (low, high) half-widths of each stage.

    Probe half-widths should be measured from the bootstrap median, e.g.
    ``kde_bootstrap_ci(...).halfwidths``.
    """
    lo, hi = cascade_halfwidths(probe, expensive, deferral_fraction)
    return ConfidenceInterval(max(0.0, center - lo), min(1.0, center + hi), "cascade_quadrature", center)


def significance_matrix(sweeps: dict, config: BootstrapConfig = BootstrapConfig()) -> dict:
    """P(row beats column) for every ordered pair of named sweeps."""
    names = list(sweeps)
    out = {a: {} for a in names}
    for i, a in enumerate(names):
        out[a][a] = 0.5
        for b in names[i + 1 :]:
            p = bootstrap_best_of_k_compare(sweeps[a], sweeps[b], config)
            out[a][b] = p
            out[b][a] = 1.0 - p
    return out


def write_significance_table(path, matrix: dict) -> None:
    names = list(matrix)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["row_beats_column"] + names)
        for a in names:
            w.writerow([a] + [f"{matrix[a][b]:.4f}" for b in names])


def write_ci_report(path, intervals: dict) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["name", "method", "center", "low", "high"])
        for name, ci in intervals.items():
            w.writerow([name, ci.method, repr(ci.center), repr(ci.low), repr(ci.high)])
