"""Two-level probe -> expensive-classifier cascades.

A cascade policy is a pair of probe-logit thresholds ``t0 <= t1``. Samples
with logit ``<= t0`` are labelled benign by the probe, samples with logit
``>= t1`` (and ``> t0``) are flagged by the probe, and everything in between
is deferred to the expensive classifier.

The optimal frontier is built from two savings curves. Sorting the ``N``
samples by probe logit, ``L(k)`` is the error added (relative to deferring
everything) when the probe labels the ``k`` lowest samples negative, and
``R(k)`` the error added when it labels the ``k`` highest positive. The two
sides are independent, so the best added error for ``s`` saved expensive
calls is the infimal convolution of the two lower convex hulls, computed by
merging hull edges in slope order.

The hull and frontier code does plain Python arithmetic, so it is exact when
fed ``fractions.Fraction`` values.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .datasets import DatasetRole
from .evaluation import MAIN, WeightScheme, eval_rates, weighted_error

DEFAULT_COST_MULTIPLIER = 1e4

LEFT = "left"
RIGHT = "right"
BOTH = "left+right"


@dataclass(frozen=True)
class CascadePolicy:
    t0: float
    t1: float

    def __post_init__(self):
        if math.isnan(self.t0) or math.isnan(self.t1):
            raise ValueError("cascade thresholds must not be NaN")
        if self.t0 > self.t1:
            raise ValueError(f"t0 ({self.t0}) must not exceed t1 ({self.t1})")

    def route(self, logits) -> np.ndarray:
        """-1 = probe says negative, +1 = probe says positive, 0 = defer."""
        z = np.asarray(logits, dtype=np.float64)
        out = np.zeros(z.shape, dtype=np.int64)
        neg = z <= self.t0
        out[neg] = -1
        out[~neg & (z >= self.t1)] = 1
        return out


@dataclass
class CascadeOutcome:
    decisions: np.ndarray  # final 0/1 label per sample
    deferred: np.ndarray  # bool
    deferral_fraction: float
    cost: float
    weighted_error: float


def cascade_cost(deferral_fraction: float, multiplier: float = DEFAULT_COST_MULTIPLIER) -> float:
    """Probe always runs (1 unit); each deferral costs ``multiplier`` units."""
    return 1.0 + deferral_fraction * multiplier


def apply_cascade(
    logits,
    expensive_decisions,
    labels,
    policy: CascadePolicy,
    roles=None,
    scheme: WeightScheme = MAIN,
    multiplier: float = DEFAULT_COST_MULTIPLIER,
) -> CascadeOutcome:
    z = np.asarray(logits, dtype=np.float64)
    llm = np.asarray(expensive_decisions, dtype=np.int64)
    y = np.asarray(labels, dtype=np.int64)
    if not (z.shape == llm.shape == y.shape):
        raise ValueError("logits, expensive_decisions and labels must have equal length")
    if z.size == 0:
        raise ValueError("apply_cascade needs at least one sample")
    route = policy.route(z)
    decisions = np.where(route == 0, llm, (route > 0).astype(np.int64))
    deferred = route == 0
    frac = float(deferred.mean())
    err = weighted_error(eval_rates(decisions.astype(np.float64), y, roles, tau=0.5), scheme)
    return CascadeOutcome(decisions, deferred, frac, cascade_cost(frac, multiplier), err)


def band_cascade(center: float, half_width: float) -> CascadePolicy:
    """Symmetric deferral band around the probe's own decision threshold."""
    if not half_width >= 0:
        raise ValueError("half_width must be >= 0")
    return CascadePolicy(center - half_width, center + half_width)


def band_sweep(
    logits,
    expensive_decisions,
    labels,
    center: float,
    roles=None,
    scheme: WeightScheme = MAIN,
    multiplier: float = DEFAULT_COST_MULTIPLIER,
    half_widths=None,
) -> list[tuple[float, CascadeOutcome]]:
    """Evaluate ``band_cascade`` over a range of half-widths.

    By default every distinct ``|logit - center|`` (plus 0 and inf) is tried,
    which visits every distinct operating point of the band family.
    """
    z = np.asarray(logits, dtype=np.float64)
    if half_widths is None:
        half_widths = np.unique(np.concatenate([[0.0, np.inf], np.abs(z - center)]))
    return [
        (float(d), apply_cascade(z, expensive_decisions, labels, band_cascade(center, d), roles, scheme, multiplier))
        for d in half_widths
    ]


# ---------------------------------------------------------------------------
# per-sample losses and savings curves


@dataclass
class SampleLosses:
    """Per-sample losses sorted ascending by probe logit.

    ``neg[i]``/``pos[i]``/``llm[i]`` are sample i's contribution to the
    weighted error when it is labelled negative by the probe, positive by
    the probe, or handed to the expensive classifier.
    """

    logits: list
    neg: list
    pos: list
    llm: list
    ids: list = field(default_factory=list)

    def __post_init__(self):
        n = len(self.logits)
        if not (len(self.neg) == len(self.pos) == len(self.llm) == n):
            raise ValueError("per-sample loss lists must have equal length")
        if any(b < a for a, b in zip(self.logits, self.logits[1:])):
            raise ValueError("samples must be sorted ascending by probe logit")
        if not self.ids:
            self.ids = list(range(n))

    def __len__(self) -> int:
        return len(self.logits)

    @property
    def llm_error(self):
        """Weighted error of deferring every sample."""
        return sum(self.llm)


def sample_losses(
    logits,
    labels,
    expensive_decisions,
    roles=None,
    scheme: WeightScheme = MAIN,
    ids=None,
) -> SampleLosses:
    """Split the weighted error into per-sample costs.

    A sample of role r costs ``w_r / (n_r * sum of present weights)`` when
    misclassified and 0 otherwise, so summing the chosen losses reproduces
    ``weighted_error``. Ties in logit are broken by sample id.
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    llm = np.asarray(expensive_decisions, dtype=np.int64)
    n = z.size
    if not (y.size == llm.size == n):
        raise ValueError("logits, labels and expensive_decisions must have equal length")
    if roles is None:
        roles = [DatasetRole.SC_A if l else DatasetRole.SC_OT for l in y]
    roles = [DatasetRole(r) for r in roles]
    ids = list(range(n)) if ids is None else list(ids)
    counts: dict[DatasetRole, int] = {}
    for r in roles:
        counts[r] = counts.get(r, 0) + 1
    total_w = sum(scheme.weight(r) for r in counts)
    order = sorted(range(n), key=lambda i: (z[i], ids[i]))
    neg, pos, ll = [], [], []
    for i in order:
        r = roles[i]
        if r.label != y[i]:
            raise ValueError(f"label {y[i]} contradicts role {r.value}")
        c = scheme.weight(r) / (counts[r] * total_w)
        neg.append(c if y[i] == 1 else 0.0)
        pos.append(c if y[i] == 0 else 0.0)
        ll.append(c if llm[i] != y[i] else 0.0)
    return SampleLosses([float(z[i]) for i in order], neg, pos, ll, [ids[i] for i in order])


def savings_curves(samples: SampleLosses) -> tuple[list, list]:
    """Added-error curves L and R, each of length N + 1 with value 0 at k = 0.

    ``L[k]`` sums ``neg - llm`` over the k lowest-logit samples and ``R[k]``
    sums ``pos - llm`` over the k highest.
    """
    if any(b < a for a, b in zip(samples.logits, samples.logits[1:])):
        raise ValueError("samples must be sorted ascending by probe logit")
    n = len(samples)
    L = [0 * samples.neg[0] if n else 0]
    for i in range(n):
        L.append(L[-1] + (samples.neg[i] - samples.llm[i]))
    R = [L[0]]
    for i in reversed(range(n)):
        R.append(R[-1] + (samples.pos[i] - samples.llm[i]))
    return L, R


def _cross(o, a, b):
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def lower_convex_hull(points) -> list[tuple]:
    """Lower hull of points with strictly increasing x (monotone chain).

    Collinear interior points are dropped, so consecutive edge slopes
    strictly increase.
    """
    pts = [tuple(p) for p in points]
    if any(b[0] <= a[0] for a, b in zip(pts, pts[1:])):
        raise ValueError("hull points need strictly increasing x")
    hull: list[tuple] = []
    for p in pts:
        while len(hull) >= 2 and _cross(hull[-2], hull[-1], p) <= 0:
            hull.pop()
        hull.append(p)
    return hull


def curve_hull(values: Sequence) -> list[tuple]:
    """Hull of the curve ``k -> values[k]``."""
    return lower_convex_hull(list(enumerate(values)))


def hull_value(hull: Sequence[tuple], x):
    """Piecewise-linear interpolation of a hull at ``x``."""
    if not hull[0][0] <= x <= hull[-1][0]:
        raise ValueError(f"x={x} outside hull domain [{hull[0][0]}, {hull[-1][0]}]")
    for (x0, y0), (x1, y1) in zip(hull, hull[1:]):
        if x <= x1:
            return y0 + (y1 - y0) * (x - x0) / (x1 - x0)
    return hull[-1][1]


@dataclass(frozen=True)
class FrontierVertex:
    saved: int  # expensive calls avoided, k_left + k_right
    added_error: float
    k_left: int
    k_right: int


@dataclass
class Frontier:
    """Convex chain of (calls saved, added error) vertices.

    ``edges[i]`` tags the segment from vertex i to i + 1 with the curve it
    came from. ``logits`` (sorted) and ``base_error`` (all-deferred weighted
    error) are filled in when the frontier is built from samples.
    """

    vertices: list[FrontierVertex]
    edges: list[str]
    n: int
    logits: list | None = None
    base_error: float = 0.0

    def value_at(self, saved):
        return hull_value([(v.saved, v.added_error) for v in self.vertices], saved)

    def slopes(self) -> list:
        vs = self.vertices
        return [(b.added_error - a.added_error) / (b.saved - a.saved) for a, b in zip(vs, vs[1:])]


def _hull_edges(hull, tag):
    return [(b[0] - a[0], b[1] - a[1], tag) for a, b in zip(hull, hull[1:])]


def minkowski_frontier(left_hull, right_hull, n: int) -> Frontier:
    """Merge hull edges by slope, walking from flattest to steepest.

    Both hulls must start at (0, 0). Equal-slope edges from the two sides
    are fused into one edge. The walk stops at ``n`` calls saved; an edge
    crossing that point is cut there.
    """
    for h in (left_hull, right_hull):
        if tuple(h[0]) != (0, 0):
            raise ValueError("hulls must start at (0, 0)")
    le = _hull_edges(left_hull, LEFT)
    re = _hull_edges(right_hull, RIGHT)
    i = j = 0
    vertices = [FrontierVertex(0, left_hull[0][1] + right_hull[0][1], 0, 0)]
    edges: list[str] = []
    while (i < len(le) or j < len(re)) and vertices[-1].saved < n:
        if j >= len(re):
            cmp = -1
        elif i >= len(le):
            cmp = 1
        else:
            a, b = le[i][1] * re[j][0], re[j][1] * le[i][0]
            cmp = -1 if a < b else (1 if a > b else 0)
        if cmp < 0:
            parts = [le[i]]
            i += 1
        elif cmp > 0:
            parts = [re[j]]
            j += 1
        else:
            parts = [le[i], re[j]]
            i += 1
            j += 1
        v = vertices[-1]
        room = n - v.saved
        saved, err, kl, kr = v.saved, v.added_error, v.k_left, v.k_right
        for dx, dy, tag in parts:
            step = min(dx, room)
            if step <= 0:
                break
            err = err + dy * step / dx if step != dx else err + dy
            saved += step
            room -= step
            if tag == LEFT:
                kl += step
            else:
                kr += step
        vertices.append(FrontierVertex(saved, err, kl, kr))
        edges.append(BOTH if len(parts) == 2 else parts[0][2])
    return Frontier(vertices, edges, n)


def brute_force_frontier(left_hull, right_hull, n: int) -> list:
    """O(n^2) oracle: best hull-interpolated added error per savings level."""
    lmax, rmax = left_hull[-1][0], right_hull[-1][0]
    out = []
    for s in range(min(n, lmax + rmax) + 1):
        best = None
        for kl in range(max(0, s - rmax), min(s, lmax) + 1):
            val = hull_value(left_hull, kl) + hull_value(right_hull, s - kl)
            if best is None or val < best:
                best = val
        out.append(best)
    return out


def cascade_frontier(samples: SampleLosses) -> Frontier:
    L, R = savings_curves(samples)
    front = minkowski_frontier(curve_hull(L), curve_hull(R), len(samples))
    front.logits = list(samples.logits)
    front.base_error = samples.llm_error
    return front


def vertex_policy(frontier: Frontier, vertex: FrontierVertex) -> CascadePolicy:
    """Deterministic thresholds that send the k_left lowest samples to the
    probe's negative side and the k_right highest to its positive side.

    Exact unless probe logits tie across the threshold.
    """
    if frontier.logits is None:
        raise ValueError("frontier carries no logits; build it with cascade_frontier")
    z = frontier.logits
    n = len(z)
    t0 = z[vertex.k_left - 1] if vertex.k_left > 0 else -math.inf
    t1 = z[n - vertex.k_right] if vertex.k_right > 0 else math.inf
    if vertex.k_left > 0 and vertex.k_right > 0 and t1 <= t0:
        t1 = t0  # full split with a tie at the boundary; no deferral
    return CascadePolicy(t0, t1)


def vertex_cost(frontier: Frontier, vertex: FrontierVertex, multiplier: float = DEFAULT_COST_MULTIPLIER) -> float:
    return cascade_cost((frontier.n - vertex.saved) / frontier.n, multiplier)


def vertex_error(frontier: Frontier, vertex: FrontierVertex) -> float:
    return frontier.base_error + vertex.added_error


def optimal_vertex(
    frontier: Frontier,
    cost_weight: float = 0.0,
    error_weight: float = 1.0,
    multiplier: float = DEFAULT_COST_MULTIPLIER,
) -> tuple[FrontierVertex, CascadePolicy | None]:
    """Vertex minimizing ``cost_weight * cost + error_weight * error``.

    A linear objective over a convex chain is always minimized at a vertex,
    so no threshold randomization is needed. Ties favour more calls saved.
    """
    if not frontier.vertices:
        raise ValueError("empty frontier")
    if cost_weight < 0 or error_weight < 0:
        raise ValueError("objective weights must be non-negative")

    def objective(v):
        return cost_weight * vertex_cost(frontier, v, multiplier) + error_weight * vertex_error(frontier, v)

    best = min(frontier.vertices, key=lambda v: (objective(v), -v.saved))
    policy = vertex_policy(frontier, best) if frontier.logits is not None else None
    return best, policy


def simulate_mixture(
    samples: SampleLosses,
    first: CascadePolicy,
    second: CascadePolicy,
    lam: float,
    trials: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Monte Carlo run of a per-query randomized policy.

    Each trial routes every sample with ``second`` (probability ``lam``) or
    ``first``. Returns per-trial (calls saved, added error) arrays.
    """
    z = np.asarray(samples.logits, dtype=np.float64)
    neg = np.asarray(samples.neg, dtype=np.float64)
    pos = np.asarray(samples.pos, dtype=np.float64)
    llm = np.asarray(samples.llm, dtype=np.float64)
    routes = [p.route(z) for p in (first, second)]
    added = [np.where(r < 0, neg - llm, np.where(r > 0, pos - llm, 0.0)) for r in routes]
    saved = [(r != 0).astype(np.float64) for r in routes]
    pick = rng.random((trials, z.size)) < lam
    s = np.where(pick, saved[1], saved[0]).sum(axis=1)
    e = np.where(pick, added[1], added[0]).sum(axis=1)
    return s, e


# ---------------------------------------------------------------------------
# files


def read_expensive_scores(path) -> dict[str, tuple[int, float | None]]:
    """Tab-separated ``id decision [probability]`` lines; '#' starts a comment."""
    out: dict[str, tuple[int, float | None]] = {}
    with Path(path).open() as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if parts[0] == "id":
                continue
            if len(parts) not in (2, 3):
                raise ValueError(f"expensive-scores line {lineno}: expected 2 or 3 fields")
            try:
                decision = int(parts[1])
            except ValueError:
                raise ValueError(f"expensive-scores line {lineno}: decision must be 0 or 1") from None
            if decision not in (0, 1):
                raise ValueError(f"expensive-scores line {lineno}: decision must be 0 or 1")
            prob = float(parts[2]) if len(parts) == 3 and parts[2] else None
            out[parts[0]] = (decision, prob)
    return out


def write_expensive_scores(path, ids, decisions, probabilities=None) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["id", "decision", "probability"])
        probs = [None] * len(ids) if probabilities is None else probabilities
        for i, d, p in zip(ids, decisions, probs):
            w.writerow([i, int(d), "" if p is None else repr(float(p))])


def write_frontier(path, frontier: Frontier, multiplier: float = DEFAULT_COST_MULTIPLIER) -> None:
    """One row per vertex: cost, error, thresholds and the incoming edge's tag."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["saved", "cost", "error", "t0", "t1", "k_left", "k_right", "edge"])
        for i, v in enumerate(frontier.vertices):
            pol = vertex_policy(frontier, v)
            edge = frontier.edges[i - 1] if i else ""
            w.writerow([
                v.saved,
                repr(float(vertex_cost(frontier, v, multiplier))),
                repr(float(vertex_error(frontier, v))),
                repr(pol.t0), repr(pol.t1), v.k_left, v.k_right, edge,
            ])
