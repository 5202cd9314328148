import math
from fractions import Fraction as F

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from probekit.cascade import (
    BOTH,
    LEFT,
    RIGHT,
    CascadePolicy,
    Frontier,
    FrontierVertex,
    SampleLosses,
    apply_cascade,
    band_cascade,
    band_sweep,
    brute_force_frontier,
    cascade_cost,
    cascade_frontier,
    curve_hull,
    hull_value,
    lower_convex_hull,
    minkowski_frontier,
    optimal_vertex,
    read_expensive_scores,
    sample_losses,
    savings_curves,
    simulate_mixture,
    vertex_error,
    vertex_policy,
    write_expensive_scores,
    write_frontier,
)
from probekit.datasets import DatasetRole as R
from probekit.evaluation import ALT, MAIN, eval_rates, weighted_error


def random_instance(rng, n=None):
    n = int(rng.integers(2, 30)) if n is None else n
    roles = [list(R)[i] for i in rng.integers(0, 9, n)]
    y = np.array([r.label for r in roles])
    z = np.round(rng.normal(size=n) + 1.5 * (2 * y - 1), 2)
    # expensive scorer right 80% of the time
    llm = np.where(rng.random(n) < 0.8, y, 1 - y)
    return z, y, llm, roles


def random_fraction_curve(rng, n):
    vals = [F(0)]
    for _ in range(n):
        vals.append(vals[-1] + F(int(rng.integers(-20, 21)), int(rng.integers(1, 9))))
    return vals


class TestPolicy:
    def test_route_rule(self):
        pol = CascadePolicy(-1.0, 1.0)
        np.testing.assert_array_equal(pol.route([-2, -1, 0, 1, 2]), [-1, -1, 0, 1, 1])

    def test_equal_thresholds_never_defer(self):
        np.testing.assert_array_equal(CascadePolicy(0.5, 0.5).route([0.4, 0.5, 0.6]), [-1, -1, 1])

    def test_infinite_band_always_defers(self):
        assert (CascadePolicy(-math.inf, math.inf).route([-1e300, 0, 1e300]) == 0).all()

    @pytest.mark.parametrize("t0, t1", [(1.0, 0.0), (math.nan, 0.0), (0.0, math.nan)])
    def test_invalid(self, t0, t1):
        with pytest.raises(ValueError):
            CascadePolicy(t0, t1)

    def test_cost(self):
        assert cascade_cost(0.0) == 1.0
        assert cascade_cost(0.25, multiplier=100) == 26.0


class TestApplyCascade:
    def test_pure_probe(self):
        out = apply_cascade([-1, 2, 0.5], [1, 1, 1], [0, 1, 1], CascadePolicy(0.0, 0.0))
        assert out.deferral_fraction == 0.0 and out.cost == 1.0
        np.testing.assert_array_equal(out.decisions, [0, 1, 1])

    def test_pure_expensive(self):
        out = apply_cascade([-1, 2, 0.5], [1, 0, 1], [0, 1, 1], CascadePolicy(-math.inf, math.inf))
        assert out.deferral_fraction == 1.0
        assert out.cost == 1.0 + 1e4
        np.testing.assert_array_equal(out.decisions, [1, 0, 1])

    def test_five_sample_case(self):
        z = [-3.0, -0.5, 0.0, 0.7, 2.5]
        llm = [1, 0, 1, 1, 0]
        y = [0, 1, 0, 1, 1]
        out = apply_cascade(z, llm, y, CascadePolicy(-1.0, 1.0), multiplier=10)
        # -3 -> probe 0; -0.5, 0, 0.7 deferred -> 0, 1, 1; 2.5 -> probe 1
        np.testing.assert_array_equal(out.decisions, [0, 0, 1, 1, 1])
        np.testing.assert_array_equal(out.deferred, [False, True, True, True, False])
        assert out.deferral_fraction == pytest.approx(0.6)
        assert out.cost == pytest.approx(7.0)
        # SC_A FNR 1/3 (w=5), SC_OT FPR 1/2 (w=50)
        assert out.weighted_error == pytest.approx((5 / 3 + 25) / 55)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            apply_cascade([0.0], [1, 0], [1], CascadePolicy(0, 0))


class TestBand:
    def test_zero_width(self):
        assert band_cascade(0.3, 0.0) == CascadePolicy(0.3, 0.3)

    def test_infinite_width(self):
        pol = band_cascade(0.3, math.inf)
        assert (pol.route([-1e9, 1e9]) == 0).all()

    def test_negative_width(self):
        with pytest.raises(ValueError):
            band_cascade(0.0, -0.1)

    def test_cost_monotone_in_width(self, rng):
        z, y, llm, roles = random_instance(rng, n=10)
        sweep = band_sweep(z, llm, y, center=0.0, roles=roles)
        deltas = [d for d, _ in sweep]
        costs = [o.cost for _, o in sweep]
        assert deltas == sorted(deltas)
        assert all(b >= a for a, b in zip(costs, costs[1:]))
        assert sweep[0][1].deferral_fraction == 0.0
        assert sweep[-1][1].deferral_fraction == 1.0


class TestSampleLosses:
    def test_sorted_with_id_ties(self):
        s = sample_losses([0.5, 0.1, 0.5], [1, 0, 0], [1, 0, 0], ids=["b", "z", "a"])
        assert s.ids == ["z", "a", "b"]

    def test_unsorted_rejected(self):
        with pytest.raises(ValueError):
            SampleLosses([1.0, 0.0], [0, 0], [0, 0], [0, 0])

    @given(st.integers(0, 2**32 - 1))
    def test_losses_reproduce_weighted_error(self, seed):
        rng = np.random.default_rng(seed)
        z, y, llm, roles = random_instance(rng)
        s = sample_losses(z, y, llm, roles, ALT)
        assert s.llm_error == pytest.approx(weighted_error(eval_rates(llm.astype(float), y, roles), ALT), abs=1e-12)
        pol = CascadePolicy(-0.3, 0.4)
        route = pol.route(s.logits)
        total = sum(
            n if r < 0 else p if r > 0 else l for r, n, p, l in zip(route, s.neg, s.pos, s.llm)
        )
        out = apply_cascade(z, llm, y, pol, roles, ALT)
        assert total == pytest.approx(out.weighted_error, abs=1e-12)


class TestSavingsCurves:
    def test_probe_matches_llm_gives_flat_left(self):
        s = SampleLosses([0, 1, 2], [0.0, 0.2, 0.0], [0.1, 0.0, 0.1], [0.0, 0.2, 0.0])
        L, _ = savings_curves(s)
        assert L == [0, 0, 0, 0]

    def test_three_sample_hand_case(self):
        s = SampleLosses([0, 1, 2], [0.0, 0.5, 0.5], [0.25, 0.0, 0.0], [0.0, 0.0, 0.5])
        L, R = savings_curves(s)
        assert L == [0, 0.0, 0.5, 0.5]
        # from the top: 0.0 - 0.5, then 0.0 - 0.0, then 0.25 - 0.0
        assert R == [0, -0.5, -0.5, -0.25]

    def test_negative_increment(self):
        # the probe says negative correctly where the expensive model was wrong
        s = SampleLosses([0, 1], [0.0, 0.0], [0.3, 0.3], [0.3, 0.0])
        L, _ = savings_curves(s)
        assert L[1] < L[0]


class TestHull:
    def test_example(self):
        h = lower_convex_hull([(0, 1), (1, 0.5), (2, 0.45), (3, 0.1)])
        assert h == [(0, 1), (1, 0.5), (3, 0.1)]

    def test_two_points(self):
        assert lower_convex_hull([(0, 0), (5, 1)]) == [(0, 0), (5, 1)]

    def test_collinear_removed(self):
        assert lower_convex_hull([(0, 0), (1, 1), (2, 2), (3, 3)]) == [(0, 0), (3, 3)]

    def test_requires_increasing_x(self):
        with pytest.raises(ValueError):
            lower_convex_hull([(0, 0), (0, 1)])

    @given(st.lists(st.integers(-50, 50), min_size=2, max_size=25))
    def test_lower_bound_and_strict_slopes(self, ys):
        h = curve_hull([F(v) for v in ys])
        for k, v in enumerate(ys):
            assert hull_value(h, k) <= v
        slopes = [(b[1] - a[1]) / (b[0] - a[0]) for a, b in zip(h, h[1:])]
        assert all(b > a for a, b in zip(slopes, slopes[1:]))
        assert all(ys[x] == y for x, y in h)


class TestMinkowski:
    def test_example(self):
        f = minkowski_frontier([(0, 0), (1, F(1, 10)), (2, F(4, 10))], [(0, 0), (1, F(2, 10))], 3)
        assert [(v.saved, v.added_error) for v in f.vertices] == [(0, 0), (1, F(1, 10)), (2, F(3, 10)), (3, F(6, 10))]
        assert f.edges == [LEFT, RIGHT, LEFT]
        assert brute_force_frontier([(0, 0), (1, F(1, 10)), (2, F(4, 10))], [(0, 0), (1, F(2, 10))], 3) == [0, F(1, 10), F(3, 10), F(6, 10)]

    def test_trivial_right(self):
        left = [(0, 0), (2, F(-1)), (4, F(3))]
        f = minkowski_frontier(left, [(0, 0)], 4)
        assert [(v.saved, v.added_error) for v in f.vertices] == left

    def test_equal_slopes_fused(self):
        f = minkowski_frontier([(0, 0), (1, 1)], [(0, 0), (2, 2)], 3)
        assert f.edges == [BOTH]
        assert (f.vertices[-1].k_left, f.vertices[-1].k_right) == (1, 2)

    def test_truncated_at_n(self):
        f = minkowski_frontier([(0, 0), (3, F(3))], [(0, 0), (3, F(6))], 4)
        last = f.vertices[-1]
        assert last.saved == 4 and last.added_error == F(5)
        assert (last.k_left, last.k_right) == (3, 1)

    def test_hull_must_start_at_origin(self):
        with pytest.raises(ValueError):
            minkowski_frontier([(0, 1), (1, 0)], [(0, 0)], 1)

    @given(st.integers(0, 2**32 - 1))
    def test_matches_brute_force_exactly(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 40))
        lh = curve_hull(random_fraction_curve(rng, n))
        rh = curve_hull(random_fraction_curve(rng, n))
        f = minkowski_frontier(lh, rh, n)
        brute = brute_force_frontier(lh, rh, n)
        assert f.vertices[-1].saved == n
        assert [f.value_at(s) for s in range(n + 1)] == brute
        sl = f.slopes()
        assert all(b > a for a, b in zip(sl, sl[1:]))

    @given(st.integers(0, 2**32 - 1))
    def test_independence_decomposition(self, seed):
        rng = np.random.default_rng(seed)
        z, y, llm, roles = random_instance(rng)
        s = sample_losses(z, y, llm, roles)
        L, R_ = savings_curves(s)
        f = cascade_frontier(s)
        for v in f.vertices:
            if v.k_left + v.k_right != v.saved or not (
                (v.k_left, L[v.k_left]) in curve_hull(L) and (v.k_right, R_[v.k_right]) in curve_hull(R_)
            ):
                continue
            out = apply_cascade(z, llm, y, vertex_policy(f, v), roles)
            if len(set(z)) == len(z):
                assert out.weighted_error == pytest.approx(vertex_error(f, v), abs=1e-12)
                assert out.deferral_fraction == pytest.approx((len(z) - v.saved) / len(z))


class TestOptimalVertex:
    def _frontier(self):
        s = SampleLosses(
            [-2.0, -1.0, 1.0],
            [0.0, 0.3, 0.3],
            [0.2, 0.0, 0.0],
            [0.0, 0.0, 0.0],
        )
        return s, cascade_frontier(s)

    def test_cost_only_picks_no_deferral(self):
        _, f = self._frontier()
        v, pol = optimal_vertex(f, cost_weight=1.0, error_weight=0.0)
        assert v.saved == f.n
        assert (pol.route(f.logits) != 0).all()

    def test_error_only_picks_minimum_error(self):
        s, f = self._frontier()
        v, pol = optimal_vertex(f)
        # the lowest sample is a free negative and the top two free positives
        assert v.added_error == 0.0
        assert (v.saved, v.k_left, v.k_right) == (3, 1, 2)
        out = apply_cascade(s.logits, [0, 1, 1], [0, 1, 1], pol)
        assert out.weighted_error == 0.0

    @given(st.integers(0, 2**32 - 1))
    def test_error_only_matches_policy_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        z, y, llm, roles = random_instance(rng, n=int(rng.integers(2, 12)))
        z = z + rng.uniform(0, 1e-3, z.size)  # distinct logits
        f = cascade_frontier(sample_losses(z, y, llm, roles))
        v, pol = optimal_vertex(f)
        cuts = np.concatenate([[-np.inf], np.sort(z), [np.inf]])
        brute = min(
            apply_cascade(z, llm, y, CascadePolicy(a, b), roles).weighted_error
            for i, a in enumerate(cuts)
            for b in cuts[i:]
        )
        assert vertex_error(f, v) <= brute + 1e-12
        realized = apply_cascade(z, llm, y, pol, roles).weighted_error
        if v.k_left + v.k_right <= f.n and realized == pytest.approx(vertex_error(f, v), abs=1e-12):
            assert realized == pytest.approx(brute, abs=1e-12)

    def test_switch_at_crossing_ratio(self):
        f = Frontier([FrontierVertex(0, 0.0, 0, 0), FrontierVertex(4, 0.2, 4, 0)], [LEFT], n=4, base_error=0.1)
        # saving every call trades 1e4 cost units for 0.2 error; crossing at c/w = 0.2 / 1e4
        ratio = 0.2 / 1e4
        lo, _ = optimal_vertex(f, cost_weight=ratio * 0.99, error_weight=1.0)
        hi, _ = optimal_vertex(f, cost_weight=ratio * 1.01, error_weight=1.0)
        assert lo.saved == 0 and hi.saved == 4

    def test_negative_weight_rejected(self):
        _, f = self._frontier()
        with pytest.raises(ValueError):
            optimal_vertex(f, cost_weight=-1.0)


class TestRandomizedInterpolation:
    def test_mixture_converges_to_edge_point(self, rng):
        z, y, llm, roles = random_instance(rng, n=60)
        z = z + rng.uniform(0, 1e-3, z.size)
        s = sample_losses(z, y, llm, roles)
        f = cascade_frontier(s)
        L, R_ = savings_curves(s)
        real = [
            v for v in f.vertices
            if L[v.k_left] + R_[v.k_right] == pytest.approx(v.added_error, abs=1e-12)
        ]
        a, b = real[len(real) // 2 - 1], real[len(real) // 2]
        lam = 0.3
        saved, added = simulate_mixture(s, vertex_policy(f, a), vertex_policy(f, b), lam, 4000, np.random.default_rng(1))
        want_s = (1 - lam) * a.saved + lam * b.saved
        want_e = (1 - lam) * a.added_error + lam * b.added_error
        for got, want in ((saved, want_s), (added, want_e)):
            se = got.std(ddof=1) / np.sqrt(got.size)
            assert abs(got.mean() - want) <= 3 * se + 1e-12


class TestBandVersusFrontier:
    @given(st.integers(0, 2**32 - 1))
    def test_band_never_beats_frontier(self, seed):
        rng = np.random.default_rng(seed)
        z, y, llm, roles = random_instance(rng)
        s = sample_losses(z, y, llm, roles, MAIN)
        f = cascade_frontier(s)
        for _, out in band_sweep(z, llm, y, center=float(np.median(z)), roles=roles):
            saved = int((~out.deferred).sum())
            assert out.weighted_error >= f.base_error + f.value_at(saved) - 1e-12


class TestFiles:
    def test_expensive_scores_round_trip(self, tmp_path):
        write_expensive_scores(tmp_path / "e.tsv", ["a", "b"], [1, 0], [0.9, None])
        assert read_expensive_scores(tmp_path / "e.tsv") == {"a": (1, 0.9), "b": (0, None)}

    def test_two_column_lines_and_comments(self, tmp_path):
        (tmp_path / "e.tsv").write_text("# mock\nx\t1\ny\t0\n")
        assert read_expensive_scores(tmp_path / "e.tsv") == {"x": (1, None), "y": (0, None)}

    @pytest.mark.parametrize("line", ["x\t2", "x", "x\tyes"])
    def test_bad_lines(self, tmp_path, line):
        (tmp_path / "e.tsv").write_text(line + "\n")
        with pytest.raises(ValueError):
            read_expensive_scores(tmp_path / "e.tsv")

    def test_frontier_file(self, tmp_path, rng):
        z, y, llm, roles = random_instance(rng, n=12)
        f = cascade_frontier(sample_losses(z, y, llm, roles))
        write_frontier(tmp_path / "f.tsv", f)
        lines = (tmp_path / "f.tsv").read_text().splitlines()
        assert lines[0].split("\t") == ["saved", "cost", "error", "t0", "t1", "k_left", "k_right", "edge"]
        assert len(lines) == len(f.vertices) + 1
        assert lines[1].split("\t")[3] == "-inf"
