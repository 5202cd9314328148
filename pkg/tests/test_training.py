import math

import numpy as np
import pytest

from probekit import training
from probekit.datasets import DatasetRole as R
from probekit.datasets import Example, SyntheticConfig, generate_dataset
from probekit.probes import ProbeSpec, init_params
from probekit.training import (
    MAX_PENALTY,
    SeedRecord,
    SeedSweep,
    TrainConfig,
    TrainingDiverged,
    read_sweep_table,
    run_seed_sweep,
    select_best_seed,
    sweep_summary,
    train_probe,
    write_sweep_table,
)


def planted(seed=0, d=8, n=200, sep=20.0):
    """Every token shifted by +sep*u for attacks and -sep*u for benign."""
    rng = np.random.default_rng(seed)
    u = np.ones(d) / np.sqrt(d)
    out = []
    for i in range(n):
        y = i % 2
        X = rng.standard_normal((rng.integers(8, 25), d)) + (sep if y else -sep) * u
        out.append(Example(f"r{i}", X.astype(np.float32), y, R.SC_A if y else R.SC_OT, "train"))
    return out


@pytest.fixture(scope="module")
def small_data():
    counts = {
        "train": {"SC_OT": 30, "SC_A": 30},
        "val": {"SC_OT": 20, "SC_A": 20},
        "test": {"SC_OT": 20, "SC_A": 20, "SC_HN": 10},
    }
    ds = generate_dataset(SyntheticConfig(activation_dim=6, counts=counts, class_separation=1.5, seed=3))
    return {s: ds.split(s) for s in ("train", "val", "test")}


FAST = TrainConfig(epochs=15, learning_rate=1e-2)
LINEAR = ProbeSpec("linear_mean", 6)


class TestTrainProbe:
    def test_zero_epochs_returns_init(self):
        spec = ProbeSpec("multimax", 8, mlp_widths=(4,), heads=2)
        r = train_probe(spec, planted(n=20), TrainConfig(epochs=0, seed=5))
        init = init_params(spec, 5)
        assert r.history == []
        for k, v in init.tensors.items():
            np.testing.assert_array_equal(r.params.tensors[k], v)

    def test_history_length(self):
        r = train_probe(ProbeSpec("linear_mean", 8), planted(n=20), TrainConfig(epochs=7))
        assert len(r.history) == 7

    def test_reference_run_default_config(self):
        # frozen: d=8, 200 examples, init seed 0, default epochs and learning rate
        r = train_probe(ProbeSpec("linear_mean", 8), planted(), TrainConfig(seed=0))
        assert len(r.history) == 1000
        assert r.history[-1] < 0.1

    @pytest.mark.parametrize("seed", [0, 3, 5])
    def test_larger_step_converges_from_any_init(self, seed):
        r = train_probe(ProbeSpec("linear_mean", 8), planted(), TrainConfig(epochs=300, learning_rate=1e-2, seed=seed))
        assert r.history[-1] < 0.1

    def test_loss_decreases(self):
        r = train_probe(ProbeSpec("attention", 8, mlp_widths=(4,), heads=2), planted(n=40), TrainConfig(epochs=50, learning_rate=1e-2))
        assert r.history[-1] < r.history[0]

    def test_deterministic(self):
        spec = ProbeSpec("rolling_attention", 8, mlp_widths=(4,), heads=2, window=3)
        a = train_probe(spec, planted(n=30), TrainConfig(epochs=5, learning_rate=1e-3, seed=2))
        b = train_probe(spec, planted(n=30), TrainConfig(epochs=5, learning_rate=1e-3, seed=2))
        assert a.history == b.history

    def test_single_class_rejected(self):
        data = [e for e in planted(n=10) if e.label == 1]
        with pytest.raises(ValueError):
            train_probe(ProbeSpec("linear_mean", 8), data, TrainConfig(epochs=1))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_detected(self):
        data = planted(n=10)
        data[0] = Example("bad", np.full((4, 8), np.inf, dtype=np.float32), 0, R.SC_OT, "train")
        with pytest.raises(TrainingDiverged):
            train_probe(ProbeSpec("linear_mean", 8), data, TrainConfig(epochs=1))

    @pytest.mark.parametrize("kw", [dict(epochs=-1), dict(learning_rate=0.0)])
    def test_invalid_config(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


def rec(seed, val, test, degenerate=False):
    return SeedRecord(seed, val, test, degenerate=degenerate)


class TestSummary:
    def test_hand_example(self):
        s = sweep_summary(SeedSweep([rec(0, 0.3, 0.4), rec(1, 0.1, 0.5)]))
        assert s.best == 0.5 and s.oracle == 0.4
        assert s.median == pytest.approx(0.45)
        assert s.delta_best == pytest.approx(-0.05)  # reported unclamped
        assert s.delta_oracle == pytest.approx(0.05)
        assert s.best_seed == 1

    def test_single_record(self):
        s = sweep_summary(SeedSweep([rec(4, 0.2, 0.3)]))
        assert s.median == s.best == s.oracle == 0.3

    def test_validation_tie_goes_to_lowest_seed(self):
        best = select_best_seed(SeedSweep([rec(7, 0.1, 0.9), rec(2, 0.1, 0.8), rec(5, 0.2, 0.1)]))
        assert best.seed == 2

    def test_degenerate_records_ignored(self):
        s = sweep_summary(SeedSweep([rec(0, MAX_PENALTY, math.nan, True), rec(1, 0.2, 0.3), rec(2, 0.1, 0.2)]))
        assert s.best_seed == 2 and s.median == pytest.approx(0.25)

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            select_best_seed(SeedSweep([rec(0, 1.0, math.nan, True)]))

    def test_oracle_is_minimum(self, rng):
        for _ in range(50):
            recs = [rec(i, *rng.uniform(size=2)) for i in range(rng.integers(1, 12))]
            s = sweep_summary(SeedSweep(recs))
            assert s.oracle <= s.best and s.oracle <= s.median

    def test_table_round_trip(self, tmp_path):
        sweep = SeedSweep([rec(0, 0.1 / 3, 0.2), rec(1, MAX_PENALTY, math.nan, True)])
        write_sweep_table(tmp_path / "sweep.tsv", sweep)
        back = read_sweep_table(tmp_path / "sweep.tsv")
        assert back.records[0] == sweep.records[0]
        assert back.records[1].degenerate and math.isnan(back.records[1].test_loss)


class TestSweep:
    def test_one_seed(self, small_data):
        sweep = run_seed_sweep(LINEAR, small_data, FAST, [4])
        assert len(sweep.records) == 1
        assert select_best_seed(sweep).seed == 4

    def test_records_well_formed(self, small_data):
        sweep = run_seed_sweep(LINEAR, small_data, FAST, [0, 1, 2])
        for r in sweep.records:
            assert 0 <= r.validation_loss < MAX_PENALTY
            assert 0 <= r.test_loss <= 1
            assert 0 <= r.tau <= 1

    def test_order_invariant(self, small_data):
        a = run_seed_sweep(LINEAR, small_data, FAST, [2, 0, 1])
        b = run_seed_sweep(LINEAR, small_data, FAST, [0, 1, 2])
        assert a.records == b.records
        assert [r.seed for r in a.records] == [0, 1, 2]

    def test_parallel_matches_sequential(self, small_data):
        seq = run_seed_sweep(LINEAR, small_data, FAST, [0, 1, 2], workers=1)
        par = run_seed_sweep(LINEAR, small_data, FAST, [0, 1, 2], workers=2)
        assert seq.records == par.records

    def test_params_kept_on_request(self, small_data, tmp_path):
        sweep = run_seed_sweep(LINEAR, small_data, FAST, [0], keep_params=True)
        write_sweep_table(tmp_path / "s.tsv", sweep, params_dir=tmp_path / "params")
        assert (tmp_path / "params" / "seed_0.npz").exists()
        assert read_sweep_table(tmp_path / "s.tsv").records[0].params_path.endswith("seed_0.npz")

    def test_diverged_seed_marked_not_fatal(self, small_data, monkeypatch):
        real = training.train_probe

        def flaky(spec, train, config):
            if config.seed == 1:
                raise TrainingDiverged("boom")
            return real(spec, train, config)

        monkeypatch.setattr(training, "train_probe", flaky)
        sweep = run_seed_sweep(LINEAR, small_data, FAST, [0, 1])
        assert [r.degenerate for r in sweep.records] == [False, True]
        assert sweep.records[1].validation_loss == MAX_PENALTY

    def test_all_degenerate_raises(self, small_data, monkeypatch):
        def always(spec, train, config):
            raise TrainingDiverged("boom")

        monkeypatch.setattr(training, "train_probe", always)
        with pytest.raises(ValueError, match="zero usable"):
            run_seed_sweep(LINEAR, small_data, FAST, [0, 1])

    def test_no_seeds(self, small_data):
        with pytest.raises(ValueError):
            run_seed_sweep(LINEAR, small_data, FAST, [])
