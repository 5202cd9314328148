"""Full-batch AdamW probe training and multi-seed sweeps."""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .datasets import Example, labels_of, roles_of, sequences
from .evaluation import MAIN, WeightScheme, eval_rates, score_dataset, select_threshold, weighted_error
from .numerics import AdamWState, adamw_step
from .probes import ProbeParams, ProbeSpec, init_params, loss_and_grad, make_batches, save_params

# Validation loss assigned to failed runs; a real weighted error is always < 1.
MAX_PENALTY = 1.0


class TrainingDiverged(ArithmeticError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1000
    learning_rate: float = 1e-4
    weight_decay: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0
    max_tokens: int = 1 << 17

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")


@dataclass
class TrainResult:
    params: ProbeParams
    history: list[float]


def train_probe(spec: ProbeSpec, train: Sequence[Example], config: TrainConfig = TrainConfig()) -> TrainResult:
    """Run ``config.epochs`` full-batch AdamW steps on mean BCE.

    ``history[i]`` is the training loss evaluated before step ``i``.
    """
    labels = labels_of(train)
    if labels.size == 0 or labels.min() == labels.max():
        raise ValueError("training data must contain both labels")
    params = init_params(spec, config.seed)
    batches = make_batches(sequences(train), labels, max_tokens=config.max_tokens)
    state = AdamWState(
        learning_rate=config.learning_rate,
        weight_decay=config.weight_decay,
        beta1=config.beta1,
        beta2=config.beta2,
    )
    tensors = params.tensors
    history = []
    for epoch in range(config.epochs):
        loss, grads = loss_and_grad(params.with_tensors(tensors), batches, mode="train")
        if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise TrainingDiverged(f"non-finite loss or gradient at epoch {epoch}")
        history.append(loss)
        tensors, state = adamw_step(tensors, grads, state)
    return TrainResult(params.with_tensors(tensors), history)


# ---------------------------------------------------------------------------
# seed sweeps


@dataclass
class SeedRecord:
    seed: int
    validation_loss: float
    test_loss: float
    degenerate: bool = False
    tau: float = float("nan")
    params: ProbeParams | None = field(default=None, repr=False, compare=False)
    params_path: str = ""


@dataclass
class SeedSweep:
    records: list[SeedRecord]

    def usable(self) -> list[SeedRecord]:
        return [r for r in self.records if not r.degenerate]


@dataclass(frozen=True)
class SweepSummary:
    median: float
    best: float
    oracle: float
    delta_best: float
    delta_oracle: float
    best_seed: int


def _run_one(spec, data, config, seed, scheme, keep_params):
    cfg = replace(config, seed=seed)
    try:
        result = train_probe(spec, data["train"], cfg)
    except TrainingDiverged:
        return SeedRecord(seed, MAX_PENALTY, float("nan"), degenerate=True)
    params = result.params
    val, test = data["val"], data["test"]
    policy = select_threshold(score_dataset(params, val), labels_of(val), roles_of(val), scheme)
    test_probs = score_dataset(params, test)
    test_loss = weighted_error(eval_rates(test_probs, labels_of(test), roles_of(test), policy.tau), scheme)
    degenerate = policy.validation_loss >= MAX_PENALTY
    return SeedRecord(
        seed,
        policy.validation_loss,
        test_loss,
        degenerate=degenerate,
        tau=policy.tau,
        params=params if keep_params else None,
    )


_WORKER: dict = {}


def _worker_init(spec, data, config, scheme, keep_params):
    _WORKER.update(spec=spec, data=data, config=config, scheme=scheme, keep_params=keep_params)


def _worker_run(seed):
    w = _WORKER
    return _run_one(w["spec"], w["data"], w["config"], seed, w["scheme"], w["keep_params"])


def run_seed_sweep(
    spec: ProbeSpec,
    data: dict[str, Sequence[Example]],
    config: TrainConfig,
    seeds: Sequence[int],
    scheme: WeightScheme = MAIN,
    workers: int = 1,
    keep_params: bool = False,
) -> SeedSweep:
    """Train one probe per seed; record its validation and test weighted error.

    ``data`` maps ``"train"``, ``"val"`` and ``"test"`` to example lists.
    Each seed gets its own validation-selected threshold. Records come back
    sorted by seed regardless of input order or worker count.
    """
    seeds = sorted(set(int(s) for s in seeds))
    if not seeds:
        raise ValueError("need at least one seed")
    if workers <= 1 or len(seeds) == 1:
        records = [_run_one(spec, data, config, s, scheme, keep_params) for s in seeds]
    else:
        with ProcessPoolExecutor(
            max_workers=min(workers, len(seeds)),
            initializer=_worker_init,
            initargs=(spec, data, config, scheme, keep_params),
        ) as pool:
            records = list(pool.map(_worker_run, seeds))
    sweep = SeedSweep(records)
    if not sweep.usable():
        raise ValueError("seed sweep produced zero usable (non-degenerate) seeds")
    return sweep


def select_best_seed(sweep: SeedSweep) -> SeedRecord:
    """Lowest validation loss; ties go to the lowest seed number."""
    usable = sweep.usable()
    if not usable:
        raise ValueError("sweep has no usable records")
    return min(usable, key=lambda r: (r.validation_loss, r.seed))


def sweep_summary(sweep: SeedSweep) -> SweepSummary:
    best = select_best_seed(sweep)
    tests = np.array([r.test_loss for r in sweep.usable()])
    med = float(np.median(tests))  # even count: mean of the two central values
    oracle = float(tests.min())
    return SweepSummary(med, best.test_loss, oracle, med - best.test_loss, med - oracle, best.seed)


def default_workers() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


def write_sweep_table(path, sweep: SeedSweep, params_dir=None) -> None:
    """Tab-separated: seed, validation_loss, test_loss, degenerate, params_path.

    With ``params_dir`` every record that still holds parameters is saved
    as ``seed_<n>.npz`` there and its path written to the table.
    """
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["seed", "validation_loss", "test_loss", "degenerate", "params_path"])
        for r in sweep.records:
            ppath = r.params_path
            if params_dir is not None and r.params is not None:
                Path(params_dir).mkdir(parents=True, exist_ok=True)
                ppath = str(Path(params_dir) / f"seed_{r.seed}.npz")
                save_params(ppath, r.params)
            w.writerow([r.seed, repr(r.validation_loss), repr(r.test_loss), int(r.degenerate), ppath])


def read_sweep_table(path) -> SeedSweep:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    records = [
        SeedRecord(
            int(r["seed"]),
            float(r["validation_loss"]),
            float(r["test_loss"]),
            degenerate=bool(int(r["degenerate"])),
            params_path=r.get("params_path", ""),
        )
        for r in rows
    ]
    return SeedSweep(records)
