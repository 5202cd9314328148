"""Activation probes for detecting misuse in language-model traffic."""

from .cascade import CascadePolicy, apply_cascade, cascade_frontier, optimal_vertex
from .datasets import DatasetRole, Example, SyntheticConfig, generate_dataset
from .evaluation import ALT, MAIN, WeightScheme, eval_rates, select_threshold, weighted_error
from .probes import Architecture, ProbeParams, ProbeSpec, forward, init_params, predict_proba
from .streaming import stream_init, stream_score, stream_update
from .training import TrainConfig, run_seed_sweep, train_probe

__version__ = "0.1.0"

__all__ = [
    "ALT", "MAIN", "Architecture", "CascadePolicy", "DatasetRole", "Example", "ProbeParams",
    "ProbeSpec", "SyntheticConfig", "TrainConfig", "WeightScheme", "apply_cascade",
    "cascade_frontier", "eval_rates", "forward", "generate_dataset", "init_params",
    "optimal_vertex", "predict_proba", "run_seed_sweep", "select_threshold", "stream_init",
    "stream_score", "stream_update", "train_probe", "weighted_error",
]
