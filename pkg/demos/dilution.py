"""Mean pooling versus max-of-heads on long contexts.

A short harmful span hidden inside a long benign transcript barely moves a
token average, so the mean probe misses it while multimax does not.

    python demos/dilution.py
"""

from probekit.datasets import DatasetRole, SyntheticConfig, generate_dataset, labels_of, roles_of
from probekit.evaluation import eval_rates, score_dataset, select_threshold
from probekit.probes import ProbeSpec
from probekit.training import TrainConfig, train_probe

ds = generate_dataset(SyntheticConfig(activation_dim=32, seed=0).scaled(0.3))
tr, va, te = ds.split("train"), ds.split("val"), ds.split("test")
cfg = TrainConfig(epochs=150, learning_rate=1e-2)

for spec in (ProbeSpec("linear_mean", 32), ProbeSpec("multimax", 32, mlp_widths=(16,), heads=4)):
    params = train_probe(spec, tr, cfg).params
    tau = select_threshold(score_dataset(params, va), labels_of(va), roles_of(va)).tau
    rates = eval_rates(score_dataset(params, te), labels_of(te), roles_of(te), tau)
    print(f"{spec.architecture.value:12s} tau={tau:.3f}  "
          + "  ".join(f"{r.name}={rates[r]:.2f}" for r in (DatasetRole.SC_A, DatasetRole.MT_A, DatasetRole.LC_A)))
