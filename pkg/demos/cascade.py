"""Defer the uncertain middle of a probe's score range to an expensive model.

The expensive model here is a stand-in that answers correctly 95% of the
time. The frontier lists every optimal (deferral fraction, error) trade-off.

    python demos/cascade.py
"""

import numpy as np

from probekit.cascade import apply_cascade, cascade_frontier, optimal_vertex, sample_losses, vertex_error
from probekit.datasets import SyntheticConfig, generate_dataset, labels_of, roles_of
from probekit.evaluation import MAIN, score_dataset, select_threshold
from probekit.numerics import sigmoid
from probekit.probes import ProbeSpec, predict_logits
from probekit.training import TrainConfig, train_probe

ds = generate_dataset(SyntheticConfig(activation_dim=16, long_len=(80, 120), seed=8).scaled(0.25))
tr, te = ds.split("train"), ds.split("test")
params = train_probe(ProbeSpec("linear_mean", 16), tr, TrainConfig(epochs=100, learning_rate=1e-2)).params

z = predict_logits(params, [e.X for e in te])
y, roles = labels_of(te), roles_of(te)
llm = np.where(np.random.default_rng(0).random(y.size) < 0.95, y, 1 - y)

front = cascade_frontier(sample_losses(z, y, llm, roles, MAIN))
print(f"probe alone (best threshold): {select_threshold(sigmoid(z), y, roles).validation_loss:.4f}")
print(f"expensive model alone:        {front.base_error:.4f}")
for v in front.vertices[:: max(1, len(front.vertices) // 8)]:
    print(f"  defer {1 - v.saved / len(y):.3f}  error {vertex_error(front, v):.4f}")

vertex, policy = optimal_vertex(front)
out = apply_cascade(z, llm, y, policy, roles, MAIN)
print(f"chosen: t0={policy.t0:.3f} t1={policy.t1:.3f} defer {out.deferral_fraction:.3f} error {out.weighted_error:.4f}")
