"""
Why overwriting forgets, and why sparsity softens it
====================================================

A step on a new task changes the old task's loss by about
``-eta |g_old| |g_new| cos``.  Updating only a random fraction ``p`` of the
parameters scales the expected change by ``p``.
"""

# %%
import numpy as np

from fused.numcore import make_rng
from fused.theory import TheoryProbe, masked_expectation_check

rng = make_rng(0)
g_old, g_new = rng.standard_normal(200), rng.standard_normal(200)
for p in (0.1, 0.5, 1.0):
    probe = TheoryProbe(np.zeros(200), g_old, g_new, 0.01, p)
    chk = masked_expectation_check(probe, 10_000, make_rng(1, p))
    print(f"p={p:.1f}: predicted {chk.predicted:+.5f}, Monte-Carlo {chk.empirical_mean:+.5f}, z={chk.z_score:.2f}")

# %%
# On a real model: a relabelled copy of the data is a "new task" whose
# gradient tends to oppose the old one.
from fused.data import gen_synthetic
from fused.fedengine import local_sgd
from fused.model import new_mlp
from fused.theory import permuted_task, two_task_probe

data = gen_synthetic(4, 6, 40, 0.7, rng)
model, _, _ = local_sgd(new_mlp([6, 16, 4], 0.5, rng), data, 5, 0.1, 16, rng)
res = two_task_probe(model, data, permuted_task(data, [1, 2, 3, 0]), 1e-3)
print(f"cos={res.phi:+.3f} predicted change {res.predicted:+.2e} actual {res.actual:+.2e}")
