"""
Finding the layers that matter
==============================

Every client trains a copy of the global model for one epoch.  The layers
whose parameters move the most are the ones the federation's data pulls on
hardest, and those are where unlearning adapters go.
"""

# %%
# Pretrain an original model on ten non-IID clients.
from fused.config import config_from_dict
from fused.orchestrator import prepare, rank_critical_layers

config = config_from_dict({"seed": 0})
bench, model0, m_r, ledger = prepare(config)
print("layer sizes:", m_r.sizes)
print("parameters per layer:", [m_r.layer(l).size for l in range(1, m_r.L + 1)])

# %%
# Rank layers by data-weighted Manhattan drift.
ranking = rank_critical_layers(config, bench, m_r)
print(ranking.to_csv())
print("critical layers:", ranking.critical)

# %%
# A raw sum favours big layers.  Dividing by the parameter count gives a
# per-parameter view, which can reorder the ranking.
from dataclasses import replace

normalised = replace(config, unlearning=replace(config.unlearning, normalize_by_param_count=True))
print(rank_critical_layers(normalised, bench, m_r).to_csv())

# %%
# Sanity check: if only one layer may train during the probe, it is the only
# one that drifts.
from fused.critical import identify_critical_layers
from fused.numcore import make_rng

planted = identify_critical_layers(m_r, bench.shards, 1, 0.05, 1, make_rng(1), trainable=[3])
print("planted layer 3 ->", planted.order)
