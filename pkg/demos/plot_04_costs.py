"""
Communication and storage
=========================

After the first round, only adapter values travel, so per-round traffic
shrinks to roughly the keep rate times the critical layers' share of the
model.  Server storage stays flat as rounds grow.
"""

# %%
from fused.config import config_from_dict
from fused.fedengine import storage_model
from fused.model import model_nbytes
from fused.orchestrator import run_scenario

config = config_from_dict({"model": {"hidden": [128, 128]}, "evaluation": {"retrain_oracle": False,
                                                                         "relearn_rounds": 0}})
res = run_scenario(config)
ledger = res.unlearn_ledger
clients = len(ledger.per_client_up)
rounds = config.unlearning.rounds
per_round = ledger.bytes_up / (clients * rounds)
critical = sum(res.m_r.layer(l).size for l in res.ranking.critical)
print(f"upload per client-round: {per_round:.0f} bytes vs model {model_nbytes(res.m_r)} bytes")
print(f"ratio {per_round / model_nbytes(res.m_r):.4f}; keep_rate x critical share "
      f"{config.unlearning.keep_rate * critical / res.m_r.total_params():.4f}")

# %%
model_units = res.m_r.total_params()
adapter_units = res.adapters.n_kept()
print(f"{'rounds':>6} {'fused':>8} {'history-replay':>15}")
for t in (10, 20, 50, 100):
    print(f"{t:>6} {storage_model('fused', 10, t, model_units, adapter_units):>8} "
          f"{storage_model('history-replay', 10, t, model_units, adapter_units):>15}")
