"""
Knowledge interference
======================

The forgotten client owns all of class 1 and most of class 0.  Retraining
loses class 0 almost entirely because the other clients hold little of it.
FUSED starts from the original model, so the shared class survives.  At this
scale it also keeps most of the unique class: no remaining client has any
class-1 data to overwrite it with.
"""

# %%
from fused.config import config_from_dict
from fused.orchestrator import run_interference_probe

config = config_from_dict({"seed": 0, "evaluation": {"relearn_rounds": 0}})
res = run_interference_probe(config, unique_class=1, overlap_class=0, overlap_fraction=0.9)
print(f"{'method':>9} {'F-Acc':>6} {'C-Acc':>6} {'R-Acc':>6}")
for name in ("original", "fused", "retrain", "finetune"):
    f, c, r = getattr(res, name)
    print(f"{name:>9} {f:>6.3f} {c:>6.3f} {r:>6.3f}")
