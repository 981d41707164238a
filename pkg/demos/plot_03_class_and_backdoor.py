"""
Class and backdoor unlearning
=============================

Forgetting a whole class relies on the remaining clients' gradients pushing
that class's logit down.  Forgetting a backdoor relies on clean data undoing
the trigger response.  Both are shown here next to retraining from scratch.
Neither reaches the retraining oracle reliably at this scale.
"""

# %%
# Class 0 is forgotten.  Overlapping classes (spread 1.0) give the remaining
# data something to overwrite.
from fused.config import config_from_dict
from fused.orchestrator import run_scenario

class_cfg = config_from_dict({
    "scenario": {"kind": "class", "classes": [0]},
    "data": {"spread": 1.0},
    "unlearning": {"rounds": 40, "lr": 0.2, "K": 3},
    "evaluation": {"relearn_rounds": 0},
})
res = run_scenario(class_cfg)
for r in res.reports:
    print(f"{r.method:>9}: RA={r.ra:.3f} FA={r.fa:.3f}")

# %%
# Backdoor: 10% of every client's rows get the last feature set to 3.0 and
# label 0.  PS is the precision of class-0 predictions over clean and
# triggered test rows.
sample_cfg = config_from_dict({"scenario": {"kind": "sample"}, "evaluation": {"relearn_rounds": 0}})
res = run_scenario(sample_cfg)
for r in res.reports:
    print(f"{r.method:>9}: backdoor success={r.backdoor_success:.2f} 0A={r.zero_acc:.2f} PS={r.precision_zero:.2f}")
