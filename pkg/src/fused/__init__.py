"""Reversible federated unlearning with sparse adapters on critical layers."""

from .adapter import AdapterSet, SparseAdapter, UnlearnedModel, build_adapter, merge, remove_adapters
from .critical import DriftRanking, LayerDrift, identify_critical_layers
from .data import ClientShard, Dataset, dirichlet_partition, gen_synthetic
from .fedengine import CostLedger, FedConfig, run_fused_unlearning, run_pretraining, run_retraining
from .metrics import RunReport, accuracy, mia_attack
from .model import DenseLayer, LayeredModel, backward, forward, new_mlp
from .numcore import make_rng

__version__ = "0.1.0"
