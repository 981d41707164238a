"""Critical layer identification by per-layer parameter drift.

Every client trains a copy of the global model for a few local epochs.  For
each layer the server measures the Manhattan distance between each client's
copy and the distributed model, averages those distances weighted by client
data volume, and ranks layers from most to least drift.  The top ``K`` layers
receive unlearning adapters.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .data import ClientShard
from .fedengine import map_clients, local_sgd
from .model import DenseLayer, LayeredModel
from .numcore import ConfigError, DimensionError


@dataclass(frozen=True)
class LayerDrift:
    layer_index: int
    diff: float


@dataclass(frozen=True)
class DriftRanking:
    entries: tuple[LayerDrift, ...]  # descending by diff, ties by lower index
    K: int

    @property
    def order(self) -> list[int]:
        return [e.layer_index for e in self.entries]

    @property
    def critical(self) -> list[int]:
        return self.order[: self.K]

    @property
    def remaining(self) -> list[int]:
        return self.order[self.K:]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["layer_index", "diff", "rank"])
        for rank, e in enumerate(self.entries, start=1):
            writer.writerow([e.layer_index, repr(e.diff), rank])
        return buf.getvalue()


def layer_diff(client_layer: DenseLayer, global_layer: DenseLayer) -> float:
    """Sum of absolute element differences over weights and biases."""
    if client_layer.weights.shape != global_layer.weights.shape:
        raise DimensionError(f"layer shapes differ: {client_layer.weights.shape} vs {global_layer.weights.shape}")
    return float(np.abs(client_layer.weights - global_layer.weights).sum()
                 + np.abs(client_layer.biases - global_layer.biases).sum())


def aggregate_diffs(per_client_diffs: Sequence[float], data_volumes: Sequence[float]) -> float:
    """Data-volume weighted mean of one layer's per-client drifts."""
    diffs = np.asarray(per_client_diffs, dtype=np.float64)
    vols = np.asarray(data_volumes, dtype=np.float64)
    if diffs.shape != vols.shape or diffs.ndim != 1:
        raise DimensionError("need one data volume per client diff")
    if np.any(vols < 0):
        raise ConfigError("data volumes must be nonnegative")
    total = vols.sum()
    if not total > 0:
        raise ConfigError("total data volume is zero")
    return float(np.dot(vols / total, diffs))


def rank_layers(layer_diffs: Sequence[float], K: int) -> DriftRanking:
    """Sort aggregated drifts (index 0 is layer 1) descending; equal drifts keep lower index first."""
    diffs = list(layer_diffs)
    if not 1 <= K <= len(diffs):
        raise ConfigError(f"K={K} outside 1..{len(diffs)}")
    order = sorted(range(len(diffs)), key=lambda i: (-diffs[i], i))
    return DriftRanking(tuple(LayerDrift(i + 1, float(diffs[i])) for i in order), K)


def identify_critical_layers(global_model: LayeredModel, shards: Sequence[ClientShard], E: int, lr: float, K: int,
                             rng: np.random.Generator, batch_size: int = 64,
                             trainable: Iterable[int] | None = None, normalize_by_param_count: bool = False,
                             workers: int = 1) -> DriftRanking:
    """One probe round of local training on every client, then rank layers by drift.

    The probe client models are discarded; only the ranking is returned.
    ``trainable`` limits which layers the probe may update.
    ``normalize_by_param_count`` divides each layer's drift by its size before
    ranking (off by default).
    """
    if E < 1:
        raise ConfigError("E must be at least 1")
    if not 1 <= K <= global_model.L:
        raise ConfigError(f"K={K} outside 1..{global_model.L}")
    shards = [s for s in shards if len(s.data)]
    if not shards:
        raise ConfigError("no client shards to probe")
    trainable = None if trainable is None else list(trainable)
    client_rngs = rng.spawn(len(shards))

    def probe(shard: ClientShard, client_rng: np.random.Generator) -> LayeredModel:
        return local_sgd(global_model, shard.data, E, lr, batch_size, client_rng, trainable)[0]

    local_models = map_clients(probe, list(zip(shards, client_rngs)), workers)
    volumes = [len(s.data) for s in shards]
    layer_diffs = []
    for l in range(1, global_model.L + 1):
        per_client = [layer_diff(m.layer(l), global_model.layer(l)) for m in local_models]
        d = aggregate_diffs(per_client, volumes)
        if normalize_by_param_count:
            d /= global_model.layer(l).size
        layer_diffs.append(d)
    return rank_layers(layer_diffs, K)
