"""Federated training loops with cost accounting.

Three loops share the same client machinery:

* ``run_pretraining`` - FedAvg over full models, producing the original model.
* ``run_retraining`` - the same loop from a fresh model on remembered data only.
* ``run_fused_unlearning`` - FedAvg over sparse adapters on a frozen model.

Clients run sequentially or on a thread pool; each client gets its own
generator derived from ``(seed, phase, round, client_id)`` and aggregation is
done in client-id order, so results do not depend on the worker count.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Literal, Sequence, TextIO

import numpy as np

from .adapter import (
    AdapterSet,
    adapter_gradient_step,
    adapters_nbytes,
    build_adapters,
    merge,
    values_payload_nbytes,
)
from .data import ClientShard, Dataset
from .model import LayeredModel, backward, model_nbytes
from .numcore import ConfigError, DimensionError, ProtocolError, make_rng, sgd_step

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FedConfig:
    n_clients: int = 50
    rounds: int = 20
    local_epochs: int = 1
    lr: float = 0.005
    batch_size: int = 64
    alpha: float = 1.0
    K: int = 2
    keep_rate: float = 0.1
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        for name in ("n_clients", "local_epochs", "batch_size", "K", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.rounds < 0:
            raise ConfigError("rounds must be nonnegative")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if not self.alpha > 0:
            raise ConfigError("alpha must be positive")
        if not 0 < self.keep_rate <= 1:
            raise ConfigError("keep_rate must lie in (0, 1]")


@dataclass
class CostLedger:
    compute_seconds: float = 0.0
    # Multiply-add count of all client training: a deterministic stand-in for time.
    compute_flops: int = 0
    bytes_up: int = 0
    bytes_down: int = 0
    server_storage_units: int = 0
    per_client_up: dict[int, int] = field(default_factory=dict)
    per_client_down: dict[int, int] = field(default_factory=dict)
    rounds: list[dict] = field(default_factory=list)

    def send(self, client_id: int, nbytes: int) -> None:
        self.bytes_down += nbytes
        self.per_client_down[client_id] = self.per_client_down.get(client_id, 0) + nbytes

    def receive(self, client_id: int, nbytes: int) -> None:
        self.bytes_up += nbytes
        self.per_client_up[client_id] = self.per_client_up.get(client_id, 0) + nbytes


# Optional per-round evaluation hook: model -> (RA, FA).
Monitor = Callable[[LayeredModel], tuple[float, float]]


def _log_round(ledger: CostLedger, phase: str, rnd: int, mean_loss: float, model: LayeredModel,
               monitor: Monitor | None, stream: TextIO | None) -> None:
    ra, fa = monitor(model) if monitor is not None else (float("nan"), float("nan"))
    rec = {
        "phase": phase,
        "round": rnd,
        "mean_client_loss": mean_loss,
        "ra": ra,
        "fa": fa,
        "bytes": ledger.bytes_up + ledger.bytes_down,
        "compute_s": ledger.compute_seconds,
    }
    ledger.rounds.append(rec)
    line = " ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in rec.items())
    log.info(line)
    if stream is not None:
        stream.write(line + "\n")


def fedavg_aggregate(updates: Sequence[tuple[object, float]]):
    """Data-volume weighted mean of parameter blocks.

    A block may be an array, a ``LayeredModel`` or an ``AdapterSet``; every
    update in one call must have the same kind and shape.
    """
    updates = list(updates)
    if not updates:
        raise ProtocolError("nothing to aggregate")
    vols = np.array([float(v) for _, v in updates])
    if np.any(vols <= 0):
        raise ConfigError("data volumes must be positive")
    weights = vols / vols.sum()
    first = updates[0][0]
    if isinstance(first, LayeredModel):
        flat = fedavg_aggregate([(m.flat(), v) for m, v in updates])
        layers, start = [], 0
        for layer in first.layers:
            layers.append(layer.with_flat(flat[start:start + layer.size]))
            start += layer.size
        return LayeredModel(tuple(layers))
    if isinstance(first, AdapterSet):
        for a, _ in updates[1:]:
            if [(x.layer_index, x.size) for x in a] != [(x.layer_index, x.size) for x in first] or any(
                    not np.array_equal(x.mask, y.mask) for x, y in zip(a, first)):
                raise DimensionError("adapter sets with different layers or masks cannot be averaged")
        return first.with_kept_values(fedavg_aggregate([(a.kept_values(), v) for a, v in updates]))
    arrays = [np.asarray(p, dtype=np.float64) for p, _ in updates]
    if any(a.shape != arrays[0].shape for a in arrays):
        raise DimensionError("parameter blocks differ in shape")
    acc = np.zeros_like(arrays[0])
    for w, a in zip(weights, arrays):
        acc += w * a
    return acc


def _flops_per_sample(model: LayeredModel) -> int:
    # forward + two backward products per dense layer
    return 3 * sum(layer.weights.size for layer in model.layers)


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterable[np.ndarray]:
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def local_sgd(model: LayeredModel, data: Dataset, epochs: int, lr: float, batch_size: int,
              rng: np.random.Generator, trainable: Iterable[int] | None = None) -> tuple[LayeredModel, float, int]:
    """Plain minibatch SGD on one client.

    ``trainable`` restricts updates to the given layer indices (all layers
    when ``None``).  Returns the trained model, the mean batch loss and the
    multiply-add count.
    """
    if len(data) == 0:
        raise ProtocolError("client has no data")
    train = set(range(1, model.L + 1)) if trainable is None else set(trainable)
    losses, flops = [], 0
    per_sample = _flops_per_sample(model)
    for _ in range(epochs):
        for idx in _batches(len(data), batch_size, rng):
            loss, grads = backward(model, data.features[idx], data.labels[idx])
            losses.append(loss)
            flops += per_sample * idx.size
            for l in sorted(train):
                layer = model.layer(l)
                model = model.replace_layer(l, layer.with_flat(sgd_step(layer.flat(), grads[l - 1].flat(), lr)))
    return model, float(np.mean(losses)), flops


def local_adapter_training(m_r: LayeredModel, adapters: AdapterSet, data: Dataset, epochs: int, lr: float,
                           batch_size: int, rng: np.random.Generator) -> tuple[AdapterSet, float, int]:
    """Train adapters on one client with ``m_r`` frozen."""
    if len(data) == 0:
        raise ProtocolError("client has no data")
    losses, flops = [], 0
    per_sample = _flops_per_sample(m_r)
    for _ in range(epochs):
        for idx in _batches(len(data), batch_size, rng):
            loss, adapters = adapter_gradient_step(m_r, adapters, data.features[idx], data.labels[idx], lr)
            losses.append(loss)
            flops += per_sample * idx.size
    return adapters, float(np.mean(losses)), flops


def map_clients(fn, jobs: list, workers: int) -> list:
    if workers <= 1 or len(jobs) <= 1:
        return [fn(*job) for job in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda job: fn(*job), jobs))


def _timed(fn):
    def run(*args):
        t0 = time.perf_counter()
        out = fn(*args)
        return out, time.perf_counter() - t0
    return run


def remembered_data(shard: ClientShard, forget_classes: Iterable[int] = ()) -> Dataset:
    """The part of a shard that stays in training after unlearning."""
    ds = shard.clean_part()
    forget = list(forget_classes)
    return ds.without_classes(forget) if forget else ds


def strip_unlearn_data(shards: Sequence[ClientShard], forget_classes: Iterable[int] = ()) -> list[ClientShard]:
    """Shards reduced to remembered data; clients left with nothing are dropped."""
    forget = list(forget_classes)
    out = []
    for s in shards:
        ds = remembered_data(s, forget)
        if len(ds):
            out.append(ClientShard(s.client_id, ds))
    return out


def run_fedavg(config: FedConfig, shards: Sequence[ClientShard], model0: LayeredModel, phase: str,
                monitor: Monitor | None, stream: TextIO | None) -> tuple[LayeredModel, CostLedger]:
    ledger = CostLedger()
    model = model0
    if config.rounds == 0:
        return model, ledger
    if not shards:
        raise ProtocolError(f"{phase}: no clients with data")
    nbytes = model_nbytes(model0)
    ledger.server_storage_units = model0.total_params()

    def client(shard: ClientShard, rnd: int, global_model: LayeredModel):
        rng = make_rng(config.seed, phase, rnd, shard.client_id)
        return local_sgd(global_model, shard.data, config.local_epochs, config.lr, config.batch_size, rng)

    for rnd in range(config.rounds):
        for s in shards:
            ledger.send(s.client_id, nbytes)
        results = map_clients(_timed(client), [(s, rnd, model) for s in shards], config.workers)
        updates = []
        for s, ((local, loss, flops), secs) in zip(shards, results):
            ledger.receive(s.client_id, nbytes)
            ledger.compute_seconds += secs
            ledger.compute_flops += flops
            updates.append((local, len(s.data)))
        model = fedavg_aggregate(updates)
        mean_loss = float(np.mean([r[0][1] for r in results]))
        _log_round(ledger, phase, rnd, mean_loss, model, monitor, stream)
    return model, ledger


def run_pretraining(config: FedConfig, shards: Sequence[ClientShard], model0: LayeredModel,
                    monitor: Monitor | None = None, stream: TextIO | None = None) -> tuple[LayeredModel, CostLedger]:
    """FedAvg on every shard's full data (attacked rows included)."""
    return run_fedavg(config, shards, model0, "pretrain", monitor, stream)


def run_retraining(config: FedConfig, shards_without_unlearn_data: Sequence[ClientShard], model_init: LayeredModel,
                   monitor: Monitor | None = None, stream: TextIO | None = None) -> tuple[LayeredModel, CostLedger]:
    """Train ``model_init`` from scratch on data that excludes everything to forget."""
    shards = [s for s in shards_without_unlearn_data if len(s.data)]
    if not shards:
        raise ProtocolError("retraining needs at least one client with remaining data")
    return run_fedavg(config, shards, model_init, "retrain", monitor, stream)


def run_fused_unlearning(config: FedConfig, shards: Sequence[ClientShard], m_r: LayeredModel, ranking,
                         forget_classes: Iterable[int] = (), monitor: Monitor | None = None,
                         stream: TextIO | None = None) -> tuple[AdapterSet, LayeredModel, CostLedger]:
    """Unlearn by training sparse adapters on the critical layers of frozen ``m_r``.

    Only clients holding remembered data take part.  In the first round they
    receive ``m_r`` and the full adapter encoding (mask positions and
    values); afterwards only adapter values travel in either direction.
    """
    critical = list(ranking.critical) if hasattr(ranking, "critical") else list(ranking)
    participants = strip_unlearn_data(shards, forget_classes)
    if not participants:
        raise ProtocolError("no client holds remembered data")
    adapters = build_adapters(m_r, critical, config.keep_rate, make_rng(config.seed, "adapter-mask"))
    ledger = CostLedger(server_storage_units=m_r.total_params() + adapters.n_kept())
    model_bytes = model_nbytes(m_r)
    full_bytes = adapters_nbytes(adapters)
    values_bytes = values_payload_nbytes(adapters)

    def client(shard: ClientShard, rnd: int, global_adapters: AdapterSet):
        rng = make_rng(config.seed, "unlearn", rnd, shard.client_id)
        return local_adapter_training(m_r, global_adapters, shard.data, config.local_epochs, config.lr,
                                      config.batch_size, rng)

    for rnd in range(config.rounds):
        for s in participants:
            ledger.send(s.client_id, model_bytes + full_bytes if rnd == 0 else values_bytes)
        results = map_clients(_timed(client), [(s, rnd, adapters) for s in participants], config.workers)
        updates = []
        for s, ((local, loss, flops), secs) in zip(participants, results):
            ledger.receive(s.client_id, values_bytes)
            ledger.compute_seconds += secs
            ledger.compute_flops += flops
            updates.append((local, len(s.data)))
        adapters = fedavg_aggregate(updates)
        mean_loss = float(np.mean([r[0][1] for r in results]))
        _log_round(ledger, "unlearn", rnd, mean_loss, merge(m_r, adapters), monitor, stream)
    return adapters, merge(m_r, adapters), ledger


def run_full_finetune(config: FedConfig, shards: Sequence[ClientShard], m_r: LayeredModel,
                      forget_classes: Iterable[int] = (), monitor: Monitor | None = None,
                      stream: TextIO | None = None) -> tuple[LayeredModel, CostLedger]:
    """Naive unlearning baseline: keep training all of ``m_r`` on remembered data."""
    participants = strip_unlearn_data(shards, forget_classes)
    if not participants:
        raise ProtocolError("no client holds remembered data")
    return run_fedavg(config, participants, m_r, "finetune", monitor, stream)


def storage_model(method: Literal["fused", "history-replay"], n_clients: int, n_rounds: int, model_units: int,
                  adapter_units: int) -> int:
    """Server-side storage in parameter units.

    History-replay methods keep every client model and the global model for
    every round; FUSED keeps one global model and its adapters.
    """
    for name, v in (("n_clients", n_clients), ("n_rounds", n_rounds), ("model_units", model_units)):
        if v < 1:
            raise ConfigError(f"{name} must be positive")
    if adapter_units < 0:
        raise ConfigError("adapter_units must be nonnegative")
    if method == "history-replay":
        return (n_clients + 1) * n_rounds * model_units
    if method == "fused":
        return model_units + adapter_units
    raise ConfigError(f"unknown storage method {method!r}")


__all__ = [
    "CostLedger",
    "FedConfig",
    "fedavg_aggregate",
    "local_adapter_training",
    "local_sgd",
    "map_clients",
    "remembered_data",
    "run_fedavg",
    "run_fused_unlearning",
    "run_full_finetune",
    "run_pretraining",
    "run_retraining",
    "storage_model",
    "strip_unlearn_data",
]
