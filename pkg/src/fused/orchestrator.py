"""End-to-end unlearning scenarios.

``run_scenario`` builds data, injects the attack for the scenario, pretrains
the original model, identifies critical layers, runs FUSED unlearning and
evaluates it (and optionally a retraining oracle).  Every random draw is
derived from ``config.seed``, so a scenario is a pure function of its config.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence, TextIO

import numpy as np

from .adapter import AdapterSet, UnlearnedModel
from .config import ExperimentConfig
from .critical import DriftRanking, identify_critical_layers
from .data import (
    ClientShard,
    Dataset,
    apply_backdoor,
    apply_label_flip,
    dirichlet_partition,
    gen_synthetic_split,
    overlap_split,
    with_trigger,
)
from .fedengine import (
    CostLedger,
    FedConfig,
    run_fedavg,
    run_full_finetune,
    run_fused_unlearning,
    run_pretraining,
    run_retraining,
    strip_unlearn_data,
)
from .metrics import RunReport, accuracy, backdoor_success, mia_attack, zero_class_metrics
from .model import LayeredModel, new_mlp
from .numcore import ConfigError, make_rng

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Scenario:
    kind: str  # "client" | "class" | "sample"
    clients: tuple[int, ...] = ()
    classes: tuple[int, ...] = ()
    attacked: dict | None = None  # sample scenario: client_id -> attacked row indices
    relearn_rounds: int = 5


@dataclass(frozen=True)
class Workbench:
    """Data, shards and evaluation sets for one configured scenario."""

    scenario: Scenario
    train: Dataset
    test: Dataset
    shards: tuple[ClientShard, ...]
    remaining_test: Dataset  # RA set
    forgotten: Dataset  # FA set
    mia_members: Dataset
    mia_nonmembers: Dataset
    triggered_test: Dataset | None = None

    @property
    def forget_classes(self) -> tuple[int, ...]:
        return self.scenario.classes if self.scenario.kind == "class" else ()

    def remembered_shards(self) -> list[ClientShard]:
        return strip_unlearn_data(self.shards, self.forget_classes)


@dataclass
class ScenarioResult:
    config: ExperimentConfig
    bench: Workbench
    m_r: LayeredModel
    ranking: DriftRanking
    adapters: AdapterSet
    m_f: LayeredModel
    pretrain_ledger: CostLedger
    unlearn_ledger: CostLedger
    reports: list[RunReport]
    retrained: LayeredModel | None = None
    retrain_ledger: CostLedger | None = None

    @property
    def unlearned(self) -> UnlearnedModel:
        return UnlearnedModel(self.m_r, self.adapters)

    def report(self, method: str) -> RunReport:
        for r in self.reports:
            if r.method == method:
                return r
        raise KeyError(method)


def _relabel_flip(ds: Dataset) -> Dataset:
    return Dataset(ds.features, (ds.labels + 1) % ds.class_count, ds.class_count)


def build_workbench(config: ExperimentConfig) -> Workbench:
    """Generate data, partition it and inject the configured attack."""
    d, sc = config.data, config.scenario
    train, test = gen_synthetic_split(d.classes, d.dim, d.per_class_train, d.per_class_test, d.spread,
                                      make_rng(config.seed, "data"))
    shards = dirichlet_partition(train, config.partition.n_clients, config.partition.alpha,
                                 make_rng(config.seed, "partition"))
    relearn = config.evaluation.relearn_rounds
    if sc.kind == "client":
        targets = sorted(set(sc.clients))
        shards = [apply_label_flip(s) if s.client_id in targets else s for s in shards]
        forgotten = Dataset.concat([shards[k].data for k in targets])
        # Held-out rows carrying the same corruption serve as MIA non-members.
        holdout = _relabel_flip(test)
        return Workbench(Scenario("client", clients=tuple(targets), relearn_rounds=relearn), train, test,
                         tuple(shards), test, forgotten, forgotten, holdout)
    if sc.kind == "class":
        classes = tuple(sorted(set(sc.classes)))
        members = train.only_classes(classes)
        return Workbench(Scenario("class", classes=classes, relearn_rounds=relearn), train, test, tuple(shards),
                         test.without_classes(classes), test.only_classes(classes), members,
                         test.only_classes(classes))
    # sample scenario: backdoor
    victims = range(config.partition.n_clients) if sc.backdoor_clients is None else sorted(set(sc.backdoor_clients))
    attacked = {}
    out = list(shards)
    for k in victims:
        s = shards[k]
        poisoned, idx = apply_backdoor(s.data, sc.backdoor_fraction, sc.trigger_value, sc.target_label,
                                       make_rng(config.seed, "backdoor", k))
        out[k] = ClientShard(k, poisoned, True, idx, s.source_indices)
        attacked[k] = idx
    triggered = with_trigger(test, sc.trigger_value)
    members = Dataset.concat([out[k].attacked_part() for k in attacked])
    nonmember_src = triggered.where(triggered.labels != sc.target_label)
    nonmembers = Dataset(nonmember_src.features, np.full(len(nonmember_src), sc.target_label), d.classes)
    return Workbench(Scenario("sample", attacked=attacked, relearn_rounds=relearn), train, test, tuple(out), test,
                     nonmembers, members, nonmembers, triggered)


def _monitor(bench: Workbench) -> Callable[[LayeredModel], tuple[float, float]]:
    return lambda m: (accuracy(m, bench.remaining_test), accuracy(m, bench.forgotten))


def run_relearn(m_f: LayeredModel | UnlearnedModel, shards: Sequence[ClientShard], forgotten: Dataset, rounds: int,
                config: FedConfig) -> float:
    """Keep training the unlearned model with the forgotten data back in; return accuracy on it."""
    if rounds < 1:
        raise ConfigError("relearn needs at least one round")
    start = m_f.merged() if isinstance(m_f, UnlearnedModel) else m_f
    model, _ = run_fedavg(replace(config, rounds=rounds), list(shards), start, "relearn", None, None)
    return accuracy(model, forgotten)


def evaluate(model: LayeredModel, bench: Workbench, config: ExperimentConfig, method: str,
             ledger: CostLedger | None = None, rea: float = math.nan) -> RunReport:
    sc = config.scenario
    extra = {}
    if bench.scenario.kind == "sample":
        zc = zero_class_metrics(model, bench.test, bench.triggered_test)
        extra = dict(zero_acc=zc.zero_acc, precision_zero=zc.precision_zero, precision_vacuous=zc.precision_vacuous,
                     backdoor_success=backdoor_success(model, bench.triggered_test, sc.target_label))
    mia = mia_attack(model, bench.mia_members, bench.mia_nonmembers) if config.evaluation.mia else math.nan
    costs = {}
    if ledger is not None:
        client_bytes = [ledger.per_client_up.get(k, 0) + ledger.per_client_down.get(k, 0)
                        for k in sorted(set(ledger.per_client_up) | set(ledger.per_client_down))]
        costs = dict(comp_flops=ledger.compute_flops, comm_bytes_up=ledger.bytes_up,
                     comm_bytes_down=ledger.bytes_down, comm_client_bytes=max(client_bytes, default=0),
                     storage_units=ledger.server_storage_units)
    return RunReport(
        scenario=bench.scenario.kind,
        method=method,
        ra=accuracy(model, bench.remaining_test),
        fa=accuracy(model, bench.forgotten),
        rea=rea,
        mia=mia,
        seed=config.seed,
        config_digest=config.digest(),
        **extra,
        **costs,
    )


def initial_model(config: ExperimentConfig) -> LayeredModel:
    """The shared starting point of pretraining and of the retraining oracle."""
    return new_mlp(config.layer_sizes, config.model.init_scale, make_rng(config.seed, "init"))


def prepare(config: ExperimentConfig, stream: TextIO | None = None, bench: Workbench | None = None
            ) -> tuple[Workbench, LayeredModel, LayeredModel, CostLedger]:
    """Build the workbench (unless given) and pretrain the original model.

    Returns ``(bench, model0, m_r, ledger)``.
    """
    bench = build_workbench(config) if bench is None else bench
    model0 = initial_model(config)
    m_r, ledger = run_pretraining(config.fed(config.unlearning.pretrain_rounds), bench.shards, model0,
                                  _monitor(bench), stream)
    return bench, model0, m_r, ledger


def rank_critical_layers(config: ExperimentConfig, bench: Workbench, m_r: LayeredModel) -> DriftRanking:
    u = config.unlearning
    probe_shards = bench.shards if u.probe_clients == "all" else bench.remembered_shards()
    ranking = identify_critical_layers(m_r, probe_shards, u.probe_epochs, u.lr, u.K, make_rng(config.seed, "cli"),
                                       batch_size=u.batch_size, normalize_by_param_count=u.normalize_by_param_count,
                                       workers=config.workers)
    log.info("critical layers %s (ranking %s)", ranking.critical, ranking.order)
    return ranking


def run_oracle(config: ExperimentConfig, bench: Workbench, model0: LayeredModel, stream: TextIO | None = None
               ) -> tuple[LayeredModel, CostLedger, RunReport]:
    """Retrain from ``model0`` on remembered data only and evaluate the result."""
    fed = config.fed()
    retrained, ledger = run_retraining(fed, bench.remembered_shards(), model0, _monitor(bench), stream)
    relearn = config.evaluation.relearn_rounds
    rea = run_relearn(retrained, bench.shards, bench.forgotten, relearn, fed) if relearn else math.nan
    return retrained, ledger, evaluate(retrained, bench, config, "retrain", ledger, rea)


def run_scenario(config: ExperimentConfig, stream: TextIO | None = None,
                 bench: Workbench | None = None) -> ScenarioResult:
    """Full pipeline for one configured scenario.

    Reports are produced for the original model (``original``), FUSED
    (``fused``) and, when enabled, the retraining oracle (``retrain``).
    """
    bench, model0, m_r, pre_ledger = prepare(config, stream, bench)
    monitor = _monitor(bench)
    ranking = rank_critical_layers(config, bench, m_r)
    fed = config.fed()
    adapters, m_f, ledger = run_fused_unlearning(fed, bench.shards, m_r, ranking, bench.forget_classes, monitor,
                                                 stream)
    relearn = config.evaluation.relearn_rounds
    rea = run_relearn(m_f, bench.shards, bench.forgotten, relearn, fed) if relearn else math.nan
    reports = [evaluate(m_r, bench, config, "original", pre_ledger),
               evaluate(m_f, bench, config, "fused", ledger, rea)]

    retrained = retrain_ledger = None
    if config.evaluation.retrain_oracle:
        retrained, retrain_ledger, oracle_report = run_oracle(config, bench, model0, stream)
        reports.append(oracle_report)
    return ScenarioResult(config, bench, m_r, ranking, adapters, m_f, pre_ledger, ledger, reports, retrained,
                          retrain_ledger)


@dataclass(frozen=True)
class InterferenceResult:
    """(F-Acc, C-Acc, R-Acc) per method: unique-forgotten, overlapping, unique-remaining knowledge."""

    fused: tuple[float, float, float]
    retrain: tuple[float, float, float]
    finetune: tuple[float, float, float]
    original: tuple[float, float, float]


def run_interference_probe(config: ExperimentConfig, unique_class: int = 1, overlap_class: int = 0,
                           overlap_fraction: float = 0.9, target_client: int = 0) -> InterferenceResult:
    """Knowledge-interference experiment on an overlap split.

    The target client holds every ``unique_class`` row and ``overlap_fraction``
    of the ``overlap_class`` rows; everything else is spread over the other
    clients.  After forgetting the target client, accuracy is measured on the
    three knowledge partitions for FUSED, retraining and naive full fine-tuning.
    """
    d = config.data
    if unique_class == overlap_class or not (0 <= unique_class < d.classes and 0 <= overlap_class < d.classes):
        raise ConfigError("invalid overlap / unique class")
    train, test = gen_synthetic_split(d.classes, d.dim, d.per_class_train, d.per_class_test, d.spread,
                                      make_rng(config.seed, "data"))
    shards = overlap_split(train, config.partition.n_clients, target_client, unique_class, overlap_class,
                           overlap_fraction, make_rng(config.seed, "partition"))
    parts = (test.only_classes([unique_class]), test.only_classes([overlap_class]),
             test.without_classes([unique_class, overlap_class]))

    def accs(m):
        return tuple(accuracy(m, p) for p in parts)

    u = config.unlearning
    model0 = initial_model(config)
    m_r, _ = run_pretraining(config.fed(u.pretrain_rounds), shards, model0)
    probe_shards = shards if u.probe_clients == "all" else strip_unlearn_data(shards)
    ranking = identify_critical_layers(m_r, probe_shards, u.probe_epochs, u.lr, u.K, make_rng(config.seed, "cli"),
                                       batch_size=u.batch_size, normalize_by_param_count=u.normalize_by_param_count)
    fed = config.fed()
    _, m_f, _ = run_fused_unlearning(fed, shards, m_r, ranking)
    retrained, _ = run_retraining(fed, strip_unlearn_data(shards), model0)
    finetuned, _ = run_full_finetune(fed, shards, m_r)
    return InterferenceResult(accs(m_f), accs(retrained), accs(finetuned), accs(m_r))
