"""Evaluation: accuracies, loss-threshold membership inference, backdoor metrics, run reports."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .adapter import UnlearnedModel
from .data import Dataset
from .model import LayeredModel, forward, predict
from .numcore import DomainError, per_sample_cross_entropy

REPORT_SCHEMA_VERSION = 1


def _as_model(model_view) -> LayeredModel:
    if isinstance(model_view, UnlearnedModel):
        return model_view.merged()
    return model_view


def accuracy(model_view, dataset: Dataset) -> float:
    """Fraction of rows whose argmax prediction (lowest index on ties) equals the label."""
    if len(dataset) == 0:
        raise DomainError("accuracy of an empty dataset")
    pred = predict(_as_model(model_view), dataset.features)
    return float(np.mean(pred == dataset.labels))


def per_sample_loss(model_view, dataset: Dataset) -> np.ndarray:
    return per_sample_cross_entropy(forward(_as_model(model_view), dataset.features), dataset.labels)


def threshold_attack_accuracy(member_losses: np.ndarray, nonmember_losses: np.ndarray) -> float:
    """Best balanced accuracy of the rule "member iff loss <= t" over all observed ``t``.

    The empty rule (no one is a member) is included, so the result is at
    least 0.5.
    """
    m = np.sort(np.asarray(member_losses, dtype=np.float64))
    nm = np.sort(np.asarray(nonmember_losses, dtype=np.float64))
    if m.size == 0 or nm.size == 0:
        raise DomainError("membership inference needs nonempty member and nonmember sets")
    thresholds = np.unique(np.concatenate([m, nm]))
    tpr = np.searchsorted(m, thresholds, side="right") / m.size
    tnr = 1.0 - np.searchsorted(nm, thresholds, side="right") / nm.size
    return float(max(0.5, np.max(0.5 * (tpr + tnr))))


def mia_attack(target_model, member_set: Dataset, nonmember_set: Dataset) -> float:
    """Membership-inference accuracy of a loss-threshold attacker (lower means less leakage)."""
    if len(member_set) == 0 or len(nonmember_set) == 0:
        raise DomainError("membership inference needs nonempty member and nonmember sets")
    return threshold_attack_accuracy(per_sample_loss(target_model, member_set),
                                     per_sample_loss(target_model, nonmember_set))


@dataclass(frozen=True)
class ZeroClassMetrics:
    zero_acc: float
    precision_zero: float
    # True when nothing was predicted as class 0; precision is then reported as 1.0.
    precision_vacuous: bool


def zero_class_metrics(model, clean_test: Dataset, triggered_test: Dataset) -> ZeroClassMetrics:
    """Class-0 accuracy on clean data and class-0 precision over clean and triggered data."""
    m = _as_model(model)
    zeros = clean_test.labels == 0
    if not np.any(zeros):
        raise DomainError("clean test set has no class-0 samples")
    pred_clean = predict(m, clean_test.features)
    zero_acc = float(np.mean(pred_clean[zeros] == 0))
    pred_trig = predict(m, triggered_test.features) if len(triggered_test) else np.zeros(0, dtype=np.int64)
    preds = np.concatenate([pred_clean, pred_trig])
    truth = np.concatenate([clean_test.labels, triggered_test.labels])
    predicted_zero = preds == 0
    if not np.any(predicted_zero):
        return ZeroClassMetrics(zero_acc, 1.0, True)
    return ZeroClassMetrics(zero_acc, float(np.mean(truth[predicted_zero] == 0)), False)


def backdoor_success(model, triggered_test: Dataset, target_label: int = 0) -> float:
    """Share of triggered rows whose true label is not the target but are predicted as the target."""
    victims = triggered_test.where(triggered_test.labels != target_label)
    if len(victims) == 0:
        raise DomainError("no non-target rows to attack")
    return float(np.mean(predict(_as_model(model), victims.features) == target_label))


@dataclass(frozen=True)
class RunReport:
    """One evaluated model.  Metrics that do not apply to a scenario are NaN."""

    scenario: str
    method: str
    ra: float
    fa: float
    rea: float = math.nan
    mia: float = math.nan
    zero_acc: float = math.nan
    precision_zero: float = math.nan
    precision_vacuous: bool = False
    backdoor_success: float = math.nan
    comp_flops: int = 0
    comm_bytes_up: int = 0
    comm_bytes_down: int = 0
    comm_client_bytes: int = 0
    storage_units: int = 0
    seed: int = 0
    config_digest: str = ""
    schema_version: int = REPORT_SCHEMA_VERSION

    def __post_init__(self):
        for name in ("ra", "fa", "rea", "mia", "zero_acc", "precision_zero", "backdoor_success"):
            v = getattr(self, name)
            if not (math.isnan(v) or 0.0 <= v <= 1.0):
                raise DomainError(f"{name}={v} outside [0, 1]")

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def header(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def row(self) -> list[str]:
        return [_fmt(getattr(self, name)) for name in self.header()]

    def to_csv(self, header: bool = True) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        if header:
            writer.writerow(self.header())
        writer.writerow(self.row())
        return buf.getvalue()

    def to_sidecar(self) -> str:
        """``key = value`` lines, one per field."""
        return "".join(f"{name} = {_fmt(getattr(self, name))}\n" for name in self.header())

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "RunReport":
        kwargs = {}
        for f in fields(cls):
            raw = values[f.name]
            if f.type in ("float", float):
                kwargs[f.name] = float(raw)
            elif f.type in ("int", int):
                kwargs[f.name] = int(raw)
            elif f.type in ("bool", bool):
                kwargs[f.name] = raw == "true"
            else:
                kwargs[f.name] = raw
        return cls(**kwargs)

    @classmethod
    def from_sidecar(cls, text: str) -> "RunReport":
        values = {}
        for line in text.splitlines():
            if line.strip():
                key, _, value = line.partition(" = ")
                values[key] = value
        return cls.from_mapping(values)


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RunReport.header())
    for r in reports:
        writer.writerow(r.row())
    return buf.getvalue()


def reports_from_csv(text: str) -> list[RunReport]:
    reader = csv.DictReader(io.StringIO(text))
    return [RunReport.from_mapping(row) for row in reader]


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)
