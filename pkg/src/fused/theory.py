"""First-order probes of knowledge overwriting.

When a model sitting at the optimum of an old task takes a gradient step on a
new task, the old-task loss changes by about
``-eta * |g_old| * |g_new| * cos(g_old, g_new)``.  If only a random subset of
parameters (kept with probability ``p``) is updated, the expected change is
scaled by ``p``.  These helpers compute both predictions and check them
against sampled masks and against real models.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .data import Dataset
from .model import LayeredModel, backward, forward
from .numcore import ConfigError, DimensionError, DomainError, per_sample_cross_entropy


@dataclass(frozen=True)
class TheoryProbe:
    theta1: np.ndarray
    grad_t1: np.ndarray
    grad_t2: np.ndarray
    eta: float
    keep_rate: float = 1.0

    def __post_init__(self):
        g1 = np.asarray(self.grad_t1, dtype=np.float64).reshape(-1)
        g2 = np.asarray(self.grad_t2, dtype=np.float64).reshape(-1)
        theta = np.asarray(self.theta1, dtype=np.float64).reshape(-1)
        if not (g1.shape == g2.shape == theta.shape):
            raise DimensionError(f"vector lengths differ: {theta.shape}, {g1.shape}, {g2.shape}")
        if not self.eta > 0:
            raise ConfigError("eta must be positive")
        if not 0 < self.keep_rate <= 1:
            raise ConfigError("keep_rate must lie in (0, 1]")
        object.__setattr__(self, "theta1", theta)
        object.__setattr__(self, "grad_t1", g1)
        object.__setattr__(self, "grad_t2", g2)


def _norms(probe: TheoryProbe) -> tuple[float, float]:
    n1 = float(np.linalg.norm(probe.grad_t1))
    n2 = float(np.linalg.norm(probe.grad_t2))
    if n1 == 0.0 or n2 == 0.0:
        raise DomainError("cosine similarity is undefined for a zero gradient")
    return n1, n2


def gradient_cosine(probe: TheoryProbe) -> float:
    n1, n2 = _norms(probe)
    return float(np.dot(probe.grad_t1, probe.grad_t2)) / (n1 * n2)


def predicted_degradation(probe: TheoryProbe) -> float:
    """First-order change of the old-task loss after one full step on the new task."""
    n1, n2 = _norms(probe)
    return -probe.eta * n1 * n2 * gradient_cosine(probe)


@dataclass(frozen=True)
class MaskedCheck:
    empirical_mean: float
    predicted: float
    z_score: float
    std_error: float
    trials: np.ndarray


def masked_expectation_check(probe: TheoryProbe, trials: int, rng: np.random.Generator) -> MaskedCheck:
    """Sample Bernoulli(keep_rate) masks and compare the mean first-order change with its closed form.

    Each trial evaluates ``g1 . (-eta * (v * g2))`` written in the same
    form as ``predicted_degradation``, so with ``keep_rate == 1`` every trial
    reproduces that value exactly.  A zero new-task gradient gives zeros.
    """
    if trials < 1000:
        raise ConfigError("need at least 1000 trials")
    g1, g2, eta, p = probe.grad_t1, probe.grad_t2, probe.eta, probe.keep_rate
    if not np.any(g2):
        zeros = np.zeros(trials)
        return MaskedCheck(0.0, 0.0, 0.0, 0.0, zeros)
    n1, n2 = _norms(probe)
    values = np.empty(trials)
    for t in range(trials):
        v = rng.random(g2.size) < p
        cos_v = float(np.dot(g1, v * g2)) / (n1 * n2)
        values[t] = -eta * n1 * n2 * cos_v
    predicted = -eta * p * n1 * n2 * gradient_cosine(probe)
    # Shifted mean: exact when all trials coincide.
    shifted = values - values[0]
    mean = values[0] + float(np.mean(shifted))
    se = float(np.std(shifted, ddof=1)) / np.sqrt(trials)
    diff = abs(mean - predicted)
    z = 0.0 if diff == 0.0 else (np.inf if se == 0.0 else diff / se)
    return MaskedCheck(float(mean), float(predicted), float(z), se, values)


# -- probes on real models --------------------------------------------------------

def flat_gradient(model: LayeredModel, data: Dataset, layer_indices: Iterable[int] | None = None) -> np.ndarray:
    """Mean-loss gradient over ``data`` flattened across the chosen layers (all by default)."""
    _, grads = backward(model, data.features, data.labels)
    idx = range(1, model.L + 1) if layer_indices is None else list(layer_indices)
    return np.concatenate([grads[l - 1].flat() for l in idx])


def mean_loss(model: LayeredModel, data: Dataset) -> float:
    return float(per_sample_cross_entropy(forward(model, data.features), data.labels).mean())


def _step(model: LayeredModel, grad: np.ndarray, eta: float, layer_indices: Sequence[int]) -> LayeredModel:
    start = 0
    for l in layer_indices:
        layer = model.layer(l)
        model = model.replace_layer(l, layer.with_flat(layer.flat() - eta * grad[start:start + layer.size]))
        start += layer.size
    return model


@dataclass(frozen=True)
class TwoTaskProbe:
    phi: float
    predicted: float
    actual: float


def two_task_probe(model: LayeredModel, task1: Dataset, task2: Dataset, eta: float,
                   layer_indices: Sequence[int] | None = None, mask: np.ndarray | None = None) -> TwoTaskProbe:
    """Take one (optionally masked) step on ``task2`` and measure the change of the ``task1`` loss."""
    idx = list(range(1, model.L + 1)) if layer_indices is None else list(layer_indices)
    g1 = flat_gradient(model, task1, idx)
    g2 = flat_gradient(model, task2, idx)
    probe = TheoryProbe(model.flat(idx), g1, g2, eta)
    step = g2 if mask is None else g2 * mask
    actual = mean_loss(_step(model, step, eta, idx), task1) - mean_loss(model, task1)
    predicted = predicted_degradation(probe) if mask is None else -eta * float(np.dot(g1, step))
    return TwoTaskProbe(gradient_cosine(probe), predicted, actual)


def permuted_task(ds: Dataset, permutation: Sequence[int]) -> Dataset:
    """Same inputs, labels mapped through ``permutation``."""
    perm = np.asarray(permutation, dtype=np.int64)
    if sorted(perm.tolist()) != list(range(ds.class_count)):
        raise ConfigError("not a permutation of the classes")
    return Dataset(ds.features, perm[ds.labels], ds.class_count)


def quadratic_degradation(a: np.ndarray, b: np.ndarray) -> Callable[[np.ndarray], float]:
    """Loss ``0.5 x^T A x + b^T x``; handy as an exactly differentiable toy task."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return lambda x: float(0.5 * x @ a @ x + b @ x)
