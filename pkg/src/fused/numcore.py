"""Dense numeric kernel: 2-D float64 arrays, loss/activation primitives and seeded RNG.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 and ndim 2.  The
functions here add the shape checks and error classes the rest of the package
relies on.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np


class FusedError(Exception):
    """Base class for all package errors."""


class DimensionError(FusedError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(FusedError, ValueError):
    """Invalid configuration or argument value."""


class DomainError(FusedError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class ProtocolError(FusedError, RuntimeError):
    """Federated protocol cannot proceed (e.g. no participating clients)."""


class IntegrityError(FusedError, ValueError):
    """A checkpoint or payload failed validation."""


def as_tensor(x) -> np.ndarray:
    """Coerce ``x`` to a 2-D float64 array (1-D input becomes a single row)."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise DimensionError(f"expected a 2-D tensor, got ndim={arr.ndim}")
    return arr


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise DomainError(f"{what} contains NaN or Inf")
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} x {b.shape}")
    return check_finite(a @ b, "matmul result")


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(grad_out: np.ndarray, pre_activation: np.ndarray) -> np.ndarray:
    """Gradient through ReLU; the subgradient at exactly 0 is taken as 0."""
    return grad_out * (pre_activation > 0.0)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _check_labels(labels, rows: int, classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != rows:
        raise DimensionError(f"labels length {labels.shape} does not match {rows} rows")
    if not np.issubdtype(labels.dtype, np.integer):
        if not np.all(np.equal(np.mod(labels, 1), 0)):
            raise DomainError("labels must be integer class indices")
        labels = labels.astype(np.int64)
    if rows and (labels.min() < 0 or labels.max() >= classes):
        raise DomainError(f"labels must lie in [0, {classes})")
    return labels


def per_sample_cross_entropy(logits: np.ndarray, labels) -> np.ndarray:
    """Negative log softmax probability of the true class, one value per row."""
    logits = as_tensor(logits)
    labels = _check_labels(labels, logits.shape[0], logits.shape[1])
    return -log_softmax(logits)[np.arange(logits.shape[0]), labels]


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. ``logits``."""
    logits = as_tensor(logits)
    n = logits.shape[0]
    if n == 0:
        raise DimensionError("empty batch")
    labels = _check_labels(labels, n, logits.shape[1])
    logp = log_softmax(logits)
    loss = float(-logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return loss, grad


def sgd_step(params: np.ndarray, grads: np.ndarray, lr: float) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape:
        raise DimensionError(f"sgd_step: params {params.shape} vs grads {grads.shape}")
    if not lr > 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    return check_finite(params - lr * grads, "updated parameters")


# -- randomness -------------------------------------------------------------

def derive_seed(seed: int, *path) -> int:
    """Hash ``seed`` and a path of labels (role, client id, round, ...) to a 64-bit seed.

    The mapping is SHA-256 over a canonical text encoding, so it is stable
    across runs, platforms and Python hash randomisation.
    """
    text = "/".join([str(int(seed))] + [str(p) for p in path])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return struct.unpack("<Q", digest[:8])[0]


def make_rng(seed: int, *path) -> np.random.Generator:
    """Counter-based (Philox) generator for ``seed`` and an optional derivation path.

    Never use a global generator: every consumer derives its own stream, which
    keeps client training reproducible regardless of execution order.
    """
    if path:
        seed = derive_seed(seed, *path)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF)))


def spawn(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Split ``n`` independent child generators off ``rng``."""
    return list(rng.spawn(n))
