"""Layered feed-forward classifier with per-layer parameter access.

A layer is one dense block (weights ``in x out`` plus a ``1 x out`` bias row).
Layers are addressed by 1-based index, so ``model.layer(1)`` is the input
layer and ``model.layer(model.L)`` produces the logits.  Hidden layers use
ReLU; the last layer is linear.

Models are treated as values: training and merging build new models and never
write into an existing one.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .numcore import (
    ConfigError,
    DimensionError,
    IntegrityError,
    as_tensor,
    check_finite,
    relu,
    relu_backward,
    softmax_cross_entropy,
)

CHECKPOINT_MAGIC = b"FUSEDMDL"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class DenseLayer:
    weights: np.ndarray  # in x out
    biases: np.ndarray  # 1 x out

    def __post_init__(self):
        # Private read-only copies: a layer can never be changed in place.
        w = np.array(as_tensor(self.weights), dtype=np.float64, copy=True)
        b = np.array(as_tensor(self.biases), dtype=np.float64, copy=True)
        if b.shape[0] != 1 or w.shape[1] != b.shape[1]:
            raise DimensionError(f"layer weights {w.shape} incompatible with biases {b.shape}")
        w.flags.writeable = False
        b.flags.writeable = False
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "biases", b)

    @property
    def n_in(self) -> int:
        return self.weights.shape[0]

    @property
    def n_out(self) -> int:
        return self.weights.shape[1]

    @property
    def size(self) -> int:
        return self.weights.size + self.biases.size

    @property
    def shape(self) -> tuple[int, int]:
        """Shape of the block viewed as a single ``(in + 1) x out`` matrix."""
        return (self.n_in + 1, self.n_out)

    def flat(self) -> np.ndarray:
        """Weights (row-major) followed by biases as one 1-D vector."""
        return np.concatenate([self.weights.ravel(), self.biases.ravel()])

    def with_flat(self, vec: np.ndarray) -> "DenseLayer":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.size,):
            raise DimensionError(f"flat vector of length {vec.shape} for a block of size {self.size}")
        nw = self.weights.size
        return DenseLayer(vec[:nw].reshape(self.weights.shape), vec[nw:].reshape(1, -1))


@dataclass(frozen=True)
class LayeredModel:
    layers: tuple[DenseLayer, ...]

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ConfigError("a model needs at least one layer")
        for i in range(len(layers) - 1):
            if layers[i].n_out != layers[i + 1].n_in:
                raise DimensionError(
                    f"layer {i + 1} outputs {layers[i].n_out} but layer {i + 2} expects {layers[i + 1].n_in}"
                )
        object.__setattr__(self, "layers", layers)

    @property
    def L(self) -> int:
        return len(self.layers)

    @property
    def sizes(self) -> list[int]:
        return [self.layers[0].n_in] + [layer.n_out for layer in self.layers]

    def layer(self, l: int) -> DenseLayer:
        _check_index(self, l)
        return self.layers[l - 1]

    def replace_layer(self, l: int, layer: DenseLayer) -> "LayeredModel":
        _check_index(self, l)
        old = self.layers[l - 1]
        if old.weights.shape != layer.weights.shape:
            raise DimensionError(f"replacement for layer {l} has shape {layer.weights.shape}, expected {old.weights.shape}")
        layers = list(self.layers)
        layers[l - 1] = layer
        return LayeredModel(tuple(layers))

    def total_params(self) -> int:
        return sum(layer.size for layer in self.layers)

    def flat(self, layer_indices: Iterable[int] | None = None) -> np.ndarray:
        idx = range(1, self.L + 1) if layer_indices is None else layer_indices
        return np.concatenate([self.layer(l).flat() for l in idx])


def _check_index(model: LayeredModel, l: int) -> None:
    if not (isinstance(l, (int, np.integer)) and 1 <= l <= model.L):
        raise IndexError(f"layer index {l} outside 1..{model.L}")


def new_mlp(layer_sizes: Sequence[int], init_scale: float, rng: np.random.Generator) -> LayeredModel:
    """Weights uniform in ``[-init_scale, init_scale]``, biases zero."""
    sizes = list(layer_sizes)
    if len(sizes) < 2:
        raise ConfigError("layer_sizes needs at least an input and an output size")
    if any(int(s) <= 0 for s in sizes):
        raise ConfigError(f"layer sizes must be positive: {sizes}")
    if init_scale < 0:
        raise ConfigError("init_scale must be nonnegative")
    layers = []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        w = rng.uniform(-init_scale, init_scale, size=(int(n_in), int(n_out)))
        layers.append(DenseLayer(w, np.zeros((1, int(n_out)))))
    return LayeredModel(tuple(layers))


def _forward_cache(model: LayeredModel, x: np.ndarray):
    x = as_tensor(x)
    if x.shape[1] != model.layers[0].n_in:
        raise DimensionError(f"input has {x.shape[1]} features, model expects {model.layers[0].n_in}")
    inputs, pre = [], []
    h = x
    for i, layer in enumerate(model.layers):
        inputs.append(h)
        z = h @ layer.weights + layer.biases
        pre.append(z)
        h = relu(z) if i < model.L - 1 else z
    return h, inputs, pre


def forward(model: LayeredModel, x: np.ndarray) -> np.ndarray:
    """Logits for a batch ``x`` (rows are samples)."""
    logits, _, _ = _forward_cache(model, x)
    return check_finite(logits, "logits")


def backward(model: LayeredModel, x: np.ndarray, labels) -> tuple[float, list[DenseLayer]]:
    """Mean cross-entropy loss and its gradient for every layer.

    Gradients are returned as ``DenseLayer`` blocks with the same shapes as
    the model's layers.
    """
    logits, inputs, pre = _forward_cache(model, x)
    loss, g = softmax_cross_entropy(logits, labels)
    grads: list[DenseLayer] = [None] * model.L  # type: ignore[list-item]
    for i in range(model.L - 1, -1, -1):
        if i < model.L - 1:
            g = relu_backward(g, pre[i])
        grads[i] = DenseLayer(inputs[i].T @ g, g.sum(axis=0, keepdims=True))
        if i > 0:
            g = g @ model.layers[i].weights.T
    return loss, grads


def layer_param_count(model: LayeredModel, l: int) -> int:
    return model.layer(l).size


def predict(model: LayeredModel, x: np.ndarray) -> np.ndarray:
    """Argmax class per row; ties go to the lowest class index."""
    return np.argmax(forward(model, x), axis=1)


# -- checkpoints --------------------------------------------------------------
#
# Layout (little-endian): magic "FUSEDMDL", u32 version, u32 layer count,
# u32 sizes[L + 1], then per layer the weights (row-major) and biases as f64.

def model_to_bytes(model: LayeredModel) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, model.L))
    buf.write(struct.pack(f"<{model.L + 1}I", *model.sizes))
    for layer in model.layers:
        buf.write(layer.weights.astype("<f8").tobytes(order="C"))
        buf.write(layer.biases.astype("<f8").tobytes(order="C"))
    return buf.getvalue()


def model_from_bytes(data: bytes) -> LayeredModel:
    if data[:8] != CHECKPOINT_MAGIC:
        raise IntegrityError("not a model checkpoint (bad magic)")
    try:
        version, n_layers = struct.unpack_from("<II", data, 8)
        if version != CHECKPOINT_VERSION:
            raise IntegrityError(f"unsupported checkpoint version {version}")
        offset = 16
        sizes = struct.unpack_from(f"<{n_layers + 1}I", data, offset)
        offset += 4 * (n_layers + 1)
        layers = []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            w = np.frombuffer(data, dtype="<f8", count=n_in * n_out, offset=offset)
            offset += 8 * n_in * n_out
            b = np.frombuffer(data, dtype="<f8", count=n_out, offset=offset)
            offset += 8 * n_out
            layers.append(DenseLayer(w.reshape(n_in, n_out), b.reshape(1, n_out)))
    except (struct.error, ValueError) as exc:
        raise IntegrityError(f"truncated or corrupt model checkpoint: {exc}") from exc
    if offset != len(data):
        raise IntegrityError(f"model checkpoint has {len(data) - offset} trailing bytes")
    return LayeredModel(tuple(layers))


def model_nbytes(model: LayeredModel) -> int:
    """Serialized size of ``model`` in bytes, without serializing it."""
    return 8 + 8 + 4 * (model.L + 1) + 8 * model.total_params()


def save_model(model: LayeredModel, path: str | Path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path: str | Path) -> LayeredModel:
    return model_from_bytes(Path(path).read_bytes())
