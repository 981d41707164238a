"""Sparse unlearning adapters.

An adapter is attached to one critical layer.  It carries a fixed random
binary mask over the layer block (weights row-major, then biases) and a vector
of trainable deltas that is zero wherever the mask is zero.  The deltas are
added to the frozen layer at inference time.  The original model is never
modified, so dropping the adapters restores it exactly.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .model import DenseLayer, LayeredModel, backward
from .numcore import ConfigError, DimensionError, IntegrityError, sgd_step

ADAPTER_MAGIC = b"FUSEDADP"
ADAPTER_VERSION = 1


@dataclass(frozen=True)
class SparseAdapter:
    layer_index: int
    mask: np.ndarray  # bool, length = layer block size
    values: np.ndarray  # float64, same length, zero where mask is False
    keep_rate: float

    def __post_init__(self):
        mask = np.array(self.mask, dtype=bool, copy=True).reshape(-1)
        values = np.array(self.values, dtype=np.float64, copy=True).reshape(-1)
        if mask.shape != values.shape:
            raise DimensionError(f"mask {mask.shape} and values {values.shape} differ")
        if np.any(values[~mask] != 0.0):
            raise ConfigError("adapter values must be zero outside the mask")
        mask.flags.writeable = False
        values.flags.writeable = False
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "values", values)

    @property
    def size(self) -> int:
        return int(self.mask.size)

    @property
    def kept(self) -> np.ndarray:
        """Flat positions where the mask is set, ascending."""
        return np.flatnonzero(self.mask)

    @property
    def n_kept(self) -> int:
        return int(self.mask.sum())

    def kept_values(self) -> np.ndarray:
        return self.values[self.mask]

    def with_values(self, values: np.ndarray) -> "SparseAdapter":
        return SparseAdapter(self.layer_index, self.mask, values, self.keep_rate)

    def with_kept_values(self, kept_values: np.ndarray) -> "SparseAdapter":
        values = np.zeros(self.size)
        values[self.mask] = kept_values
        return self.with_values(values)


@dataclass(frozen=True)
class AdapterSet:
    """Adapters keyed by layer index, stored in ascending layer order."""

    adapters: tuple[SparseAdapter, ...]

    def __post_init__(self):
        ordered = tuple(sorted(self.adapters, key=lambda a: a.layer_index))
        idx = [a.layer_index for a in ordered]
        if len(set(idx)) != len(idx):
            raise ConfigError(f"duplicate adapter layers: {idx}")
        object.__setattr__(self, "adapters", ordered)

    def __getitem__(self, layer_index: int) -> SparseAdapter:
        for a in self.adapters:
            if a.layer_index == layer_index:
                return a
        raise KeyError(layer_index)

    def __iter__(self) -> Iterator[SparseAdapter]:
        return iter(self.adapters)

    def __len__(self) -> int:
        return len(self.adapters)

    def keys(self) -> list[int]:
        return [a.layer_index for a in self.adapters]

    def n_kept(self) -> int:
        return sum(a.n_kept for a in self.adapters)

    def kept_values(self) -> np.ndarray:
        """All trainable values, concatenated in layer order."""
        if not self.adapters:
            return np.zeros(0)
        return np.concatenate([a.kept_values() for a in self.adapters])

    def with_kept_values(self, vec: np.ndarray) -> "AdapterSet":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n_kept(),):
            raise DimensionError(f"expected {self.n_kept()} kept values, got {vec.shape}")
        out, start = [], 0
        for a in self.adapters:
            out.append(a.with_kept_values(vec[start:start + a.n_kept]))
            start += a.n_kept
        return AdapterSet(tuple(out))

    def zeroed(self) -> "AdapterSet":
        return self.with_kept_values(np.zeros(self.n_kept()))


def build_adapter(layer: DenseLayer, layer_index: int, keep_rate: float, rng: np.random.Generator) -> SparseAdapter:
    """Zero-valued adapter whose mask keeps each position independently with probability ``keep_rate``."""
    if not 0 < keep_rate <= 1:
        raise ConfigError(f"keep_rate must lie in (0, 1], got {keep_rate}")
    mask = rng.random(layer.size) < keep_rate
    return SparseAdapter(int(layer_index), mask, np.zeros(layer.size), float(keep_rate))


def build_adapters(model: LayeredModel, layer_indices: Iterable[int], keep_rate: float,
                   rng: np.random.Generator) -> AdapterSet:
    """One adapter per critical layer.  Masks are drawn once, in ascending layer order."""
    return AdapterSet(tuple(build_adapter(model.layer(l), l, keep_rate, rng) for l in sorted(layer_indices)))


def _check_fit(model: LayeredModel, adapters: AdapterSet) -> None:
    for a in adapters:
        if a.size != model.layer(a.layer_index).size:
            raise DimensionError(
                f"adapter for layer {a.layer_index} has {a.size} entries, layer has {model.layer(a.layer_index).size}"
            )


def merge(model: LayeredModel, adapters: AdapterSet) -> LayeredModel:
    """Model with each adapter's deltas added to its layer; other layers shared unchanged."""
    _check_fit(model, adapters)
    merged = model
    for a in adapters:
        flat = model.layer(a.layer_index).flat()
        flat[a.mask] += a.values[a.mask]
        merged = merged.replace_layer(a.layer_index, model.layer(a.layer_index).with_flat(flat))
    return merged


def adapter_gradient_step(model_frozen: LayeredModel, adapters: AdapterSet, x: np.ndarray, labels,
                          lr: float) -> tuple[float, AdapterSet]:
    """One masked SGD step; returns the pre-step batch loss and the updated adapters."""
    loss, grads = backward(merge(model_frozen, adapters), x, labels)
    updated = []
    for a in adapters:
        g = grads[a.layer_index - 1].flat()
        g[~a.mask] = 0.0
        updated.append(a.with_values(sgd_step(a.values, g, lr)))
    return loss, AdapterSet(tuple(updated))


def train_adapter_step(model_frozen: LayeredModel, adapters: AdapterSet, batch: tuple[np.ndarray, np.ndarray],
                       lr: float) -> AdapterSet:
    x, labels = batch
    return adapter_gradient_step(model_frozen, adapters, x, labels, lr)[1]


@dataclass(frozen=True)
class UnlearnedModel:
    """The unlearned model, held as the untouched original plus its adapters."""

    original: LayeredModel
    adapters: AdapterSet

    def merged(self) -> LayeredModel:
        return merge(self.original, self.adapters)


def remove_adapters(merged_context: UnlearnedModel | LayeredModel) -> LayeredModel:
    """Drop the adapters and hand back the original model."""
    if isinstance(merged_context, UnlearnedModel):
        return merged_context.original
    return merged_context


# -- serialization --------------------------------------------------------------
#
# Checkpoint (little-endian): magic "FUSEDADP", u32 version, u32 adapter count,
# then per adapter: u32 layer index, u32 block size, f64 keep rate, u32 kept
# count, u32 kept positions[count], f64 values[count].

def adapters_to_bytes(adapters: AdapterSet) -> bytes:
    buf = io.BytesIO()
    buf.write(ADAPTER_MAGIC)
    buf.write(struct.pack("<II", ADAPTER_VERSION, len(adapters)))
    for a in adapters:
        kept = a.kept
        buf.write(struct.pack("<IIdI", a.layer_index, a.size, a.keep_rate, kept.size))
        buf.write(kept.astype("<u4").tobytes())
        buf.write(a.values[kept].astype("<f8").tobytes())
    return buf.getvalue()


def adapters_from_bytes(data: bytes) -> AdapterSet:
    if data[:8] != ADAPTER_MAGIC:
        raise IntegrityError("not an adapter checkpoint (bad magic)")
    try:
        version, count = struct.unpack_from("<II", data, 8)
        if version != ADAPTER_VERSION:
            raise IntegrityError(f"unsupported adapter version {version}")
        offset = 16
        out = []
        for _ in range(count):
            layer_index, size, keep_rate, n_kept = struct.unpack_from("<IIdI", data, offset)
            offset += struct.calcsize("<IIdI")
            kept = np.frombuffer(data, dtype="<u4", count=n_kept, offset=offset).astype(np.int64)
            offset += 4 * n_kept
            vals = np.frombuffer(data, dtype="<f8", count=n_kept, offset=offset)
            offset += 8 * n_kept
            if n_kept and (kept.max() >= size or np.any(np.diff(kept) <= 0)):
                raise IntegrityError(f"adapter {layer_index}: kept positions invalid")
            mask = np.zeros(size, dtype=bool)
            mask[kept] = True
            values = np.zeros(size)
            values[kept] = vals
            out.append(SparseAdapter(layer_index, mask, values, keep_rate))
    except (struct.error, ValueError) as exc:
        raise IntegrityError(f"truncated or corrupt adapter checkpoint: {exc}") from exc
    if offset != len(data):
        raise IntegrityError(f"adapter checkpoint has {len(data) - offset} trailing bytes")
    return AdapterSet(tuple(out))


def adapters_nbytes(adapters: AdapterSet) -> int:
    """Size of the full encoding (positions and values)."""
    return 16 + sum(struct.calcsize("<IIdI") + 12 * a.n_kept for a in adapters)


def values_payload_nbytes(adapters: AdapterSet) -> int:
    """Size of a values-only payload: u32 count, then per adapter u32 layer, u32 n, f64 values.

    The mask is fixed once distributed, so round-to-round traffic carries
    only the values at kept positions.
    """
    return 4 + sum(8 + 8 * a.n_kept for a in adapters)


def save_adapters(adapters: AdapterSet, path: str | Path) -> None:
    Path(path).write_bytes(adapters_to_bytes(adapters))


def load_adapters(path: str | Path) -> AdapterSet:
    return adapters_from_bytes(Path(path).read_bytes())
