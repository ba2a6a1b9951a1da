"""A small fully connected encoder with hand-written forward/backward passes.

Parameters are float64 throughout. Layers are dense with rectified-linear
activations on every layer except the last, which stays linear so the
embedding can take any sign.

Checkpoint byte layout (all integers little-endian uint32, arrays
little-endian float64, C order):

    bytes 0-3   magic "PSE1"
    bytes 4-7   format version (currently 1)
    bytes 8-11  number of layers L
    then L pairs of (fan_in, fan_out)
    then, per layer: weight matrix (fan_in*fan_out doubles), bias (fan_out doubles)
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

CHECKPOINT_MAGIC = b"PSE1"
CHECKPOINT_VERSION = 1


@dataclass
class DenseLayer:
    """One dense layer; weight is (fan_in, fan_out) so y = x @ weight + bias."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weight = np.ascontiguousarray(self.weight, dtype=np.float64)
        self.bias = np.ascontiguousarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2:
            raise ValueError("weight must be a matrix")
        if self.bias.shape != (self.weight.shape[1],):
            raise ValueError("bias length must equal the weight's fan-out")

    def copy(self) -> "DenseLayer":
        return DenseLayer(self.weight.copy(), self.bias.copy())


@dataclass
class EncoderParams:
    layers: list[DenseLayer]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("encoder needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.weight.shape[1] != nxt.weight.shape[0]:
                raise ValueError(
                    f"layer shapes do not compose: {prev.weight.shape} then {nxt.weight.shape}"
                )
        if self.embedding_dim < 2:
            raise ValueError("embedding size must be at least 2")

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def embedding_dim(self) -> int:
        return self.layers[-1].weight.shape[1]

    def copy(self) -> "EncoderParams":
        return EncoderParams([layer.copy() for layer in self.layers])


@dataclass
class GradBundle:
    """Gradients congruent with an EncoderParams, plus the input gradient."""

    weight_grads: list[np.ndarray]
    bias_grads: list[np.ndarray]
    input_grad: np.ndarray = field(default=None)  # type: ignore[assignment]


def init_params(layer_sizes: list[int], seed: int) -> EncoderParams:
    """Uniform init in +/- sqrt(6 / (fan_in + fan_out)), zero biases."""
    if len(layer_sizes) < 2:
        raise ValueError("need at least an input and an output size")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(layer_sizes, layer_sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weight = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        layers.append(DenseLayer(weight, np.zeros(fan_out)))
    return EncoderParams(layers)


def _check_batch(params: EncoderParams, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != params.input_dim:
        raise ValueError(
            f"batch shape {batch.shape} does not match input dim {params.input_dim}"
        )
    return batch


def _forward(params: EncoderParams, batch: np.ndarray) -> list[np.ndarray]:
    """Activations [a0, a1, ..., aL]; rectifier on all but the last layer."""
    acts = [batch]
    for i, layer in enumerate(params.layers):
        z = acts[-1] @ layer.weight + layer.bias
        if i < len(params.layers) - 1:
            z = np.maximum(z, 0.0)
        acts.append(z)
    return acts


def encode(params: EncoderParams, batch: np.ndarray) -> np.ndarray:
    """Embed a (batch, input_dim) array of normalized flattened patches."""
    return _forward(params, _check_batch(params, batch))[-1]


def encode_backward(
    params: EncoderParams, batch: np.ndarray, upstream_grad: np.ndarray
) -> GradBundle:
    """Reverse-mode gradients of encode for an upstream (batch, m) gradient."""
    batch = _check_batch(params, batch)
    upstream_grad = np.asarray(upstream_grad, dtype=np.float64)
    n = batch.shape[0]
    if upstream_grad.shape != (n, params.embedding_dim):
        raise ValueError(
            f"upstream grad shape {upstream_grad.shape} != {(n, params.embedding_dim)}"
        )
    acts = _forward(params, batch)
    weight_grads: list[np.ndarray] = [None] * len(params.layers)  # type: ignore[list-item]
    bias_grads: list[np.ndarray] = [None] * len(params.layers)  # type: ignore[list-item]
    delta = upstream_grad
    for i in range(len(params.layers) - 1, -1, -1):
        if i < len(params.layers) - 1:
            delta = delta * (acts[i + 1] > 0.0)
        weight_grads[i] = acts[i].T @ delta
        bias_grads[i] = delta.sum(axis=0)
        delta = delta @ params.layers[i].weight.T
    return GradBundle(weight_grads, bias_grads, input_grad=delta)


def param_arrays(params: EncoderParams) -> list[np.ndarray]:
    """Flat view [w0, b0, w1, b1, ...] for optimizers; arrays are shared."""
    out: list[np.ndarray] = []
    for layer in params.layers:
        out.append(layer.weight)
        out.append(layer.bias)
    return out


def grad_arrays(bundle: GradBundle) -> list[np.ndarray]:
    """Gradient arrays in the same order as param_arrays."""
    out: list[np.ndarray] = []
    for w, b in zip(bundle.weight_grads, bundle.bias_grads):
        out.append(w)
        out.append(b)
    return out


def save_checkpoint(params: EncoderParams, path: str | os.PathLike) -> None:
    """Write the documented binary layout (see module docstring)."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(params.layers))]
    for layer in params.layers:
        chunks.append(struct.pack("<II", *layer.weight.shape))
    for layer in params.layers:
        chunks.append(layer.weight.astype("<f8").tobytes(order="C"))
        chunks.append(layer.bias.astype("<f8").tobytes(order="C"))
    with open(os.fspath(path), "wb") as f:
        f.write(b"".join(chunks))


def load_checkpoint(path: str | os.PathLike) -> EncoderParams:
    path = os.fspath(path)
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 12 or blob[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a parameter checkpoint")
    version, n_layers = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    offset = 12
    shapes = []
    for _ in range(n_layers):
        if offset + 8 > len(blob):
            raise DataError(f"{path}: truncated checkpoint header")
        shapes.append(struct.unpack_from("<II", blob, offset))
        offset += 8
    layers = []
    for fan_in, fan_out in shapes:
        w_bytes = fan_in * fan_out * 8
        b_bytes = fan_out * 8
        if offset + w_bytes + b_bytes > len(blob):
            raise DataError(f"{path}: truncated checkpoint payload")
        weight = np.frombuffer(blob, dtype="<f8", count=fan_in * fan_out, offset=offset)
        offset += w_bytes
        bias = np.frombuffer(blob, dtype="<f8", count=fan_out, offset=offset)
        offset += b_bytes
        layers.append(DenseLayer(weight.reshape(fan_in, fan_out).copy(), bias.copy()))
    if offset != len(blob):
        raise DataError(f"{path}: {len(blob) - offset} trailing bytes")
    return EncoderParams(layers)
