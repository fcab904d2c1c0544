"""Dense tanh MLP with a softmax head, written directly against flat parameter vectors.

Every expert, every client model and the FedAvg/FedProx global model share one
`MlpSpec`, so parameter vectors can be averaged coordinate-wise.

Flat layout, per layer in order: weight matrix of shape (fan_in, fan_out) in
row-major order, then the bias vector of length fan_out.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

PARAM_DTYPE = np.float64
DISK_DTYPE = np.dtype("<f4")


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dims: Tuple[int, ...]
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1:
            raise ValueError(f"input_dim must be >= 1, got {self.input_dim}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if any(h < 1 for h in self.hidden_dims):
            raise ValueError(f"hidden dims must be >= 1, got {self.hidden_dims}")

    @property
    def layer_dims(self) -> List[Tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_dims, self.num_classes]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def num_params(self) -> int:
        return sum(i * o + o for i, o in self.layer_dims)

    @property
    def spec_hash(self) -> str:
        return hashlib.sha1(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(int(d["input_dim"]), tuple(d["hidden_dims"]), int(d["num_classes"]))


@dataclass
class ParamVector:
    """Flat model parameters bound to an architecture hash.

    `version` is the round in which the vector was last produced by local
    training (-1 for server-side products such as pre-trained experts).
    """

    values: np.ndarray
    spec_hash: str
    version: int = -1

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=PARAM_DTYPE)
        if self.values.ndim != 1:
            raise ValueError("ParamVector values must be one-dimensional")

    def __len__(self) -> int:
        return self.values.shape[0]

    def replace(self, values: np.ndarray, version: Optional[int] = None) -> "ParamVector":
        return ParamVector(values, self.spec_hash, self.version if version is None else version)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.spec_hash, self.version)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 32
    local_epochs: int = 2

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.local_epochs < 0:
            raise ValueError(f"local_epochs must be >= 0, got {self.local_epochs}")


ParamsLike = Union[ParamVector, np.ndarray]


def _flat(params: ParamsLike) -> np.ndarray:
    if isinstance(params, ParamVector):
        return params.values
    return np.asarray(params, dtype=PARAM_DTYPE)


def unpack(params: ParamsLike, spec: MlpSpec) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Views of (W, b) per layer; W has shape (fan_in, fan_out)."""
    theta = _flat(params)
    if theta.shape[0] != spec.num_params:
        raise ValueError(f"expected {spec.num_params} parameters, got {theta.shape[0]}")
    layers = []
    offset = 0
    for fan_in, fan_out in spec.layer_dims:
        w = theta[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        b = theta[offset : offset + fan_out]
        offset += fan_out
        layers.append((w, b))
    return layers


def mlp_init(spec: MlpSpec, seed: int) -> ParamVector:
    """Glorot-uniform weights, U(-r, r) with r = sqrt(6 / (fan_in + fan_out)); zero biases."""
    rng = np.random.default_rng(seed)
    chunks = []
    for fan_in, fan_out in spec.layer_dims:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        chunks.append(rng.uniform(-limit, limit, size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    return ParamVector(np.concatenate(chunks), spec.spec_hash)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def _as_batch(x: np.ndarray, spec: MlpSpec) -> np.ndarray:
    x = np.asarray(x, dtype=PARAM_DTYPE)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[-1] != spec.input_dim:
        raise ValueError(f"expected input_dim {spec.input_dim}, got {x.shape[-1]}")
    return x


def logits(params: ParamsLike, spec: MlpSpec, x: np.ndarray) -> np.ndarray:
    h = _as_batch(x, spec)
    layers = unpack(params, spec)
    for w, b in layers[:-1]:
        h = np.tanh(h @ w + b)
    w, b = layers[-1]
    return h @ w + b


def forward(params: ParamsLike, spec: MlpSpec, x: np.ndarray) -> np.ndarray:
    """Class probabilities for one sample (1-D `x`) or a batch (2-D `x`)."""
    probs = softmax(logits(params, spec, x))
    return probs[0] if np.ndim(x) == 1 else probs


def predict(params: ParamsLike, spec: MlpSpec, x: np.ndarray) -> np.ndarray:
    return np.argmax(logits(params, spec, x), axis=-1)


def accuracy(params: ParamsLike, spec: MlpSpec, features: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        raise ValueError("cannot compute accuracy on an empty set")
    return float(np.mean(predict(params, spec, features) == labels))


def loss_and_grad_arrays(
    params: ParamsLike, spec: MlpSpec, x: np.ndarray, y: np.ndarray
) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient for a batch given as arrays."""
    x = _as_batch(x, spec)
    y = np.asarray(y, dtype=np.int64)
    n = x.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    if y.shape[0] != n:
        raise ValueError("features and labels differ in length")
    if np.any(y < 0) or np.any(y >= spec.num_classes):
        raise ValueError("label out of range")

    layers = unpack(params, spec)
    acts = [x]
    h = x
    for w, b in layers[:-1]:
        h = np.tanh(h @ w + b)
        acts.append(h)
    w_out, b_out = layers[-1]
    z = h @ w_out + b_out
    z = z - np.max(z, axis=1, keepdims=True)
    log_norm = np.log(np.sum(np.exp(z), axis=1))
    log_probs = z - log_norm[:, None]
    loss = float(-np.mean(log_probs[np.arange(n), y]))

    delta = np.exp(log_probs)
    delta[np.arange(n), y] -= 1.0
    delta /= n

    grads = []
    for layer in range(len(layers) - 1, -1, -1):
        w, _ = layers[layer]
        a_in = acts[layer]
        grads.append((a_in.T @ delta, delta.sum(axis=0)))
        if layer > 0:
            delta = (delta @ w.T) * (1.0 - a_in**2)
    grads.reverse()
    flat = np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in grads])
    return loss, flat


def loss_and_grad(
    params: ParamVector, spec: MlpSpec, batch: Sequence[Tuple[np.ndarray, int]]
) -> Tuple[float, ParamVector]:
    if len(batch) == 0:
        raise ValueError("empty batch")
    x = np.stack([np.asarray(xi, dtype=PARAM_DTYPE) for xi, _ in batch])
    y = np.array([int(label) for _, label in batch])
    loss, grad = loss_and_grad_arrays(params, spec, x, y)
    return loss, ParamVector(grad, getattr(params, "spec_hash", spec.spec_hash))


def sgd_step(
    params: ParamVector, grad: ParamVector, velocity: ParamVector, cfg: SgdConfig
) -> Tuple[ParamVector, ParamVector]:
    p, g, v = _flat(params), _flat(grad), _flat(velocity)
    if not (p.shape == g.shape == v.shape):
        raise ValueError(f"length mismatch: params {p.shape}, grad {g.shape}, velocity {v.shape}")
    v_new = cfg.momentum * v + g + cfg.weight_decay * p
    p_new = p - cfg.learning_rate * v_new
    return params.replace(p_new), velocity.replace(v_new)


def zeros_like(params: ParamVector) -> ParamVector:
    return params.replace(np.zeros_like(params.values))


# Checkpoint format: one UTF-8 JSON header line, then a little-endian uint64
# count, then `count` little-endian float32 values.


def write_checkpoint(path: Union[str, Path], values: np.ndarray, header: dict) -> None:
    values = np.asarray(values).ravel()
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(struct.pack("<Q", values.shape[0]))
        fh.write(values.astype(DISK_DTYPE).tobytes())


def read_checkpoint(path: Union[str, Path]) -> Tuple[dict, np.ndarray]:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        (count,) = struct.unpack("<Q", fh.read(8))
        body = fh.read(count * DISK_DTYPE.itemsize)
    if len(body) != count * DISK_DTYPE.itemsize:
        raise ValueError(f"truncated checkpoint {path}: expected {count} values")
    return header, np.frombuffer(body, dtype=DISK_DTYPE).astype(PARAM_DTYPE)


def save_params(path: Union[str, Path], params: ParamVector, spec: MlpSpec, **extra) -> None:
    if params.spec_hash != spec.spec_hash:
        raise ValueError("parameter vector is bound to a different MlpSpec")
    header = {"role": "model", "spec": spec.to_dict(), "spec_hash": spec.spec_hash, **extra}
    write_checkpoint(path, params.values, header)


def load_params(path: Union[str, Path]) -> Tuple[ParamVector, MlpSpec, dict]:
    header, values = read_checkpoint(path)
    spec = MlpSpec.from_dict(header["spec"])
    if header.get("spec_hash") != spec.spec_hash:
        raise ValueError(f"{path}: spec_hash does not match the stored MlpSpec")
    if values.shape[0] != spec.num_params:
        raise ValueError(f"{path}: expected {spec.num_params} values, got {values.shape[0]}")
    return ParamVector(values, spec.spec_hash), spec, header
