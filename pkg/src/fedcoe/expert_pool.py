"""Global expert pool: class-wise pre-training and top-k mixture inference."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Union

import numpy as np

from .data_synth import LabeledSet
from .gating import GateParams, gate_forward, top_k_mask
from .nn_core import (
    MlpSpec,
    ParamVector,
    SgdConfig,
    forward,
    load_params,
    loss_and_grad_arrays,
    mlp_init,
    save_params,
)


@dataclass
class ExpertPool:
    experts: List[ParamVector]
    spec: MlpSpec
    k_active: int

    def __post_init__(self):
        if not self.experts:
            raise ValueError("expert pool is empty")
        if any(e.spec_hash != self.spec.spec_hash for e in self.experts):
            raise ValueError("all experts must be bound to the pool's MlpSpec")
        if not 1 <= self.k_active <= len(self.experts):
            raise ValueError(f"k_active={self.k_active} outside [1, {len(self.experts)}]")

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    def copy(self) -> "ExpertPool":
        return ExpertPool([e.copy() for e in self.experts], self.spec, self.k_active)

    def stacked(self) -> np.ndarray:
        return np.stack([e.values for e in self.experts])


def train_epochs(
    params: ParamVector,
    spec: MlpSpec,
    data: LabeledSet,
    cfg: SgdConfig,
    epochs: int,
    rng: np.random.Generator,
    extra_grad=None,
) -> ParamVector:
    """Minibatch SGD with momentum; velocity starts at zero.

    `extra_grad(theta)` is added to every minibatch gradient (FedProx hook).
    """
    if len(data) == 0:
        raise ValueError("cannot train on an empty set")
    theta = params.values.copy()
    velocity = np.zeros_like(theta)
    x, y = data.features, data.labels
    for _ in range(epochs):
        order = rng.permutation(len(data))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            _, grad = loss_and_grad_arrays(theta, spec, x[idx], y[idx])
            if extra_grad is not None:
                grad = grad + extra_grad(theta)
            velocity = cfg.momentum * velocity + grad + cfg.weight_decay * theta
            theta = theta - cfg.learning_rate * velocity
    return params.replace(theta)


def pretrain_experts(
    classwise: Sequence[LabeledSet],
    spec: MlpSpec,
    cfg: SgdConfig,
    epochs: int,
    seed: int,
    k_active: int = 1,
) -> ExpertPool:
    """Expert j starts from mlp_init(spec, seed + j) and sees only classwise[j]."""
    if not classwise:
        raise ValueError("no class-wise subsets given")
    experts = []
    for j, subset in enumerate(classwise):
        if len(subset) == 0:
            raise ValueError(f"class-wise subset {j} is empty")
        init = mlp_init(spec, seed + j)
        rng = np.random.default_rng([seed, j])
        experts.append(train_epochs(init, spec, subset, cfg, epochs, rng) if epochs else init)
    return ExpertPool(experts, spec, min(k_active, len(experts)))


def mixture_outputs(pool: ExpertPool, gate: GateParams, features: np.ndarray) -> np.ndarray:
    """y = sum over the top-k experts of p_j * E_j(x), for a batch; p_j are not renormalized."""
    features = np.atleast_2d(features)
    p = gate_forward(gate, features)
    if p.shape[1] != pool.num_experts:
        raise ValueError(f"gate routes to {p.shape[1]} experts but pool has {pool.num_experts}")
    weights = np.where(top_k_mask(p, pool.k_active), p, 0.0)
    y = np.zeros((features.shape[0], pool.spec.num_classes))
    for j, expert in enumerate(pool.experts):
        active = weights[:, j] > 0
        if active.any():
            y[active] += weights[active, j, None] * forward(expert, pool.spec, features[active])
    return y


def global_inference(pool: ExpertPool, gate: GateParams, x: np.ndarray) -> np.ndarray:
    """Gate-weighted top-k mixture output for one sample. Its mass equals the
    selected routing mass, not 1; only its argmax is used for accuracy."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("global_inference takes a single feature vector")
    return mixture_outputs(pool, gate, x[None, :])[0]


def evaluate_global(pool: ExpertPool, gate: GateParams, test: LabeledSet) -> float:
    if len(test) == 0:
        raise ValueError("test set is empty")
    pred = np.argmax(mixture_outputs(pool, gate, test.features), axis=1)
    return float(np.mean(pred == test.labels))


def per_class_accuracy(params: ParamVector, spec: MlpSpec, data: LabeledSet) -> np.ndarray:
    """Accuracy per class (nan for classes absent from `data`)."""
    pred = np.argmax(forward(params, spec, data.features), axis=1)
    acc = np.full(data.num_classes, np.nan)
    for c in range(data.num_classes):
        mask = data.labels == c
        if mask.any():
            acc[c] = np.mean(pred[mask] == c)
    return acc


def save_pool(directory: Union[str, Path], pool: ExpertPool) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for j, expert in enumerate(pool.experts):
        name = f"expert_{j}.ckpt"
        save_params(directory / name, expert, pool.spec, role="expert", index=j)
        files.append(name)
    manifest = {"experts": files, "num_experts": pool.num_experts, "k_active": pool.k_active}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_pool(directory: Union[str, Path]) -> ExpertPool:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    experts, spec = [], None
    for name in manifest["experts"]:
        params, spec, _ = load_params(directory / name)
        experts.append(params)
    if len(experts) != manifest["num_experts"]:
        raise ValueError("manifest expert count does not match listed files")
    return ExpertPool(experts, spec, int(manifest["k_active"]))
