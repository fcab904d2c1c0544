"""Server-side shared gate: a linear softmax router over the K global experts,
trained by KL divergence toward the experts' relative confidence."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np

from .nn_core import SgdConfig, forward, read_checkpoint, softmax, write_checkpoint

PROB_FLOOR = 1e-12


@dataclass
class GateParams:
    weights: np.ndarray  # (K, d)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2 or self.weights.shape[0] < 1:
            raise ValueError("gate weights must be a (K, d) matrix with K >= 1")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("gate weights must be finite")

    @property
    def num_experts(self) -> int:
        return self.weights.shape[0]

    @property
    def input_dim(self) -> int:
        return self.weights.shape[1]

    def copy(self) -> "GateParams":
        return GateParams(self.weights.copy())


def init_gate(num_experts: int, input_dim: int) -> GateParams:
    """Zero weights, i.e. uniform routing until trained."""
    return GateParams(np.zeros((num_experts, input_dim)))


def gate_forward(gate: GateParams, h: np.ndarray) -> np.ndarray:
    """p = softmax(W_g h) for one feature vector or a batch of rows."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape[-1] != gate.input_dim:
        raise ValueError(f"expected feature dim {gate.input_dim}, got {h.shape[-1]}")
    return softmax(h @ gate.weights.T)


def expert_suitability(expert_confidences: np.ndarray) -> np.ndarray:
    """s_j = exp(p_j) / sum_l exp(p_l), row-wise for batches."""
    return softmax(np.asarray(expert_confidences, dtype=np.float64))


def kl_gate_loss(target: np.ndarray, predicted: np.ndarray) -> float:
    """KL(target || predicted). Zero-mass target entries contribute nothing."""
    s = np.asarray(target, dtype=np.float64)
    g = np.maximum(np.asarray(predicted, dtype=np.float64), PROB_FLOOR)
    pos = s > 0
    return float(np.sum(s[pos] * (np.log(s[pos]) - np.log(g[pos]))))


def mean_kl(targets: np.ndarray, predicted: np.ndarray) -> float:
    s = np.asarray(targets, dtype=np.float64)
    g = np.maximum(np.asarray(predicted, dtype=np.float64), PROB_FLOOR)
    terms = np.where(s > 0, s * (np.log(np.where(s > 0, s, 1.0)) - np.log(g)), 0.0)
    return float(np.mean(np.sum(terms, axis=-1)))


def gate_loss_and_grad(
    weights: np.ndarray, h: np.ndarray, targets: np.ndarray
) -> Tuple[float, np.ndarray]:
    """Mean KL over a batch and its gradient w.r.t. W_g.

    With sum(s) = 1, d KL / d logits = softmax(logits) - s.
    """
    h = np.atleast_2d(np.asarray(h, dtype=np.float64))
    s = np.atleast_2d(targets)
    g = softmax(h @ weights.T)
    loss = mean_kl(s, g)
    grad = (g - s).T @ h / h.shape[0]
    return loss, grad


CONFIDENCE_MODES = ("max_prob", "log_true")


def expert_confidences(
    experts: Sequence, spec, features: np.ndarray, labels=None, mode: str = "max_prob"
) -> np.ndarray:
    """(n, K) matrix of per-sample expert confidences.

    max_prob: each expert's probability of its own predicted class (label free).
    log_true: log of the probability each expert gives the true label, so the
    softmax target becomes s_j proportional to P_j(y|x).
    """
    if mode == "max_prob":
        return np.stack([forward(e, spec, features).max(axis=1) for e in experts], axis=1)
    if mode == "log_true":
        if labels is None:
            raise ValueError("log_true confidence needs labels")
        rows = np.arange(len(labels))
        return np.stack(
            [np.log(np.maximum(forward(e, spec, features)[rows, labels], PROB_FLOOR)) for e in experts],
            axis=1,
        )
    raise ValueError(f"unknown confidence mode {mode!r}, expected one of {CONFIDENCE_MODES}")


def suitability_targets(
    experts: Sequence, spec, features: np.ndarray, labels=None, mode: str = "max_prob"
) -> np.ndarray:
    return expert_suitability(expert_confidences(experts, spec, features, labels, mode))


def train_gate(
    gate: GateParams,
    reserved,
    expert_pool,
    cfg: SgdConfig,
    epochs: int,
    seed: int = 0,
    confidence: str = "max_prob",
) -> Tuple[GateParams, List[float]]:
    """Fit the gate to the experts' suitability on the reserved set.

    Returns a new GateParams and the mean KL per epoch (index 0 is the loss
    before any update).
    """
    if len(reserved) == 0:
        raise ValueError("reserved set is empty")
    x = reserved.features
    targets = suitability_targets(
        expert_pool.experts, expert_pool.spec, x, reserved.labels, confidence
    )
    weights = gate.weights.copy()
    velocity = np.zeros_like(weights)
    rng = np.random.default_rng(seed)
    history = [mean_kl(targets, softmax(x @ weights.T))]
    for _ in range(epochs):
        order = rng.permutation(len(reserved))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            _, grad = gate_loss_and_grad(weights, x[idx], targets[idx])
            velocity = cfg.momentum * velocity + grad + cfg.weight_decay * weights
            weights = weights - cfg.learning_rate * velocity
        history.append(mean_kl(targets, softmax(x @ weights.T)))
    return GateParams(weights), history


def top_k_select(p: np.ndarray, k: int) -> List[int]:
    """Indices of the k largest probabilities, descending; ties go to the lower index."""
    p = np.asarray(p)
    if not 1 <= k <= p.shape[-1]:
        raise ValueError(f"k={k} out of range for {p.shape[-1]} experts")
    return [int(j) for j in np.argsort(-p, kind="stable")[:k]]


def top_k_mask(p: np.ndarray, k: int) -> np.ndarray:
    """Row-wise boolean mask of top_k_select for a batch of distributions."""
    order = np.argsort(-p, axis=1, kind="stable")[:, :k]
    mask = np.zeros(p.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=1)
    return mask


def save_gate(path: Union[str, Path], gate: GateParams) -> None:
    header = {"role": "gate", "num_experts": gate.num_experts, "input_dim": gate.input_dim}
    write_checkpoint(path, gate.weights, header)


def load_gate(path: Union[str, Path]) -> GateParams:
    header, values = read_checkpoint(path)
    if header.get("role") != "gate":
        raise ValueError(f"{path} is not a gate checkpoint")
    return GateParams(values.reshape(header["num_experts"], header["input_dim"]))
