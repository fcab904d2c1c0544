"""Correlation-weighted expert update, personalized client redistribution and the
FedAvg / FedProx baseline aggregators."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from .correlation import CorrelationMatrix, select_top_clients
from .expert_pool import ExpertPool
from .nn_core import ParamVector

logger = logging.getLogger(__name__)

BASELINES = ("fedcoe", "fedavg", "fedprox")


@dataclass(frozen=True)
class AggregationConfig:
    tau: float = 0.5
    n_top: int = 5
    baseline: str = "fedcoe"
    fedprox_mu: float = 0.01

    def __post_init__(self):
        if not 0 <= self.tau <= 1:
            raise ValueError(f"tau must be in [0, 1], got {self.tau}")
        if self.n_top < 1:
            raise ValueError(f"n_top must be >= 1, got {self.n_top}")
        if self.baseline not in BASELINES:
            raise ValueError(f"unknown baseline {self.baseline!r}")
        if self.fedprox_mu < 0:
            raise ValueError(f"fedprox_mu must be >= 0, got {self.fedprox_mu}")


def _check_same_spec(vectors: Sequence[ParamVector]) -> None:
    hashes = {v.spec_hash for v in vectors}
    if len(hashes) != 1:
        raise ValueError(f"parameter vectors bound to different specs: {sorted(hashes)}")


def subset_weights(cm: CorrelationMatrix, j: int, subset: Sequence[int]) -> np.ndarray:
    """Row-normalized weights of expert j re-normalized over `subset`.

    Falls back to a uniform mean when the subset carries no mass.
    """
    raw = cm.m_expert[j, list(subset)]
    total = raw.sum()
    if not total > 0:
        logger.warning("expert %d: selected clients carry zero correlation mass, using plain mean", j)
        return np.full(len(subset), 1.0 / len(subset))
    return raw / total


def update_experts(
    pool: ExpertPool,
    clients: Sequence[ParamVector],
    cm: CorrelationMatrix,
    cfg: AggregationConfig,
) -> ExpertPool:
    """theta_E_j <- (1 - tau) theta_E_j + tau * sum_{i in S_j} wbar_ji theta_C_i."""
    _check_same_spec([*pool.experts, *clients])
    if cm.m.shape != (pool.num_experts, len(clients)):
        raise ValueError(f"correlation matrix shape {cm.m.shape} does not match pool/clients")
    n_top = min(cfg.n_top, len(clients))
    tau = cfg.tau
    updated = []
    for j, expert in enumerate(pool.experts):
        subset = select_top_clients(cm, j, n_top)
        w = subset_weights(cm, j, subset)
        mix = np.zeros_like(expert.values)
        for weight, i in zip(w, subset):
            mix += weight * clients[i].values
        updated.append(expert.replace((1.0 - tau) * expert.values + tau * mix))
    return ExpertPool(updated, pool.spec, pool.k_active)


def redistribute_clients(
    clients: Sequence[ParamVector],
    pool: ExpertPool,
    cm: CorrelationMatrix,
    cfg: AggregationConfig,
) -> List[ParamVector]:
    """theta_C_i <- (1 - tau) theta_C_i + tau * sum_j M^(C)_ji theta_E_j, over all K experts."""
    _check_same_spec([*pool.experts, *clients])
    if cm.m.shape != (pool.num_experts, len(clients)):
        raise ValueError(f"correlation matrix shape {cm.m.shape} does not match pool/clients")
    tau = cfg.tau
    experts = pool.stacked()
    out = []
    for i, client in enumerate(clients):
        mix = np.zeros_like(client.values)
        for j in range(pool.num_experts):
            mix += cm.m_client[j, i] * experts[j]
        out.append(client.replace((1.0 - tau) * client.values + tau * mix))
    return out


def fedavg_aggregate(clients: Sequence[ParamVector], sizes: Sequence[int]) -> ParamVector:
    """Size-weighted mean of client parameters."""
    if len(clients) == 0:
        raise ValueError("no clients to aggregate")
    if len(sizes) != len(clients):
        raise ValueError("one size per client is required")
    _check_same_spec(clients)
    sizes = np.asarray(sizes, dtype=np.float64)
    total = sizes.sum()
    if not total > 0:
        raise ValueError("total client size is zero")
    acc = np.zeros_like(clients[0].values)
    for size, client in zip(sizes, clients):
        acc += (size / total) * client.values
    return ParamVector(acc, clients[0].spec_hash)


def fedprox_grad_term(local: ParamVector, global_ref: ParamVector, mu: float) -> ParamVector:
    """Gradient of (mu / 2) ||local - global_ref||^2."""
    if len(local) != len(global_ref):
        raise ValueError(f"length mismatch: {len(local)} vs {len(global_ref)}")
    return local.replace(mu * (local.values - global_ref.values))
