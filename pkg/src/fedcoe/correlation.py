"""Client-expert correlation matrix built on the reserved set."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .data_synth import LabeledSet
from .gating import GateParams, gate_forward
from .nn_core import MlpSpec, ParamVector, forward

DEFAULT_EPSILON = 1e-8


@dataclass
class CorrelationMatrix:
    m: np.ndarray  # (K, N) raw accumulation
    m_expert: np.ndarray  # row-normalized, used for expert aggregation
    m_client: np.ndarray  # column-normalized, used for client redistribution
    epsilon: float = DEFAULT_EPSILON
    client_versions: Tuple[int, ...] = field(default=())

    @classmethod
    def from_raw(
        cls, m: np.ndarray, epsilon: float = DEFAULT_EPSILON, client_versions=()
    ) -> "CorrelationMatrix":
        m = np.asarray(m, dtype=np.float64)
        if np.any(m < 0):
            raise ValueError("correlation mass must be non-negative")
        m_expert = m / (m.sum(axis=1, keepdims=True) + epsilon)
        m_client = m / (m.sum(axis=0, keepdims=True) + epsilon)
        return cls(m, m_expert, m_client, epsilon, tuple(client_versions))

    @property
    def num_experts(self) -> int:
        return self.m.shape[0]

    @property
    def num_clients(self) -> int:
        return self.m.shape[1]


def client_confidence(client_params: ParamVector, spec: MlpSpec, x: np.ndarray, label: int) -> float:
    """Probability the client model assigns to the true label."""
    if not 0 <= label < spec.num_classes:
        raise ValueError(f"label {label} out of range")
    return float(forward(client_params, spec, np.asarray(x, dtype=np.float64))[label])


def confidence_matrix(
    clients: Sequence[ParamVector], spec: MlpSpec, data: LabeledSet
) -> np.ndarray:
    """(|D|, N) matrix of true-label confidences, one column per client."""
    rows = np.arange(len(data))
    return np.stack([forward(c, spec, data.features)[rows, data.labels] for c in clients], axis=1)


def build_matrix(
    clients: Sequence[ParamVector],
    spec: MlpSpec,
    gate: GateParams,
    reserved: LabeledSet,
    epsilon: float = DEFAULT_EPSILON,
    subsample: Optional[int] = None,
    seed: int = 0,
) -> CorrelationMatrix:
    """M = sum over reserved x of p(x) a(x)^T, plus its row/column normalizations.

    `subsample` evaluates a random subset of the reserved set instead of all of it.
    """
    if len(clients) == 0:
        raise ValueError("need at least one client")
    if len(reserved) == 0:
        raise ValueError("reserved set is empty")
    data = reserved
    if subsample is not None and subsample < len(reserved):
        rng = np.random.default_rng(seed)
        data = reserved.subset(np.sort(rng.choice(len(reserved), subsample, replace=False)))
    p = gate_forward(gate, data.features)  # (|D|, K)
    a = confidence_matrix(clients, spec, data)  # (|D|, N)
    m = p.T @ a
    return CorrelationMatrix.from_raw(m, epsilon, tuple(c.version for c in clients))


def select_top_clients(cm: CorrelationMatrix, j: int, n_top: int) -> List[int]:
    """The n_top clients with largest row-normalized weight for expert j; ties to lower index."""
    if not 1 <= n_top <= cm.num_clients:
        raise ValueError(f"n_top={n_top} outside [1, {cm.num_clients}]")
    return [int(i) for i in np.argsort(-cm.m_expert[j], kind="stable")[:n_top]]


def dump_csv(path: Union[str, Path], cm: CorrelationMatrix, which: str = "m") -> None:
    """Rows are experts, columns are clients."""
    mat = getattr(cm, which)
    header = ",".join(f"client_{i}" for i in range(mat.shape[1]))
    lines = [header] + [",".join(f"{v:.10g}" for v in row) for row in mat]
    Path(path).write_text("\n".join(lines) + "\n")
