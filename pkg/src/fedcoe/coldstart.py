"""Zero-shot onboarding of new clients.

The exchange runs through a `Channel` so every payload that crosses the
client/server boundary is recorded:

  1. server -> client   gate
  2. client -> server   profile (mean routing over local data)
  3. server             assembles sum_j alpha_j theta_E_j
  4. server -> client   model
  5. client             evaluates the received model, no gradient steps
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, List, Optional, Tuple

import numpy as np

from .data_synth import LabeledSet, split_local
from .expert_pool import ExpertPool
from .gating import GateParams, gate_forward
from .nn_core import MlpSpec, ParamVector, accuracy

ALLOWED_PAYLOADS = ("gate", "profile", "model")


@dataclass
class SemanticProfile:
    alpha: np.ndarray
    sample_count: int

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)


@dataclass
class Message:
    sender: str
    receiver: str
    kind: str
    payload: Any


@dataclass
class ProtocolTrace:
    messages: List[Message] = field(default_factory=list)

    def kinds(self) -> List[str]:
        return [m.kind for m in self.messages]


class ProtocolViolation(RuntimeError):
    pass


class Channel:
    """Client/server link that only carries the three cold-start payload types."""

    def __init__(self, trace: Optional[ProtocolTrace] = None):
        self.trace = trace if trace is not None else ProtocolTrace()

    def send(self, sender: str, receiver: str, kind: str, payload):
        expected = {"gate": GateParams, "profile": SemanticProfile, "model": ParamVector}
        if kind not in expected:
            raise ProtocolViolation(f"payload type {kind!r} may not cross the boundary")
        if not isinstance(payload, expected[kind]):
            raise ProtocolViolation(f"{kind!r} payload has type {type(payload).__name__}")
        self.trace.messages.append(Message(sender, receiver, kind, payload))
        return payload


def profile_client(gate: GateParams, local_data: LabeledSet) -> SemanticProfile:
    """Mean gate routing over the client's samples. Labels are never read."""
    if len(local_data) == 0:
        raise ValueError("cannot profile an empty dataset")
    routing = gate_forward(gate, local_data.features)
    return SemanticProfile(routing.mean(axis=0), len(local_data))


def assemble_model(pool: ExpertPool, profile: SemanticProfile) -> ParamVector:
    """theta_init = sum_j alpha_j theta_E_j."""
    alpha = profile.alpha
    if alpha.shape != (pool.num_experts,):
        raise ValueError(f"profile has {alpha.shape} entries, pool has {pool.num_experts} experts")
    theta = np.zeros(pool.spec.num_params)
    for a, expert in zip(alpha, pool.experts):
        theta += a * expert.values
    return ParamVector(theta, pool.spec.spec_hash)


@dataclass
class ServerState:
    """Read-only view of a converged federation needed to serve new clients."""

    pool: ExpertPool
    gate: GateParams

    @property
    def spec(self) -> MlpSpec:
        return self.pool.spec


def cold_start(
    server: ServerState,
    new_client_data: LabeledSet,
    test_fraction: float = 0.2,
    seed: int = 0,
    channel: Optional[Channel] = None,
) -> Tuple[ParamVector, float]:
    """Serve one new client; returns the assembled model and its zero-shot accuracy
    on the client's held-out split."""
    if len(new_client_data) == 0:
        raise ValueError("new client has no data")
    channel = channel if channel is not None else Channel()
    local_train, local_test = split_local(new_client_data, test_fraction, seed)

    received_gate = channel.send("server", "client", "gate", server.gate.copy())
    profile = profile_client(received_gate, local_train)
    uploaded = channel.send("client", "server", "profile", profile)
    theta_init = assemble_model(server.pool, uploaded)
    received = channel.send("server", "client", "model", theta_init)
    acc = accuracy(received, server.spec, local_test.features, local_test.labels)
    return received, acc


def deploy_global(
    model: ParamVector, spec: MlpSpec, new_client_data: LabeledSet, test_fraction=0.2, seed=0
) -> float:
    """Baseline cold start: evaluate a fixed global model on the same held-out split."""
    _, local_test = split_local(new_client_data, test_fraction, seed)
    return accuracy(model, spec, local_test.features, local_test.labels)
