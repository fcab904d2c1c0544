"""Two-phase pipeline: server pre-training, then synchronous federated rounds.

Per round (FedCoE and its ablations):
  local training on every client (parallel, fixed client order for reductions)
  -> correlation matrix on the reserved set from this round's uploads
  -> correlation-weighted expert update
  -> gate fine-tune every `gate_update_every` rounds
  -> personalized redistribution of the updated experts
  -> metrics on the models clients now hold.

FedAvg / FedProx rounds are local training, size-weighted averaging and broadcast.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .aggregation import (
    AggregationConfig,
    fedavg_aggregate,
    fedprox_grad_term,
    redistribute_clients,
    update_experts,
)
from .config import RunConfig
from .correlation import CorrelationMatrix, build_matrix
from .data_synth import FederationData, LabeledSet, build_federation
from .expert_pool import ExpertPool, evaluate_global, pretrain_experts, train_epochs
from .gating import GateParams, gate_forward, init_gate, mean_kl, suitability_targets, train_gate
from .nn_core import MlpSpec, ParamVector, accuracy, mlp_init

logger = logging.getLogger(__name__)

MOE_METHODS = ("fedcoe", "ablation_no_gate", "ablation_single_expert")


@dataclass
class RoundMetrics:
    round: int
    global_acc: float
    mean_personalized_acc: float
    per_client_acc: List[float]
    mean_kl_gate: float

    def csv_row(self) -> List[str]:
        return (
            [str(self.round), f"{self.global_acc:.6f}", f"{self.mean_personalized_acc:.6f}"]
            + [f"{a:.6f}" for a in self.per_client_acc]
            + [f"{self.mean_kl_gate:.6f}"]
        )


def metrics_header(num_clients: int) -> List[str]:
    return (
        ["round", "global_acc", "mean_personalized_acc"]
        + [f"per_client_{i}" for i in range(num_clients)]
        + ["mean_kl_gate"]
    )


@dataclass
class FederationState:
    config: RunConfig
    data: FederationData
    spec: MlpSpec
    clients: List[ParamVector]
    pool: Optional[ExpertPool] = None
    gate: Optional[GateParams] = None
    global_model: Optional[ParamVector] = None
    round: int = 0
    last_cm: Optional[CorrelationMatrix] = None
    gate_history: List[float] = field(default_factory=list)

    @property
    def is_moe(self) -> bool:
        return self.config.method in MOE_METHODS


def make_data(cfg: RunConfig) -> FederationData:
    return build_federation(
        num_clients=cfg.num_clients,
        num_experts=cfg.effective_num_experts,
        num_classes=cfg.num_classes,
        samples_per_class=cfg.samples_per_class,
        test_samples_per_class=cfg.test_samples_per_class,
        input_dim=cfg.input_dim,
        spread=cfg.spread,
        alpha=cfg.alpha_dirichlet,
        seed=cfg.seed,
        reserved_fraction=cfg.reserved_fraction,
        test_fraction=cfg.test_fraction,
        min_client_size=cfg.min_client_size,
    )


def aggregation_config(cfg: RunConfig) -> AggregationConfig:
    baseline = cfg.method if cfg.method in ("fedavg", "fedprox") else "fedcoe"
    return AggregationConfig(cfg.tau, cfg.n_top, baseline, cfg.fedprox_mu)


def run_pretrain_phase(data: FederationData, cfg: RunConfig) -> Tuple[ExpertPool, GateParams]:
    """Experts on their class-wise subsets, then the gate on the full reserved set.

    The no-gate ablation keeps the zero gate (uniform routing) and never trains it.
    """
    spec = cfg.mlp_spec()
    sgd = cfg.sgd_config()
    pool = pretrain_experts(
        data.reserved_classwise, spec, sgd, cfg.pretrain_epochs, cfg.seed, cfg.effective_k_active
    )
    gate = init_gate(pool.num_experts, spec.input_dim)
    if cfg.method != "ablation_no_gate" and cfg.pretrain_epochs > 0:
        gate, _ = train_gate(
            gate, data.reserved, pool, sgd, cfg.pretrain_epochs, cfg.seed, cfg.gate_confidence
        )
    return pool, gate


def uniform_expert_average(pool: ExpertPool) -> ParamVector:
    return ParamVector(pool.stacked().mean(axis=0), pool.spec.spec_hash)


def init_state(cfg: RunConfig, data: Optional[FederationData] = None) -> FederationState:
    data = make_data(cfg) if data is None else data
    spec = cfg.mlp_spec()
    if cfg.method in MOE_METHODS:
        pool, gate = run_pretrain_phase(data, cfg)
        start = uniform_expert_average(pool)
        clients = [start.copy() for _ in range(data.num_clients)]
        return FederationState(cfg, data, spec, clients, pool=pool, gate=gate)
    global_model = mlp_init(spec, cfg.seed)
    clients = [global_model.copy() for _ in range(data.num_clients)]
    return FederationState(cfg, data, spec, clients, global_model=global_model)


def local_train(
    client_params: ParamVector,
    shard: LabeledSet,
    cfg: RunConfig,
    method: str,
    rng: np.random.Generator,
    reference: Optional[ParamVector] = None,
    mu: Optional[float] = None,
) -> ParamVector:
    """`local_epochs` of minibatch SGD on the private shard.

    FedProx adds mu * (theta - reference) to every minibatch gradient.
    """
    if len(shard) == 0:
        raise ValueError("client shard is empty")
    sgd = cfg.sgd_config()
    if sgd.local_epochs == 0:
        return client_params.copy()
    extra = None
    if method == "fedprox":
        ref = reference if reference is not None else client_params
        prox_mu = cfg.fedprox_mu if mu is None else mu
        ref_vec = ref.copy()
        extra = lambda theta: fedprox_grad_term(ref_vec.replace(theta), ref_vec, prox_mu).values
    return train_epochs(client_params, cfg.mlp_spec(), shard, sgd, sgd.local_epochs, rng, extra)


def evaluate_personalized(
    clients: Sequence[ParamVector], data: FederationData, spec: MlpSpec
) -> Tuple[float, List[float]]:
    per_client = []
    for i, params in enumerate(clients):
        test = data.client_test[i]
        if len(test) == 0:
            raise ValueError(f"client {i} has an empty test split")
        per_client.append(accuracy(params, spec, test.features, test.labels))
    return float(np.mean(per_client)), per_client


def gate_kl(state: FederationState) -> float:
    if state.pool is None or state.gate is None:
        return float("nan")
    reserved = state.data.reserved
    x = reserved.features
    targets = suitability_targets(
        state.pool.experts, state.spec, x, reserved.labels, state.config.gate_confidence
    )
    return mean_kl(targets, gate_forward(state.gate, x))


def _train_all(state: FederationState, t: int, executor, reference=None) -> List[ParamVector]:
    cfg = state.config

    def job(i: int) -> ParamVector:
        rng = np.random.default_rng([cfg.seed, t, i])
        trained = local_train(
            state.clients[i], state.data.client_train[i], cfg, cfg.method, rng, reference
        )
        return trained.replace(trained.values, version=t)

    indices = range(len(state.clients))
    if executor is None:
        return [job(i) for i in indices]
    return list(executor.map(job, indices))


def run_round(
    state: FederationState, t: int, executor: Optional[ThreadPoolExecutor] = None
) -> Tuple[FederationState, RoundMetrics]:
    cfg = state.config
    agg = aggregation_config(cfg)

    if not state.is_moe:
        uploaded = _train_all(state, t, executor, reference=state.global_model)
        sizes = [len(s) for s in state.data.client_train]
        global_model = fedavg_aggregate(uploaded, sizes)
        global_model = global_model.replace(global_model.values, version=t)
        clients = [global_model.copy() for _ in uploaded]
        g_acc = accuracy(
            global_model, state.spec, state.data.global_test.features, state.data.global_test.labels
        )
        new_state = dataclasses.replace(state, clients=clients, global_model=global_model, round=t)
        mean_p, per_client = evaluate_personalized(clients, state.data, state.spec)
        return new_state, RoundMetrics(t, g_acc, mean_p, per_client, float("nan"))

    uploaded = _train_all(state, t, executor)
    cm = build_matrix(
        uploaded,
        state.spec,
        state.gate,
        state.data.reserved,
        cfg.epsilon,
        subsample=cfg.confidence_subsample,
        seed=cfg.seed * 100003 + t,
    )
    pool = update_experts(state.pool, uploaded, cm, agg)
    gate = state.gate
    history = state.gate_history
    if cfg.method != "ablation_no_gate" and t % cfg.gate_update_every == 0:
        gate, hist = train_gate(
            gate, state.data.reserved, pool, cfg.sgd_config(), cfg.gate_finetune_epochs,
            seed=cfg.seed * 100003 + t, confidence=cfg.gate_confidence,
        )  # fmt: skip
        history = history + hist[-1:]
    clients = redistribute_clients(uploaded, pool, cm, agg)
    new_state = dataclasses.replace(
        state, clients=clients, pool=pool, gate=gate, round=t, last_cm=cm, gate_history=history
    )
    g_acc = evaluate_global(pool, gate, state.data.global_test)
    mean_p, per_client = evaluate_personalized(clients, state.data, state.spec)
    return new_state, RoundMetrics(t, g_acc, mean_p, per_client, gate_kl(new_state))


@dataclass
class RunResult:
    state: FederationState
    metrics: List[RoundMetrics]


def run_federation(
    cfg: RunConfig,
    data: Optional[FederationData] = None,
    threads: Optional[int] = 1,
    metrics_stream: Optional[io.TextIOBase] = None,
    on_round: Optional[Callable[[FederationState, RoundMetrics], None]] = None,
) -> RunResult:
    """Pre-train (MoE methods) and run `cfg.rounds` rounds.

    Rows are written and flushed to `metrics_stream` as rounds complete.
    """
    state = init_state(cfg, data)
    writer = None
    if metrics_stream is not None:
        writer = csv.writer(metrics_stream, lineterminator="\n")
        writer.writerow(metrics_header(state.data.num_clients))
        metrics_stream.flush()
    history: List[RoundMetrics] = []
    executor = ThreadPoolExecutor(max_workers=threads) if threads and threads > 1 else None
    try:
        for t in range(1, cfg.rounds + 1):
            state, metrics = run_round(state, t, executor)
            history.append(metrics)
            if writer is not None:
                writer.writerow(metrics.csv_row())
                metrics_stream.flush()
            if on_round is not None:
                on_round(state, metrics)
    finally:
        if executor is not None:
            executor.shutdown()
    return RunResult(state, history)


def deployable_global(state: FederationState) -> ParamVector:
    """The single model a baseline hands to a newcomer."""
    if state.global_model is None:
        raise ValueError(f"method {state.config.method!r} has no single global model")
    return state.global_model
