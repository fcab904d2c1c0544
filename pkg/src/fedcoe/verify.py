"""Brute-force oracle suite behind `fedcoe verify`.

Every property compares the vectorized implementation against a slow
loop-based reference written independently of it (plain Python loops and
math.exp, no shared helpers besides unpacking the flat parameter layout).
Implementations are injectable so a deliberately broken one can be checked
to fail.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import aggregation, coldstart, correlation, gating, nn_core
from .aggregation import AggregationConfig
from .coldstart import SemanticProfile
from .correlation import CorrelationMatrix
from .data_synth import LabeledSet
from .expert_pool import ExpertPool
from .gating import GateParams
from .nn_core import MlpSpec, ParamVector

ORACLE_TOL = 1e-9
SIMPLEX_TOL = 1e-6
FD_STEP = 1e-4
FD_TOL = 1e-3


@dataclass
class Implementations:
    build_matrix: Callable = correlation.build_matrix
    update_experts: Callable = aggregation.update_experts
    redistribute_clients: Callable = aggregation.redistribute_clients
    assemble_model: Callable = coldstart.assemble_model
    loss_and_grad_arrays: Callable = nn_core.loss_and_grad_arrays
    gate_loss_and_grad: Callable = gating.gate_loss_and_grad
    gate_forward: Callable = gating.gate_forward
    expert_suitability: Callable = gating.expert_suitability


@dataclass
class PropertyResult:
    name: str
    passed: bool
    detail: str = ""
    seconds: float = 0.0

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"{tag}  {self.name}  ({self.detail}; {self.seconds:.2f}s)"


# ---- loop references ----


def _ref_softmax(z: Sequence[float]) -> List[float]:
    top = max(z)
    e = [math.exp(v - top) for v in z]
    s = sum(e)
    return [v / s for v in e]


def _ref_forward(values: np.ndarray, spec: MlpSpec, x: Sequence[float]) -> List[float]:
    h = [float(v) for v in x]
    layers = nn_core.unpack(values, spec)
    for li, (w, b) in enumerate(layers):
        out = []
        for o in range(w.shape[1]):
            acc = float(b[o])
            for k in range(w.shape[0]):
                acc += h[k] * float(w[k, o])
            out.append(acc)
        h = out if li == len(layers) - 1 else [math.tanh(v) for v in out]
    return _ref_softmax(h)


def _ref_gate(weights: np.ndarray, x: Sequence[float]) -> List[float]:
    z = []
    for j in range(weights.shape[0]):
        z.append(sum(float(weights[j, k]) * float(x[k]) for k in range(weights.shape[1])))
    return _ref_softmax(z)


def ref_correlation(clients, spec, gate_w, feats, labels, eps):
    k, n = gate_w.shape[0], len(clients)
    m = [[0.0] * n for _ in range(k)]
    for x, y in zip(feats, labels):
        p = _ref_gate(gate_w, x)
        a = [_ref_forward(c.values, spec, x)[int(y)] for c in clients]
        for j in range(k):
            for i in range(n):
                m[j][i] += p[j] * a[i]
    m_e = [[m[j][i] / (sum(m[j]) + eps) for i in range(n)] for j in range(k)]
    col = [sum(m[j][i] for j in range(k)) for i in range(n)]
    m_c = [[m[j][i] / (col[i] + eps) for i in range(n)] for j in range(k)]
    return np.array(m), np.array(m_e), np.array(m_c)


def _ref_top(row: Sequence[float], n_top: int) -> List[int]:
    return sorted(range(len(row)), key=lambda i: (-row[i], i))[:n_top]


def ref_update_experts(experts, clients, m_e, tau, n_top):
    out = []
    for j, e in enumerate(experts):
        subset = _ref_top(list(m_e[j]), n_top)
        total = sum(m_e[j][i] for i in subset)
        if total > 0:
            w = [m_e[j][i] / total for i in subset]
        else:
            w = [1.0 / len(subset)] * len(subset)
        new = []
        for d in range(len(e)):
            mix = sum(w[q] * clients[i][d] for q, i in enumerate(subset))
            new.append((1 - tau) * e[d] + tau * mix)
        out.append(new)
    return np.array(out)


def ref_redistribute(clients, experts, m_c, tau):
    out = []
    for i, c in enumerate(clients):
        new = []
        for d in range(len(c)):
            mix = sum(m_c[j][i] * experts[j][d] for j in range(len(experts)))
            new.append((1 - tau) * c[d] + tau * mix)
        out.append(new)
    return np.array(out)


def ref_assemble(experts, alpha):
    return np.array([sum(alpha[j] * experts[j][d] for j in range(len(experts))) for d in range(len(experts[0]))])


# ---- random instances ----


def _random_instance(rng: np.random.Generator):
    dim = int(rng.integers(2, 5))
    spec = MlpSpec(dim, (int(rng.integers(2, 5)),), int(rng.integers(2, 4)))
    k = int(rng.integers(1, 6))
    n = int(rng.integers(1, 6))
    size = int(rng.integers(1, 11))
    clients = [ParamVector(rng.normal(0, 0.8, spec.num_params), spec.spec_hash) for _ in range(n)]
    experts = [ParamVector(rng.normal(0, 0.8, spec.num_params), spec.spec_hash) for _ in range(k)]
    gate = GateParams(rng.normal(0, 1.0, (k, dim)))
    data = LabeledSet(rng.normal(0, 1.0, (size, dim)), rng.integers(0, spec.num_classes, size), spec.num_classes)
    return spec, clients, experts, gate, data


def _max_abs(a, b) -> float:
    return float(np.max(np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))))


# ---- properties ----


def check_correlation(impl: Implementations, rng, instances: int):
    worst = 0.0
    for _ in range(instances):
        spec, clients, _, gate, data = _random_instance(rng)
        eps = 1e-8
        cm = impl.build_matrix(clients, spec, gate, data, eps)
        m, m_e, m_c = ref_correlation(clients, spec, gate.weights, data.features, data.labels, eps)
        worst = max(worst, _max_abs(cm.m, m), _max_abs(cm.m_expert, m_e), _max_abs(cm.m_client, m_c))
    return worst <= ORACLE_TOL, f"max abs err {worst:.2e}"


def check_expert_update(impl: Implementations, rng, instances: int):
    worst = 0.0
    for _ in range(instances):
        spec, clients, experts, _, _ = _random_instance(rng)
        m = rng.random((len(experts), len(clients)))
        m[rng.random(m.shape) < 0.2] = 0.0
        cm = CorrelationMatrix.from_raw(m, 1e-8)
        tau = float(rng.random())
        n_top = int(rng.integers(1, len(clients) + 1))
        pool = ExpertPool(experts, spec, 1)
        got = impl.update_experts(pool, clients, cm, AggregationConfig(tau, n_top)).stacked()
        want = ref_update_experts([e.values for e in experts], [c.values for c in clients], cm.m_expert, tau, n_top)
        worst = max(worst, _max_abs(got, want))
    return worst <= ORACLE_TOL, f"max abs err {worst:.2e}"


def check_redistribution(impl: Implementations, rng, instances: int):
    worst = 0.0
    for _ in range(instances):
        spec, clients, experts, _, _ = _random_instance(rng)
        cm = CorrelationMatrix.from_raw(rng.random((len(experts), len(clients))), 1e-8)
        tau = float(rng.random())
        pool = ExpertPool(experts, spec, 1)
        got = np.stack([c.values for c in impl.redistribute_clients(clients, pool, cm, AggregationConfig(tau, 1))])
        want = ref_redistribute([c.values for c in clients], [e.values for e in experts], cm.m_client, tau)
        worst = max(worst, _max_abs(got, want))
    return worst <= ORACLE_TOL, f"max abs err {worst:.2e}"


def check_assembly(impl: Implementations, rng, instances: int):
    worst = 0.0
    for _ in range(instances):
        spec, _, experts, gate, data = _random_instance(rng)
        alpha = np.mean([_ref_gate(gate.weights, x) for x in data.features], axis=0)
        got = impl.assemble_model(ExpertPool(experts, spec, 1), SemanticProfile(alpha, len(data)))
        worst = max(worst, _max_abs(got.values, ref_assemble([e.values for e in experts], alpha)))
    return worst <= ORACLE_TOL, f"max abs err {worst:.2e}"


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(numeric))), float(np.max(np.abs(analytic))), 1e-8)
    return float(np.max(np.abs(analytic - numeric))) / scale


def check_mlp_gradient(impl: Implementations, rng, instances: int):
    worst = 0.0
    for _ in range(instances):
        spec = MlpSpec(int(rng.integers(2, 5)), (int(rng.integers(2, 5)),), int(rng.integers(2, 4)))
        theta = rng.normal(0, 0.5, spec.num_params)
        x = rng.normal(0, 1.0, (4, spec.input_dim))
        y = rng.integers(0, spec.num_classes, 4)
        _, grad = impl.loss_and_grad_arrays(theta, spec, x, y)
        numeric = np.empty_like(theta)
        for d in range(len(theta)):
            up, down = theta.copy(), theta.copy()
            up[d] += FD_STEP
            down[d] -= FD_STEP
            numeric[d] = (impl.loss_and_grad_arrays(up, spec, x, y)[0] - impl.loss_and_grad_arrays(down, spec, x, y)[0]) / (2 * FD_STEP)
        worst = max(worst, _rel_err(np.asarray(grad), numeric))
    return worst <= FD_TOL, f"max rel err {worst:.2e}"


def check_gate_gradient(impl: Implementations, rng, instances: int):
    worst = 0.0
    for _ in range(instances):
        k, d = int(rng.integers(2, 6)), int(rng.integers(2, 5))
        w = rng.normal(0, 0.5, (k, d))
        h = rng.normal(0, 1.0, (5, d))
        s = np.array([_ref_softmax(list(r)) for r in rng.normal(0, 1.0, (5, k))])
        _, grad = impl.gate_loss_and_grad(w, h, s)
        numeric = np.empty_like(w)
        for idx in np.ndindex(w.shape):
            up, down = w.copy(), w.copy()
            up[idx] += FD_STEP
            down[idx] -= FD_STEP
            numeric[idx] = (impl.gate_loss_and_grad(up, h, s)[0] - impl.gate_loss_and_grad(down, h, s)[0]) / (2 * FD_STEP)
        worst = max(worst, _rel_err(np.asarray(grad), numeric))
    return worst <= FD_TOL, f"max rel err {worst:.2e}"


def check_normalization(impl: Implementations, rng, instances: int):
    worst_norm, worst_simplex = 0.0, 0.0
    for _ in range(instances):
        spec, clients, experts, gate, data = _random_instance(rng)
        eps = float(10 ** rng.uniform(-8, -1))
        cm = impl.build_matrix(clients, spec, gate, data, eps)
        rows = cm.m.sum(axis=1)
        cols = cm.m.sum(axis=0)
        worst_norm = max(worst_norm, _max_abs(cm.m_expert.sum(axis=1), rows / (rows + eps)))
        worst_norm = max(worst_norm, _max_abs(cm.m_client.sum(axis=0), cols / (cols + eps)))
        p = impl.gate_forward(gate, data.features)
        s = impl.expert_suitability(rng.normal(0, 3.0, (len(data), len(experts))))
        for dist in (p, s):
            worst_simplex = max(worst_simplex, _max_abs(dist.sum(axis=1), 1.0))
            worst_simplex = max(worst_simplex, float(max(0.0, -dist.min())))
    ok = worst_norm <= ORACLE_TOL and worst_simplex <= SIMPLEX_TOL
    return ok, f"norm err {worst_norm:.2e}, simplex err {worst_simplex:.2e}"


def check_fixed_points(impl: Implementations, rng, instances: int):
    for _ in range(instances):
        spec, clients, experts, gate, data = _random_instance(rng)
        pool = ExpertPool(experts, spec, 1)
        cm = impl.build_matrix(clients, spec, gate, data, 1e-8)
        frozen = AggregationConfig(0.0, len(clients))
        if not np.array_equal(impl.update_experts(pool, clients, cm, frozen).stacked(), pool.stacked()):
            return False, "tau=0 changed an expert"
        redistributed = impl.redistribute_clients(clients, pool, cm, frozen)
        if any(not np.array_equal(a.values, b.values) for a, b in zip(redistributed, clients)):
            return False, "tau=0 changed a client"
        copied = impl.update_experts(pool, clients, cm, AggregationConfig(1.0, 1)).stacked()
        for j in range(len(experts)):
            top = correlation.select_top_clients(cm, j, 1)[0]
            if cm.m_expert[j, top] > 0 and not np.array_equal(copied[j], clients[top].values):
                return False, "tau=1 with a singleton subset did not copy the client"
        single = GateParams(rng.normal(0, 1.0, (1, spec.input_dim)))
        loss, _ = impl.gate_loss_and_grad(single.weights, data.features, np.ones((len(data), 1)))
        if loss != 0.0:
            return False, f"K=1 gate KL is {loss}"
    return True, "identities hold"


PROPERTIES = [
    ("correlation matrix vs loop oracle", check_correlation),
    ("expert update vs loop oracle", check_expert_update),
    ("client redistribution vs loop oracle", check_redistribution),
    ("cold-start assembly vs loop oracle", check_assembly),
    ("mlp gradient vs finite differences", check_mlp_gradient),
    ("gate KL gradient vs finite differences", check_gate_gradient),
    ("normalization and simplex invariants", check_normalization),
    ("aggregation fixed points", check_fixed_points),
]


def run_verify(
    impl: Optional[Implementations] = None,
    instances: int = 100,
    seed: int = 0,
    report: Optional[Callable[[str], None]] = None,
) -> List[PropertyResult]:
    impl = impl or Implementations()
    results = []
    # random instances routinely hit the zero-mass fallback; its warning is noise here
    agg_logger = logging.getLogger(aggregation.__name__)
    previous = agg_logger.level
    agg_logger.setLevel(logging.ERROR)
    try:
        _run_all(impl, instances, seed, report, results)
    finally:
        agg_logger.setLevel(previous)
    return results


def _run_all(impl, instances, seed, report, results) -> None:
    for k, (name, check) in enumerate(PROPERTIES):
        rng = np.random.default_rng([seed, k])
        start = time.perf_counter()
        try:
            ok, detail = check(impl, rng, instances)
        except Exception as exc:  # a crashing implementation is a failing one
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        res = PropertyResult(name, bool(ok), detail, time.perf_counter() - start)
        results.append(res)
        if report is not None:
            report(res.line())
