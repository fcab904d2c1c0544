import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedcoe.aggregation import (
    AggregationConfig,
    fedavg_aggregate,
    fedprox_grad_term,
    redistribute_clients,
    subset_weights,
    update_experts,
)
from fedcoe.correlation import CorrelationMatrix
from fedcoe.expert_pool import ExpertPool
from fedcoe.nn_core import MlpSpec, ParamVector

SPEC = MlpSpec(2, (2,), 2)


def _vecs(rng, n):
    return [ParamVector(rng.normal(0, 1, SPEC.num_params), SPEC.spec_hash) for _ in range(n)]


def test_tau_zero_fixed_point(rng):
    experts, clients = _vecs(rng, 3), _vecs(rng, 4)
    pool = ExpertPool(experts, SPEC, 1)
    cm = CorrelationMatrix.from_raw(rng.random((3, 4)))
    cfg = AggregationConfig(tau=0.0, n_top=2)
    assert np.array_equal(update_experts(pool, clients, cm, cfg).stacked(), pool.stacked())
    for a, b in zip(redistribute_clients(clients, pool, cm, cfg), clients):
        assert np.array_equal(a.values, b.values)


def test_tau_one_singleton_copies(rng):
    experts, clients = _vecs(rng, 2), _vecs(rng, 3)
    cm = CorrelationMatrix.from_raw(np.array([[0.1, 0.9, 0.2], [0.7, 0.1, 0.1]]))
    new = update_experts(ExpertPool(experts, SPEC, 1), clients, cm, AggregationConfig(1.0, 1))
    assert np.array_equal(new.experts[0].values, clients[1].values)
    assert np.array_equal(new.experts[1].values, clients[0].values)


def test_renormalized_weights_hand_oracle(rng):
    # row with two selected clients of raw weight 0.3 and 0.1 and a dropped third
    cm = CorrelationMatrix.from_raw(np.array([[0.3, 0.05, 0.1]]), 1e-8)
    w = subset_weights(cm, 0, [0, 2])
    assert w == pytest.approx([0.75, 0.25], abs=1e-9)
    e = ParamVector(np.arange(SPEC.num_params, dtype=float), SPEC.spec_hash)
    c = _vecs(rng, 3)
    new = update_experts(ExpertPool([e], SPEC, 1), c, cm, AggregationConfig(0.5, 2)).experts[0]
    for d in range(SPEC.num_params):
        want = 0.5 * e.values[d] + 0.5 * (0.75 * c[0].values[d] + 0.25 * c[2].values[d])
        assert abs(new.values[d] - want) < 1e-9


def test_zero_mass_falls_back_to_mean(rng, caplog):
    clients = _vecs(rng, 3)
    cm = CorrelationMatrix.from_raw(np.zeros((1, 3)))
    with caplog.at_level(logging.WARNING):
        new = update_experts(ExpertPool(_vecs(rng, 1), SPEC, 1), clients, cm, AggregationConfig(1.0, 2))
    assert np.allclose(new.experts[0].values, (clients[0].values + clients[1].values) / 2)
    assert "zero correlation mass" in caplog.text


def test_identical_experts_redistribution(rng):
    e = _vecs(rng, 1)[0]
    clients = _vecs(rng, 2)
    m = np.array([[0.2, 0.6], [0.3, 0.1], [0.5, 0.3]])
    cm = CorrelationMatrix.from_raw(m, 1e-8)
    tau = 0.4
    out = redistribute_clients(clients, ExpertPool([e, e.copy(), e.copy()], SPEC, 1), cm, AggregationConfig(tau, 1))
    for i, c in enumerate(clients):
        s = cm.m_client[:, i].sum()
        assert np.allclose(out[i].values, (1 - tau) * c.values + tau * s * e.values, atol=1e-12)


def test_redistribution_loop_oracle(rng):
    experts, clients = _vecs(rng, 3), _vecs(rng, 4)
    cm = CorrelationMatrix.from_raw(rng.random((3, 4)))
    out = redistribute_clients(clients, ExpertPool(experts, SPEC, 1), cm, AggregationConfig(0.3, 1))
    for i in range(4):
        want = 0.7 * clients[i].values + 0.3 * sum(cm.m_client[j, i] * experts[j].values for j in range(3))
        assert np.max(np.abs(out[i].values - want)) < 1e-9


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), tau=st.floats(0, 1), n_top=st.integers(1, 5))
def test_expert_update_is_convex(seed, tau, n_top):
    r = np.random.default_rng(seed)
    experts, clients = _vecs(r, 2), _vecs(r, 5)
    cm = CorrelationMatrix.from_raw(r.random((2, 5)))
    new = update_experts(ExpertPool(experts, SPEC, 1), clients, cm, AggregationConfig(tau, n_top))
    from fedcoe.correlation import select_top_clients

    for j in range(2):
        group = np.stack([experts[j].values] + [clients[i].values for i in select_top_clients(cm, j, n_top)])
        assert np.all(new.experts[j].values >= group.min(axis=0) - 1e-12)
        assert np.all(new.experts[j].values <= group.max(axis=0) + 1e-12)


def test_shape_and_spec_checks(rng):
    pool = ExpertPool(_vecs(rng, 2), SPEC, 1)
    with pytest.raises(ValueError):
        update_experts(pool, _vecs(rng, 3), CorrelationMatrix.from_raw(np.ones((2, 4))), AggregationConfig())
    other = MlpSpec(2, (3,), 2)
    stray = [ParamVector(np.zeros(other.num_params), other.spec_hash)]
    with pytest.raises(ValueError):
        redistribute_clients(stray, pool, CorrelationMatrix.from_raw(np.ones((2, 1))), AggregationConfig())


def test_config_validation():
    with pytest.raises(ValueError):
        AggregationConfig(tau=1.5)
    with pytest.raises(ValueError):
        AggregationConfig(n_top=0)
    with pytest.raises(ValueError):
        AggregationConfig(baseline="scaffold")


def test_fedavg_examples(rng):
    v = _vecs(rng, 1)[0]
    assert np.allclose(fedavg_aggregate([v, v.copy(), v.copy()], [1, 5, 2]).values, v.values, atol=1e-15)
    a, b = _vecs(rng, 2)
    assert np.allclose(fedavg_aggregate([a, b], [4, 4]).values, (a.values + b.values) / 2, atol=1e-15)
    c = _vecs(rng, 3)
    out = fedavg_aggregate(c, [1, 2, 3])
    for d in range(SPEC.num_params):
        want = (1 * c[0].values[d] + 2 * c[1].values[d] + 3 * c[2].values[d]) / 6
        assert abs(out.values[d] - want) < 1e-12
    with pytest.raises(ValueError):
        fedavg_aggregate([], [])
    with pytest.raises(ValueError):
        fedavg_aggregate(c, [0, 0, 0])


def test_fedprox_term():
    a = ParamVector(np.array([1.0, -2.0]), "h")
    z = ParamVector(np.zeros(2), "h")
    assert np.array_equal(fedprox_grad_term(a, a, 0.5).values, [0.0, 0.0])
    assert np.array_equal(fedprox_grad_term(a, z, 0.0).values, [0.0, 0.0])
    assert np.allclose(fedprox_grad_term(a, z, 0.1).values, [0.1, -0.2], atol=1e-15)
    with pytest.raises(ValueError):
        fedprox_grad_term(a, ParamVector(np.zeros(3), "h"), 0.1)
