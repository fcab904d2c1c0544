import numpy as np
import pytest

from fedcoe.correlation import (
    CorrelationMatrix,
    build_matrix,
    client_confidence,
    dump_csv,
    select_top_clients,
)
from fedcoe.data_synth import LabeledSet
from fedcoe.gating import GateParams, gate_forward, init_gate
from fedcoe.nn_core import MlpSpec, ParamVector, forward

from conftest import random_params, random_set


def test_confidence_zero_model():
    spec = MlpSpec(3, (4,), 5)
    zero = ParamVector(np.zeros(spec.num_params), spec.spec_hash)
    assert client_confidence(zero, spec, np.ones(3), 2) == pytest.approx(0.2, abs=1e-15)


def test_confidence_saturated():
    spec = MlpSpec(1, (), 2)
    p = ParamVector(np.array([0.0, 0.0, 30.0, -30.0]), spec.spec_hash)
    assert client_confidence(p, spec, np.array([0.0]), 0) >= 1 - 1e-6


def test_confidence_definition(rng):
    spec = MlpSpec(3, (4,), 3)
    p = random_params(spec, rng)
    for _ in range(20):
        x, y = rng.normal(0, 1, 3), int(rng.integers(0, 3))
        assert abs(client_confidence(p, spec, x, y) - forward(p, spec, x)[y]) < 1e-12
    with pytest.raises(ValueError):
        client_confidence(p, spec, np.zeros(3), 3)


def _saturated_client(spec, cls):
    # bias-only classifier that is confident in `cls` for any input
    theta = np.zeros(spec.num_params)
    bias = theta[-spec.num_classes :]
    bias[:] = -40.0
    bias[cls] = 40.0
    return ParamVector(theta, spec.spec_hash)


def test_unit_outer_product():
    spec = MlpSpec(2, (), 2)
    eps = 1e-8
    gate = GateParams(np.array([[0.0, 0.0], [100.0, 0.0], [0.0, 0.0]]))  # one-hot at expert 1 for x=(1,0)
    clients = [_saturated_client(spec, 1), _saturated_client(spec, 0)]
    data = LabeledSet(np.array([[1.0, 0.0]]), np.array([0]), 2)
    cm = build_matrix(clients, spec, gate, data, eps)
    expected = np.zeros((3, 2))
    expected[1, 1] = 1.0
    assert np.allclose(cm.m, expected, atol=1e-12)
    assert cm.m_expert[1, 1] == pytest.approx(1 / (1 + eps), abs=1e-12)
    assert cm.m_client[1, 1] == pytest.approx(1 / (1 + eps), abs=1e-12)


def test_uniform_symmetry(rng):
    spec = MlpSpec(3, (4,), 3)
    zero = ParamVector(np.zeros(spec.num_params), spec.spec_hash)
    data = random_set(rng, 6, 3, 3)
    cm = build_matrix([zero] * 4, spec, init_gate(2, 3), data, 1e-8)
    assert np.allclose(cm.m, 6 * (1 / 3) / 2, atol=1e-12)
    assert np.allclose(cm.m_expert, 0.25, atol=1e-6)


def test_matches_triple_loop(rng):
    spec = MlpSpec(3, (4,), 3)
    clients = [random_params(spec, rng) for _ in range(4)]
    gate = GateParams(rng.normal(0, 1, (3, 3)))
    data = random_set(rng, 7, 3, 3)
    cm = build_matrix(clients, spec, gate, data, 1e-8)
    m = np.zeros((3, 4))
    for x, y in zip(data.features, data.labels):
        p = gate_forward(gate, x)
        for j in range(3):
            for i in range(4):
                m[j, i] += p[j] * forward(clients[i], spec, x)[y]
    assert np.max(np.abs(cm.m - m)) < 1e-9


def test_normalization_sums(rng):
    m = rng.random((3, 5))
    eps = 1e-3
    cm = CorrelationMatrix.from_raw(m, eps)
    r, c = m.sum(axis=1), m.sum(axis=0)
    assert np.allclose(cm.m_expert.sum(axis=1), r / (r + eps), atol=1e-12)
    assert np.allclose(cm.m_client.sum(axis=0), c / (c + eps), atol=1e-12)
    with pytest.raises(ValueError):
        CorrelationMatrix.from_raw(-m)


def test_client_versions_recorded(rng):
    spec = MlpSpec(3, (4,), 3)
    clients = [random_params(spec, rng).replace(np.zeros(spec.num_params), version=7) for _ in range(2)]
    cm = build_matrix(clients, spec, init_gate(2, 3), random_set(rng, 3, 3, 3))
    assert cm.client_versions == (7, 7)


def test_subsample(rng):
    spec = MlpSpec(3, (4,), 3)
    zero = ParamVector(np.zeros(spec.num_params), spec.spec_hash)
    cm = build_matrix([zero], spec, init_gate(1, 3), random_set(rng, 20, 3, 3), subsample=5, seed=1)
    assert cm.m[0, 0] == pytest.approx(5 / 3)


def test_select_top():
    cm = CorrelationMatrix.from_raw(np.array([[0.5, 0.3, 0.2], [1.0, 1.0, 1.0]]), 1e-8)
    assert select_top_clients(cm, 0, 1) == [0]
    assert select_top_clients(cm, 1, 2) == [0, 1]
    assert select_top_clients(cm, 0, 3) == [0, 1, 2]
    with pytest.raises(ValueError):
        select_top_clients(cm, 0, 4)


def test_dump_csv(tmp_path):
    cm = CorrelationMatrix.from_raw(np.array([[1.0, 2.0]]))
    dump_csv(tmp_path / "m.csv", cm)
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines == ["client_0,client_1", "1,2"]
