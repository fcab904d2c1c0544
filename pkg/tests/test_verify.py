import dataclasses
import time

import numpy as np

from fedcoe import correlation
from fedcoe.aggregation import update_experts
from fedcoe.correlation import CorrelationMatrix, confidence_matrix
from fedcoe.gating import gate_forward
from fedcoe.verify import Implementations, run_verify


def _by_name(results):
    return {r.name: r.passed for r in results}


def test_pristine_build_passes_quickly():
    start = time.perf_counter()
    results = run_verify()
    assert time.perf_counter() - start < 60
    assert all(r.passed for r in results), [r.line() for r in results if not r.passed]


def test_sign_flip_in_accumulation_is_caught():
    # the confidence term enters with flipped sign; shifted by one so the mass stays non-negative
    def flipped(clients, spec, gate, reserved, epsilon=1e-8, subsample=None, seed=0):
        p = gate_forward(gate, reserved.features)
        a = confidence_matrix(clients, spec, reserved)
        return CorrelationMatrix.from_raw(p.T @ (1.0 - a), epsilon)

    assert not _by_name(run_verify(Implementations(build_matrix=flipped), instances=20))["correlation matrix vs loop oracle"]


def test_raw_negative_flip_is_caught():
    def negated(clients, spec, gate, reserved, epsilon=1e-8, subsample=None, seed=0):
        cm = correlation.build_matrix(clients, spec, gate, reserved, epsilon)
        return CorrelationMatrix(-cm.m, cm.m_expert, cm.m_client, epsilon)

    assert not _by_name(run_verify(Implementations(build_matrix=negated), instances=5))["correlation matrix vs loop oracle"]


def test_swapped_smoothing_is_caught():
    def swapped(pool, clients, cm, cfg):
        return update_experts(pool, clients, cm, dataclasses.replace(cfg, tau=1.0 - cfg.tau))

    assert not _by_name(run_verify(Implementations(update_experts=swapped), instances=20))["expert update vs loop oracle"]
