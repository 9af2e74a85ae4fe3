import math

import numpy as np
import pytest

from surveyqif import ClusterRecord, ContractError, MarginalModel, evaluate_cluster, link_inverse


def test_link_inverse_closed_forms():
    assert link_inverse(0.0) == 0.5
    assert link_inverse(math.log(3)) == pytest.approx(0.75, abs=1e-12)
    assert link_inverse(-math.log(3)) == pytest.approx(0.25, abs=1e-12)


def test_link_inverse_stays_in_open_interval():
    assert 0.0 < link_inverse(-1e6) < link_inverse(1e6) < 1.0


def test_zero_design_gives_half_means():
    rec = ClusterRecord(id="a", y=np.zeros(4), X=np.zeros((4, 3)), w=1.0)
    ev = evaluate_cluster(rec, np.array([1.0, -2.0, 0.5]), MarginalModel())
    assert np.allclose(ev.mu, 0.5)
    assert np.allclose(ev.a_diag, 0.25)


def test_zero_beta_gives_half_means():
    rng = np.random.default_rng(3)
    rec = ClusterRecord(id=0, y=np.ones(5), X=rng.uniform(0, 0.8, (5, 4)), w=2.0)
    ev = evaluate_cluster(rec, np.zeros(4), MarginalModel())
    assert np.allclose(ev.mu, 0.5)


def test_jacobian_matches_finite_differences():
    rng = np.random.default_rng(7)
    model = MarginalModel()
    h = 1e-5
    for _ in range(50):
        m, d = 3, 2
        rec = ClusterRecord(id=0, y=np.zeros(m), X=rng.normal(0, 1, (m, d)), w=1.0)
        beta = rng.normal(0, 0.5, d)
        ev = evaluate_cluster(rec, beta, model)
        fd = np.empty((m, d))
        for k in range(d):
            e = np.zeros(d)
            e[k] = h
            fd[:, k] = (evaluate_cluster(rec, beta + e, model).mu
                        - evaluate_cluster(rec, beta - e, model).mu) / (2 * h)
        err = np.max(np.abs(ev.jac - fd)) / (1.0 + np.max(np.abs(ev.jac)))
        assert err < 1e-6


def test_mean_and_variance_bounds():
    rng = np.random.default_rng(11)
    model = MarginalModel()
    for _ in range(20):
        rec = ClusterRecord(id=0, y=np.zeros(6), X=rng.normal(0, 2, (6, 3)), w=1.0)
        ev = evaluate_cluster(rec, rng.normal(0, 1, 3), model)
        assert np.all(ev.mu > 0) and np.all(ev.mu < 1)
        assert np.all(ev.a_diag > 0) and np.all(ev.a_diag <= 0.25 + 1e-15)


def test_evaluate_cluster_is_deterministic():
    rng = np.random.default_rng(5)
    rec = ClusterRecord(id=0, y=np.zeros(4), X=rng.normal(size=(4, 2)), w=1.0)
    beta = np.array([0.3, -0.2])
    a = evaluate_cluster(rec, beta, MarginalModel())
    b = evaluate_cluster(rec, beta, MarginalModel())
    assert np.array_equal(a.mu, b.mu)
    assert np.array_equal(a.jac, b.jac)


def test_dimension_mismatch_rejected():
    rec = ClusterRecord(id=0, y=np.zeros(3), X=np.zeros((3, 2)), w=1.0)
    with pytest.raises(ContractError):
        evaluate_cluster(rec, np.zeros(3), MarginalModel())


def test_record_invariants():
    with pytest.raises(ContractError):
        ClusterRecord(id=0, y=np.zeros(3), X=np.zeros((3, 2)), w=0.0)
    with pytest.raises(ContractError):
        ClusterRecord(id=0, y=np.zeros(0), X=np.zeros((0, 2)), w=1.0)
    with pytest.raises(ContractError):
        ClusterRecord(id=0, y=np.zeros(3), X=np.full((3, 2), np.nan), w=1.0)


def test_only_logit_family_ships():
    with pytest.raises(ContractError):
        MarginalModel(family="poisson-log")
