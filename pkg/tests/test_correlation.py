import numpy as np
import pytest

from surveyqif import (
    ContractError,
    CorrelationStructure,
    basis_matrices,
    span_check,
    working_correlation,
)


def test_exchangeable_bases_m5():
    bs = basis_matrices(CorrelationStructure("exchangeable", 5))
    assert bs.L == 2
    assert np.array_equal(bs.bases[0], np.eye(5))
    assert np.array_equal(bs.bases[1], np.ones((5, 5)) - np.eye(5))


def test_independence_basis():
    bs = basis_matrices(CorrelationStructure("independence", 3))
    assert bs.L == 1
    assert np.array_equal(bs.bases[0], np.eye(3))


def test_ar1_bases_m3():
    bs = basis_matrices(CorrelationStructure("ar1", 3))
    assert bs.L == 3
    assert np.array_equal(bs.bases[1], np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], float))
    assert np.array_equal(bs.bases[2], np.diag([1.0, 0.0, 1.0]))


def test_bases_are_symmetric_binary_identity_first():
    for kind in ("independence", "exchangeable", "ar1"):
        for m in range(2, 8):
            bs = basis_matrices(CorrelationStructure(kind, m))
            assert np.array_equal(bs.bases[0], np.eye(m))
            for M in bs.bases:
                assert np.array_equal(M, M.T)
                assert set(np.unique(M)) <= {0.0, 1.0}


def test_working_correlation_forms():
    R = working_correlation(CorrelationStructure("exchangeable", 3), 0.4)
    assert np.allclose(R, np.array([[1, .4, .4], [.4, 1, .4], [.4, .4, 1]]))
    R = working_correlation(CorrelationStructure("ar1", 3), 0.5)
    assert np.allclose(R, np.array([[1, .5, .25], [.5, 1, .5], [.25, .5, 1]]))
    assert np.array_equal(working_correlation(CorrelationStructure("independence", 4)), np.eye(4))


def test_working_correlation_positive_definite():
    for kind in ("exchangeable", "ar1"):
        for m in (2, 5, 8):
            for alpha in (0.0, 0.3, 0.6, 0.95):
                R = working_correlation(CorrelationStructure(kind, m), alpha)
                assert np.allclose(R, R.T)
                assert np.allclose(np.diag(R), 1.0)
                assert np.linalg.eigvalsh(R).min() > 0


def test_alpha_domain():
    with pytest.raises(ContractError):
        working_correlation(CorrelationStructure("exchangeable", 3), 1.0)
    with pytest.raises(ContractError):
        working_correlation(CorrelationStructure("ar1", 3), -0.1)


def test_span_exchangeable_exact():
    for m in range(2, 9):
        for alpha in np.linspace(0.0, 0.95, 6):
            res = span_check(CorrelationStructure("exchangeable", m), alpha)
            assert res < 1e-10, (m, alpha, res)


def test_span_examples():
    assert span_check(CorrelationStructure("exchangeable", 5), 0.4) < 1e-10
    assert span_check(CorrelationStructure("exchangeable", 3), 0.9) < 1e-10
    assert span_check(CorrelationStructure("independence", 6)) < 1e-14


def test_span_check_excludes_ar1():
    with pytest.raises(ContractError):
        span_check(CorrelationStructure("ar1", 4), 0.3)


def test_unknown_kind_rejected():
    with pytest.raises(ContractError):
        CorrelationStructure("toeplitz", 4)
