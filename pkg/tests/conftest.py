"""Shared builders for synthetic samples used across the test suite."""

import numpy as np
import pytest

from surveyqif import (
    BasisSet,
    ClusterRecord,
    CorrelationStructure,
    MarginalModel,
    SurveySample,
    basis_matrices,
    link_inverse,
)


def make_basis(kind: str, m: int) -> BasisSet:
    return basis_matrices(CorrelationStructure(kind, m))


def random_sample(rng, n=30, m=4, d=3, kind="exchangeable", N=None,
                  beta0=None, weights="random", dispersion=1.0) -> SurveySample:
    """Clusters with Bernoulli responses at a true beta0 (independent within)."""
    if beta0 is None:
        beta0 = rng.normal(0, 0.5, d)
    N = N or 10 * n
    recs = []
    for i in range(n):
        X = rng.uniform(0.0, 0.8, (m, d))
        mu = link_inverse(X @ beta0)
        y = (rng.random(m) < mu).astype(float)
        w = float(rng.uniform(1.0, 3.0) * N / (2 * n)) if weights == "random" else N / n
        recs.append(ClusterRecord(id=i, y=y, X=X, w=w))
    return SurveySample(clusters=recs, N=N, model=MarginalModel(dispersion=dispersion),
                        basis=make_basis(kind, m))


def zero_residual_sample(rng, n=20, m=4, d=3, kind="exchangeable", beta=None):
    """Synthetic real-valued responses y = mu(beta) exactly (zero residuals)."""
    beta = np.zeros(d) if beta is None else beta
    recs = []
    for i in range(n):
        X = rng.uniform(0.0, 0.8, (m, d))
        y = link_inverse(X @ beta)
        recs.append(ClusterRecord(id=i, y=y, X=X, w=2.0))
    return SurveySample(clusters=recs, N=5 * n, model=MarginalModel(),
                        basis=make_basis(kind, m))


@pytest.fixture
def rng():
    return np.random.default_rng(20260809)
