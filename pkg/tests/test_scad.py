import numpy as np
import pytest

from surveyqif import (
    ContractError,
    PenaltySpec,
    lqa_weights,
    scad_derivative,
    scad_second_derivative,
    scad_value,
)

SPEC = PenaltySpec(lam=0.2, a=3.7)


def test_value_spot_checks():
    assert scad_value(0.1, SPEC) == pytest.approx(0.02, abs=1e-12)
    assert scad_value(0.4, SPEC) == pytest.approx(0.0725926, abs=1e-7)
    assert scad_value(1.0, SPEC) == pytest.approx(0.094, abs=1e-12)
    assert scad_value(0.0, SPEC) == 0.0


def test_derivative_spot_checks():
    assert scad_derivative(0.1, SPEC) == pytest.approx(0.2, abs=1e-12)
    assert scad_derivative(0.4, SPEC) == pytest.approx(0.1259259, abs=1e-7)
    assert scad_derivative(1.0, SPEC) == 0.0


def test_value_continuous_at_knots():
    eps = 1e-9
    for knot in (SPEC.lam, SPEC.a * SPEC.lam):
        jump = abs(scad_value(knot - eps, SPEC) - scad_value(knot + eps, SPEC))
        assert jump < 1e-8
        djump = abs(scad_derivative(knot - eps, SPEC) - scad_derivative(knot + eps, SPEC))
        assert djump < 1e-8


def test_value_nondecreasing_then_flat():
    grid = np.linspace(0, 2.0, 4001)
    vals = scad_value(grid, SPEC)
    assert np.all(np.diff(vals) >= -1e-15)
    cap = (SPEC.a + 1) * SPEC.lam ** 2 / 2
    assert np.allclose(vals[grid > SPEC.a * SPEC.lam], cap)


def test_derivative_matches_fd_away_from_knots():
    h = 1e-7
    rng = np.random.default_rng(0)
    thetas = rng.uniform(0.001, 1.5, 1000)
    keep = (np.abs(thetas - SPEC.lam) > 1e-3) & (np.abs(thetas - SPEC.a * SPEC.lam) > 1e-3)
    thetas = thetas[keep]
    fd = (scad_value(thetas + h, SPEC) - scad_value(thetas - h, SPEC)) / (2 * h)
    assert np.max(np.abs(fd - scad_derivative(thetas, SPEC))) < 1e-6


def test_derivative_limit_at_origin_is_lambda():
    # the sparsity condition: p'(0+)/lambda = 1
    assert scad_derivative(1e-12, SPEC) == pytest.approx(SPEC.lam, abs=1e-15)


def test_second_derivative_branches():
    assert scad_second_derivative(0.1, SPEC) == 0.0
    assert scad_second_derivative(0.4, SPEC) == pytest.approx(-1.0 / 2.7, abs=1e-12)
    assert scad_second_derivative(1.0, SPEC) == 0.0
    assert scad_second_derivative(SPEC.lam, SPEC) == 0.0
    assert scad_second_derivative(SPEC.a * SPEC.lam, SPEC) == 0.0


def test_lqa_weights_examples():
    assert lqa_weights(np.array([0.8]), SPEC)[0] == 0.0
    assert lqa_weights(np.array([0.1]), SPEC)[0] == pytest.approx(2.0, abs=1e-12)
    assert lqa_weights(np.array([0.4]), SPEC)[0] == pytest.approx(0.3148148, abs=1e-7)
    assert lqa_weights(np.array([-0.4]), SPEC)[0] == pytest.approx(0.3148148, abs=1e-7)


def test_lqa_weights_rejects_sub_threshold():
    with pytest.raises(ContractError):
        lqa_weights(np.array([0.4, 0.0005]), SPEC)


def test_negative_theta_rejected():
    for fn in (scad_value, scad_derivative, scad_second_derivative):
        with pytest.raises(ContractError):
            fn(-0.1, SPEC)


def test_penalty_spec_invariants():
    with pytest.raises(ContractError):
        PenaltySpec(lam=0.1, a=2.0)
    with pytest.raises(ContractError):
        PenaltySpec(lam=-0.1)
    with pytest.raises(ContractError):
        PenaltySpec(lam=0.1, zero_threshold=0.0)


def test_lambda_zero_degenerates_to_no_penalty():
    spec0 = PenaltySpec(lam=0.0)
    grid = np.linspace(0, 2, 50)
    assert np.allclose(scad_value(grid, spec0), 0.0)
    assert np.allclose(scad_derivative(grid, spec0), 0.0)
