import numpy as np
import pytest

from pcause.working_model import (
    WorkingModelSpec,
    design_matrix,
    g_eval,
    g_grad,
    g_values,
    h_eval,
    weight_values,
)

LOGISTIC = WorkingModelSpec("logistic_linear", include_intercept=True)
IDENTITY = WorkingModelSpec("identity_linear", include_intercept=True)


def central_difference(fun, beta, h=1e-6):
    """Independent derivative oracle for scalar-valued fun(beta)."""
    beta = np.asarray(beta, dtype=float)
    out = np.empty(beta.shape[0])
    for j in range(beta.shape[0]):
        e = np.zeros_like(beta)
        e[j] = h
        out[j] = (fun(beta + e) - fun(beta - e)) / (2.0 * h)
    return out


def test_logistic_zero_beta_is_half():
    for x in (np.zeros(3), np.array([1.0, -2.0, 5.0])):
        assert g_eval(LOGISTIC, np.zeros(4), x) == pytest.approx(0.5)


def test_identity_linear_arithmetic():
    # beta=(1,2), x=(3,) with intercept: 1 + 2*3 = 7
    assert g_eval(IDENTITY, np.array([1.0, 2.0]), np.array([3.0])) == 7.0


def test_logistic_grad_at_zero():
    # g(1-g) = 0.25 at beta = 0, so the gradient is 0.25 * design row
    grad = g_grad(WorkingModelSpec("logistic_linear", include_intercept=False),
                  np.zeros(2), np.array([1.0, 2.0]))
    np.testing.assert_allclose(grad, [0.25, 0.5])


def test_identity_grad_is_design_row(rng):
    x = rng.normal(size=3)
    for beta in (np.zeros(4), rng.normal(size=4)):
        np.testing.assert_array_equal(g_grad(IDENTITY, beta, x),
                                      np.concatenate([[1.0], x]))


@pytest.mark.parametrize("spec", [LOGISTIC, IDENTITY])
def test_grad_matches_finite_differences(spec, rng):
    for _ in range(20):
        d = int(rng.integers(1, 5))
        x = rng.normal(size=d)
        beta = rng.normal(size=spec.param_dim(d))
        analytic = g_grad(spec, beta, x)
        numeric = central_difference(lambda b: g_eval(spec, b, x), beta)
        np.testing.assert_allclose(analytic, numeric, rtol=1e-6, atol=1e-9)


def test_h_equals_grad_under_uniform_weight(rng):
    x = rng.normal(size=3)
    beta = rng.normal(size=4)
    np.testing.assert_array_equal(h_eval(LOGISTIC, beta, x),
                                  g_grad(LOGISTIC, beta, x))


def test_h_scales_linearly_with_weight(rng):
    x = rng.normal(size=2)
    beta = rng.normal(size=3)
    base = h_eval(LOGISTIC, beta, x)
    for c in (0.5, 2.0, 7.3):
        scaled = WorkingModelSpec("logistic_linear", weight=lambda X: c * np.ones(len(X)))
        np.testing.assert_allclose(h_eval(scaled, beta, x), c * base, rtol=1e-12)


def test_h_at_zero_beta_logistic(rng):
    # composition check: 0.25 * design row, verified numerically
    x = rng.normal(size=3)
    h = h_eval(LOGISTIC, np.zeros(4), x)
    np.testing.assert_allclose(h, 0.25 * np.concatenate([[1.0], x]), rtol=1e-12)
    numeric = central_difference(lambda b: g_eval(LOGISTIC, b, x), np.zeros(4))
    np.testing.assert_allclose(h, numeric, rtol=1e-6)


def test_logistic_values_stay_inside_unit_interval(rng):
    spec = WorkingModelSpec("logistic_linear", include_intercept=False)
    X = rng.normal(size=(50, 3)) * 40.0
    beta = rng.normal(size=3) * 10.0
    vals = g_values(spec, beta, X)
    assert ((vals > 0.0) & (vals < 1.0)).all()


def test_dimension_mismatch_raises():
    with pytest.raises(ValueError, match="length"):
        g_eval(LOGISTIC, np.zeros(3), np.zeros(3))


def test_weight_must_be_positive():
    spec = WorkingModelSpec("logistic_linear", weight=lambda X: np.zeros(len(X)))
    with pytest.raises(ValueError, match="positive"):
        weight_values(spec, np.zeros((2, 1)))


def test_design_matrix_intercept_toggle(rng):
    X = rng.normal(size=(4, 2))
    with_int = design_matrix(LOGISTIC, X)
    assert with_int.shape == (4, 3)
    np.testing.assert_array_equal(with_int[:, 0], np.ones(4))
    no_int = design_matrix(WorkingModelSpec("logistic_linear", include_intercept=False), X)
    np.testing.assert_array_equal(no_int, X)
