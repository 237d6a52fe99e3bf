import numpy as np
import pytest
from scipy.optimize import least_squares
from scipy.special import expit

from pcause.data_model import Dataset, PositivityError
from pcause.estimator import (
    InfiniteOddsError,
    PcEstimate,
    bootstrap_covariance,
    correction_values,
    estimating_equation,
    fit_from_dict,
    fit_to_dict,
    gamma_plugin,
    influence_contribution,
    influence_matrix,
    jacobian_M,
    odds_of_causation,
    odds_ratio,
    plugin_projection,
    predict_pc_with_ci,
    sandwich_covariance,
    solve_beta,
)
from pcause.nuisance import RegressorSpec, from_values, fit_nuisances_full_sample
from pcause.simulation import DEFAULT_PSI, _draw, true_gamma, true_nuisances
from pcause.working_model import WorkingModelSpec, design_matrix, g_values

LOGISTIC = WorkingModelSpec("logistic_linear", include_intercept=True)
IDENTITY = WorkingModelSpec("identity_linear", include_intercept=True)
NO_INT_LOGISTIC = WorkingModelSpec("logistic_linear", include_intercept=False)


def _simulated_fixture(n, seed, clip=0.01, oracle=False):
    """Draw from the generator; nuisances are either the truth or a
    full-sample logistic fit."""
    rng = np.random.default_rng(seed)
    s = _draw(n, 0.5, DEFAULT_PSI, "logistic_psi", rng)
    ds = Dataset(s.x, s.exposure, s.outcome)
    if oracle:
        pi, mu0, mu1 = true_nuisances(s.x)
        nf = from_values(pi, mu0, mu1, clip_eps=clip)
    else:
        nf = fit_nuisances_full_sample(ds, RegressorSpec("logistic_linear"),
                                       clip_eps=clip, seed=seed)
    return ds, nf


# ---------------------------------------------------------------- gamma

def test_gamma_plugin_values():
    assert gamma_plugin(0.3, 0.3) == 0.0
    assert gamma_plugin(0.1, 0.5) == pytest.approx(0.8)
    # generator identity: at psi'x = 0, mu0 = beta0/2 and gamma = 0.5
    beta0 = 0.5
    assert gamma_plugin(beta0 / 2.0, beta0) == pytest.approx(0.5)
    assert true_gamma(np.zeros(4)) == pytest.approx(0.5)


def test_gamma_plugin_recovers_true_gamma(rng):
    X = rng.normal(size=(200, 4))
    pi, mu0, mu1 = true_nuisances(X)
    np.testing.assert_allclose(gamma_plugin(mu0, mu1), true_gamma(X), rtol=1e-12)


def test_gamma_plugin_requires_positive_mu1():
    with pytest.raises(ValueError):
        gamma_plugin(0.1, 0.0)


# ------------------------------------------------- influence contribution

def test_influence_zero_when_residuals_vanish():
    beta = np.array([0.0, 0.0])
    x = np.array([1.5])
    g = 0.5  # g at beta=0
    mu1 = 0.6
    mu0 = mu1 * (1.0 - g)  # makes gamma = g
    np.testing.assert_allclose(
        influence_contribution((x, 1.0, mu1), beta, (0.4, mu0, mu1), LOGISTIC),
        0.0, atol=1e-15)
    np.testing.assert_allclose(
        influence_contribution((x, 0.0, mu0), beta, (0.4, mu0, mu1), LOGISTIC),
        0.0, atol=1e-15)


def test_influence_mean_zero_at_truth_monte_carlo():
    # the acceptance suite runs 1e6 draws; this is a faster version
    rng = np.random.default_rng(314)
    s = _draw(200_000, 0.5, DEFAULT_PSI, "logistic_psi", rng)
    ds = Dataset(s.x, s.exposure, s.outcome)
    pi, mu0, mu1 = true_nuisances(s.x)
    nf = from_values(pi, mu0, mu1, clip_eps=1e-9)
    phi = influence_matrix(np.asarray(DEFAULT_PSI), ds, nf, NO_INT_LOGISTIC)
    mean = phi.mean(axis=0)
    se = phi.std(axis=0, ddof=1) / np.sqrt(phi.shape[0])
    assert (np.abs(mean) <= 4.0 * se).all()


# ------------------------------------------------- estimating equation

def test_estimating_equation_single_unit_zero_bracket():
    x = np.array([2.0])
    ds = Dataset(x.reshape(1, 1), np.array([1.0]), np.array([1.0]))
    # with y = mu1 = clipped 0.99 the treated residual vanishes; choose
    # mu0 so gamma equals g at beta
    beta = np.array([0.3, -0.1])
    g = float(g_values(IDENTITY, beta, x.reshape(1, 1))[0])
    mu1 = 0.99
    nf = from_values([0.5], [mu1 * (1.0 - g)], [0.99], clip_eps=0.01)
    # y == mu1 is impossible with binary y; evaluate the bracket directly
    contrib = influence_contribution((x, 1.0, 0.99), beta,
                                     (0.5, mu1 * (1.0 - g), mu1), IDENTITY)
    np.testing.assert_allclose(contrib, 0.0, atol=1e-12)


def test_identity_root_is_least_squares_solution(rng):
    ds, nf = _simulated_fixture(400, seed=2)
    fit = solve_beta(ds, nf, IDENTITY)
    # independent oracle: ordinary least squares of the pseudo-outcome
    U = correction_values(ds.exposure, ds.outcome, nf.pi_hat, nf.mu0_hat,
                          nf.mu1_hat) + nf.gamma_hat()
    Xd = design_matrix(IDENTITY, ds.covariates)
    beta_ls, *_ = np.linalg.lstsq(Xd, U, rcond=None)
    np.testing.assert_allclose(fit.beta_hat, beta_ls, atol=1e-8)
    # the returned root really solves the equation
    psi_at_root = estimating_equation(fit.beta_hat, ds, nf, IDENTITY)
    assert np.abs(psi_at_root).max() <= 1e-8
    # and equals the column means of the stored contributions
    np.testing.assert_allclose(psi_at_root, fit.if_values.mean(axis=0),
                               atol=1e-12)


def test_intercept_only_identity_is_mean_pseudo_outcome(rng):
    ds, nf = _simulated_fixture(300, seed=9)
    spec = WorkingModelSpec("identity_linear", include_intercept=True)
    # intercept-only: a zero-width covariate block leaves just the constant
    ds0 = Dataset(np.zeros((ds.n, 0)), ds.exposure, ds.outcome)
    nf0 = from_values(nf.pi_hat, nf.mu0_hat, nf.mu1_hat, clip_eps=nf.clip_eps)
    fit = solve_beta(ds0, nf0, spec)
    U = correction_values(ds.exposure, ds.outcome, nf.pi_hat, nf.mu0_hat,
                          nf.mu1_hat) + nf.gamma_hat()
    assert fit.beta_hat[0] == pytest.approx(U.mean(), abs=1e-10)


def test_estimating_equation_row_misalignment(rng):
    ds, nf = _simulated_fixture(100, seed=3)
    short = ds.subset(np.arange(50))
    with pytest.raises(ValueError, match="n="):
        estimating_equation(np.zeros(5), short, nf, IDENTITY)


# ------------------------------------------------------------- jacobian

def test_jacobian_identity_closed_form(rng):
    ds, nf = _simulated_fixture(200, seed=4)
    Xd = design_matrix(IDENTITY, ds.covariates)
    expected = -(Xd.T @ Xd) / ds.n
    np.testing.assert_allclose(jacobian_M(np.zeros(5), ds, nf, IDENTITY),
                               expected, rtol=1e-12)


@pytest.mark.parametrize("spec", [LOGISTIC, IDENTITY, NO_INT_LOGISTIC])
def test_jacobian_matches_finite_differences(spec, rng):
    ds, nf = _simulated_fixture(150, seed=5)
    p = spec.param_dim(ds.d)
    for _ in range(5):
        beta = rng.normal(scale=0.7, size=p)
        analytic = jacobian_M(beta, ds, nf, spec)
        numeric = np.empty((p, p))
        h = 1e-6
        for j in range(p):
            e = np.zeros(p)
            e[j] = h
            numeric[:, j] = (estimating_equation(beta + e, ds, nf, spec)
                             - estimating_equation(beta - e, ds, nf, spec)) / (2 * h)
        np.testing.assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-8)


def test_intercept_only_logistic_jacobian_negative_at_root(rng):
    ds, nf = _simulated_fixture(300, seed=6)
    ds0 = Dataset(np.zeros((ds.n, 0)), ds.exposure, ds.outcome)
    nf0 = from_values(nf.pi_hat, nf.mu0_hat, nf.mu1_hat, clip_eps=nf.clip_eps)
    spec = WorkingModelSpec("logistic_linear", include_intercept=True)
    fit = solve_beta(ds0, nf0, spec)
    M = jacobian_M(fit.beta_hat, ds0, nf0, spec)
    assert M.shape == (1, 1) and M[0, 0] < 0.0


# ------------------------------------------------------------- sandwich

def test_sandwich_zero_contributions_zero_matrix():
    phi = np.zeros((50, 3))
    M = -np.eye(3)
    np.testing.assert_array_equal(sandwich_covariance(phi, M), np.zeros((3, 3)))


def test_sandwich_matches_robust_regression_oracle(rng):
    ds, nf = _simulated_fixture(500, seed=7)
    fit = solve_beta(ds, nf, IDENTITY)
    # heteroskedasticity-robust covariance of the pseudo-outcome regression,
    # computed from scratch: n * (X'X)^-1 X' diag(e^2) X (X'X)^-1
    U = correction_values(ds.exposure, ds.outcome, nf.pi_hat, nf.mu0_hat,
                          nf.mu1_hat) + nf.gamma_hat()
    Xd = design_matrix(IDENTITY, ds.covariates)
    e = U - Xd @ fit.beta_hat
    XtX_inv = np.linalg.inv(Xd.T @ Xd)
    hc0 = ds.n * XtX_inv @ (Xd * (e ** 2)[:, None]).T @ Xd @ XtX_inv
    np.testing.assert_allclose(fit.covariance, hc0, rtol=1e-8)


def test_sandwich_psd_and_symmetric_on_fits(rng):
    for n, seed in ((400, 10), (600, 20), (800, 18)):
        ds, nf = _simulated_fixture(n, seed=seed)
        for spec in (LOGISTIC, IDENTITY):
            fit = solve_beta(ds, nf, spec)
            cov = fit.covariance
            np.testing.assert_allclose(cov, cov.T, atol=1e-10)
            assert np.linalg.eigvalsh(cov).min() >= -1e-8


def test_sandwich_singularity_error():
    from pcause.estimator import SingularMatrixError

    M = np.array([[1.0, 1.0], [1.0, 1.0 + 1e-15]])
    with pytest.raises(SingularMatrixError, match="collinear"):
        sandwich_covariance(np.ones((10, 2)), M)


# ------------------------------------------------------------- prediction

def test_predict_degenerate_interval_with_zero_covariance(rng):
    ds, nf = _simulated_fixture(400, seed=10)
    fit = solve_beta(ds, nf, LOGISTIC)
    degenerate = fit_from_dict({**fit_to_dict(fit),
                                "covariance": [0.0] * fit.p ** 2})
    est = predict_pc_with_ci(degenerate, np.zeros(ds.d))
    assert est.ci_low == est.point == est.ci_high


def test_predict_interval_width_scales_with_n(rng):
    ds, nf = _simulated_fixture(400, seed=10)
    fit = solve_beta(ds, nf, LOGISTIC)
    x = np.zeros(ds.d)
    base = predict_pc_with_ci(fit, x, n=fit.n)
    quadrupled = predict_pc_with_ci(fit, x, n=4 * fit.n)
    width = base.ci_high - base.ci_low
    assert quadrupled.ci_high - quadrupled.ci_low == pytest.approx(width / 2.0)


def test_predict_identity_clamps_with_warning(rng):
    doc = {
        "beta": [1.4, 0.0], "covariance": [0.5, 0.0, 0.0, 0.5], "p": 2,
        "n": 50, "model": {"family": "identity_linear", "include_intercept": True},
        "covariate_names": ["x1"], "estimator": "proposed", "nuisance": {},
    }
    fit = fit_from_dict(doc)
    with pytest.warns(RuntimeWarning, match="clamping"):
        est = predict_pc_with_ci(fit, np.array([0.0]))
    assert est.ci_high <= 1.0 and est.ci_low >= 0.0
    assert est.ci_low <= est.point <= est.ci_high


def test_predict_undefined_interval_without_covariance(rng):
    ds, nf = _simulated_fixture(120, seed=30)
    nf_forest_meta = from_values(nf.pi_hat, nf.mu0_hat, nf.mu1_hat,
                                 clip_eps=nf.clip_eps,
                                 regressor_spec=RegressorSpec("random_forest"))
    plug = plugin_projection(ds, nf_forest_meta, LOGISTIC)
    assert plug.covariance is None
    est = predict_pc_with_ci(plug, np.zeros(ds.d))
    assert np.isnan(est.ci_low) and np.isnan(est.ci_high)
    assert np.isfinite(est.point)


def test_wald_level_quantiles(rng):
    ds, nf = _simulated_fixture(200, seed=31)
    fit = solve_beta(ds, nf, LOGISTIC)
    x = np.zeros(ds.d)
    e95 = predict_pc_with_ci(fit, x, level=0.95)
    e99 = predict_pc_with_ci(fit, x, level=0.99)
    # the 95% z is pinned at 1.96 exactly
    assert e95.ci_high - e95.point == pytest.approx(1.96 * e95.se)
    assert e99.ci_high - e99.ci_low > e95.ci_high - e95.ci_low


# ------------------------------------------------------------------ odds

def test_odds_of_causation_values():
    assert odds_of_causation(0.75) == pytest.approx(3.0)
    assert odds_of_causation(0.5) == pytest.approx(1.0)
    for bad in (0.0, 1.0, -0.2, 1.3):
        with pytest.raises(InfiniteOddsError):
            odds_of_causation(bad)


def test_odds_ratio_exponentiates():
    assert odds_ratio(0.28) == pytest.approx(1.3231, abs=1e-4)
    assert odds_ratio(0.0) == 1.0


# ------------------------------------------------- discrete-cell oracle

def _discrete_instance(rng, n_cells=4, reps=400):
    """Sample supported on a few covariate points with empirical-cell
    nuisances; returns (ds, nf, cell table)."""
    support = np.array([[-1.0], [0.0], [0.8], [1.7]])[:n_cells]
    pi_true = np.array([0.3, 0.5, 0.6, 0.4])[:n_cells]
    mu1_true = np.array([0.6, 0.5, 0.7, 0.55])[:n_cells]
    gamma_true = np.array([0.3, 0.5, 0.65, 0.45])[:n_cells]
    mu0_true = mu1_true * (1.0 - gamma_true)
    rows, arms, outs = [], [], []
    for c in range(n_cells):
        for _ in range(reps):
            a = float(rng.random() < pi_true[c])
            mu = mu1_true[c] if a == 1.0 else mu0_true[c]
            rows.append(support[c])
            arms.append(a)
            outs.append(float(rng.random() < mu))
    X = np.vstack(rows)
    a = np.array(arms)
    y = np.array(outs)
    # exact empirical cell frequencies as nuisances
    pi = np.empty(len(a))
    mu0 = np.empty(len(a))
    mu1 = np.empty(len(a))
    cells = []
    for c in range(n_cells):
        mask = X[:, 0] == support[c, 0]
        p_hat = mask.mean()
        pi_hat = a[mask].mean()
        mu1_hat = y[mask & (a == 1.0)].mean()
        mu0_hat = y[mask & (a == 0.0)].mean()
        pi[mask], mu0[mask], mu1[mask] = pi_hat, mu0_hat, mu1_hat
        cells.append((support[c, 0], p_hat, pi_hat, mu0_hat, mu1_hat))
    ds = Dataset(X, a, y)
    nf = from_values(pi, mu0, mu1, clip_eps=0.01)
    return ds, nf, cells


@pytest.mark.parametrize("spec", [LOGISTIC, IDENTITY])
def test_discrete_instance_matches_enumerated_projection(spec, rng):
    ds, nf, cells = _discrete_instance(rng)
    fit = solve_beta(ds, nf, spec)

    # oracle: minimize the weighted L2 loss over the empirical cell
    # distribution with an unrelated optimizer
    xs = np.array([[c[0]] for c in cells])
    p_hat = np.array([c[1] for c in cells])
    gamma_cell = 1.0 - np.array([c[3] for c in cells]) / np.array([c[4] for c in cells])

    def residuals(beta):
        return np.sqrt(p_hat) * (gamma_cell - g_values(spec, beta, xs))

    sol = least_squares(residuals, x0=np.zeros(2), xtol=1e-15, ftol=1e-15,
                        gtol=1e-15)
    np.testing.assert_allclose(fit.beta_hat, sol.x, atol=1e-6)


@pytest.mark.parametrize("spec", [LOGISTIC, IDENTITY])
def test_plugin_and_corrected_roots_coincide_on_cells(spec, rng):
    # with exact cell-frequency nuisances the correction terms sum to zero
    # within every cell, so both moment conditions share their root
    ds, nf, _ = _discrete_instance(rng)
    corrected = solve_beta(ds, nf, spec)
    plug = plugin_projection(ds, nf, spec)
    np.testing.assert_allclose(corrected.beta_hat, plug.beta_hat, atol=1e-7)


# -------------------------------------- double-robustness bias structure

def test_bias_surface_is_product_shaped():
    # exact enumeration over a discrete generator: with mu1 fixed at the
    # truth, the moment-condition bias must vanish when either the
    # propensity or mu0 is exact, and scale like the product of the two
    # perturbations otherwise
    xs = np.array([[0.0], [1.0], [2.0]])
    p_x = np.array([0.3, 0.4, 0.3])
    pi = np.array([0.4, 0.5, 0.6])
    mu1 = np.array([0.6, 0.55, 0.7])
    gamma = np.array([0.35, 0.5, 0.6])
    mu0 = mu1 * (1.0 - gamma)
    spec = IDENTITY
    Xd = design_matrix(spec, xs)
    # beta solving the population moment at the truth (weighted OLS)
    W = np.diag(p_x)
    beta = np.linalg.solve(Xd.T @ W @ Xd, Xd.T @ W @ gamma)

    def exact_bias(eps, delta):
        pi_hat = pi + delta
        mu0_hat = mu0 + eps
        gamma_hat = 1.0 - mu0_hat / mu1
        bracket = (mu0_hat / mu1 ** 2 * (pi / pi_hat) * 0.0
                   - (1.0 - pi) / (1.0 - pi_hat) * (mu0 - mu0_hat) / mu1
                   + gamma_hat - Xd @ beta)
        return Xd.T @ (p_x * bracket)

    grid = (-0.06, -0.03, 0.03, 0.06)
    base = np.linalg.norm(exact_bias(0.05, 0.05))
    assert base > 1e-5  # the product term is genuinely present
    for eps in grid:
        assert np.linalg.norm(exact_bias(eps, 0.0)) < 1e-12
    for delta in grid:
        assert np.linalg.norm(exact_bias(0.0, delta)) < 1e-12
    # bilinear growth: doubling eps doubles the bias at fixed delta
    for delta in (0.03, 0.06):
        b1 = np.linalg.norm(exact_bias(0.03, delta))
        b2 = np.linalg.norm(exact_bias(0.06, delta))
        assert b2 / b1 == pytest.approx(2.0, rel=1e-6)


# ------------------------------------------------------- invariances

def test_weight_scaling_leaves_root_unchanged(rng):
    ds, nf = _simulated_fixture(600, seed=20)
    base = solve_beta(ds, nf, LOGISTIC)
    scaled_spec = WorkingModelSpec("logistic_linear",
                                   weight=lambda X: 5.5 * np.ones(len(X)))
    scaled = solve_beta(ds, nf, scaled_spec)
    np.testing.assert_allclose(scaled.beta_hat, base.beta_hat, atol=1e-8)


def test_moment_condition_permutation_invariant(rng):
    ds, nf = _simulated_fixture(150, seed=16)
    beta = rng.normal(size=5)
    base = estimating_equation(beta, ds, nf, LOGISTIC)
    perm = rng.permutation(ds.n)
    ds_perm = ds.subset(perm)
    nf_perm = from_values(nf.pi_hat[perm], nf.mu0_hat[perm], nf.mu1_hat[perm],
                          clip_eps=nf.clip_eps)
    np.testing.assert_allclose(
        estimating_equation(beta, ds_perm, nf_perm, LOGISTIC), base, atol=1e-12)


def test_solver_requires_both_arms(rng):
    X = rng.normal(size=(40, 2))
    ds = Dataset(X, np.ones(40), (rng.random(40) < 0.5).astype(float))
    nf = from_values(np.full(40, 0.5), np.full(40, 0.3), np.full(40, 0.6))
    with pytest.raises(PositivityError):
        solve_beta(ds, nf, LOGISTIC)


def test_no_multiple_root_suspicion_on_clean_data(rng):
    ds, nf = _simulated_fixture(500, seed=17)
    fit = solve_beta(ds, nf, LOGISTIC, check_roots=True)
    assert not fit.diagnostics.multiple_root_suspected


# ------------------------------------------------------------- bootstrap

def test_bootstrap_reproducible_and_psd(rng):
    # constant propensity keeps the influence values light-tailed, so every
    # resample admits an interior root
    rng2 = np.random.default_rng(900)
    s = _draw(500, 0.5, DEFAULT_PSI, "constant_half", rng2)
    ds = Dataset(s.x[:, :2], s.exposure, s.outcome)
    spec = WorkingModelSpec("identity_linear", include_intercept=False)
    reg = RegressorSpec("logistic_linear")
    a = bootstrap_covariance(ds, spec, reg, B=50, seed=77)
    b = bootstrap_covariance(ds, spec, reg, B=50, seed=77)
    np.testing.assert_array_equal(a, b)
    assert np.linalg.eigvalsh(a).min() >= 0.0
    c = bootstrap_covariance(ds, spec, reg, B=50, seed=78)
    assert not np.allclose(a, c)


def test_bootstrap_rejects_tiny_b(rng):
    ds, _ = _simulated_fixture(100, seed=19)
    with pytest.raises(ValueError, match="at least 50"):
        bootstrap_covariance(ds, LOGISTIC, RegressorSpec("logistic_linear"), B=10)


# ---------------------------------------------------------- serialization

def test_fit_dict_round_trip(rng):
    ds, nf = _simulated_fixture(500, seed=2)
    fit = solve_beta(ds, nf, LOGISTIC)
    doc = fit_to_dict(fit)
    back = fit_from_dict(doc)
    np.testing.assert_array_equal(back.beta_hat, fit.beta_hat)
    np.testing.assert_allclose(back.covariance, fit.covariance, rtol=1e-15)
    assert back.n == fit.n
    assert back.model == fit.model
    assert back.covariate_names == fit.covariate_names
    x = rng.normal(size=ds.d)
    np.testing.assert_allclose(
        predict_pc_with_ci(back, x).point, predict_pc_with_ci(fit, x).point)
