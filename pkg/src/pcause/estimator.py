"""Projection estimators for the probability of causation.

The target is the conditional probability, among exposed units with the
outcome, that the outcome would not have occurred absent the exposure.
Under positivity, consistency, no unobserved confounders for the untreated
potential outcome, and monotonicity, it equals one minus the risk ratio,

    gamma(x) = 1 - mu0(x) / mu1(x),

and the reported quantity is the best weighted-L2 approximation g(x; beta)
of gamma(x) within a working model. ``solve_beta`` finds the root of a
corrected moment condition whose per-unit terms are

    h(x; beta) * [ mu0/mu1^2 * a (y - mu1)/pi
                   - 1/mu1 * (1 - a)(y - mu0)/(1 - pi)
                   + gamma(x) - g(x; beta) ],

with h = dg/dbeta * w. The correction terms make the root insensitive to
first-order nuisance error, which is what buys root-n inference with
flexibly estimated nuisances. ``plugin_projection`` drops the correction
terms for comparison runs.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from . import working_model as wm
from .data_model import PositivityError
from .nuisance import crossfit_nuisances, fit_nuisances_full_sample

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 100
ROOT_GAP_SUSPICION = 1e-4
CONDITION_LIMIT = 1e12
Z_95 = 1.96  # fixed two-sided 95% quantile


class NonConvergenceError(RuntimeError):
    """Root search failed; carries the best iterate found."""

    def __init__(self, message, beta=None, residual=None):
        super().__init__(message)
        self.beta = beta
        self.residual = residual


class SingularMatrixError(RuntimeError):
    """The derivative matrix is numerically singular."""


class InfiniteOddsError(ValueError):
    """Odds of causation requested at a probability of exactly 0 or 1."""


class BootstrapInstabilityError(RuntimeError):
    """Too many bootstrap resamples failed to converge."""


@dataclass(frozen=True)
class SolverDiagnostics:
    iterations: int
    residual_norm: float
    converged: bool
    multiple_root_suspected: bool = False


@dataclass(frozen=True)
class PcEstimate:
    """Point estimate with a Wald interval; ``se`` is sigma_hat(x)/sqrt(n)."""

    point: float
    ci_low: float
    ci_high: float
    se: float

    def __post_init__(self):
        if np.isfinite(self.ci_low) and np.isfinite(self.ci_high):
            if not self.ci_low <= self.point <= self.ci_high:
                raise ValueError(
                    f"interval ({self.ci_low}, {self.ci_high}) does not "
                    f"bracket the point {self.point}")


@dataclass(frozen=True)
class ProjectionFit:
    """Solved projection: coefficients, covariance, and diagnostics.

    ``covariance`` is the estimated asymptotic covariance of
    sqrt(n) * (beta_hat - beta); per-unit standard errors divide by
    sqrt(n) at prediction time. It is None for plugin fits with
    nonparametric nuisances, where no valid interval exists.
    """

    beta_hat: np.ndarray
    covariance: np.ndarray
    n: int
    model: wm.WorkingModelSpec
    diagnostics: SolverDiagnostics
    if_values: np.ndarray = None
    M_hat: np.ndarray = None
    covariate_names: tuple = ()
    estimator: str = "proposed"
    nuisance_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        beta = np.asarray(self.beta_hat, dtype=float).ravel().copy()
        beta.setflags(write=False)
        object.__setattr__(self, "beta_hat", beta)
        if self.covariance is not None:
            cov = np.asarray(self.covariance, dtype=float)
            scale = max(1.0, float(np.abs(cov).max()))
            if np.abs(cov - cov.T).max() > 1e-8 * scale:
                raise ValueError("covariance is not symmetric")
            if np.linalg.eigvalsh(cov).min() < -1e-8 * scale:
                raise ValueError("covariance is not positive semidefinite")
            cov = cov.copy()
            cov.setflags(write=False)
            object.__setattr__(self, "covariance", cov)

    @property
    def p(self):
        return self.beta_hat.shape[0]


def gamma_plugin(mu0, mu1):
    """One minus the risk ratio, 1 - mu0/mu1.

    Not clamped: misspecification or noise can push it below zero, and the
    moment condition is valid on the raw value.
    """
    mu0 = np.asarray(mu0, dtype=float)
    mu1 = np.asarray(mu1, dtype=float)
    if (mu1 <= 0).any():
        raise ValueError("mu1 must be positive (clipped nuisances guarantee this)")
    out = 1.0 - mu0 / mu1
    return float(out) if out.ndim == 0 else out


def correction_values(a, y, pi, mu0, mu1):
    """Per-unit nuisance-correction term of the moment condition."""
    a = np.asarray(a, dtype=float)
    y = np.asarray(y, dtype=float)
    return (mu0 / mu1 ** 2 * a * (y - mu1) / pi
            - (1.0 - a) * (y - mu0) / ((1.0 - pi) * mu1))


def influence_contribution(z, beta, eta, spec):
    """Uncentered per-unit influence contribution, shape (p,).

    Parameters
    ----------
    z : Observation or (covariates, exposure, outcome) triple
    beta : array of shape (p,)
    eta : (pi, mu0, mu1) floats respecting the clip bounds
    spec : WorkingModelSpec
    """
    if hasattr(z, "covariates"):
        x, a, y = z.covariates, z.exposure, z.outcome
    else:
        x, a, y = z
    pi, mu0, mu1 = (float(v) for v in eta)
    X = np.atleast_2d(np.asarray(x, dtype=float))
    bracket = (float(correction_values(a, y, pi, mu0, mu1))
               + gamma_plugin(mu0, mu1) - wm.g_eval(spec, beta, X))
    return wm.h_eval(spec, beta, X) * bracket


def influence_matrix(beta, ds, nf, spec, pseudo_outcome=None):
    """All per-unit contributions stacked, shape (n, p).

    ``pseudo_outcome`` defaults to correction + gamma_hat (the corrected
    estimator); passing gamma_hat alone gives the plugin moment terms.
    """
    if nf.n != ds.n:
        raise ValueError(f"nuisance fit has n={nf.n}, dataset has n={ds.n}")
    if pseudo_outcome is None:
        pseudo_outcome = _pseudo_outcome(ds, nf)
    X = ds.covariates
    bracket = pseudo_outcome - wm.g_values(spec, beta, X)
    return wm.h_matrix(spec, beta, X) * bracket[:, None]


def _pseudo_outcome(ds, nf):
    return (correction_values(ds.exposure, ds.outcome, nf.pi_hat, nf.mu0_hat,
                              nf.mu1_hat) + nf.gamma_hat())


def estimating_equation(beta, ds, nf, spec):
    """Sample average of the influence contributions at beta, shape (p,)."""
    return influence_matrix(beta, ds, nf, spec).mean(axis=0)


def _jacobian(beta, X, U, spec):
    """Analytic derivative of the averaged moment condition, (p, p)."""
    Xd = wm.design_matrix(spec, X)
    w = wm.weight_values(spec, X)
    if spec.family == "identity_linear":
        return -(w[:, None] * Xd).T @ Xd / X.shape[0]
    g = wm.g_values(spec, beta, X)
    s = g * (1.0 - g)
    coef = w * (s * (1.0 - 2.0 * g) * (U - g) - s ** 2)
    return (coef[:, None] * Xd).T @ Xd / X.shape[0]


def jacobian_M(beta, ds, nf, spec, pseudo_outcome=None):
    """Derivative matrix of the estimating equation at beta."""
    if pseudo_outcome is None:
        pseudo_outcome = _pseudo_outcome(ds, nf)
    return _jacobian(np.asarray(beta, dtype=float).ravel(), ds.covariates,
                     pseudo_outcome, spec)


def _initial_beta(spec, X, gamma_hat):
    """Warm start: least squares of the (clamped, logit-scale) plugin values."""
    Xd = wm.design_matrix(spec, X)
    if spec.family == "identity_linear":
        target = gamma_hat
    else:
        clamped = np.clip(gamma_hat, 0.001, 0.999)
        target = np.log(clamped / (1.0 - clamped))
    coef, *_ = np.linalg.lstsq(Xd, target, rcond=None)
    return coef


def _newton(spec, X, U, init, tol, max_iter):
    """Damped Newton root search on mean(h * (U - g)); returns
    (beta, iterations, residual_norm).

    The moment condition is the exact gradient of the weighted
    least-squares objective mean(w (U - g)^2) / 2, so steps are accepted
    on that objective (with a Gauss-Newton direction when the Newton one
    fails to descend). This keeps the logistic family away from the
    spurious stationary plateau where the model saturates and h vanishes
    identically. A damped pass on |Psi|^2 is the last resort.
    """
    Xd = wm.design_matrix(spec, X)
    w = wm.weight_values(spec, X)
    logistic = spec.family == "logistic_linear"

    def state(beta):
        g = wm.g_values(spec, beta, X)
        resid = U - g
        grad = (g * (1.0 - g))[:, None] * Xd if logistic else Xd
        psi = (w[:, None] * grad * resid[:, None]).mean(axis=0)
        merit = 0.5 * float(np.mean(w * resid ** 2))
        return psi, merit, g

    def saturated(g):
        # a vanishing mean of g(1-g) means the "root" is the asymptotic
        # plateau where the model separates the data, not an interior
        # solution of the moment condition
        return logistic and float(np.mean(g * (1.0 - g))) < 1e-6

    beta = np.asarray(init, dtype=float).ravel().copy()
    psi, merit, g = state(beta)
    best = (np.abs(psi).max(), beta.copy())
    iterations = 0
    for it in range(max_iter):
        iterations = it
        res = np.abs(psi).max()
        if res < best[0]:
            best = (res, beta.copy())
        if res <= tol and not saturated(g):
            return beta, it, res
        M = _jacobian(beta, X, U, spec)
        direction = None
        try:
            step = np.linalg.solve(M, psi)
            if float(step @ psi) < 0.0:  # descent for the LS objective
                direction = -step
        except np.linalg.LinAlgError:
            pass
        if direction is None:
            # Gauss-Newton: drop the curvature term, always a descent
            # direction when the design has full rank
            s = (g * (1.0 - g)) if logistic else np.ones(X.shape[0])
            gram = ((w * s ** 2)[:, None] * Xd).T @ Xd / X.shape[0]
            gram += 1e-10 * np.eye(gram.shape[0])
            direction = np.linalg.solve(gram, psi)
        lam = 1.0
        improved = False
        for _ in range(40):
            cand = beta + lam * direction
            c_psi, c_merit, c_g = state(cand)
            if c_merit < merit - 1e-14:
                beta, psi, merit, g = cand, c_psi, c_merit, c_g
                improved = True
                break
            lam *= 0.5
        if not improved or np.linalg.norm(beta) > 1e6:
            break

    res = np.abs(psi).max()
    if res <= tol and not saturated(g):
        return beta, iterations, res

    # fallback: damped step-halving on |Psi|^2 from the best iterate
    beta = best[1].copy()
    psi, _, g = state(beta)
    for it in range(max_iter):
        res = np.abs(psi).max()
        if res < best[0]:
            best = (res, beta.copy())
        if res <= tol:
            if saturated(g):
                raise NonConvergenceError(
                    "search escaped to a saturated plateau (all model values "
                    "at 0 or 1); the moment condition has no interior root "
                    "along this path", beta=best[1], residual=best[0])
            return beta, iterations + it, res
        M = _jacobian(beta, X, U, spec)
        try:
            step = np.linalg.solve(M, psi)
        except np.linalg.LinAlgError:
            step, *_ = np.linalg.lstsq(M + 1e-10 * np.eye(M.shape[0]), psi,
                                       rcond=None)
        f0 = float(psi @ psi)
        lam = 1.0
        for _ in range(40):
            cand = beta - lam * step
            c_psi, _, c_g = state(cand)
            if float(c_psi @ c_psi) < f0:
                beta, psi, g = cand, c_psi, c_g
                break
            lam *= 0.5
        else:
            raise NonConvergenceError(
                f"step-halving stalled at residual {best[0]:.3e}",
                beta=best[1], residual=best[0])
    raise NonConvergenceError(
        f"no convergence in {2 * max_iter} iterations "
        f"(best residual {best[0]:.3e})", beta=best[1], residual=best[0])


def _check_positivity(ds):
    a = ds.exposure
    if not ds.is_complete():
        raise ValueError("dataset contains missing values; apply complete_case_filter")
    if not (a == 1.0).any() or not (a == 0.0).any():
        raise PositivityError("estimation requires units in both exposure arms")


def _solve_moment(ds, nf, spec, pseudo_outcome, init, tol, max_iter,
                  check_roots):
    X = ds.covariates
    if init is None:
        init = _initial_beta(spec, X, nf.gamma_hat())
    beta, iters, res = _newton(spec, X, pseudo_outcome, init, tol, max_iter)
    suspected = False
    if check_roots:
        alt_init = np.zeros_like(beta)
        if np.allclose(alt_init, init, atol=1e-12):
            alt_init = np.ones_like(beta)
        try:
            alt, _, _ = _newton(spec, X, pseudo_outcome, alt_init, tol, max_iter)
            suspected = bool(np.linalg.norm(alt - beta) > ROOT_GAP_SUSPICION)
        except NonConvergenceError:
            pass
    return beta, SolverDiagnostics(iters, float(res), True, suspected)


def solve_beta(ds, nf, spec, init=None, tol=DEFAULT_TOL,
               max_iter=DEFAULT_MAX_ITER, check_roots=True):
    """Solve the corrected moment condition and package the fit.

    Newton iteration with step-halving; identity-linear models converge in
    one step (the equation is linear). The sandwich covariance of
    sqrt(n)(beta_hat - beta) is attached. A second start point probes for
    multiple roots; disagreement beyond 1e-4 sets a diagnostic flag.
    """
    _check_positivity(ds)
    if nf.n != ds.n:
        raise ValueError(f"nuisance fit has n={nf.n}, dataset has n={ds.n}")
    U = _pseudo_outcome(ds, nf)
    beta, diag = _solve_moment(ds, nf, spec, U, init, tol, max_iter, check_roots)
    phi = influence_matrix(beta, ds, nf, spec, pseudo_outcome=U)
    M = jacobian_M(beta, ds, nf, spec, pseudo_outcome=U)
    cov = sandwich_covariance(phi, M)
    return ProjectionFit(
        beta_hat=beta, covariance=cov, n=ds.n, model=spec, diagnostics=diag,
        if_values=phi, M_hat=M, covariate_names=ds.covariate_names,
        estimator="proposed",
        nuisance_meta={"kind": nf.regressor_spec.kind,
                       "folds": nf.n_folds, "clip_eps": nf.clip_eps})


def plugin_projection(ds, nf, spec, init=None, tol=DEFAULT_TOL,
                      max_iter=DEFAULT_MAX_ITER, check_roots=True):
    """Solve the uncorrected (plugin) moment condition for comparison runs.

    With parametric nuisances a delta-method covariance is reported that
    treats the plugin values as fixed; with nonparametric nuisances no
    valid covariance exists and None is stored.
    """
    _check_positivity(ds)
    if nf.n != ds.n:
        raise ValueError(f"nuisance fit has n={nf.n}, dataset has n={ds.n}")
    U = nf.gamma_hat()
    beta, diag = _solve_moment(ds, nf, spec, U, init, tol, max_iter, check_roots)
    phi = influence_matrix(beta, ds, nf, spec, pseudo_outcome=U)
    M = jacobian_M(beta, ds, nf, spec, pseudo_outcome=U)
    cov = (sandwich_covariance(phi, M)
           if nf.regressor_spec.is_parametric else None)
    return ProjectionFit(
        beta_hat=beta, covariance=cov, n=ds.n, model=spec, diagnostics=diag,
        if_values=phi, M_hat=M, covariate_names=ds.covariate_names,
        estimator="plugin",
        nuisance_meta={"kind": nf.regressor_spec.kind,
                       "folds": nf.n_folds, "clip_eps": nf.clip_eps})


def sandwich_covariance(if_values, M_hat):
    """M^{-1} Pn(phi phi^T) M^{-T}, symmetrized.

    Raises :class:`SingularMatrixError` when M is ill-conditioned, which in
    practice means collinear covariates in the working model.
    """
    M = np.asarray(M_hat, dtype=float)
    if np.linalg.cond(M) > CONDITION_LIMIT:
        raise SingularMatrixError(
            "derivative matrix is numerically singular; check the working "
            "model covariates for collinearity")
    phi = np.asarray(if_values, dtype=float)
    meat = phi.T @ phi / phi.shape[0]
    Minv = np.linalg.inv(M)
    S = Minv @ meat @ Minv.T
    return (S + S.T) / 2.0


def wald_z(level):
    """Two-sided normal quantile; the 95% value is pinned at 1.96."""
    if not 0.0 < level < 1.0:
        raise ValueError(f"confidence level {level} outside (0, 1)")
    if level == 0.95:
        return Z_95
    return float(norm.ppf(0.5 + level / 2.0))


def predict_pc_with_ci(fit, x, level=0.95, n=None, spec=None):
    """Point estimate and Wald interval for the projection at covariates x.

    The interval is g(x; beta_hat) +/- z * sigma_hat(x)/sqrt(n) with
    sigma_hat^2(x) = grad g^T Cov grad g. Identity-linear values outside
    [0, 1] are clamped for display with a warning; logistic values are
    bounded already. Returns NaN bounds when the fit carries no covariance.
    """
    spec = spec if spec is not None else fit.model
    n = int(n if n is not None else fit.n)
    x = np.asarray(x, dtype=float).ravel()
    point = wm.g_eval(spec, fit.beta_hat, x)
    if fit.covariance is None:
        return PcEstimate(point, float("nan"), float("nan"), float("nan"))
    grad = wm.g_grad(spec, fit.beta_hat, x)
    if not np.isfinite(grad).all():
        raise ValueError("non-finite model gradient at the requested point")
    var = float(grad @ fit.covariance @ grad)
    se = np.sqrt(max(var, 0.0) / n)
    z = wald_z(level)
    lo, hi = point - z * se, point + z * se
    if spec.family == "identity_linear" and (lo < 0.0 or hi > 1.0
                                             or not 0.0 <= point <= 1.0):
        warnings.warn(
            "identity-linear projection left [0, 1]; clamping displayed "
            "values (the underlying probability is bounded)", RuntimeWarning,
            stacklevel=2)
        lo, point, hi = (min(max(v, 0.0), 1.0) for v in (lo, point, hi))
    return PcEstimate(float(point), float(lo), float(hi), float(se))


def odds_of_causation(pc):
    """pc / (1 - pc): how much likelier causation is than its absence."""
    if not 0.0 < pc < 1.0:
        raise InfiniteOddsError(f"odds undefined at pc={pc}")
    return pc / (1.0 - pc)


def odds_ratio(beta_j):
    """Multiplicative change in the odds per unit of a logistic covariate."""
    return float(np.exp(beta_j))


def bootstrap_covariance(ds, spec, regressor_spec, B=200, seed=0, folds=1,
                         clip_eps=0.01, tol=DEFAULT_TOL,
                         max_iter=DEFAULT_MAX_ITER, max_failure_rate=0.10):
    """Nonparametric-bootstrap covariance of sqrt(n) * beta_hat.

    Nuisances are refit on every resample (full-sample when folds == 1,
    cross-fit otherwise). Resamples whose solver fails are dropped; more
    than ``max_failure_rate`` of them aborts the run.
    """
    if B < 50:
        raise ValueError(f"B={B} is too small; use at least 50 resamples")
    n = ds.n
    betas = []
    failures = 0
    for b in range(B):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), b]))
        idx = rng.integers(0, n, size=n)
        sample = ds.subset(idx)
        sub_seed = int(rng.integers(0, 2 ** 31 - 1))
        try:
            if folds <= 1:
                nf = fit_nuisances_full_sample(sample, regressor_spec,
                                               clip_eps=clip_eps, seed=sub_seed)
            else:
                nf = crossfit_nuisances(sample, regressor_spec, folds=folds,
                                        clip_eps=clip_eps, seed=sub_seed)
            fit = solve_beta(sample, nf, spec, tol=tol, max_iter=max_iter,
                             check_roots=False)
        except Exception:
            failures += 1
            continue
        betas.append(fit.beta_hat)
    if failures > max_failure_rate * B:
        raise BootstrapInstabilityError(
            f"{failures} of {B} bootstrap resamples failed to converge")
    stacked = np.vstack(betas)
    return n * np.atleast_2d(np.cov(stacked, rowvar=False, ddof=1))


def fit_to_dict(fit):
    """JSON-ready representation: coefficients, row-major covariance,
    sample size, model family, nuisance metadata, solver diagnostics."""
    cov = None
    if fit.covariance is not None:
        cov = [float(v) for v in np.asarray(fit.covariance).ravel()]
    return {
        "beta": [float(b) for b in fit.beta_hat],
        "covariance": cov,
        "p": int(fit.p),
        "n": int(fit.n),
        "model": {"family": fit.model.family,
                  "include_intercept": bool(fit.model.include_intercept)},
        "covariate_names": list(fit.covariate_names),
        "estimator": fit.estimator,
        "nuisance": dict(fit.nuisance_meta),
        "solver": {
            "iterations": int(fit.diagnostics.iterations),
            "residual_norm": float(fit.diagnostics.residual_norm),
            "converged": bool(fit.diagnostics.converged),
            "multiple_root_suspected": bool(fit.diagnostics.multiple_root_suspected),
        },
    }


def fit_from_dict(doc):
    """Rebuild a prediction-ready fit from :func:`fit_to_dict` output."""
    p = int(doc["p"])
    cov = doc.get("covariance")
    if cov is not None:
        cov = np.asarray(cov, dtype=float).reshape(p, p)
    model = wm.WorkingModelSpec(
        family=doc["model"]["family"],
        include_intercept=doc["model"]["include_intercept"])
    solver = doc.get("solver", {})
    diag = SolverDiagnostics(
        iterations=int(solver.get("iterations", 0)),
        residual_norm=float(solver.get("residual_norm", 0.0)),
        converged=bool(solver.get("converged", True)),
        multiple_root_suspected=bool(solver.get("multiple_root_suspected", False)))
    return ProjectionFit(
        beta_hat=np.asarray(doc["beta"], dtype=float), covariance=cov,
        n=int(doc["n"]), model=model, diagnostics=diag,
        covariate_names=tuple(doc.get("covariate_names", ())),
        estimator=doc.get("estimator", "proposed"),
        nuisance_meta=dict(doc.get("nuisance", {})))
