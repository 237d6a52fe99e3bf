"""Nuisance function fitting: propensity score and arm-wise outcome means.

Three pluggable regressors are provided: a linear-logistic model fit by
iteratively reweighted least squares, a Nadaraya-Watson kernel smoother
with a Gaussian product kernel, and a bagged random forest (backed by
scikit-learn). Cross-fitting trains each nuisance on the out-of-fold units
so that downstream influence-function evaluation never reuses a unit's own
fit. All stored predictions are clipped into [clip_eps, 1 - clip_eps] so
that the moment-condition denominators stay bounded.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit
from sklearn.ensemble import RandomForestRegressor

REGRESSOR_KINDS = ("logistic_linear", "kernel_smoother", "random_forest")

DEFAULT_CLIP_EPS = 0.01
DEFAULT_FOLDS = 5
FOLD_RETRY_LIMIT = 20


class FoldConstructionError(RuntimeError):
    """An exposure arm stayed empty in some training split after retries."""


@dataclass(frozen=True)
class RegressorSpec:
    """Regressor kind plus hyperparameters.

    Recognized hyperparameters: ``bandwidth`` (kernel smoother, > 0),
    ``trees`` (forest, >= 1, default 200), ``min_leaf`` (forest, default 5),
    ``max_depth`` (forest, default None), ``max_features`` (forest, default
    ceil(d / 3)).
    """

    kind: str = "random_forest"
    hyperparameters: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in REGRESSOR_KINDS:
            raise ValueError(
                f"unknown regressor kind {self.kind!r}; expected one of {REGRESSOR_KINDS}")
        hp = dict(self.hyperparameters)
        if self.kind == "kernel_smoother":
            bw = hp.get("bandwidth", 1.0)
            if not bw > 0:
                raise ValueError(f"bandwidth must be positive, got {bw}")
        if self.kind == "random_forest":
            if hp.get("trees", 200) < 1:
                raise ValueError("tree count must be >= 1")
            if hp.get("min_leaf", 5) < 1:
                raise ValueError("min leaf size must be >= 1")
        object.__setattr__(self, "hyperparameters", hp)

    @property
    def is_parametric(self):
        return self.kind == "logistic_linear"


class ConstantRegressor:
    """Degenerate fit: predicts the training label mean everywhere."""

    def __init__(self, value):
        self.value = float(value)

    def predict(self, X):
        return np.full(np.atleast_2d(X).shape[0], self.value)


class LogisticLinearRegressor:
    """Linear-logistic fit via IRLS on internally standardized features."""

    def __init__(self, coef, mean, scale):
        self.coef = coef
        self._mean = mean
        self._scale = scale

    @property
    def coefficients(self):
        """(intercept, slopes...) on the raw feature scale."""
        slopes = self.coef[1:] / self._scale
        intercept = self.coef[0] - float(self._mean @ slopes)
        return np.concatenate([[intercept], slopes])

    def predict(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        Z = (X - self._mean) / self._scale
        eta = self.coef[0] + Z @ self.coef[1:]
        return expit(np.clip(eta, -30.0, 30.0))


class KernelSmootherRegressor:
    """Nadaraya-Watson smoother with a Gaussian product kernel."""

    def __init__(self, X, y, bandwidth):
        self._X = np.atleast_2d(np.asarray(X, dtype=float))
        self._y = np.asarray(y, dtype=float).ravel()
        self.bandwidth = float(bandwidth)

    def predict(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        # pairwise squared distances, (n_query, n_train)
        d2 = ((X[:, None, :] - self._X[None, :, :]) ** 2).sum(axis=2)
        w = np.exp(-0.5 * d2 / self.bandwidth ** 2)
        den = w.sum(axis=1)
        out = np.full(X.shape[0], self._y.mean())
        ok = den > 1e-300
        out[ok] = (w[ok] @ self._y) / den[ok]
        return out


class ForestRegressor:
    """Bagged regression trees; leaf means of 0/1 labels stay in [0, 1]."""

    def __init__(self, forest):
        self._forest = forest

    def predict(self, X):
        return self._forest.predict(np.atleast_2d(X))


def _irls(X, y, max_iter=100, tol=1e-10):
    """Logistic regression score solver; returns (p + 1,) coefficients
    (intercept first) on the standardized feature scale."""
    n, d = X.shape
    Xd = np.hstack([np.ones((n, 1)), X])
    beta = np.zeros(d + 1)
    beta[0] = math.log((y.mean() + 1e-6) / (1.0 - y.mean() + 1e-6))
    for _ in range(max_iter):
        eta = np.clip(Xd @ beta, -30.0, 30.0)
        mu = expit(eta)
        score = Xd.T @ (y - mu) / n
        if np.abs(score).max() < tol:
            break
        W = mu * (1.0 - mu)
        H = (Xd * W[:, None]).T @ Xd / n + 1e-10 * np.eye(d + 1)
        step = np.linalg.solve(H, score)
        # damp the step if the penalized log-likelihood does not improve
        ll0 = np.sum(y * eta - np.log1p(np.exp(eta)))
        lam = 1.0
        for _ in range(30):
            cand = beta + lam * step
            eta_c = np.clip(Xd @ cand, -30.0, 30.0)
            ll = np.sum(y * eta_c - np.log1p(np.exp(eta_c)))
            if ll >= ll0 - 1e-12:
                beta = cand
                break
            lam *= 0.5
        else:
            break
    return beta


def fit_regressor(spec, features, labels, seed=0):
    """Fit one regressor and return a handle with ``predict(X) -> [0, 1]``.

    Degenerate labels (all zero or all one) yield a constant predictor at
    the label proportion rather than an error. Forest fits are
    deterministic for a fixed seed.
    """
    X = np.atleast_2d(np.asarray(features, dtype=float))
    y = np.asarray(labels, dtype=float).ravel()
    if X.shape[0] != y.shape[0]:
        raise ValueError("features and labels disagree on n")
    if X.shape[0] < 1:
        raise ValueError("cannot fit a regressor on zero rows")
    if X.shape[0] < 2 or y.min() == y.max():
        return ConstantRegressor(y.mean())

    if spec.kind == "logistic_linear":
        mean = X.mean(axis=0)
        scale = X.std(axis=0)
        scale[scale == 0] = 1.0
        coef = _irls((X - mean) / scale, y)
        return LogisticLinearRegressor(coef, mean, scale)

    if spec.kind == "kernel_smoother":
        return KernelSmootherRegressor(X, y, spec.hyperparameters.get("bandwidth", 1.0))

    hp = spec.hyperparameters
    forest = RandomForestRegressor(
        n_estimators=int(hp.get("trees", 200)),
        min_samples_leaf=int(hp.get("min_leaf", 5)),
        max_depth=hp.get("max_depth"),
        max_features=int(hp.get("max_features", max(1, math.ceil(X.shape[1] / 3)))),
        random_state=int(seed),
        n_jobs=1,
    )
    forest.fit(X, y)
    return ForestRegressor(forest)


@dataclass(frozen=True)
class NuisanceFit:
    """Per-unit clipped nuisance predictions plus the fitted regressors.

    ``fold_assignment[i]`` is the fold whose training split excluded unit i;
    unit i's predictions come from that fold's models. With full-sample
    fitting all assignments are zero and single models are stored.
    """

    pi_hat: np.ndarray
    mu0_hat: np.ndarray
    mu1_hat: np.ndarray
    fold_assignment: np.ndarray
    clip_eps: float
    regressor_spec: RegressorSpec
    pi_models: tuple = ()
    mu0_models: tuple = ()
    mu1_models: tuple = ()

    def __post_init__(self):
        eps = self.clip_eps
        if not 0.0 < eps < 0.5:
            raise ValueError(f"clip_eps={eps} outside (0, 0.5)")
        for name, arr in (("pi_hat", self.pi_hat), ("mu0_hat", self.mu0_hat),
                          ("mu1_hat", self.mu1_hat)):
            arr = np.asarray(arr, dtype=float)
            if arr.min() < eps - 1e-12 or arr.max() > 1.0 - eps + 1e-12:
                raise ValueError(f"{name} violates clip bounds [{eps}, {1 - eps}]")
            arr = arr.copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        fa = np.asarray(self.fold_assignment, dtype=int).copy()
        fa.setflags(write=False)
        object.__setattr__(self, "fold_assignment", fa)

    @property
    def n(self):
        return self.pi_hat.shape[0]

    @property
    def n_folds(self):
        return int(self.fold_assignment.max()) + 1

    def gamma_hat(self):
        """Per-unit plugin estimate 1 - mu0/mu1 from the stored values."""
        return 1.0 - self.mu0_hat / self.mu1_hat


def from_values(pi, mu0, mu1, clip_eps=DEFAULT_CLIP_EPS, regressor_spec=None):
    """Wrap externally supplied nuisance values (oracle runs, testing)."""
    pi = np.clip(np.asarray(pi, dtype=float), clip_eps, 1.0 - clip_eps)
    mu0 = np.clip(np.asarray(mu0, dtype=float), clip_eps, 1.0 - clip_eps)
    mu1 = np.clip(np.asarray(mu1, dtype=float), clip_eps, 1.0 - clip_eps)
    if regressor_spec is None:
        regressor_spec = RegressorSpec("logistic_linear")
    return NuisanceFit(pi, mu0, mu1, np.zeros(pi.shape[0], dtype=int),
                       clip_eps, regressor_spec)


def _model_seed(seed, fold, role):
    return int(np.random.SeedSequence([int(seed), int(fold), role]).generate_state(1)[0])


def _fit_one_split(ds, spec, train, seed, fold):
    """Fit (pi, mu0, mu1) on the training index set; returns three handles."""
    X = ds.covariates
    a = ds.exposure
    y = ds.outcome
    pi_model = fit_regressor(spec, X[train], a[train], seed=_model_seed(seed, fold, 0))
    ctl = train[a[train] == 0.0]
    trt = train[a[train] == 1.0]
    mu0_model = fit_regressor(spec, X[ctl], y[ctl], seed=_model_seed(seed, fold, 1))
    mu1_model = fit_regressor(spec, X[trt], y[trt], seed=_model_seed(seed, fold, 2))
    return pi_model, mu0_model, mu1_model


def crossfit_nuisances(ds, spec, folds=DEFAULT_FOLDS, clip_eps=DEFAULT_CLIP_EPS,
                       seed=0):
    """Cross-fit the three nuisance functions with K folds.

    Unit i in fold k receives predictions from models trained on the other
    folds only. Fold assignment is re-randomized up to 20 times if any
    training split lacks an exposure arm.
    """
    if folds < 2:
        raise ValueError("crossfit requires folds >= 2; use fit_nuisances_full_sample")
    if not ds.is_complete():
        raise ValueError("dataset contains missing values; apply complete_case_filter")
    n = ds.n
    a = ds.exposure
    perm_rng = np.random.default_rng(np.random.SeedSequence([int(seed), 991]))
    assignment = None
    for _ in range(FOLD_RETRY_LIMIT):
        candidate = np.empty(n, dtype=int)
        perm = perm_rng.permutation(n)
        for k, chunk in enumerate(np.array_split(perm, folds)):
            candidate[chunk] = k
        ok = all(
            (a[candidate != k] == 0.0).any() and (a[candidate != k] == 1.0).any()
            for k in range(folds)
        )
        if ok:
            assignment = candidate
            break
    if assignment is None:
        raise FoldConstructionError(
            f"an exposure arm stayed empty in a training split after "
            f"{FOLD_RETRY_LIMIT} fold randomizations (n={n}, folds={folds})")

    pi = np.empty(n)
    mu0 = np.empty(n)
    mu1 = np.empty(n)
    pi_models, mu0_models, mu1_models = [], [], []
    idx = np.arange(n)
    for k in range(folds):
        train = idx[assignment != k]
        hold = idx[assignment == k]
        pm, m0, m1 = _fit_one_split(ds, spec, train, seed, k)
        pi[hold] = pm.predict(ds.covariates[hold])
        mu0[hold] = m0.predict(ds.covariates[hold])
        mu1[hold] = m1.predict(ds.covariates[hold])
        pi_models.append(pm)
        mu0_models.append(m0)
        mu1_models.append(m1)

    lo, hi = clip_eps, 1.0 - clip_eps
    return NuisanceFit(np.clip(pi, lo, hi), np.clip(mu0, lo, hi),
                       np.clip(mu1, lo, hi), assignment, clip_eps, spec,
                       tuple(pi_models), tuple(mu0_models), tuple(mu1_models))


def fit_nuisances_full_sample(ds, spec, clip_eps=DEFAULT_CLIP_EPS, seed=0):
    """Train and evaluate on the full sample (no splitting)."""
    if not ds.is_complete():
        raise ValueError("dataset contains missing values; apply complete_case_filter")
    a = ds.exposure
    if not ((a == 0.0).any() and (a == 1.0).any()):
        raise FoldConstructionError("an exposure arm is empty")
    train = np.arange(ds.n)
    pm, m0, m1 = _fit_one_split(ds, spec, train, seed, 0)
    lo, hi = clip_eps, 1.0 - clip_eps
    return NuisanceFit(
        np.clip(pm.predict(ds.covariates), lo, hi),
        np.clip(m0.predict(ds.covariates), lo, hi),
        np.clip(m1.predict(ds.covariates), lo, hi),
        np.zeros(ds.n, dtype=int), clip_eps, spec, (pm,), (m0,), (m1,))


def predict_nuisances(fit, X, clip=True):
    """Evaluate the stored regressors at new covariate rows.

    Cross-fitted models are averaged across folds. Returns (pi, mu0, mu1).
    """
    if not fit.pi_models:
        raise ValueError("this NuisanceFit carries no regressor handles")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    pi = np.mean([m.predict(X) for m in fit.pi_models], axis=0)
    mu0 = np.mean([m.predict(X) for m in fit.mu0_models], axis=0)
    mu1 = np.mean([m.predict(X) for m in fit.mu1_models], axis=0)
    if clip:
        lo, hi = fit.clip_eps, 1.0 - fit.clip_eps
        pi, mu0, mu1 = (np.clip(v, lo, hi) for v in (pi, mu0, mu1))
    return pi, mu0, mu1
