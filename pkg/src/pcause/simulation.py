"""Synthetic benchmark: data generator, replication studies, and metrics.

The generator draws four standard-normal covariates, sets the causation
probability to a logistic function gamma(x) = expit(psi' x), draws the
exposed potential outcome as Bernoulli(beta0) independent of x, and builds
the unexposed outcome so that monotonicity holds. Under this construction
the arm-wise outcome means are mu1(x) = beta0 and
mu0(x) = beta0 / (1 + exp(psi' x)), so the generator's truth is available
in closed form for oracle runs and bias measurement.

A covariate transformation (exp, ratio, cubic, square components) produces
a second feature set X* that makes linear-logistic nuisance models
misspecified while leaving the truth unchanged; handing X or X* to the
nuisance regressors is what distinguishes the study regimes. The second
component's denominator defaults to 1 + x1 and can be switched to
1 + exp(x1) via ``transform_denominator="exp"``.
"""

import os
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import working_model as wm
from .data_model import Dataset, PotentialOutcomeRecord
from .estimator import NonConvergenceError, SingularMatrixError, plugin_projection, solve_beta
from .nuisance import RegressorSpec, crossfit_nuisances, from_values

DEFAULT_PSI = (-1.0, 0.5, -0.25, -0.1)

REGIMES = {
    "parametric_x": ("logistic_linear", False),
    "parametric_xstar": ("logistic_linear", True),
    "nonparametric_x": ("random_forest", False),
    "nonparametric_xstar": ("random_forest", True),
    "oracle": (None, False),
}

REGIME_LABELS = {
    "parametric_x": "Parametric correct (X)",
    "parametric_xstar": "Parametric misspecified (X*)",
    "nonparametric_x": "Nonparametric with X",
    "nonparametric_xstar": "Nonparametric with X*",
    "oracle": "Oracle nuisances",
}

ESTIMATOR_LABELS = {"plugin": "Plugin", "proposed": "Proposed"}


class StudyError(RuntimeError):
    """More than 10% of replications were dropped in some study cell."""


def worker_count(requested=None):
    """Worker cap: explicit request, else PCAUSE_THREADS, else CPU count."""
    if requested is not None:
        return max(1, int(requested))
    env = os.environ.get("PCAUSE_THREADS")
    if env:
        return max(1, int(env))
    return max(1, os.cpu_count() or 1)


@dataclass(frozen=True)
class DgpConfig:
    """Generator settings.

    ``beta0`` is the marginal probability of the exposed potential outcome
    and equals mu1(x); it is kept in [0.05, 0.95] so the moment-condition
    denominators stay away from zero. ``use_transformed`` hands the
    transformed features to downstream regressors while the truth is still
    generated from the raw draws.
    """

    n: int
    beta0: float = 0.5
    psi: tuple = DEFAULT_PSI
    use_transformed: bool = False
    pi_spec: str = "logistic_psi"
    seed: int = 0
    transform_denominator: str = "linear"

    def __post_init__(self):
        if not 0.05 <= self.beta0 <= 0.95:
            raise ValueError(f"beta0={self.beta0} outside [0.05, 0.95]")
        if len(self.psi) != 4:
            raise ValueError("psi must have length 4")
        if self.pi_spec not in ("logistic_psi", "constant_half"):
            raise ValueError(f"unknown pi_spec {self.pi_spec!r}")
        if self.transform_denominator not in ("linear", "exp"):
            raise ValueError(
                f"unknown transform_denominator {self.transform_denominator!r}")
        object.__setattr__(self, "psi", tuple(float(v) for v in self.psi))


def true_gamma(x, psi=DEFAULT_PSI):
    """expit(psi' x): the generator's causation probability."""
    x = np.asarray(x, dtype=float)
    return expit(x @ np.asarray(psi, dtype=float))


def transform_covariates(x, denominator="linear"):
    """Map raw draws to the transformed feature set.

    Components: (exp(x1/2), x2/(1 + x1) + 10, (x1 x3/25 + 0.6)^3,
    (x2 + x4 + 20)^2). With the default denominator, x1 == -1 is singular;
    the generator resamples such rows, and this function rejects them.
    """
    X = np.atleast_2d(np.asarray(x, dtype=float))
    if X.shape[1] != 4:
        raise ValueError("expected 4 covariates")
    if denominator == "linear":
        den = 1.0 + X[:, 0]
        if (den == 0.0).any():
            raise ValueError("x1 == -1 makes the second component singular")
    else:
        den = 1.0 + np.exp(X[:, 0])
    out = np.column_stack([
        np.exp(X[:, 0] / 2.0),
        X[:, 1] / den + 10.0,
        (X[:, 0] * X[:, 2] / 25.0 + 0.6) ** 3,
        (X[:, 1] + X[:, 3] + 20.0) ** 2,
    ])
    return out[0] if np.ndim(x) == 1 else out


def true_nuisances(x, beta0=0.5, psi=DEFAULT_PSI, pi_spec="logistic_psi"):
    """Generator-truth (pi, mu0, mu1) at covariate rows x."""
    X = np.atleast_2d(np.asarray(x, dtype=float))
    gamma = true_gamma(X, psi)
    pi = gamma.copy() if pi_spec == "logistic_psi" else np.full(X.shape[0], 0.5)
    mu1 = np.full(X.shape[0], float(beta0))
    mu0 = beta0 * (1.0 - gamma)
    return pi, mu0, mu1


@dataclass(frozen=True)
class SimulatedSample:
    """Raw draws plus ground truth for one replication."""

    x: np.ndarray
    exposure: np.ndarray
    outcome: np.ndarray
    y1: np.ndarray
    y0: np.ndarray
    gamma: np.ndarray


def _draw(n, beta0, psi, pi_spec, rng, denominator="linear"):
    X = rng.standard_normal((n, 4))
    if denominator == "linear":
        bad = X[:, 0] == -1.0
        while bad.any():
            X[bad] = rng.standard_normal((int(bad.sum()), 4))
            bad = X[:, 0] == -1.0
    gamma = true_gamma(X, psi)
    y1 = (rng.random(n) < beta0).astype(float)
    y0 = np.where(y1 == 1.0, (rng.random(n) < 1.0 - gamma).astype(float), 0.0)
    pi = gamma if pi_spec == "logistic_psi" else np.full(n, 0.5)
    a = (rng.random(n) < pi).astype(float)
    y = np.where(a == 1.0, y1, y0)
    return SimulatedSample(X, a, y, y1, y0, gamma)


def generate(cfg):
    """Draw one dataset from the generator.

    Returns (Dataset, tuple of PotentialOutcomeRecord). The dataset's
    covariates are the transformed features when ``use_transformed`` is
    set; ground truth always refers to the raw draws.
    """
    rng = np.random.default_rng(cfg.seed)
    s = _draw(cfg.n, cfg.beta0, cfg.psi, cfg.pi_spec, rng,
              cfg.transform_denominator)
    feats = (transform_covariates(s.x, cfg.transform_denominator)
             if cfg.use_transformed else s.x)
    names = tuple(f"x{j + 1}s" if cfg.use_transformed else f"x{j + 1}"
                  for j in range(4))
    ds = Dataset(feats, s.exposure, s.outcome, names)
    records = tuple(
        PotentialOutcomeRecord(int(s.y1[i]), int(s.y0[i]), float(s.gamma[i]))
        for i in range(cfg.n))
    return ds, records


@dataclass(frozen=True)
class StudyConfig:
    """Grid and generator settings for a replication study."""

    sample_sizes: tuple = (1000,)
    estimators: tuple = ("plugin", "proposed")
    regimes: tuple = ("nonparametric_x",)
    replications: int = 100
    eval_points: int = 2000
    seed: int = 0
    beta0: float = 0.5
    psi: tuple = DEFAULT_PSI
    pi_spec: str = "logistic_psi"
    transform_denominator: str = "linear"
    folds: int = 5
    clip_eps: float = 0.01
    trees: int = 200
    min_leaf: int = 5
    level: float = 0.95
    max_drop_rate: float = 0.10

    def __post_init__(self):
        object.__setattr__(self, "sample_sizes",
                           tuple(int(n) for n in self.sample_sizes))
        object.__setattr__(self, "estimators", tuple(self.estimators))
        object.__setattr__(self, "regimes", tuple(self.regimes))
        object.__setattr__(self, "psi", tuple(float(v) for v in self.psi))
        for est in self.estimators:
            if est not in ESTIMATOR_LABELS:
                raise ValueError(f"unknown estimator {est!r}")
        for regime in self.regimes:
            if regime not in REGIMES:
                raise ValueError(f"unknown regime {regime!r}; "
                                 f"expected one of {sorted(REGIMES)}")
        if self.replications < 1:
            raise ValueError("replications must be >= 1")

    @classmethod
    def from_dict(cls, doc):
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown study config keys: {sorted(unknown)}")
        return cls(**doc)


@dataclass(frozen=True)
class ReportRow:
    n: int
    estimator: str
    regime: str
    bias: float
    rmse: float
    coverage: float
    replications: int
    dropped: int


@dataclass(frozen=True)
class SimulationReport:
    """Aggregated study results, one row per grid cell."""

    rows: tuple
    config: StudyConfig = None

    def row(self, n, estimator, regime):
        for r in self.rows:
            if (r.n, r.estimator, r.regime) == (n, estimator, regime):
                return r
        raise KeyError((n, estimator, regime))

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8") as handle:
            handle.write("n,estimator,regime,bias,rmse,coverage,J,dropped\n")
            for r in self.rows:
                cov = "" if np.isnan(r.coverage) else repr(float(r.coverage))
                handle.write(
                    f"{r.n},{r.estimator},{r.regime},{repr(float(r.bias))},"
                    f"{repr(float(r.rmse))},{cov},{r.replications},{r.dropped}\n")

    def bias_rmse_table(self):
        """Plain-text grid: rows n x method, columns regimes, cells
        "bias (rmse)"."""
        regimes = [g for g in (self.config.regimes if self.config else
                               dict.fromkeys(r.regime for r in self.rows))]
        sizes = sorted({r.n for r in self.rows})
        estimators = [e for e in (self.config.estimators if self.config else
                                  dict.fromkeys(r.estimator for r in self.rows))]
        header = ["Sample size", "Method"] + [REGIME_LABELS[g] for g in regimes]
        lines = [header]
        for n in sizes:
            first = True
            for est in estimators:
                cells = []
                for g in regimes:
                    try:
                        r = self.row(n, est, g)
                        cells.append(f"{r.bias:.2f} ({r.rmse:.2f})")
                    except KeyError:
                        cells.append("-")
                lines.append([str(n) if first else "", ESTIMATOR_LABELS[est]]
                             + cells)
                first = False
        return _align(lines, title="Bias (RMSE) per configuration")

    def coverage_table(self):
        """Plain-text coverage grid (percent) for fits carrying intervals."""
        regimes = [g for g in (self.config.regimes if self.config else
                               dict.fromkeys(r.regime for r in self.rows))]
        sizes = sorted({r.n for r in self.rows})
        header = ["Sample size"] + [REGIME_LABELS[g] for g in regimes]
        lines = [header]
        for n in sizes:
            cells = []
            for g in regimes:
                try:
                    r = self.row(n, "proposed", g)
                    cells.append("-" if np.isnan(r.coverage)
                                 else f"{100.0 * r.coverage:.2f}")
                except KeyError:
                    cells.append("-")
            lines.append([str(n)] + cells)
        return _align(lines, title="Wald 95% interval coverage (percent)")


def _align(rows, title=None):
    widths = [max(len(str(r[j])) for r in rows) for j in range(len(rows[0]))]
    out = []
    if title:
        out.append(title)
    for i, r in enumerate(rows):
        out.append("  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip())
        if i == 0:
            out.append("-" * len(out[-1]))
    return "\n".join(out) + "\n"


def _replicate(cfg, n, j):
    """One replication: returns {(estimator, regime): (bias, rmse, coverage)}
    with None marking a dropped fit."""
    ss = np.random.SeedSequence([int(cfg.seed), int(n), int(j)])
    rng = np.random.default_rng(ss)
    s = _draw(n, cfg.beta0, cfg.psi, cfg.pi_spec, rng,
              cfg.transform_denominator)
    eval_x = rng.standard_normal((cfg.eval_points, 4))
    gamma_eval = true_gamma(eval_x, cfg.psi)
    model = wm.WorkingModelSpec("logistic_linear", include_intercept=False)
    ds = Dataset(s.x, s.exposure, s.outcome)

    z = 1.96 if cfg.level == 0.95 else None
    if z is None:
        from .estimator import wald_z

        z = wald_z(cfg.level)

    out = {}
    for r_index, regime in enumerate(cfg.regimes):
        kind, transformed = REGIMES[regime]
        if kind is None:
            pi, mu0, mu1 = true_nuisances(s.x, cfg.beta0, cfg.psi, cfg.pi_spec)
            nf = from_values(pi, mu0, mu1, clip_eps=cfg.clip_eps)
        else:
            feats = (transform_covariates(s.x, cfg.transform_denominator)
                     if transformed else s.x)
            reg_spec = RegressorSpec(kind, {"trees": cfg.trees,
                                            "min_leaf": cfg.min_leaf})
            nuisance_seed = int(ss.generate_state(2 + r_index)[-1])
            try:
                nf = crossfit_nuisances(Dataset(feats, s.exposure, s.outcome),
                                        reg_spec, folds=cfg.folds,
                                        clip_eps=cfg.clip_eps,
                                        seed=nuisance_seed)
            except Exception:
                for est in cfg.estimators:
                    out[(est, regime)] = None
                continue
        for est in cfg.estimators:
            solver = solve_beta if est == "proposed" else plugin_projection
            try:
                fit = solver(ds, nf, model, check_roots=False)
            except (NonConvergenceError, SingularMatrixError,
                    np.linalg.LinAlgError):
                out[(est, regime)] = None
                continue
            g_hat = wm.g_values(model, fit.beta_hat, eval_x)
            diff = g_hat - gamma_eval
            bias = float(np.abs(diff).mean())
            rmse = float(np.sqrt((diff ** 2).mean()))
            coverage = float("nan")
            if fit.covariance is not None:
                G = wm.g_grad_matrix(model, fit.beta_hat, eval_x)
                var = np.einsum("ij,jk,ik->i", G, fit.covariance, G)
                half = z * np.sqrt(np.maximum(var, 0.0) / n)
                coverage = float((np.abs(diff) <= half).mean())
            out[(est, regime)] = (bias, rmse, coverage,
                                  float(np.linalg.norm(fit.beta_hat
                                                       - np.asarray(cfg.psi))))
    return out


def _replicate_task(args):
    cfg, n, j = args
    return (n, j, _replicate(cfg, n, j))


def run_study(cfg, workers=None):
    """Run the full grid and aggregate bias, RMSE, and coverage.

    Replications carry seeds derived from (seed, n, replication index), so
    results do not depend on scheduling or worker count. A cell that drops
    more than ``max_drop_rate`` of its replications aborts the study.
    """
    tasks = [(cfg, n, j) for n in cfg.sample_sizes
             for j in range(cfg.replications)]
    nworkers = min(worker_count(workers), len(tasks))
    if nworkers > 1:
        import multiprocessing

        with multiprocessing.Pool(nworkers) as pool:
            raw = pool.map(_replicate_task, tasks)
    else:
        raw = [_replicate_task(t) for t in tasks]
    raw.sort(key=lambda t: (t[0], t[1]))

    per_cell = {}
    for n, j, results in raw:
        for key, metrics in results.items():
            per_cell.setdefault((n, *key), []).append(metrics)

    rows = []
    problems = []
    for n in cfg.sample_sizes:
        for est in cfg.estimators:
            for regime in cfg.regimes:
                metrics = per_cell.get((n, est, regime), [])
                kept = [m for m in metrics if m is not None]
                dropped = len(metrics) - len(kept)
                if dropped > cfg.max_drop_rate * cfg.replications:
                    problems.append((n, est, regime, dropped))
                if not kept:
                    rows.append(ReportRow(n, est, regime, float("nan"),
                                          float("nan"), float("nan"), 0,
                                          dropped))
                    continue
                arr = np.asarray(kept, dtype=float)
                coverage = (float(np.nanmean(arr[:, 2]))
                            if np.isfinite(arr[:, 2]).any() else float("nan"))
                rows.append(ReportRow(
                    n, est, regime, float(arr[:, 0].mean()),
                    float(arr[:, 1].mean()), coverage, len(kept), dropped))
    if problems:
        detail = "; ".join(f"n={n} {est}/{regime}: {d} dropped"
                           for n, est, regime, d in problems)
        raise StudyError(f"replication drop rate exceeded "
                         f"{cfg.max_drop_rate:.0%} ({detail})")
    return SimulationReport(tuple(rows), cfg)


def coefficient_rmse(cfg, workers=None):
    """Per-sample-size RMSE of the coefficient vector (L2 norm), used by
    the rate-of-convergence diagnostics."""
    tasks = [(cfg, n, j) for n in cfg.sample_sizes
             for j in range(cfg.replications)]
    nworkers = min(worker_count(workers), len(tasks))
    if nworkers > 1:
        import multiprocessing

        with multiprocessing.Pool(nworkers) as pool:
            raw = pool.map(_replicate_task, tasks)
    else:
        raw = [_replicate_task(t) for t in tasks]
    raw.sort(key=lambda t: (t[0], t[1]))
    errors = {n: [] for n in cfg.sample_sizes}
    for n, j, results in raw:
        for (est, regime), metrics in results.items():
            if est == "proposed" and metrics is not None:
                errors[n].append(metrics[3])
    return {n: float(np.sqrt(np.mean(np.square(v)))) if v else float("nan")
            for n, v in errors.items()}
