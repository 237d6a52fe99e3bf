"""Cross-validated ranking of candidate working models.

Candidates are compared on a pseudo-risk: a shifted mean squared error
whose shift does not depend on the candidate, so rankings agree with the
true weighted L2 risk. The pseudo-risk itself depends on the nuisance
functions, so each per-unit evaluation carries the same style of
residual-correction terms as the main estimator, and candidates are always
scored on units held out from both their own fit and the nuisance fits.
"""

from dataclasses import dataclass, field

import numpy as np

from . import working_model as wm
from .estimator import NonConvergenceError, _newton, _initial_beta, gamma_plugin
from .nuisance import fit_nuisances_full_sample


@dataclass(frozen=True)
class CandidateSpec:
    """One entrant: a working-model family over a covariate subset.

    ``covariate_names`` of None means all dataset covariates; an empty
    tuple gives an intercept-only model.
    """

    candidate_id: str
    family: str = "logistic_linear"
    include_intercept: bool = True
    covariate_names: tuple = None

    def model(self):
        return wm.WorkingModelSpec(self.family, self.include_intercept)

    def columns(self, dataset_names):
        if self.covariate_names is None:
            return list(range(len(dataset_names)))
        missing = [c for c in self.covariate_names if c not in dataset_names]
        if missing:
            raise ValueError(f"candidate {self.candidate_id!r} references "
                             f"unknown covariates {missing}")
        return [dataset_names.index(c) for c in self.covariate_names]


@dataclass(frozen=True)
class FittedCandidate:
    """A candidate with its solved coefficients and training rows."""

    candidate: CandidateSpec
    beta: np.ndarray
    train_index: np.ndarray = None


@dataclass(frozen=True)
class RiskEstimate:
    candidate_id: str
    pseudo_risk: float
    se: float
    per_fold_values: tuple = ()

    def __post_init__(self):
        if np.isfinite(self.se) and self.se < 0:
            raise ValueError("standard error cannot be negative")


@dataclass(frozen=True)
class SelectionReport:
    """Ascending pseudo-risk ranking plus candidates that failed every fold."""

    ranking: tuple
    failed: tuple = ()


def pseudo_risk_contribution(z, eta, g_val, w_val=1.0, risk_center=0.0):
    """Influence-style pseudo-risk term for one unit.

    Returns w * {2 g [ mu0/mu1 * a (y - mu1)/pi
                       - 1/mu1 * (1 - a)(y - mu0)/(1 - pi) ]
                 + g^2 - 2 gamma g} - risk_center.
    """
    if hasattr(z, "covariates"):
        a, y = z.exposure, z.outcome
    else:
        _, a, y = z
    pi, mu0, mu1 = (float(v) for v in eta)
    return float(_contributions(np.array([a]), np.array([y]), np.array([pi]),
                                np.array([mu0]), np.array([mu1]),
                                np.array([float(g_val)]),
                                np.array([float(w_val)]))[0]) - float(risk_center)


def _contributions(a, y, pi, mu0, mu1, g, w):
    """Vectorized uncentered pseudo-risk contributions."""
    resid = (mu0 / mu1 * a * (y - mu1) / pi
             - (1.0 - a) * (y - mu0) / ((1.0 - pi) * mu1))
    gamma = gamma_plugin(mu0, mu1)
    return w * (2.0 * g * resid + g ** 2 - 2.0 * gamma * g)


def estimate_pseudo_risk(ds, nf, fitted, eval_index=None):
    """Average the uncentered pseudo-risk terms over evaluation units.

    ``eval_index`` defaults to all rows. When the fitted candidate records
    its training rows, any overlap with the evaluation rows is a contract
    violation (the risk would be optimistically biased).
    """
    if nf.n != ds.n:
        raise ValueError(f"nuisance fit has n={nf.n}, dataset has n={ds.n}")
    if eval_index is None:
        eval_index = np.arange(ds.n)
    eval_index = np.asarray(eval_index, dtype=int)
    if fitted.train_index is not None:
        overlap = np.intersect1d(np.asarray(fitted.train_index, dtype=int),
                                 eval_index)
        if overlap.size:
            raise ValueError(
                f"candidate {fitted.candidate.candidate_id!r} was trained on "
                f"{overlap.size} of the evaluation units (fold leakage)")
    cols = fitted.candidate.columns(list(ds.covariate_names))
    spec = fitted.candidate.model()
    X = ds.covariates[np.ix_(eval_index, cols)]
    g = wm.g_values(spec, fitted.beta, X)
    w = wm.weight_values(spec, X)
    values = _contributions(ds.exposure[eval_index], ds.outcome[eval_index],
                            nf.pi_hat[eval_index], nf.mu0_hat[eval_index],
                            nf.mu1_hat[eval_index], g, w)
    m = values.shape[0]
    se = float(values.std(ddof=1) / np.sqrt(m)) if m > 1 else float("inf")
    return RiskEstimate(fitted.candidate.candidate_id, float(values.mean()), se)


def _fit_candidate(ds, nf, cand, train, tol, max_iter):
    cols = cand.columns(list(ds.covariate_names))
    spec = cand.model()
    X = ds.covariates[np.ix_(train, cols)]
    pseudo = _train_pseudo_outcome(ds, nf, train)
    init = _initial_beta(spec, X, nf.gamma_hat()[train])
    beta, _, _ = _newton(spec, X, pseudo, init, tol, max_iter)
    return FittedCandidate(cand, beta, train_index=train)


def _train_pseudo_outcome(ds, nf, rows):
    from .estimator import correction_values

    return (correction_values(ds.exposure[rows], ds.outcome[rows],
                              nf.pi_hat[rows], nf.mu0_hat[rows],
                              nf.mu1_hat[rows])
            + nf.gamma_hat()[rows])


def select_model(ds, regressor_spec, candidates, folds=5, seed=0,
                 clip_eps=0.01, tol=1e-8, max_iter=100):
    """Rank candidates by cross-validated pseudo-risk, ascending.

    Per fold, nuisances and every candidate are fit on the training split
    and scored on the held-out units; the same folds serve both purposes.
    Ties break on candidate_id. Candidates whose solver fails on every
    fold are excluded and reported separately.
    """
    if len(candidates) < 1:
        raise ValueError("need at least one candidate")
    ids = [c.candidate_id for c in candidates]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate candidate ids: {ids}")
    n = ds.n
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7717]))
    assignment = np.empty(n, dtype=int)
    for k, chunk in enumerate(np.array_split(rng.permutation(n), folds)):
        assignment[chunk] = k

    per_candidate = {c.candidate_id: [] for c in candidates}
    contributions = {c.candidate_id: [] for c in candidates}
    for k in range(folds):
        train = np.where(assignment != k)[0]
        hold = np.where(assignment == k)[0]
        train_ds = ds.subset(train)
        nf_train = fit_nuisances_full_sample(
            train_ds, regressor_spec, clip_eps=clip_eps,
            seed=int(np.random.SeedSequence([int(seed), k]).generate_state(1)[0]))
        # evaluate the train-fitted nuisance models on the held-out units
        from .nuisance import NuisanceFit, predict_nuisances

        pi_h, mu0_h, mu1_h = predict_nuisances(nf_train, ds.covariates[hold])
        for cand in candidates:
            try:
                fitted = _fit_candidate(train_ds, nf_train, cand,
                                        np.arange(train.shape[0]), tol, max_iter)
            except (NonConvergenceError, np.linalg.LinAlgError):
                continue
            cols = cand.columns(list(ds.covariate_names))
            spec = cand.model()
            Xh = ds.covariates[np.ix_(hold, cols)]
            g = wm.g_values(spec, fitted.beta, Xh)
            w = wm.weight_values(spec, Xh)
            values = _contributions(ds.exposure[hold], ds.outcome[hold],
                                    pi_h, mu0_h, mu1_h, g, w)
            per_candidate[cand.candidate_id].append(float(values.mean()))
            contributions[cand.candidate_id].extend(values.tolist())

    ranking = []
    failed = []
    for cand in candidates:
        fold_values = per_candidate[cand.candidate_id]
        if not fold_values:
            failed.append(cand.candidate_id)
            continue
        pooled = np.asarray(contributions[cand.candidate_id])
        se = float(pooled.std(ddof=1) / np.sqrt(pooled.shape[0]))
        ranking.append(RiskEstimate(cand.candidate_id,
                                    float(np.mean(fold_values)), se,
                                    tuple(fold_values)))
    ranking.sort(key=lambda r: (r.pseudo_risk, r.candidate_id))
    return SelectionReport(tuple(ranking), tuple(failed))
