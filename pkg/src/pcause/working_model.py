"""Projection targets g(x; beta), their gradients, and pointwise weights.

The projection machinery is agnostic to how beta is estimated: a working
model supplies the value g(x; beta), the gradient dg/dbeta, and the weighted
gradient h(x; beta) = dg/dbeta * w(x) that enters the moment condition.
Two families ship: a logistic-linear model (values in (0, 1)) and an
identity-linear model (unbounded, useful for diagnosing range violations of
a misspecified projection).
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

FAMILIES = ("logistic_linear", "identity_linear")


@dataclass(frozen=True)
class WorkingModelSpec:
    """Family, intercept flag, and weight function of a projection target.

    ``weight`` is None for the uniform weight w(x) = 1, or a callable
    mapping an (n, d) covariate matrix to an (n,) vector of positive
    weights.
    """

    family: str = "logistic_linear"
    include_intercept: bool = True
    weight: object = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.weight is not None and not callable(self.weight):
            raise TypeError("weight must be None (uniform) or a callable")

    def param_dim(self, d):
        """Number of projection parameters for d covariates."""
        return d + (1 if self.include_intercept else 0)


def design_matrix(spec, X):
    """Stack the optional intercept column onto the covariates."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if spec.include_intercept:
        return np.hstack([np.ones((X.shape[0], 1)), X])
    return X


def weight_values(spec, X):
    """Evaluate w(x) for every row of X."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if spec.weight is None:
        return np.ones(X.shape[0])
    w = np.asarray(spec.weight(X), dtype=float).ravel()
    if w.shape[0] != X.shape[0]:
        raise ValueError("weight callable returned wrong length")
    if (w <= 0).any():
        raise ValueError("weights must be strictly positive")
    return w


def _check_dims(spec, beta, X):
    beta = np.asarray(beta, dtype=float).ravel()
    p = spec.param_dim(X.shape[1])
    if beta.shape[0] != p:
        raise ValueError(
            f"beta has length {beta.shape[0]}, model expects {p} "
            f"(d={X.shape[1]}, intercept={spec.include_intercept})")
    return beta


def g_values(spec, beta, X):
    """Model values g(x; beta) for every row of X.

    Logistic values are kept strictly inside (0, 1): saturated outputs are
    nudged to the nearest representable interior double.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    beta = _check_dims(spec, beta, X)
    lin = design_matrix(spec, X) @ beta
    if spec.family == "logistic_linear":
        return np.clip(expit(lin), np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))
    return lin


def g_eval(spec, beta, x):
    """Model value at a single covariate vector."""
    return float(g_values(spec, beta, np.atleast_2d(x))[0])


def g_grad_matrix(spec, beta, X):
    """Gradient dg/dbeta, one row per unit, shape (n, p)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    beta = _check_dims(spec, beta, X)
    Xd = design_matrix(spec, X)
    if spec.family == "identity_linear":
        return Xd
    g = expit(Xd @ beta)
    return (g * (1.0 - g))[:, None] * Xd


def g_grad(spec, beta, x):
    """Gradient at a single covariate vector, shape (p,)."""
    return g_grad_matrix(spec, beta, np.atleast_2d(x))[0]


def h_matrix(spec, beta, X):
    """Weighted gradient h(x; beta) = dg/dbeta * w(x), shape (n, p)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return weight_values(spec, X)[:, None] * g_grad_matrix(spec, beta, X)


def h_eval(spec, beta, x):
    """Weighted gradient at a single covariate vector."""
    return h_matrix(spec, beta, np.atleast_2d(x))[0]
