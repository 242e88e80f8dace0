"""(Log-)location-scale regression families.

All likelihood work happens in the reparameterized coordinates
``sigma_t = 1/sigma``, ``beta_t = beta/sigma`` where the negative
log-likelihood

    -M log(sigma_t) + sum_m rho(sigma_t * y_m - b0_t - s_m . b1_t)

is jointly convex.  ``rho`` is the per-sample loss of the standard
distribution (normal, logistic or smallest extreme value).  Log-time
families (lognormal, loglogistic, Weibull) log-transform the times first.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_LOG_2PI = float(np.log(2 * np.pi))
_SIGMA_TILDE_MAX = 1e8

_NAMES = {
    ("normal", False): "normal",
    ("normal", True): "lognormal",
    ("logistic", False): "logistic",
    ("logistic", True): "loglogistic",
    ("sev", False): "sev",
    ("sev", True): "weibull",
}


class PerfectFitError(ArithmeticError):
    """The regression interpolates the data and the scale collapses to zero."""


@dataclass(frozen=True)
class Family:
    base: str = "normal"
    log_time: bool = False

    def __post_init__(self):
        if self.base not in ("normal", "logistic", "sev"):
            raise ValueError(f"unknown location-scale family {self.base!r}")

    @classmethod
    def parse(cls, name) -> "Family":
        if isinstance(name, Family):
            return name
        for (base, log_time), n in _NAMES.items():
            if n == str(name).lower():
                return cls(base, log_time)
        raise ValueError(f"unknown family {name!r}; choose from {sorted(_NAMES.values())}")

    @property
    def name(self) -> str:
        return _NAMES[(self.base, self.log_time)]

    @property
    def closed_form(self) -> bool:
        """Normal/lognormal responses admit the squared-error block solutions."""
        return self.base == "normal"

    def transform(self, t):
        t = np.asarray(t, dtype=float)
        if not self.log_time:
            return t
        if np.any(t <= 0):
            raise ValueError(f"{self.name} requires strictly positive times")
        return np.log(t)

    def inverse_transform(self, y):
        """Back to the time axis; an extreme log-time prediction maps to ``inf``."""
        if not self.log_time:
            return y
        with np.errstate(over="ignore"):
            return np.exp(y)

    def median(self, location, scale):
        """Median on the location-scale (transformed) axis."""
        if self.base == "sev":
            return location + scale * np.log(np.log(2.0))
        return location


# per-sample loss rho(w) and its first two derivatives

def _rho(base, w):
    if base == "normal":
        return 0.5 * w * w
    if base == "logistic":
        return -w + 2.0 * np.logaddexp(0.0, w)
    with np.errstate(over="ignore"):
        return -w + np.exp(w)


def _rho_d1(base, w):
    if base == "normal":
        return w
    if base == "logistic":
        return np.tanh(0.5 * w)
    with np.errstate(over="ignore"):
        return np.expm1(w)


def _rho_d2(base, w):
    if base == "normal":
        return np.ones_like(w)
    if base == "logistic":
        return 0.5 / np.cosh(0.5 * w) ** 2
    with np.errstate(over="ignore"):
        return np.exp(w)


@dataclass(frozen=True)
class ReparamCoefficients:
    """``(b0/sigma, b1/sigma, 1/sigma)``."""

    beta0: float
    beta1: np.ndarray
    sigma_tilde: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "beta1", np.atleast_1d(np.asarray(self.beta1, dtype=float)))
        if not self.sigma_tilde > 0:
            raise ValueError(f"sigma_tilde must be positive, got {self.sigma_tilde}")

    @classmethod
    def from_natural(cls, beta0, beta1, sigma) -> "ReparamCoefficients":
        if not sigma > 0:
            raise ValueError(f"sigma must be positive, got {sigma}")
        return cls(beta0 / sigma, np.asarray(beta1, dtype=float) / sigma, 1.0 / sigma)

    def to_natural(self) -> tuple[float, np.ndarray, float]:
        st = self.sigma_tilde
        return self.beta0 / st, self.beta1 / st, 1.0 / st

    @classmethod
    def from_vector(cls, theta) -> "ReparamCoefficients":
        return cls(float(theta[0]), theta[1:-1], float(theta[-1]))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([[self.beta0], self.beta1, [self.sigma_tilde]])


def _check_design(y, features):
    y = np.asarray(y, dtype=float)
    s = np.asarray(features, dtype=float)
    if s.ndim == 1:
        s = s[:, None]
    if s.shape[0] != y.shape[0]:
        raise ValueError(f"{s.shape[0]} feature rows for {y.shape[0]} responses")
    return y, s


def standardized_residuals(y, features, c: ReparamCoefficients) -> np.ndarray:
    y, s = _check_design(y, features)
    if s.shape[1] != c.beta1.shape[0]:
        raise ValueError(f"{s.shape[1]} features but {c.beta1.shape[0]} coefficients")
    return c.sigma_tilde * y - c.beta0 - s @ c.beta1


def nll(family: Family, omega, sigma_tilde: float) -> float:
    """Negative log-likelihood of standardized residuals `omega`."""
    if not sigma_tilde > 0:
        raise ValueError(f"sigma_tilde must be positive, got {sigma_tilde}")
    family = Family.parse(family)
    omega = np.asarray(omega, dtype=float)
    m = omega.size
    value = -m * np.log(sigma_tilde) + float(np.sum(_rho(family.base, omega)))
    if family.base == "normal":
        value += 0.5 * m * _LOG_2PI
    return float(value)


def _design(y, s):
    # d omega / d theta, theta = (b0, b1..., sigma_tilde)
    return np.column_stack([-np.ones_like(y), -s, y])


def nll_gradient(family, y, features, c: ReparamCoefficients) -> np.ndarray:
    """Gradient of ``nll(standardized_residuals(...))`` as ``[d b0, d b1..., d sigma_t]``."""
    family = Family.parse(family)
    y, s = _check_design(y, features)
    w = standardized_residuals(y, s, c)
    g = _design(y, s).T @ _rho_d1(family.base, w)
    g[-1] -= y.size / c.sigma_tilde
    return g


def nll_hessian(family, y, features, c: ReparamCoefficients) -> np.ndarray:
    family = Family.parse(family)
    y, s = _check_design(y, features)
    w = standardized_residuals(y, s, c)
    z = _design(y, s)
    h = z.T @ (z * _rho_d2(family.base, w)[:, None])
    h[-1, -1] += y.size / c.sigma_tilde ** 2
    return h


def _objective(family, y, s, theta):
    if theta[-1] <= 0:
        return np.inf
    c = ReparamCoefficients.from_vector(theta)
    return nll(family, standardized_residuals(y, s, c), c.sigma_tilde)


@dataclass(frozen=True)
class NewtonResult:
    coef: ReparamCoefficients
    grad_norm: float
    iterations: int
    regularized: bool


def fit_reparam(y, features, family, start: ReparamCoefficients | None = None,
                tol: float = 1e-10, max_iter: int = 200) -> NewtonResult:
    """Damped Newton on the convex reparameterized NLL.

    `y` is already on the location-scale axis (log-transformed for log-time
    families).  Raises :class:`PerfectFitError` when ``sigma_tilde`` exceeds
    1e8, i.e. the data are interpolated.
    """
    family = Family.parse(family)
    y, s = _check_design(y, features)
    if start is None:
        start = _ols_start(y, s)
    theta = start.as_vector()
    f = _objective(family, y, s, theta)
    regularized = False
    g = np.full_like(theta, np.inf)
    it = 0
    for it in range(1, max_iter + 1):
        c = ReparamCoefficients.from_vector(theta)
        g = nll_gradient(family, y, s, c)
        gnorm = np.linalg.norm(g)
        if gnorm <= tol:
            break
        h = nll_hessian(family, y, s, c)
        try:
            if np.linalg.cond(h) > 1e12:
                raise np.linalg.LinAlgError
            step = np.linalg.solve(h, g)
        except np.linalg.LinAlgError:
            regularized = True
            lam = 1e-10 * max(np.trace(h) / h.shape[0], 1e-300)
            step = np.linalg.solve(h + lam * np.eye(h.shape[0]), g)
        t = 1.0
        slope = float(g @ step)
        while True:
            cand = theta - t * step
            fc = _objective(family, y, s, cand)
            if np.isfinite(fc) and fc <= f - 1e-4 * t * slope:
                break
            # Newton decrement below rounding of f: take the full step
            if t == 1.0 and slope <= 1e-20 and np.isfinite(fc) and cand[-1] > 0:
                break
            t *= 0.5
            if t < 1e-16:
                break
        if t < 1e-16:
            # no descent available at machine precision
            break
        theta, f = cand, fc
        if theta[-1] > _SIGMA_TILDE_MAX:
            raise PerfectFitError("scale collapsed to zero: the regression fits the data exactly")
    c = ReparamCoefficients.from_vector(theta)
    return NewtonResult(c, float(np.linalg.norm(nll_gradient(family, y, s, c))), it, regularized)


def _ols(y, s):
    """Least squares of `y` on ``[1 | s]``; returns ``(b0, b1, rss, regularized)``."""
    a = np.column_stack([np.ones_like(y), s])
    regularized = np.linalg.matrix_rank(a) < a.shape[1]
    if regularized:
        g = a.T @ a
        lam = 1e-10 * max(np.trace(g) / g.shape[0], 1e-300)
        coef = np.linalg.solve(g + lam * np.eye(g.shape[0]), a.T @ y)
    else:
        coef = np.linalg.lstsq(a, y, rcond=None)[0]
    r = y - a @ coef
    return float(coef[0]), coef[1:], float(r @ r), bool(regularized)


def _ols_start(y, s):
    b0, b1, rss, _ = _ols(y, s)
    sigma = np.sqrt(rss / y.size)
    if not sigma > 0:
        sigma = max(float(np.std(y)), 1.0)
    return ReparamCoefficients.from_natural(b0, b1, sigma)


@dataclass(frozen=True)
class LlsModel:
    family: Family
    gamma0: float
    gamma1: np.ndarray
    sigma: float
    regularized: bool = field(default=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "gamma1", np.atleast_1d(np.asarray(self.gamma1, dtype=float)))
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")

    def location(self, features) -> np.ndarray:
        return self.gamma0 + np.asarray(features, dtype=float) @ self.gamma1


def fit_lls(times, features, family) -> LlsModel:
    """Maximum-likelihood LLS regression of failure times on features.

    Normal families use the closed form (OLS plus the MLE scale
    ``RSS / M``); the others run :func:`fit_reparam`.
    """
    family = Family.parse(family)
    y, s = _check_design(family.transform(times), features)
    if y.size < 2:
        raise ValueError("need at least two observations")
    if family.base == "normal":
        b0, b1, rss, reg = _ols(y, s)
        sigma = float(np.sqrt(rss / y.size))
        if sigma < 1.0 / _SIGMA_TILDE_MAX:
            raise PerfectFitError("zero residual variance: the regression fits the data exactly")
        return LlsModel(family, b0, b1, sigma, reg)
    res = fit_reparam(y, s, family)
    g0, g1, sigma = res.coef.to_natural()
    return LlsModel(family, g0, g1, sigma, res.regularized)


@dataclass(frozen=True)
class TtfPrediction:
    location: float
    scale: float
    family: Family
    point_estimate: float


def predict_distribution(model: LlsModel, feature) -> TtfPrediction:
    """Predicted distribution for one feature vector; the point estimate is its median in time units."""
    feature = np.ravel(np.asarray(feature, dtype=float))
    if feature.shape[0] != model.gamma1.shape[0]:
        raise ValueError(f"feature length {feature.shape[0]} != {model.gamma1.shape[0]} coefficients")
    loc = float(model.gamma0 + feature @ model.gamma1)
    point = float(model.family.inverse_transform(model.family.median(loc, model.sigma)))
    return TtfPrediction(loc, float(model.sigma), model.family, point)
