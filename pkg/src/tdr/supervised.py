"""Supervised tensor dimension reduction by block updating.

Minimizes

    alpha * ||P_Omega(X - S x1 U1^T x2 U2^T x3 U3^T)||_F^2
        + (1 - alpha) * loss(y; b0, b1, S_(4))

cycling over U1, U2, U3, the regression coefficients and the core S.
For normal/lognormal responses the loss is the squared error
``||y - b0 - S_(4) b1||^2`` and every block has a closed form; other
location-scale families use the reparameterized negative log-likelihood
with convex Newton solves for the coefficient and core blocks.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import updates
from .lls import Family, ReparamCoefficients, _ols, fit_reparam, nll, standardized_residuals
from .mpca import mpca_fit
from .tensor import MaskedTensor, tucker_residual_sq, matricize, reconstruct

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FitConfig:
    alpha: float = 0.5
    family: Family = Family("normal", log_time=True)
    tol: float = 1e-6
    max_iters: int = 200
    seed: int = 0
    init: str = "heuristic"

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        object.__setattr__(self, "family", Family.parse(self.family))
        if self.tol <= 0 or self.max_iters < 1:
            raise ValueError("tol must be positive and max_iters at least 1")
        if self.init not in ("heuristic", "random"):
            raise ValueError(f"unknown init {self.init!r}")


@dataclass
class FitState:
    factors: tuple
    core: np.ndarray
    coef: ReparamCoefficients
    objective_history: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    converged: bool = False

    @property
    def core4(self) -> np.ndarray:
        return matricize(self.core, 4)

    @property
    def n_iter(self) -> int:
        return max(len(self.objective_history) - 1, 0)


def _check_inputs(x, y, dims=None):
    if not isinstance(x, MaskedTensor):
        x = MaskedTensor.full(x)
    x = x.as_4mode()
    y = np.asarray(y, dtype=float)
    if y.shape != (x.shape[3],):
        raise ValueError(f"{y.shape} responses for {x.shape[3]} assets")
    if dims is not None:
        dims = tuple(int(p) for p in dims)
        if len(dims) != 3 or any(not 1 <= p <= i for p, i in zip(dims, x.shape[:3])):
            raise ValueError(f"subspace dims {dims} invalid for tensor {x.shape}")
    return x, y, dims


def completion_residual(x: MaskedTensor, core, factors) -> float:
    return tucker_residual_sq(x, core, factors)


def regression_loss(y_t, core, coef: ReparamCoefficients, family: Family) -> float:
    """Squared error for normal families, reparameterized NLL otherwise (`y_t` transformed)."""
    w = standardized_residuals(y_t, matricize(core, 4), coef)
    if family.closed_form:
        return float(w @ w)
    return nll(family, w, coef.sigma_tilde)


def objective(x, y, state: FitState, cfg: FitConfig) -> float:
    """Value of the supervised criterion at `state` (`y` in time units)."""
    x, y, _ = _check_inputs(x, y)
    y_t = cfg.family.transform(y)
    a = cfg.alpha
    value = 0.0
    if a > 0:
        value += a * completion_residual(x, state.core, state.factors)
    if a < 1:
        value += (1 - a) * regression_loss(y_t, state.core, state.coef, cfg.family)
    return float(value)


def update_regression_block(y_t, core, family, start: ReparamCoefficients | None = None):
    """Coefficient block; `y_t` on the location-scale axis.

    Squared-error form: OLS of ``y_t`` on ``[1 | S_(4)]`` (``sigma_t = 1``).
    Otherwise: Newton on the NLL jointly in ``(b0, b1, sigma_t)``.
    """
    family = Family.parse(family)
    s4 = matricize(core, 4)
    y_t = np.asarray(y_t, dtype=float)
    if y_t.size < 2:
        raise ValueError("need at least two assets")
    if family.closed_form:
        b0, b1, _, _ = _ols(y_t, s4)
        return ReparamCoefficients(b0, b1, 1.0)
    return fit_reparam(y_t, s4, family, start=start).coef


def _update_core(x, y_t, state, cfg):
    if cfg.family.closed_form or cfg.alpha == 1.0:
        return updates.update_core(x, y_t, state.factors, state.coef, cfg.alpha, core=state.core)
    return updates.update_core_newton(x, y_t, state.factors, state.core, state.coef,
                                      cfg.alpha, cfg.family)


def _start_from_factors(x, y_t, factors, family, core0=None):
    dims = tuple(u.shape[0] for u in factors)
    if core0 is None:
        core0 = np.zeros(dims + (x.shape[3],))
    core = updates.update_core(x, None, factors, None, 1.0, core=core0)
    coef = update_regression_block(y_t, core, family)
    return FitState(tuple(factors), core, coef)


def init_heuristic(x, y, dims, family) -> FitState:
    """MPCA factors of the zero-filled tensor, least-squares core, fitted coefficients."""
    family = Family.parse(family)
    x, y, dims = _check_inputs(x, y, dims)
    factors = mpca_fit(x.filled, dims=dims).factors
    return _start_from_factors(x, family.transform(y), factors, family)


def init_random(x, y, dims, family, seed: int = 0) -> FitState:
    """Gaussian factors with orthonormalized rows, then the same core/coefficient solves."""
    family = Family.parse(family)
    x, y, dims = _check_inputs(x, y, dims)
    rng = np.random.default_rng(seed)
    factors = []
    for p, i in zip(dims, x.shape[:3]):
        q, _ = np.linalg.qr(rng.standard_normal((i, p)))
        factors.append(q.T)
    core0 = rng.standard_normal(dims + (x.shape[3],))
    return _start_from_factors(x, family.transform(y), factors, family, core0)


def _empty_row_warnings(x):
    msgs = []
    if x.complete:
        return msgs
    for n in (1, 2, 3, 4):
        w = matricize(x.mask, n)
        empty = np.flatnonzero(~w.any(axis=1))
        if empty.size:
            what = "asset" if n == 4 else f"mode-{n} index"
            msgs.append(f"{what} {empty.tolist()} has no observed entries; left at its initial value")
    return msgs


def fit(x, y, dims, cfg: FitConfig = FitConfig(), state: FitState | None = None) -> FitState:
    """Block updating: U1 -> U2 -> U3 -> coefficients -> core until the decrease is below tolerance.

    Stops when ``Psi_k - Psi_{k+1} < cfg.tol * |Psi_0|`` or after
    ``cfg.max_iters`` cycles.  `y` holds failure times (log-transformed
    internally for log-time families).
    """
    x, y, dims = _check_inputs(x, y, dims)
    y_t = cfg.family.transform(y)
    if state is None:
        if cfg.init == "heuristic":
            state = init_heuristic(x, y, dims, cfg.family)
        else:
            state = init_random(x, y, dims, cfg.family, cfg.seed)
    state.warnings.extend(_empty_row_warnings(x))
    for msg in state.warnings:
        log.info(msg)

    pattern = "complete" if x.complete else ("image-wise" if x.imagewise else "entry-wise")
    log.debug("fitting %s tensor %s, dims=%s, alpha=%s", pattern, x.shape, dims, cfg.alpha)

    psi = objective(x, y, state, cfg)
    state.objective_history = [psi]
    eps = cfg.tol * max(abs(psi), 1e-300)
    factors = list(state.factors)
    for _ in range(cfg.max_iters):
        for n in (1, 2, 3):
            factors[n - 1] = updates.update_factor(x, state.core, factors, n)
        state.factors = tuple(factors)
        if cfg.alpha < 1.0:
            state.coef = update_regression_block(y_t, state.core, cfg.family, start=state.coef)
        state.core = _update_core(x, y_t, state, cfg)
        new = objective(x, y, state, cfg)
        if not np.isfinite(new):
            raise FloatingPointError(f"objective became non-finite after {state.n_iter} cycles")
        state.objective_history.append(new)
        if psi - new < eps:
            state.converged = True
            break
        psi = new
    return state
