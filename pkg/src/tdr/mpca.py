"""Unsupervised baselines: MPCA and masked Tucker completion."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .tensor import MaskedTensor, tucker_residual_sq, matricize, project, reconstruct
from . import updates


@dataclass(frozen=True)
class MpcaModel:
    """Orthonormal-row projection matrices ``U_n`` (``P_n x I_n``).

    ``spectra[n]`` are the mode-n eigenvalues of the full-projection scatter,
    used for FVE dimension selection; ``fve_achieved`` is the fraction of the
    centered total scatter kept by the fitted projection.
    """

    factors: tuple
    spectra: tuple
    fve_achieved: float
    mean: np.ndarray = field(repr=False)

    @property
    def dims(self) -> tuple:
        return tuple(u.shape[0] for u in self.factors)


def _top_eigvecs(scatter, p):
    vals, vecs = np.linalg.eigh(scatter)
    order = np.argsort(vals)[::-1]
    return vecs[:, order[:p]].T, vals[order]


def _scatter(z, n):
    zn = matricize(z, n)
    return zn @ zn.T


def mpca_fit(x, dims=None, fve=None, tol: float = 1e-8, max_sweeps: int = 50) -> MpcaModel:
    """Fit MPCA to a complete ``(I1, I2, I3, M)`` tensor of samples.

    Give exactly one of `dims` (fixed subspace dimensions) or `fve` (target
    fraction of variation explained per mode, in ``(0, 1]``).  Samples are
    centered on their mean tensor before computing mode scatters.
    """
    if isinstance(x, MaskedTensor):
        if not x.complete:
            raise ValueError("MPCA needs a complete tensor; impute missing entries first")
        x = x.values
    x = np.asarray(x, dtype=float)
    if (dims is None) == (fve is None):
        raise ValueError("give exactly one of dims or fve")
    if fve is not None and not 0.0 < fve <= 1.0:
        raise ValueError(f"FVE target must lie in (0, 1], got {fve}")
    mean = x.mean(axis=3, keepdims=True)
    xc = x - mean

    # full projection: per-mode scatter of the centered data
    spectra = []
    full = []
    for n in (1, 2, 3):
        vecs, vals = _top_eigvecs(_scatter(xc, n), x.shape[n - 1])
        spectra.append(np.clip(vals, 0.0, None))
        full.append(vecs)
    if dims is None:
        dims = []
        for vals in spectra:
            total = vals.sum()
            if total <= 0:
                dims.append(1)
                continue
            frac = np.cumsum(vals) / total
            dims.append(int(np.searchsorted(frac, fve - 1e-12) + 1))
    dims = tuple(min(int(p), i) for p, i in zip(dims, x.shape[:3]))
    if any(p < 1 for p in dims):
        raise ValueError(f"subspace dims must be positive, got {dims}")

    factors = [full[n][: dims[n]] for n in range(3)]
    total = float(np.sum(xc * xc))
    kept = float(np.sum(project(xc, factors) ** 2))
    for _ in range(max_sweeps):
        for n in range(3):
            others = [(u, k + 1) for k, u in enumerate(factors) if k != n]
            z = xc
            for u, k in others:
                z = np.moveaxis(np.tensordot(u, z, axes=(1, k - 1)), 0, k - 1)
            factors[n], _ = _top_eigvecs(_scatter(z, n + 1), dims[n])
        new = float(np.sum(project(xc, factors) ** 2))
        done = abs(new - kept) <= tol * max(total, 1e-300)
        kept = new
        if done:
            break
    fve_achieved = kept / total if total > 0 else 1.0
    return MpcaModel(tuple(factors), tuple(spectra), float(fve_achieved), mean)


def mpca_extract(model: MpcaModel, asset) -> np.ndarray:
    """``asset x1 U1 x2 U2 x3 U3`` for one asset ``(I1, I2, I3)`` or a stack ``(..., M)``."""
    asset = np.asarray(asset, dtype=float)
    if asset.shape[:3] != tuple(u.shape[1] for u in model.factors):
        raise ValueError(f"asset shape {asset.shape} does not match model input "
                         f"{tuple(u.shape[1] for u in model.factors)}")
    return project(asset, model.factors)


def mpca_reconstruct(model: MpcaModel, asset) -> np.ndarray:
    """Orthogonal projection of `asset` onto the MPCA tensor subspace."""
    return reconstruct(mpca_extract(model, asset), model.factors)


# --- masked Tucker completion --------------------------------------------------------

@dataclass
class TuckerCompletion:
    factors: tuple
    core: np.ndarray
    residual_history: list

    def fill(self, x: MaskedTensor) -> MaskedTensor:
        """Keep observed entries of `x`, replace missing ones by the reconstruction."""
        return MaskedTensor(np.where(x.mask, x.values, reconstruct(self.core, self.factors)),
                            np.ones(x.shape, dtype=bool))


def fit_tucker_completion(x: MaskedTensor, dims, tol: float = 1e-8,
                          max_iters: int = 200) -> TuckerCompletion:
    """Minimize ``||P_Omega(X - S x1 U1^T x2 U2^T x3 U3^T)||_F^2`` by exact block updates.

    Initialized from MPCA of the zero-filled tensor; stops once the masked
    residual drops by less than ``tol`` times its initial value.
    """
    x = x.as_4mode()
    dims = tuple(min(int(p), i) for p, i in zip(dims, x.shape[:3]))
    factors = list(mpca_fit(x.filled, dims=dims).factors)
    core = updates.update_core(x, None, factors, None, 1.0,
                               core=np.zeros(dims + (x.shape[3],)))
    history = [_masked_residual(x, core, factors)]
    for _ in range(max_iters):
        for n in (1, 2, 3):
            factors[n - 1] = updates.update_factor(x, core, factors, n)
        core = updates.update_core(x, None, factors, None, 1.0, core=core)
        history.append(_masked_residual(x, core, factors))
        if history[-2] - history[-1] < tol * max(history[0], 1e-300):
            break
    return TuckerCompletion(tuple(factors), core, history)


COMPLETION_CANDIDATES = tuple(itertools.product((1, 2), repeat=3))


def select_completion_dims(x: MaskedTensor, candidates=COMPLETION_CANDIDATES, holdout: float = 0.1,
                           seed: int = 0, tol: float = 1e-6, max_iters: int = 100):
    """Pick completion dims by the RMSE on a random `holdout` share of observed entries.

    Returns ``(dims, scores)`` with ``scores`` keyed by candidate. Ties go to
    the smaller ``P1*P2*P3``. A candidate whose fit fails scores ``inf``.
    """
    x = x.as_4mode()
    if not 0.0 < holdout < 1.0:
        raise ValueError("holdout must lie in (0, 1)")
    candidates = [tuple(int(p) for p in d) for d in candidates]
    if not candidates:
        raise ValueError("no candidate dims")
    rng = np.random.default_rng(seed)
    held = x.mask & (rng.random(x.shape) < holdout)
    if not held.any():
        held = np.zeros(x.shape, bool)
        held.flat[rng.choice(np.flatnonzero(x.mask))] = True
    keep = x.mask & ~held
    train = MaskedTensor(np.where(keep, x.values, 0.0), keep)
    scores = {}
    for d in candidates:
        try:
            fit = fit_tucker_completion(train, d, tol, max_iters)
            r = reconstruct(fit.core, fit.factors)
            scores[d] = float(np.sqrt(np.mean((r[held] - x.values[held]) ** 2)))
        except (ValueError, np.linalg.LinAlgError):
            scores[d] = np.inf
        if not np.isfinite(scores[d]):
            scores[d] = np.inf
    best = min(candidates, key=lambda d: (scores[d], int(np.prod(d))))
    if not np.isfinite(scores[best]):
        raise RuntimeError("every completion candidate failed")
    return best, scores


def _masked_residual(x, core, factors):
    return tucker_residual_sq(x, core, factors)


def tucker_complete(x: MaskedTensor, dims, tol: float = 1e-8, max_iters: int = 200) -> MaskedTensor:
    """Impute missing entries from a masked Tucker fit; observed entries are kept verbatim."""
    if x.complete:
        return MaskedTensor(x.values.copy(), x.mask.copy())
    shape = x.shape
    fit = fit_tucker_completion(x, dims, tol, max_iters)
    out = fit.fill(x.as_4mode())
    return MaskedTensor(out.values.reshape(shape), out.mask.reshape(shape))
