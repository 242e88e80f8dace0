"""Exact block updates for the masked Tucker / squared-error criterion.

Each update minimizes, over one block with the others fixed,

    alpha * ||P_Omega(X - S x1 U1^T x2 U2^T x3 U3^T)||_F^2
        + (1 - alpha) * ||y - b0 - S_(4) b1||^2

Factor updates ignore the regression term, which does not depend on the
factors.  Every solve goes through :func:`solve_sym`, which adds a tiny
ridge when the Gram matrix is numerically singular.

`core_unfolding` gives the matricized "projected core" ``S_{U_n(n)}``.
The ``*_normal_equations`` helpers return the right-hand sides and Gram
matrices row by row; they use Kronecker/mask structure so that the
complete, image-wise and entry-wise cases share one code path.
"""
from __future__ import annotations

import numpy as np

from .lls import ReparamCoefficients, _rho_d1, _rho_d2, _rho
from .tensor import (
    MaskedTensor,
    frame_mask,
    dematricize,
    kron_factors,
    kronecker,
    matricize,
    mode_n_product,
)

COND_MAX = 1e12
RIDGE = 1e-10


def solve_sym(g: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Solve ``g @ b = r`` for (stacks of) symmetric PSD `g`.

    When ``cond(g) > 1e12`` the system is regularized with
    ``lambda = 1e-10 * trace(g) / dim`` on the diagonal.  A stack built with
    ``np.broadcast_to`` from one matrix is checked once.
    """
    g = np.asarray(g, dtype=float)
    r = np.asarray(r, dtype=float)
    shared = g.ndim == 3 and g.shape[0] > 1 and g.strides[0] == 0
    with np.errstate(all="ignore"):
        ev = np.linalg.eigvalsh(g[:1] if shared else g)
        cond = ev[..., -1] / ev[..., 0]
    bad = ~((ev[..., 0] > 0) & (cond <= COND_MAX))
    g = np.array(g, copy=True)
    if np.any(bad):
        p = g.shape[-1]
        if shared:
            bad = np.broadcast_to(bad, g.shape[:1])
        tr = np.trace(g, axis1=-2, axis2=-1) / p
        lam = np.where(tr > 0, RIDGE * tr, 1.0)
        eye = np.eye(p)
        if g.ndim == 2:
            g = g + lam * eye
        else:
            g[bad] += lam[bad][:, None, None] * eye
    return np.linalg.solve(g, r)


def _solve_rows(gram, rhs):
    """Independent solves ``gram[i] @ b_i = rhs[i]``.

    Every path goes through here with right-hand sides from one matrix
    product, so with nothing missing the masked paths reproduce the
    complete-data solution exactly.
    """
    return solve_sym(gram, rhs[..., None])[..., 0]


def _stack(g, rows: int):
    return np.broadcast_to(g, (rows,) + g.shape)


def core_unfolding(core: np.ndarray, factors, n: int) -> np.ndarray:
    """``S_{U_n(n)}``: the core multiplied by the other factors' transposes, unfolded along `n`."""
    t = core
    for k in (1, 2, 3):
        if k != n:
            t = mode_n_product(t, factors[k - 1].T, k)
    return matricize(t, n)


# --- factor blocks -------------------------------------------------------------

def update_factor_complete(x: MaskedTensor, core, factors, n: int) -> np.ndarray:
    """Closed-form ``U_n`` for a fully observed tensor."""
    if not x.complete:
        raise ValueError("update_factor_complete needs a fully observed tensor")
    a = x.unfold_filled(n)[0]
    c = core_unfolding(core, factors, n)
    rhs = a @ c.T
    return _solve_rows(_stack(c @ c.T, rhs.shape[0]), rhs).T


def update_factor_imagewise(x: MaskedTensor, core, factors, n: int) -> np.ndarray:
    """Closed-form ``U_n`` (n = 1, 2) when whole frames are missing.

    Every row of ``X_(n)`` then shares the same available columns, so all
    rows share one Gram matrix.
    """
    if n not in (1, 2):
        raise ValueError("the image-wise factor update applies to modes 1 and 2 only")
    if not x.imagewise:
        raise ValueError("mask is not image-wise; use the entry-wise update")
    a, w = x.unfold_filled(n)
    cols = w[0]
    if not cols.any():
        return factors[n - 1].copy()
    # missing columns of `a` are zero, so zeroing them in `c` restricts both products
    c = core_unfolding(core, factors, n) * cols
    rhs = a @ c.T
    return _solve_rows(_stack(c @ c.T, rhs.shape[0]), rhs).T


def factor_normal_equations(x: MaskedTensor, core, factors, n: int):
    """Per-row ``(rhs, gram, empty)`` for the entry-wise ``U_n`` update.

    ``rhs[i] = C_pi x_pi`` and ``gram[i] = C_pi C_pi^T`` with ``C = S_{U_n(n)}``
    restricted to the observed columns of row ``i``.
    """
    c = core_unfolding(core, factors, n)
    a, w = x.unfold_filled(n)
    rhs = a @ c.T
    empty = ~w.any(axis=1)
    full = w.all(axis=1)
    shared = c @ c.T
    if full.all():
        return rhs, _stack(shared, rhs.shape[0]), empty
    if n == 3 and x.imagewise:
        # all pixels of a frame share availability: sum per-asset Grams
        t = mode_n_product(mode_n_product(core, factors[0].T, 1), factors[1].T, 2)
        per_asset = np.einsum("abpm,abqm->mpq", t, t)
        gram = np.einsum("im,mpq->ipq", frame_mask(x.mask).astype(float), per_asset)
    else:
        gram = np.empty((rhs.shape[0],) + shared.shape)
        part = ~full
        gram[part] = np.einsum("pn,in,qn->ipq", c, w[part].astype(float), c, optimize=True)
    gram[full] = shared
    return rhs, gram, empty


def update_factor_column_entrywise(x: MaskedTensor, core, factors, n: int, i: int) -> np.ndarray:
    """Closed-form column ``i`` (0-based) of ``U_n`` using only row ``i``'s observed entries.

    A row with no observed entries leaves the column unchanged.
    """
    rhs, gram, empty = factor_normal_equations(x, core, factors, n)
    if empty[i]:
        return factors[n - 1][:, i].copy()
    return _solve_rows(gram[i:i + 1], rhs[i:i + 1])[0]


def update_factor_entrywise(x: MaskedTensor, core, factors, n: int) -> np.ndarray:
    """All columns of ``U_n`` solved row by row over each row's observed entries."""
    rhs, gram, empty = factor_normal_equations(x, core, factors, n)
    u = _solve_rows(gram, rhs).T.copy()
    u[:, empty] = factors[n - 1][:, empty]
    return u


def update_factor(x: MaskedTensor, core, factors, n: int) -> np.ndarray:
    """Dispatch on the mask pattern: complete, image-wise (modes 1-2) or entry-wise."""
    if x.complete:
        return update_factor_complete(x, core, factors, n)
    if n in (1, 2) and x.imagewise:
        return update_factor_imagewise(x, core, factors, n)
    return update_factor_entrywise(x, core, factors, n)


# --- core block ----------------------------------------------------------------------

def core_normal_equations(x: MaskedTensor, factors, chunk: int = 64):
    """Per-asset ``(rhs, gram, empty)`` of the masked core least-squares problem.

    With ``K = U3 kron U2 kron U1``: ``rhs[m] = x_m^pi K^pi^T`` and
    ``gram[m] = K^pi K^pi^T`` over asset ``m``'s observed entries.
    """
    x4, w = x.unfold_filled(4)
    k = kron_factors(factors)
    rhs = x4 @ k.T
    m = rhs.shape[0]
    empty = ~w.any(axis=1)
    full = w.all(axis=1)
    shared = k @ k.T
    if full.all():
        return rhs, _stack(shared, m), empty
    if x.imagewise:
        u1, u2, u3 = factors
        g21 = kronecker(u2 @ u2.T, u1 @ u1.T)
        g3 = np.einsum("pi,im,qi->mpq", u3, frame_mask(x.mask).astype(float), u3)
        p3, p21 = g3.shape[1], g21.shape[0]
        gram = (g3[:, :, None, :, None] * g21[None, None, :, None, :]).reshape(m, p3 * p21, p3 * p21)
    else:
        gram = np.empty((m,) + shared.shape)
        part = np.flatnonzero(~full)
        wf = w.astype(float)
        for s in range(0, part.size, chunk):
            idx = part[s:s + chunk]
            gram[idx] = np.einsum("pn,mn,qn->mpq", k, wf[idx], k, optimize=True)
    gram[full] = shared
    return rhs, gram, empty


def _regression_terms(y, coef: ReparamCoefficients | None, alpha: float, p: int):
    if coef is None or alpha == 1.0:
        return np.zeros(p), np.zeros((p, p)), 0.0
    b1 = coef.beta1
    if b1.shape[0] != p:
        raise ValueError(f"{b1.shape[0]} regression coefficients for a core with {p} entries per asset")
    return b1, np.outer(b1, b1), coef.beta0


def _solve_core_rows(rhs, gram, y, coef, alpha):
    m, p = rhs.shape
    b1, bb, b0 = _regression_terms(y, coef, alpha, p)
    shared = gram.ndim == 3 and m > 1 and gram.strides[0] == 0
    g = gram[0] if shared else gram
    r = alpha * rhs
    g = alpha * g
    if alpha < 1.0:
        y = np.asarray(y, dtype=float)
        r = r + (1.0 - alpha) * np.outer(coef.sigma_tilde * y - b0, b1)
        g = g + (1.0 - alpha) * bb
    return _solve_rows(_stack(g, m) if shared else g, r)


def _fold_core(s4, dims):
    return dematricize(s4, 4, dims)


def update_core_complete(x: MaskedTensor, y, factors, coef, alpha: float) -> np.ndarray:
    """Closed-form core for a fully observed tensor (squared-error regression term)."""
    if not x.complete:
        raise ValueError("update_core_complete needs a fully observed tensor")
    dims = tuple(u.shape[0] for u in factors) + (x.shape[3],)
    k = kron_factors(factors)
    rhs = x.unfold_filled(4)[0] @ k.T
    s4 = _solve_core_rows(rhs, _stack(k @ k.T, rhs.shape[0]), y, coef, alpha)
    return _fold_core(s4, dims)


def update_core_row_entrywise(x: MaskedTensor, y, factors, coef, alpha: float, m: int,
                              core: np.ndarray | None = None) -> np.ndarray:
    """Closed-form row ``m`` (0-based) of ``S_(4)`` from asset ``m``'s observed entries."""
    rhs, gram, empty = core_normal_equations(x, factors)
    if empty[m] and alpha == 1.0:
        if core is None:
            raise ValueError(f"asset {m} has no observed entries")
        return matricize(core, 4)[m].copy()
    ym = None if y is None else np.asarray(y, dtype=float)[m:m + 1]
    return _solve_core_rows(rhs[m:m + 1], gram[m:m + 1], ym, coef, alpha)[0]


def update_core(x: MaskedTensor, y, factors, coef, alpha: float,
                core: np.ndarray | None = None) -> np.ndarray:
    """Exact core update for any mask (squared-error regression term).

    Assets with no observed entries keep their previous core row when
    ``alpha == 1`` (the problem is undefined there).
    """
    dims = tuple(u.shape[0] for u in factors) + (x.shape[3],)
    rhs, gram, empty = core_normal_equations(x, factors)
    s4 = _solve_core_rows(rhs, gram, y, coef, alpha)
    if alpha == 1.0 and empty.any():
        if core is None:
            raise ValueError(f"assets {np.flatnonzero(empty).tolist()} have no observed entries")
        s4[empty] = matricize(core, 4)[empty]
    return _fold_core(s4, dims)


def update_core_newton(x: MaskedTensor, y, factors, core, coef: ReparamCoefficients,
                       alpha: float, family, tol: float = 1e-10, max_iter: int = 100) -> np.ndarray:
    """Core update under a general location-scale likelihood.

    Rows decouple; each minimizes
    ``alpha*||x_m^pi - s K^pi||^2 + (1-alpha)*rho(sigma_t*y_m - b0 - s.b1)``
    by damped Newton started from the current row, so no row gets worse.
    """
    base = family.base
    dims = core.shape
    rhs, gram, _ = core_normal_equations(x, factors)
    s = matricize(core, 4).copy()
    b1 = coef.beta1
    target = coef.sigma_tilde * np.asarray(y, float) - coef.beta0
    bb = np.outer(b1, b1)

    def row_obj(s_):
        quad = np.einsum("mp,mpq,mq->m", s_, gram, s_) - 2.0 * np.einsum("mp,mp->m", s_, rhs)
        return alpha * quad + (1.0 - alpha) * _rho(base, target - s_ @ b1)

    f = row_obj(s)
    active = np.ones(s.shape[0], dtype=bool)
    for _ in range(max_iter):
        w = target - s @ b1
        grad = 2.0 * alpha * (np.einsum("mpq,mq->mp", gram, s) - rhs) \
            - (1.0 - alpha) * _rho_d1(base, w)[:, None] * b1
        gnorm = np.linalg.norm(grad, axis=1)
        active &= gnorm > tol
        if not active.any():
            break
        hess = 2.0 * alpha * gram + (1.0 - alpha) * _rho_d2(base, w)[:, None, None] * bb
        step = solve_sym(hess, grad[..., None])[..., 0]
        t = np.ones(s.shape[0])
        slope = np.einsum("mp,mp->m", grad, step)
        accepted = ~active
        cand = s.copy()
        fc = f.copy()
        for _ in range(60):
            trial = s - t[:, None] * step
            ft = row_obj(trial)
            ok = ~accepted & np.isfinite(ft) & (ft <= f - 1e-4 * t * slope)
            cand[ok] = trial[ok]
            fc[ok] = ft[ok]
            accepted |= ok
            if accepted.all():
                break
            t = np.where(accepted, t, 0.5 * t)
        stalled = ~accepted
        active &= ~stalled
        s, f = cand, fc
    return _fold_core(s, dims)
