"""Dense tensor algebra with observation masks.

Tensors are plain ``numpy`` arrays of shape ``(I1, I2, I3, M)`` (or
``(I1, I2, I3)`` for a single asset).  Linear indexing is mode-1 fastest
everywhere, including matricization and file I/O.  Mode indices follow the
usual tensor-algebra convention and are 1-based: ``n=1`` is the first mode.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property, reduce

import numpy as np


@dataclass(frozen=True)
class MaskedTensor:
    """Dense values plus a boolean observation mask (``True`` = observed)."""

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        mask = np.asarray(self.mask, dtype=bool)
        if values.shape != mask.shape:
            raise ValueError(f"values shape {values.shape} != mask shape {mask.shape}")
        if values.ndim == 0 or min(values.shape) < 1:
            raise ValueError(f"every dimension must be >= 1, got {values.shape}")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)

    @classmethod
    def full(cls, values) -> "MaskedTensor":
        values = np.asarray(values, dtype=float)
        return cls(values, np.ones(values.shape, dtype=bool))

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @cached_property
    def complete(self) -> bool:
        return bool(self.mask.all())

    @cached_property
    def imagewise(self) -> bool:
        """Every frame is either fully observed or fully missing."""
        return is_imagewise(self.mask)

    def matricize(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        """Mode-`n` unfolding of the values and of the mask."""
        return matricize(self.values, n), matricize(self.mask, n)

    # Cached views for the solvers; instances are treated as immutable.
    @cached_property
    def filled(self) -> np.ndarray:
        """Values with unobserved entries set to 0."""
        return np.where(self.mask, self.values, 0.0)

    @cached_property
    def _unfold_cache(self) -> dict:
        return {}

    def unfold_filled(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        """Cached ``(matricize(filled, n), matricize(mask, n))``."""
        if n not in self._unfold_cache:
            self._unfold_cache[n] = (matricize(self.filled, n), matricize(self.mask, n))
        return self._unfold_cache[n]

    def as_4mode(self) -> "MaskedTensor":
        if self.ndim == 4:
            return self
        if self.ndim == 3:
            return MaskedTensor(self.values[..., None], self.mask[..., None])
        raise ValueError(f"expected a 3- or 4-mode tensor, got order {self.ndim}")


def _check_mode(n: int, order: int) -> None:
    if not isinstance(n, (int, np.integer)) or not 1 <= n <= order:
        raise ValueError(f"mode index {n!r} out of range for an order-{order} tensor")


def project_omega(t: MaskedTensor) -> MaskedTensor:
    """Zero the unobserved entries; the mask is kept as is."""
    return MaskedTensor(np.where(t.mask, t.values, 0.0), t.mask)


def matricize(a: np.ndarray, n: int) -> np.ndarray:
    """Mode-`n` matricization: the mode-`n` fibers become columns.

    Column ``j`` (0-based) holds the fiber whose remaining indices satisfy
    ``j = sum_k i_k * prod_{m<k, m!=n} I_m`` (lower modes vary fastest).
    """
    a = np.asarray(a)
    _check_mode(n, a.ndim)
    return np.moveaxis(a, n - 1, 0).reshape(a.shape[n - 1], -1, order="F")


def dematricize(mat: np.ndarray, n: int, dims) -> np.ndarray:
    """Inverse of :func:`matricize` for a tensor of shape `dims`."""
    mat = np.asarray(mat)
    dims = tuple(int(d) for d in dims)
    _check_mode(n, len(dims))
    rest = dims[: n - 1] + dims[n:]
    if mat.ndim != 2 or mat.shape != (dims[n - 1], int(np.prod(rest, dtype=int))):
        raise ValueError(f"matrix of shape {mat.shape} does not unfold a {dims} tensor along mode {n}")
    return np.moveaxis(mat.reshape((dims[n - 1],) + rest, order="F"), 0, n - 1)


def mode_n_product(t: np.ndarray, u: np.ndarray, n: int) -> np.ndarray:
    """``t x_n u`` for ``u`` of shape ``(J_n, I_n)``."""
    t = np.asarray(t)
    u = np.asarray(u)
    _check_mode(n, t.ndim)
    if u.ndim != 2 or u.shape[1] != t.shape[n - 1]:
        raise ValueError(f"matrix of shape {u.shape} cannot multiply mode {n} of size {t.shape[n - 1]}")
    return np.moveaxis(np.tensordot(u, t, axes=(1, n - 1)), 0, n - 1)


def multi_mode_product(t: np.ndarray, mats, modes=None) -> np.ndarray:
    """Apply ``t x_{modes[0]} mats[0] x_{modes[1]} mats[1] ...``."""
    if modes is None:
        modes = range(1, len(mats) + 1)
    for u, n in zip(mats, modes):
        t = mode_n_product(t, u, n)
    return t


def reconstruct(core: np.ndarray, factors) -> np.ndarray:
    """Tucker reconstruction ``core x1 U1^T x2 U2^T x3 U3^T``."""
    return multi_mode_product(core, [u.T for u in factors])


def project(x: np.ndarray, factors) -> np.ndarray:
    """Projection ``x x1 U1 x2 U2 x3 U3`` onto the factor row spaces."""
    return multi_mode_product(x, factors)


def kronecker(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Block matrix ``[a_ij * b]``."""
    return np.kron(np.atleast_2d(a), np.atleast_2d(b))


def kron_factors(factors) -> np.ndarray:
    """``U3 kron U2 kron U1`` for ``factors = (U1, U2, U3)``.

    With mode-1-fastest ordering this satisfies
    ``matricize(reconstruct(S, factors), 4) == matricize(S, 4) @ kron_factors(factors)``.
    """
    return reduce(kronecker, reversed(list(factors)))


def khatri_rao(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Column-wise Kronecker product of two matrices with equal column counts."""
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"column counts differ: {a.shape[1]} vs {b.shape[1]}")
    return (a[:, None, :] * b[None, :, :]).reshape(a.shape[0] * b.shape[0], a.shape[1])


def masked_fnorm_sq(t: MaskedTensor) -> float:
    """Squared Frobenius norm over observed entries only."""
    v = t.values[t.mask]
    return float(v @ v)


def masked_residual_sq(x: MaskedTensor, approx: np.ndarray) -> float:
    """``||P_Omega(x - approx)||_F^2``."""
    d = x.filled - approx
    d[~x.mask] = 0.0
    return float(np.vdot(d, d))


def tucker_residual_sq(x: MaskedTensor, core: np.ndarray, factors) -> float:
    """``||P_Omega(x - core x1 U1^T x2 U2^T x3 U3^T)||_F^2`` for a 4-mode `x`, via the mode-4 unfolding."""
    x4, w = x.unfold_filled(4)
    d = matricize(core, 4) @ kron_factors(factors)
    d -= x4
    if not x.complete:
        d *= w
    return float(np.vdot(d, d))


@dataclass(frozen=True)
class AvailabilitySets:
    """Observed column indices of every row of a mode-`n` unfolded mask.

    ``shared`` is set when every row observes the same columns, which is
    what an image-wise mask gives in modes 1 and 2.
    """

    mode: int
    rows: tuple
    shared: np.ndarray | None


def availability_sets(mask: np.ndarray, n: int) -> AvailabilitySets:
    w = matricize(np.asarray(mask, dtype=bool), n)
    rows = tuple(np.flatnonzero(r) for r in w)
    shared = rows[0] if (w == w[:1]).all() else None
    return AvailabilitySets(n, rows, shared)


def is_imagewise(mask: np.ndarray) -> bool:
    """True when every frame ``(:, :, i3, m)`` is either fully observed or fully missing."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 3:
        mask = mask[..., None]
    frame = mask[:1, :1]
    return bool((mask == frame).all())


def frame_mask(mask: np.ndarray) -> np.ndarray:
    """``(I3, M)`` frame availability of an image-wise mask."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 3:
        mask = mask[..., None]
    return mask[0, 0]
