"""Prognostic pipeline: fixed-basis feature extraction, LLS regression, TTF prediction.

Two model types share :func:`predict`:

* :class:`PrognosticModel` - factors from the supervised fit, features by
  masked least squares on each stream's observed frames.
* :class:`MpcaPrognosticModel` - the unsupervised baseline: impute with a
  masked Tucker fit, reduce with MPCA, project.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import updates
from .lls import Family, LlsModel, TtfPrediction, fit_lls, predict_distribution
from .mpca import (
    COMPLETION_CANDIDATES,
    MpcaModel,
    TuckerCompletion,
    fit_tucker_completion,
    mpca_extract,
    mpca_fit,
    select_completion_dims,
)
from .supervised import FitConfig, fit
from .tensor import MaskedTensor, matricize

log = logging.getLogger(__name__)


@dataclass
class AssetStream:
    """One asset's image stream ``(I1, I2, D)`` with its mask and (optional) failure time."""

    images: np.ndarray
    mask: np.ndarray | None = None
    ttf: float | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=float)
        if self.images.ndim != 3 or self.images.shape[2] < 1:
            raise ValueError(f"an image stream must have shape (I1, I2, D>=1), got {self.images.shape}")
        if self.mask is None:
            self.mask = np.ones(self.images.shape, dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != self.images.shape:
            raise ValueError("mask and images differ in shape")
        if self.ttf is not None and not self.ttf > 0:
            raise ValueError(f"failure time must be positive, got {self.ttf}")

    @property
    def length(self) -> int:
        return self.images.shape[2]


def pad_stream(stream: AssetStream, horizon: int) -> MaskedTensor:
    """Zero-pad (masked) or truncate a stream to `horizon` frames."""
    i1, i2, d = stream.images.shape
    if d > horizon:
        log.warning("stream of %d frames truncated to the training horizon %d", d, horizon)
        return MaskedTensor(stream.images[:, :, :horizon], stream.mask[:, :, :horizon])
    values = np.zeros((i1, i2, horizon))
    mask = np.zeros((i1, i2, horizon), dtype=bool)
    values[:, :, :d] = np.where(stream.mask, stream.images, 0.0)
    mask[:, :, :d] = stream.mask
    return MaskedTensor(values, mask)


def pad_and_stack(assets, horizon: int | None = None) -> tuple[MaskedTensor, np.ndarray]:
    """Stack streams into ``(I1, I2, I3, M)`` with ``I3 = max D_m``; ``y`` is NaN where no TTF is known."""
    assets = list(assets)
    if not assets:
        raise ValueError("no assets to stack")
    shape = assets[0].images.shape[:2]
    if any(a.images.shape[:2] != shape for a in assets):
        raise ValueError("assets have inconsistent image dimensions")
    if horizon is None:
        horizon = max(a.length for a in assets)
    padded = [pad_stream(a, horizon) for a in assets]
    x = MaskedTensor(np.stack([p.values for p in padded], axis=3),
                     np.stack([p.mask for p in padded], axis=3))
    y = np.array([np.nan if a.ttf is None else a.ttf for a in assets], dtype=float)
    return x, y


def extract_core(x: MaskedTensor, factors) -> np.ndarray:
    """Masked least-squares cores ``(P1, P2, P3, M)`` of a stack of streams with fixed factors."""
    x = x.as_4mode()
    _, _, empty = updates.core_normal_equations(x, factors)
    if empty.any():
        raise ValueError(f"streams {np.flatnonzero(empty).tolist()} have no observed images")
    return updates.update_core(x, None, factors, None, 1.0)


def extract_features(stream: AssetStream, factors) -> np.ndarray:
    """``argmin_S ||P_Omega(X_m - S x1 U1^T x2 U2^T x3 U3^T)||^2`` for one stream, shape ``(P1, P2, P3)``."""
    x = pad_stream(stream, factors[2].shape[1])
    return extract_core(x, factors)[..., 0]


def _feature_rows(core: np.ndarray) -> np.ndarray:
    return matricize(core, 4)


@dataclass
class PrognosticModel:
    factors: tuple
    lls: LlsModel
    subspace: tuple
    alpha_used: float
    family: Family
    objective_history: list | None = None

    @property
    def horizon(self) -> int:
        return self.factors[2].shape[1]

    def features(self, x: MaskedTensor) -> np.ndarray:
        """Feature rows ``(M, P1*P2*P3)`` for a stack padded to the horizon."""
        return _feature_rows(extract_core(x, self.factors))


@dataclass
class MpcaPrognosticModel:
    completion: TuckerCompletion
    mpca: MpcaModel
    lls: LlsModel
    subspace: tuple
    family: Family
    label: str = "MPCA"

    @property
    def horizon(self) -> int:
        return self.mpca.factors[2].shape[1]

    def features(self, x: MaskedTensor) -> np.ndarray:
        filled = _complete_with(self.completion, x)
        return _feature_rows(mpca_extract(self.mpca, filled.values))


def _complete_with(completion: TuckerCompletion, x: MaskedTensor) -> MaskedTensor:
    """Impute new streams with the fitted completion factors (cores by masked least squares)."""
    x = x.as_4mode()
    if x.complete:
        return x
    core = extract_core(x, completion.factors)
    return TuckerCompletion(completion.factors, core, []).fill(x)


def _training_stack(assets):
    x, y = pad_and_stack(assets)
    if len(assets) < 2:
        raise ValueError("need at least two training assets")
    if np.isnan(y).any():
        raise ValueError("every training asset needs a failure time")
    return x, y


def train(assets, dims, cfg: FitConfig = FitConfig()) -> PrognosticModel:
    """Supervised fit for the basis, re-extract training features with it, fit the LLS model."""
    x, y = _training_stack(assets)
    state = fit(x, y, dims, cfg)
    model = PrognosticModel(state.factors, None, tuple(int(p) for p in dims), cfg.alpha,
                            cfg.family, state.objective_history)
    model.lls = fit_lls(y, model.features(x), cfg.family)
    return model


def fit_completion(assets, dims=None, tol: float = 1e-6, max_iters: int = 100,
                   candidates=COMPLETION_CANDIDATES, seed: int = 0) -> TuckerCompletion:
    """Masked Tucker fit of the stacked training streams, used to impute for MPCA.

    With ``dims=None`` the dims are chosen among `candidates` by held-out
    entry error (:func:`tdr.mpca.select_completion_dims`).
    """
    x, _ = pad_and_stack(assets)
    if dims is None:
        dims, _ = select_completion_dims(x, candidates, seed=seed, tol=tol, max_iters=max_iters)
    return fit_tucker_completion(x, dims, tol, max_iters)


def train_mpca(assets, dims=None, fve=None, family="lognormal", completion_dims=None,
               completion_tol: float = 1e-6, completion_iters: int = 100,
               completion: TuckerCompletion | None = None) -> MpcaPrognosticModel:
    """Baseline: masked Tucker imputation, MPCA with fixed `dims` or an `fve` target, LLS fit.

    A `completion` fitted on the same streams (see :func:`fit_completion`)
    can be passed to skip the imputation fit.
    """
    family = Family.parse(family)
    x, y = _training_stack(assets)
    if completion is None:
        if completion_dims is None:
            completion_dims, _ = select_completion_dims(x, tol=completion_tol, max_iters=completion_iters)
        completion = fit_tucker_completion(x, completion_dims, completion_tol, completion_iters)
    elif completion.core.shape[3] != x.shape[3] or completion.factors[2].shape[1] != x.shape[2]:
        raise ValueError("completion was fitted on a different set of streams")
    filled = completion.fill(x)
    mp = mpca_fit(filled.values, dims=dims, fve=fve)
    feats = _feature_rows(mpca_extract(mp, filled.values))
    lls = fit_lls(y, feats, family)
    label = "MPCA" if fve is None else f"MPCA({fve:g})"
    return MpcaPrognosticModel(completion, mp, lls, mp.dims, family, label)


def predict_many(model, streams) -> list[TtfPrediction]:
    streams = list(streams)
    x, _ = pad_and_stack(streams, horizon=model.horizon)
    feats = model.features(x)
    return [predict_distribution(model.lls, f) for f in feats]


def predict(model, stream: AssetStream) -> TtfPrediction:
    """Predicted TTF distribution of one stream; the point estimate is the median time."""
    return predict_many(model, [stream])[0]


def prediction_error(estimated: float, true_ttf: float) -> float:
    """``|estimated - true| / true``."""
    if not true_ttf > 0:
        raise ValueError(f"true failure time must be positive, got {true_ttf}")
    return abs(estimated - true_ttf) / true_ttf
