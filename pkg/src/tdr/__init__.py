"""Supervised tensor dimension reduction for incomplete degradation image streams.

Features extracted from masked Tucker factorizations feed a (log-)location-scale
regression that predicts time-to-failure distributions.
"""
from .lls import Family, LlsModel, TtfPrediction, fit_lls
from .mpca import fit_tucker_completion, mpca_extract, mpca_fit, tucker_complete
from .prognostics import (
    AssetStream,
    PrognosticModel,
    pad_and_stack,
    predict,
    predict_many,
    prediction_error,
    train,
    train_mpca,
)
from .supervised import FitConfig, FitState, fit
from .tensor import MaskedTensor

__all__ = [
    "AssetStream",
    "Family",
    "FitConfig",
    "FitState",
    "LlsModel",
    "MaskedTensor",
    "PrognosticModel",
    "TtfPrediction",
    "fit",
    "fit_lls",
    "fit_tucker_completion",
    "mpca_extract",
    "mpca_fit",
    "pad_and_stack",
    "predict",
    "predict_many",
    "prediction_error",
    "train",
    "train_mpca",
    "tucker_complete",
]
