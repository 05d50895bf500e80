"""Sentence-curve language modeling: spline maps, diffusion training and checks."""

import json

from ._curvelang import (
    CurvelangError,
    basis_matrix,
    config_keys,
    default_config,
    distance_correlation,
    lemma1_stationarity,
    pseudo_inverse,
    reconstruction_error,
    relaxation_posterior_check,
    resolve_dims,
    sample,
    toy_corpus,
    train,
    verify,
)
from ._curvelang import probe as _probe
from ._curvelang import spectrum as _spectrum


def spectrum(length, n_ratio=2.0, eta_ratio=0.1, dim=1):
    """Eigenvalue and importance report for one sentence length, as a dict."""
    return json.loads(_spectrum(length, n_ratio, eta_ratio, dim))


def probe(checkpoint_a, checkpoint_b, config=None):
    """Logit distance-correlation comparison of two checkpoints, as a dict."""
    overrides = {k: str(v) for k, v in (config or {}).items()}
    return json.loads(_probe(checkpoint_a, checkpoint_b, overrides))


__all__ = [
    "CurvelangError",
    "basis_matrix",
    "config_keys",
    "default_config",
    "distance_correlation",
    "lemma1_stationarity",
    "probe",
    "pseudo_inverse",
    "reconstruction_error",
    "relaxation_posterior_check",
    "resolve_dims",
    "sample",
    "spectrum",
    "toy_corpus",
    "train",
    "verify",
]
