"""Structural demand estimation for differentiated-products panels.

Share inversion for logit, nested logit and random-coefficients logit,
fixed-effects and instrumental-variables estimation, random-coefficients
GMM, and latent-space isolation instruments learned from review text.
"""

__version__ = "0.1.0"

from .blp import (
    ChoiceModelConfig, differentiation_instruments, elasticities, fit_blp, invert_shares, predict_shares,
)
from .diagnostics import holdout_eval, iv_diagnostics, placebo_test
from .embed import EmbeddingConfig, angular_distance, isolation_instruments, train_embeddings
from .estimate import absorb_fixed_effects, fit_iv, fit_ols, fit_quantile
from .panel import DesignSpec, build_design, compute_shares, lag_and_standardize, load_panel
from .synth import SyntheticTruth, brute_force_choice_probs, generate_panel

__all__ = [
    "ChoiceModelConfig", "DesignSpec", "EmbeddingConfig", "SyntheticTruth", "absorb_fixed_effects",
    "angular_distance", "brute_force_choice_probs", "build_design", "compute_shares", "differentiation_instruments",
    "elasticities", "fit_blp", "fit_iv", "fit_ols", "fit_quantile", "generate_panel", "holdout_eval",
    "invert_shares", "isolation_instruments", "iv_diagnostics", "lag_and_standardize", "load_panel",
    "placebo_test", "predict_shares", "train_embeddings",
]
