"""Distributional instrumental variable estimation.

A treatment generator and an outcome generator sharing a hidden-noise input
are fitted jointly with the energy loss; interventional laws are then
sampled by clamping the treatment.
"""

from .baselines import fit_cf, fit_engression, fit_tsls, predict_mean, sample_engression
from .data import Dataset
from .energy import energy_distance, energy_loss, energy_loss_parts, engression_loss
from .errors import (
    ConfigurationError,
    DegenerateDesignError,
    DivError,
    InputError,
    ModelFormatError,
    NumericalError,
    ShapeError,
)
from .io import load_model, save_model
from .model import (
    DIVModel,
    FitConfig,
    NoiseConfig,
    Standardizer,
    TrainTrace,
    extract_linear_beta,
    fit_div,
    generate_joint,
    interventional_mean,
    interventional_quantile,
    qte,
    sample_interventional,
    sample_observational,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
