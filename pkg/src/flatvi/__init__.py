"""Negative binomial VAEs with a flattened Fisher pullback geometry."""

__version__ = "0.1.0"

from .errors import (ConfigError, DataValidationError, DomainError, FlatVIError, NumericError,
                     ShapeError, TapeError)
from .geodesics import (GeodesicOptions, SplinePath, kl_energy, optimize_geodesic,
                        optimize_geodesics, pairwise_geodesics)
from .geometry import (affine_invariant_distance, condition_number, flattening_loss,
                       metric_report, pullback_metric, vor)
from .metrics import (knn_overlap, mean_l2, mmd_linear, ot_coupling, rowwise_spearman, spearman,
                      velocity_consistency, wasserstein2)
from .nb import nb_fisher_mu, nb_kl_same_theta, nb_log_pmf, nb_sample
from .nbvae import NbVaeModel, TrainConfig, load_model, save_model, train
from .otcfm import CfmConfig, Snapshot, VelocityField, integrate, train_otcfm
from .simulate import simulate
from .tensor_core import MlpNet

__all__ = [
    "__version__",
    "CfmConfig", "ConfigError", "DataValidationError", "DomainError", "FlatVIError",
    "GeodesicOptions", "MlpNet", "NbVaeModel", "NumericError", "ShapeError", "Snapshot",
    "SplinePath", "TapeError", "TrainConfig", "VelocityField",
    "affine_invariant_distance", "condition_number", "flattening_loss", "integrate",
    "kl_energy", "knn_overlap", "load_model", "mean_l2", "metric_report", "mmd_linear",
    "nb_fisher_mu", "nb_kl_same_theta", "nb_log_pmf", "nb_sample", "optimize_geodesic",
    "optimize_geodesics", "ot_coupling", "pairwise_geodesics", "pullback_metric",
    "rowwise_spearman", "save_model", "simulate", "spearman", "train", "train_otcfm",
    "velocity_consistency", "vor", "wasserstein2",
]
