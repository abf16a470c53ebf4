"""Joint search over network architecture, loss hyperparameters, and
weights for deformable image registration, plus the registration
substrate (velocity-field integration, warping, similarity losses), a
synthetic-data harness, and binary volume/checkpoint formats."""

__version__ = "0.1.0"

from .config import (RunConfig, SearchConfig, SynthSpec, TrainConfig,
                     config_from_dict, config_to_dict)
from .data import Dataset, Pair, load_dataset, save_dataset
from .exceptions import (AutoregError, ConfigError, ContractError,
                         ConvergenceError, DataError, FormatError,
                         NumericalError)
from .fields import (compose, count_folds, identity_grid, integrate_svf,
                     jacobian_determinant, resize_field, resize_scalar, warp,
                     warp_nearest)
from .io import load_checkpoint, load_volume, save_checkpoint, save_volume
from .losses import (dice_score, diffusion_loss, lncc_loss, mind_descriptor,
                     mind_loss, one_hot, pearson_ncc, reg_loss, sim_loss,
                     soft_dice_loss)
from .model import RegNet, derive_architecture, mix_weights
from .ops import CATALOG, CandidateOp, Cell, MixedOp
from .search import (SearchDriver, SearchResult, hypergradient, run_search,
                     stability_check, unrolled_weights)
from .synth import generate_splits, synth_base, synth_pair
from .train import (EvalRecord, ModelBundle, baseline_records, evaluate_model,
                    load_model_bundle, register_pair, train_weights,
                    write_eval_table)

__all__ = [
    "AutoregError", "CATALOG", "CandidateOp", "Cell", "ConfigError",
    "ContractError", "ConvergenceError", "DataError", "Dataset",
    "EvalRecord", "FormatError", "MixedOp", "ModelBundle", "NumericalError",
    "Pair", "RegNet", "RunConfig", "SearchConfig", "SearchDriver",
    "SearchResult", "SynthSpec", "TrainConfig", "baseline_records",
    "compose", "config_from_dict", "config_to_dict", "count_folds",
    "derive_architecture", "dice_score", "diffusion_loss", "evaluate_model",
    "generate_splits", "hypergradient", "identity_grid", "integrate_svf",
    "jacobian_determinant", "lncc_loss", "load_checkpoint", "load_dataset",
    "load_model_bundle", "load_volume", "mind_descriptor", "mind_loss",
    "mix_weights", "one_hot", "pearson_ncc", "reg_loss", "register_pair",
    "resize_field", "resize_scalar", "run_search", "save_checkpoint",
    "save_dataset", "save_volume", "sim_loss", "soft_dice_loss",
    "stability_check", "synth_base", "synth_pair", "train_weights",
    "unrolled_weights", "warp", "warp_nearest", "write_eval_table",
]
