"""Semi-supervised training workbench for missing-not-at-random labels."""

from .data import (
    Dataset,
    MnarConfig,
    SyntheticSpec,
    apply_mnar_mask,
    apply_unlabeled_imbalance,
    class_counts,
    generate_synthetic,
    load_dataset,
    save_dataset,
    split_holdout,
)
from .errors import (
    ConfigError,
    DataFormatError,
    DivergenceError,
    InsufficientSamplesError,
)
from .estimator import (
    DrSimulationConfig,
    LossReport,
    cadr_loss,
    dr_identity_scenario1,
    dr_identity_scenario2,
    monte_carlo_unbiasedness,
    supp_loss,
)
from .imputation import ImputedLabel, ThresholdConfig, cai_loss, class_thresholds, impute
from .metrics import confusion, gm_accuracy, mean_accuracy, metrics_dict, per_class_recall
from .model import (
    AugmentConfig,
    ModelParams,
    OptimizerState,
    augment,
    forward,
    init_optimizer,
    init_params,
    load_checkpoint,
    predict,
    save_checkpoint,
    softmax,
)
from .propensity import (
    ClassPrior,
    PropensityScore,
    cap_loss,
    inverse_weights,
    propensity_score,
    uniform_prior,
    update_prior,
)
from .trainer import RunConfig, TrainHistory, load_history, run, save_history, train_step

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig",
    "ClassPrior",
    "ConfigError",
    "DataFormatError",
    "Dataset",
    "DivergenceError",
    "DrSimulationConfig",
    "ImputedLabel",
    "InsufficientSamplesError",
    "LossReport",
    "MnarConfig",
    "ModelParams",
    "OptimizerState",
    "PropensityScore",
    "RunConfig",
    "SyntheticSpec",
    "ThresholdConfig",
    "TrainHistory",
    "apply_mnar_mask",
    "apply_unlabeled_imbalance",
    "augment",
    "cadr_loss",
    "cai_loss",
    "cap_loss",
    "class_counts",
    "class_thresholds",
    "confusion",
    "dr_identity_scenario1",
    "dr_identity_scenario2",
    "forward",
    "generate_synthetic",
    "gm_accuracy",
    "impute",
    "init_optimizer",
    "init_params",
    "inverse_weights",
    "load_checkpoint",
    "load_dataset",
    "load_history",
    "mean_accuracy",
    "metrics_dict",
    "monte_carlo_unbiasedness",
    "per_class_recall",
    "predict",
    "propensity_score",
    "run",
    "save_checkpoint",
    "save_dataset",
    "save_history",
    "softmax",
    "split_holdout",
    "supp_loss",
    "train_step",
    "uniform_prior",
    "update_prior",
]
