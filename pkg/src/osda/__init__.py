"""Desk-scale open-set domain adaptation.

Unlabeled target samples are aligned to the known source classes or
rejected into a unified unknown class by adversarial training, with a
per-sample transfer weight computed from two classifier heads deciding
which way each sample is pushed.  Includes the fixed-threshold and
source-only baselines, the two weighting ablations, and the macro
per-class accuracy protocol (OS / OS*) used to score them.
"""

from .autodiff import (
    ParamStore,
    Tensor,
    affine,
    backward,
    grad_reverse,
    leaky_softmax,
    safe_log,
    sgd_step,
    softmax_stable,
    tensor,
)
from .data import (
    Batch,
    FeatureDataset,
    LabelSpaceConfig,
    SyntheticTaskSpec,
    generate_synthetic_task,
    load_features_csv,
    make_batches,
    save_features_csv,
    standard_benchmark_spec,
)
from .errors import (
    ConfigError,
    ContractError,
    DimensionError,
    DivergenceError,
    ParseError,
)
from .evaluate import (
    MetricsReport,
    RunResult,
    emit_report,
    evaluate,
    negative_transfer_delta,
    run_variants,
    sweep_openness,
    write_weight_trace,
)
from .gradcheck import run_suite
from .losses import adv_fixed, adv_weighted, aux_one_vs_rest, domain_disc, source_ce
from .model import (
    AdaptationModel,
    ModelConfig,
    known_confidence,
    known_mass,
    load_model,
    predict,
    save_model,
    transfer_weight,
)
from .train import (
    TrainConfig,
    TrainState,
    standard_benchmark_config,
    train_run,
    train_step,
)

__version__ = "0.1.0"

__all__ = [
    "AdaptationModel",
    "Batch",
    "ConfigError",
    "ContractError",
    "DimensionError",
    "DivergenceError",
    "FeatureDataset",
    "LabelSpaceConfig",
    "MetricsReport",
    "ModelConfig",
    "ParamStore",
    "ParseError",
    "RunResult",
    "SyntheticTaskSpec",
    "Tensor",
    "TrainConfig",
    "TrainState",
    "adv_fixed",
    "adv_weighted",
    "affine",
    "aux_one_vs_rest",
    "backward",
    "domain_disc",
    "emit_report",
    "evaluate",
    "generate_synthetic_task",
    "grad_reverse",
    "known_confidence",
    "known_mass",
    "leaky_softmax",
    "load_features_csv",
    "load_model",
    "make_batches",
    "negative_transfer_delta",
    "predict",
    "run_suite",
    "run_variants",
    "safe_log",
    "save_features_csv",
    "save_model",
    "sgd_step",
    "softmax_stable",
    "source_ce",
    "standard_benchmark_config",
    "standard_benchmark_spec",
    "sweep_openness",
    "tensor",
    "train_run",
    "train_step",
    "transfer_weight",
    "write_weight_trace",
]
