"""Fusion head for pre-extracted image/text embedding pairs.

The package trains a compact stack (projections, residual adapters, a
convex feature mix, L2 normalization, elementwise fusion, and an MLP
classifier) on top of frozen encoder outputs to make a binary decision
per meme.  Everything runs on numpy with analytic gradients; no deep
learning framework is required.
"""

from .ablation import AblationRun, StudyResult, run_study
from .dataio import (
    EmbeddingRecord,
    SyntheticSpec,
    read_dataset,
    read_jsonl,
    split_dataset,
    synth,
    write_dataset,
    write_jsonl,
)
from .errors import (
    ConfigError,
    CorruptionError,
    DataError,
    DimensionError,
    FormatError,
    MemefusionError,
    NormalizationError,
    ShapeError,
    StateError,
    VersionError,
)
from .metrics import EvalReport, SeedAggregate, accuracy, aggregate, auroc, macro_f1
from .model import ABLATIONS, HeadConfig, forward, init_params, param_manifest
from .optim import LrSchedule, clip_global_norm, cross_entropy, lr_at
from .trainer import (
    Checkpoint,
    TrainConfig,
    TrainResult,
    evaluate,
    grad_diagnose,
    load_checkpoint,
    run_seeds,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "ABLATIONS",
    "AblationRun",
    "Checkpoint",
    "ConfigError",
    "CorruptionError",
    "DataError",
    "DimensionError",
    "EmbeddingRecord",
    "EvalReport",
    "FormatError",
    "HeadConfig",
    "LrSchedule",
    "MemefusionError",
    "NormalizationError",
    "SeedAggregate",
    "ShapeError",
    "StateError",
    "StudyResult",
    "SyntheticSpec",
    "TrainConfig",
    "TrainResult",
    "VersionError",
    "accuracy",
    "aggregate",
    "auroc",
    "clip_global_norm",
    "cross_entropy",
    "evaluate",
    "forward",
    "grad_diagnose",
    "init_params",
    "load_checkpoint",
    "lr_at",
    "macro_f1",
    "param_manifest",
    "read_dataset",
    "read_jsonl",
    "run_seeds",
    "run_study",
    "save_checkpoint",
    "split_dataset",
    "synth",
    "train",
    "write_dataset",
    "write_jsonl",
]
