from .core import (
    CheckpointError,
    ConfigError,
    CoopHashError,
    DatasetError,
    HashIndexError,
    LabelError,
    LangevinDivergenceError,
    LossError,
    RandomStreams,
    TrainConfig,
    TrainingDivergedError,
    seeded_rng,
    validate_config,
)
from .data import Dataset, LabelSampler, load_dataset, load_idx, load_png_dir, make_splits
from .evaluation import ProbeCallback, build_index, encode, evaluate_retrieval
from .mcmc import LangevinConfig, cooperative_sample, langevin_revise
from .models import HashCode, LabeledImage, LatentCode, LossReport, MetricResult, RankingResult
from .nets import Descriptor, Generator, build_networks, generate_contrastive_pair, reconstruct
from .retrieval import HashIndex, binarize, hamming_distance, mean_average_precision, precision_at_k, search
from .sweep import AblationSweep
from .training import CooperativeTrainer, TrainCallback, TrainState, fit, train_step

__version__ = "0.1.0"
__all__ = [
    "AblationSweep",
    "CheckpointError",
    "ConfigError",
    "CoopHashError",
    "CooperativeTrainer",
    "Dataset",
    "DatasetError",
    "Descriptor",
    "Generator",
    "HashCode",
    "HashIndex",
    "HashIndexError",
    "LabelError",
    "LabelSampler",
    "LabeledImage",
    "LatentCode",
    "LangevinConfig",
    "LangevinDivergenceError",
    "LossError",
    "LossReport",
    "MetricResult",
    "ProbeCallback",
    "RandomStreams",
    "RankingResult",
    "TrainCallback",
    "TrainConfig",
    "TrainState",
    "TrainingDivergedError",
    "binarize",
    "build_index",
    "build_networks",
    "cooperative_sample",
    "encode",
    "evaluate_retrieval",
    "fit",
    "generate_contrastive_pair",
    "hamming_distance",
    "langevin_revise",
    "load_dataset",
    "load_idx",
    "load_png_dir",
    "make_splits",
    "mean_average_precision",
    "precision_at_k",
    "reconstruct",
    "search",
    "seeded_rng",
    "train_step",
    "validate_config",
]
