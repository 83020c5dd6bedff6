"""Completion of sparse (tissue, gene, treatment) expression tensors."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    ConfigError,
    DataError,
    NumericError,
    SinkError,
    TencomplError,
)
from .tensor import SparseMatrix, SparseTensor3, TensorIndexMap, read_tensor, to_matrix, to_tensor, write_tensor  # noqa: E402
from .ingest import NormParams, holdout_split, normalize, parse_matrix, preprocess, remove_outliers  # noqa: E402
from .losses import WeightScheme, compute_weights, metrics, weighted_loss  # noqa: E402
from .model import FactorModel, init_model, load_model, predict, save_model  # noqa: E402
from .training import TrainConfig, train  # noqa: E402
from .baseline import AlsConfig, cp_als  # noqa: E402
from .synth import SynthSpec, gen_lowrank, gen_skewed  # noqa: E402
from .analysis import cluster_tissues, reconstruct, tissue_similarity  # noqa: E402
