"""Jointly trained two-tower retrieval with a product-quantization index.

The item tower feeds an IVF-PQ layer (coarse cells, residual product
quantization, learned Givens rotation) that sits inside the training loop:
scores use the quantized embedding, gradients pass straight through to the
raw one, and the codebooks follow a distortion regularizer. The result is
searchable the moment training stops, no post-hoc clustering pass.
"""

from .core import Adagrad, cosine, subrng, unit
from .data import BlobConfig, PairData, generate_blobs, ingest
from .errors import (
    DatasetError,
    DegenerateInput,
    DimensionMismatch,
    IndexCorruption,
    ParameterError,
    StateError,
)
from .evaluate import EvalRecord, evaluate_all, mean_distortion, coarse_utilization
from .index import EmbeddingIndex, SearchParams, build, load, offline_build, save, search
from .kmeans import kmeans_fit
from .quantizer import QuantizerLayer
from .rotation import RotationMatrix, steepest_update
from .trainer import (
    TrainConfig,
    TrainResult,
    TwoTowerModel,
    run_plain_training,
    run_training,
    train_step,
)

__version__ = "0.1.0"

__all__ = [
    "Adagrad",
    "BlobConfig",
    "DatasetError",
    "DegenerateInput",
    "DimensionMismatch",
    "EmbeddingIndex",
    "EvalRecord",
    "IndexCorruption",
    "PairData",
    "ParameterError",
    "QuantizerLayer",
    "RotationMatrix",
    "SearchParams",
    "StateError",
    "TrainConfig",
    "TrainResult",
    "TwoTowerModel",
    "build",
    "coarse_utilization",
    "cosine",
    "evaluate_all",
    "generate_blobs",
    "ingest",
    "kmeans_fit",
    "load",
    "mean_distortion",
    "offline_build",
    "run_plain_training",
    "run_training",
    "save",
    "search",
    "steepest_update",
    "subrng",
    "train_step",
    "unit",
    "__version__",
]
