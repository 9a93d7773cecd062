"""Information-guided head pruning and low-rank FFN compression for small transformers."""

__version__ = "0.1.0"

from .checkpoint import Checkpoint, load, save
from .errors import CheckpointError, InfoPruneError, NumericalError, ValidationError
from .linalg import Spectrum, SvdResult, svd
from .lowrank import CompressionResult, FfnPair, compress
from .spectral import erank, ks_distance, smoothed_ks
from .toymodel import GateSet, Model, ModelConfig, forward, init_model

__all__ = [
    "Checkpoint",
    "CheckpointError",
    "CompressionResult",
    "FfnPair",
    "GateSet",
    "InfoPruneError",
    "Model",
    "ModelConfig",
    "NumericalError",
    "Spectrum",
    "SvdResult",
    "ValidationError",
    "compress",
    "erank",
    "forward",
    "init_model",
    "ks_distance",
    "load",
    "save",
    "smoothed_ks",
    "svd",
]
