"""Keypoint-based joint alignment of image collections with SL(3) homographies."""

__version__ = "0.1.0"

from kpalign.config import BuildConfig, TrainConfig
from kpalign.errors import KpalignError, NumericalFailureError, ValidationError
from kpalign.evaluation import GtAnnotations, mean_transfer_error, pck_transfer, transfer_point
from kpalign.graph_builder import CorrespondenceGraph, ImageMeta, RawMatchSet, build_graph
from kpalign.objective import kp_ic_loss
from kpalign.optimizer import AlignmentResult, align_collection
from kpalign.synthetic import SynthSpec, gen_collection

__all__ = [
    "__version__",
    "AlignmentResult",
    "BuildConfig",
    "CorrespondenceGraph",
    "GtAnnotations",
    "ImageMeta",
    "KpalignError",
    "NumericalFailureError",
    "RawMatchSet",
    "SynthSpec",
    "TrainConfig",
    "ValidationError",
    "align_collection",
    "build_graph",
    "gen_collection",
    "kp_ic_loss",
    "mean_transfer_error",
    "pck_transfer",
    "transfer_point",
]
