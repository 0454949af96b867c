"""
Configuration objects and logging setup.

Build and training settings are plain dataclasses validated on construction.
The command-line surface maps its flags one-to-one onto their fields.
"""

import logging
from dataclasses import asdict, dataclass
from typing import Any, Dict, Optional

from kpalign.errors import ValidationError

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'

ARCHITECTURES = ('sage', 'mlp', 'direct', 'linear')
GAUGE_MODES = ('karcher', 'first', 'none')
PARAMETERIZATIONS = ('lie', 'matrix')


def configure_logging(verbose: bool = False) -> None:
    """
    Configure the root logger for command-line use.

    Args:
        verbose: INFO level when True, WARNING otherwise
    """
    logging.basicConfig(
        level=logging.INFO if verbose else logging.WARNING,
        format=LOG_FORMAT,
        force=True,
    )


@dataclass
class BuildConfig:
    """
    Settings for turning raw matches into a correspondence graph.

    Attributes:
        nms_window: Side of the square suppression window in pixels
        top_k: Matches kept per image pair after suppression
        use_nms: Disable to keep every match (ablation)
        dp_penalty: DP-Means penalty in squared pixels; None uses
            (0.05 * image diagonal) ** 2 per image
        dp_init_n: Number of seeded DP-Means clusters
        dp_max_iter: Maximum DP-Means iterations
        intra_edges: Disable to drop intra-image edges (ablation)
    """

    nms_window: float = 30.0
    top_k: int = 10
    use_nms: bool = True
    dp_penalty: Optional[float] = None
    dp_init_n: int = 3
    dp_max_iter: int = 50
    intra_edges: bool = True

    def __post_init__(self):
        if self.nms_window <= 0:
            raise ValidationError(f"nms_window must be positive, got {self.nms_window}")
        if self.top_k < 1:
            raise ValidationError(f"top_k must be >= 1, got {self.top_k}")
        if self.dp_penalty is not None and self.dp_penalty <= 0:
            raise ValidationError(f"dp_penalty must be positive, got {self.dp_penalty}")
        if self.dp_init_n < 1 or self.dp_max_iter < 1:
            raise ValidationError("dp_init_n and dp_max_iter must be >= 1")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class TrainConfig:
    """
    Settings for one test-time optimization run.

    Attributes:
        epochs: Number of full-batch Adam updates
        sigma: Geman-McClure scale in normalized units
        flip_every: Run the horizontal-flip search every this many epochs
        flip_search: Disable to never toggle flip flags
        lr, beta1, beta2, eps: Adam hyperparameters
        seed: Weight initialization seed
        arch: Regressor architecture, one of ARCHITECTURES
        hidden_dim: Width of the hidden node embeddings
        layers: Number of message-passing layers
        use_bias: Include per-layer bias terms
        robust: Geman-McClure penalty when True, squared residuals otherwise
        gauge: Gauge mode applied after optimization, one of GAUGE_MODES
        param: Homography chart, one of PARAMETERIZATIONS
        normalize: Divide the loss by the number of ordered evaluations
        deterministic: Force deterministic torch kernels and one thread
    """

    epochs: int = 600
    sigma: float = 0.25
    flip_every: int = 100
    flip_search: bool = True
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    arch: str = 'sage'
    hidden_dim: int = 64
    layers: int = 5
    use_bias: bool = True
    robust: bool = True
    gauge: str = 'karcher'
    param: str = 'lie'
    normalize: bool = False
    deterministic: bool = False

    def __post_init__(self):
        if self.epochs < 0:
            raise ValidationError(f"epochs must be >= 0, got {self.epochs}")
        if self.flip_every < 1:
            raise ValidationError(f"flip_every must be >= 1, got {self.flip_every}")
        if not self.sigma > 0:
            raise ValidationError(f"sigma must be positive, got {self.sigma}")
        if not self.lr > 0:
            raise ValidationError(f"lr must be positive, got {self.lr}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0 and self.eps > 0):
            raise ValidationError("Adam needs 0 <= beta1, beta2 < 1 and eps > 0")
        if self.hidden_dim < 1 or self.layers < 1:
            raise ValidationError("hidden_dim and layers must be >= 1")
        if self.arch not in ARCHITECTURES:
            raise ValidationError(f"arch must be one of {ARCHITECTURES}, got {self.arch!r}")
        if self.gauge not in GAUGE_MODES:
            raise ValidationError(f"gauge must be one of {GAUGE_MODES}, got {self.gauge!r}")
        if self.param not in PARAMETERIZATIONS:
            raise ValidationError(
                f"param must be one of {PARAMETERIZATIONS}, got {self.param!r}"
            )

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)
