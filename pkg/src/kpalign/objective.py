"""
Robust inverse-compositional keypoint loss.

For every stored match (x_a in image i, x_b in image j) both orientations are
evaluated: x_a is warped by H_i and then by H_j^-1 and compared with x_b, and
vice versa. Residuals enter through the Geman-McClure penalty or, for the
ablation, as squared distances.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from kpalign.errors import InvalidArgumentError
from kpalign.sl3_geometry import (
    DTYPE,
    as_tensor,
    hom_compose,
    hom_inverse,
    project_points,
    warp_matrices,
)

logger = logging.getLogger(__name__)


@dataclass
class LossReport:
    """
    Result of one loss evaluation.

    Attributes:
        total: Loss value
        per_image: (N,) summed contribution of each image as source or target
        residuals: (2M,) residual distance per ordered evaluation; inf where
            the warp sent the point to infinity
        n_evaluations: Number of ordered evaluations (twice the match count)
        n_degenerate: Evaluations with a degenerate perspective division
        tensor: Differentiable scalar equal to total
    """

    total: float
    per_image: np.ndarray
    residuals: np.ndarray
    n_evaluations: int
    n_degenerate: int
    tensor: torch.Tensor = field(repr=False)


def geman_mcclure(z, sigma: float = 0.25, squared: bool = False):
    """
    Geman-McClure penalty z^2 / (z^2 + sigma^2), bounded in [0, 1).

    Works on floats, numpy arrays and torch tensors. With squared=True, z
    holds squared residual norms.
    """
    if not sigma > 0:
        raise InvalidArgumentError(f"sigma must be positive, got {sigma}")
    if isinstance(z, torch.Tensor):
        if bool((z < 0).any()):
            raise InvalidArgumentError("residual norms must be non-negative")
    elif np.any(np.asarray(z) < 0):
        raise InvalidArgumentError("residual norms must be non-negative")
    z2 = z if squared else z * z
    return z2 / (z2 + sigma * sigma)


def apply_flips(graph, flags):
    """
    Mirror the nodes of flagged images horizontally (x -> -x).

    Topology is untouched, and applying the same flags twice restores the
    original coordinates exactly.
    """
    flags = np.asarray(flags, dtype=bool).reshape(-1)
    if len(flags) != graph.n_images:
        raise InvalidArgumentError(f"expected {graph.n_images} flip flags, got {len(flags)}")
    if not flags.any():
        return graph
    coords = graph.coords.copy()
    mirrored = flags[graph.image_tags]
    coords[mirrored, 0] = -coords[mirrored, 0]
    return graph.with_coords(coords)


def kp_ic_loss(graph, thetas, sigma: float = 0.25, robust: bool = True, normalize: bool = False,
               param: str = 'lie', gauge: Optional[torch.Tensor] = None) -> LossReport:
    """
    Evaluate the inverse-compositional keypoint loss.

    Args:
        graph: CorrespondenceGraph (already flip-adjusted)
        thetas: (N, 8) per-image parameters; may require grad
        sigma: Geman-McClure scale
        robust: Geman-McClure when True, squared residuals otherwise
        normalize: Divide by the number of ordered evaluations
        param: 'lie' or 'matrix' chart
        gauge: Optional 3x3 matrix right-composed onto every warp

    Returns:
        LossReport: total, per-image attribution and residual diagnostics

    Raises:
        InvalidArgumentError: On a parameter/graph size mismatch or no matches
    """
    thetas = as_tensor(thetas)
    if thetas.shape != (graph.n_images, 8):
        raise InvalidArgumentError(
            f"expected thetas of shape ({graph.n_images}, 8), got {tuple(thetas.shape)}"
        )
    if len(graph.matches) == 0:
        raise InvalidArgumentError("the graph holds no matches")
    if not sigma > 0:
        raise InvalidArgumentError(f"sigma must be positive, got {sigma}")

    forward_h, inverse_h = warp_matrices(thetas, param)
    if gauge is not None:
        gauge = as_tensor(gauge)
        forward_h = gauge @ forward_h
        inverse_h = inverse_h @ hom_inverse(gauge)

    matches = torch.as_tensor(graph.matches, dtype=torch.int64)
    src = torch.cat([matches[:, 0], matches[:, 1]])
    dst = torch.cat([matches[:, 1], matches[:, 0]])
    tags = torch.as_tensor(graph.image_tags, dtype=torch.int64)
    src_image, dst_image = tags[src], tags[dst]
    coords = torch.as_tensor(graph.coords, dtype=DTYPE)

    warps = hom_compose(forward_h[src_image], inverse_h[dst_image])
    warped, ok = project_points(warps, coords[src])
    r2 = torch.where(ok, ((coords[dst] - warped) ** 2).sum(dim=-1), torch.zeros_like(ok, dtype=DTYPE))

    n_degenerate = int((~ok).sum())
    if robust:
        values = torch.where(ok, geman_mcclure(r2, sigma, squared=True), torch.ones_like(r2))
    else:
        values = r2
        if n_degenerate:
            logger.warning("skipping %d degenerate perspective divisions in the l2 loss", n_degenerate)
    if n_degenerate and robust:
        logger.warning("%d degenerate perspective divisions clamped to the penalty supremum", n_degenerate)

    total = values.sum()
    if normalize:
        total = total / len(values)
        values = values / len(values)

    detached = values.detach()
    per_image = torch.zeros(graph.n_images, dtype=DTYPE)
    per_image = per_image.index_add(0, src_image, detached).index_add(0, dst_image, detached)
    residuals = torch.where(ok, r2.detach().sqrt(), torch.full_like(r2, float('inf')))
    return LossReport(
        total=float(total.detach()),
        per_image=per_image.numpy(),
        residuals=residuals.numpy(),
        n_evaluations=len(values),
        n_degenerate=n_degenerate,
        tensor=total,
    )
