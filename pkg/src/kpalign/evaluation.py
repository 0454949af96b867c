"""
Gauge-invariant alignment metrics.

Keypoints are transferred from image i to image j through the shared frame
(H_i, then H_j^-1) and compared with ground-truth annotations. Flip flags are
honored on both ends so the metrics measure geometry only.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from kpalign.errors import InvalidArgumentError, PointAtInfinityError, UndefinedMetricError
from kpalign.sl3_geometry import as_tensor, hom_inverse, project_points, to_normalized, to_pixels

logger = logging.getLogger(__name__)

GT_COLUMNS = ['image_id', 'label', 'x', 'y', 'visible']


@dataclass
class GtAnnotations:
    """
    Ground-truth keypoints of a collection.

    Attributes:
        points: Long table with columns image_id, label, x, y (pixels), visible
        sizes: image id -> (width, height) in pixels
    """

    points: pd.DataFrame
    sizes: Dict[int, Tuple[int, int]]

    def __post_init__(self):
        missing = [column for column in GT_COLUMNS if column not in self.points.columns]
        if missing:
            raise InvalidArgumentError(f"ground-truth table is missing columns {missing}")
        self.points = self.points[GT_COLUMNS].astype(
            {'image_id': 'int64', 'label': 'str', 'x': 'float64', 'y': 'float64', 'visible': 'bool'}
        ).reset_index(drop=True)
        unknown = sorted(set(self.points['image_id']) - set(self.sizes))
        if unknown:
            raise InvalidArgumentError(f"ground truth references images without a size: {unknown}")
        duplicated = self.points.duplicated(['image_id', 'label'])
        if duplicated.any():
            row = self.points[duplicated].iloc[0]
            raise InvalidArgumentError(f"label {row['label']!r} appears twice in image {row['image_id']}")

    @classmethod
    def from_arrays(cls, image_ids: Sequence[int], sizes: Sequence[Tuple[int, int]], points,
                    visible, labels: Optional[Sequence[str]] = None) -> 'GtAnnotations':
        """
        Build from dense arrays.

        Args:
            image_ids: N image ids
            sizes: N (width, height) pairs
            points: (N, K, 2) pixel coordinates
            visible: (N, K) visibility flags
            labels: K label names; defaults to 'kp0'..'kp{K-1}'
        """
        points = np.asarray(points, dtype=np.float64)
        visible = np.asarray(visible, dtype=bool)
        n, k = visible.shape
        if points.shape != (n, k, 2) or len(image_ids) != n or len(sizes) != n:
            raise InvalidArgumentError("ground-truth arrays have inconsistent shapes")
        labels = list(labels) if labels is not None else [f"kp{index}" for index in range(k)]
        table = pd.DataFrame({
            'image_id': np.repeat(np.asarray(image_ids, dtype=np.int64), k),
            'label': np.tile(labels, n),
            'x': points[..., 0].reshape(-1),
            'y': points[..., 1].reshape(-1),
            'visible': visible.reshape(-1),
        })
        return cls(table, {int(i): (int(w), int(h)) for i, (w, h) in zip(image_ids, sizes)})

    def co_visible(self) -> pd.DataFrame:
        """Every ordered pair of distinct images with each label visible in both."""
        shown = self.points[self.points['visible']]
        pairs = shown.merge(shown, on='label', suffixes=('_i', '_j'))
        pairs = pairs[pairs['image_id_i'] != pairs['image_id_j']]
        return pairs.sort_values(['image_id_i', 'image_id_j', 'label']).reset_index(drop=True)


@dataclass
class PckReport:
    """
    PCK scores.

    Attributes:
        alpha: Threshold as a fraction of the target image's larger side
        mean: Fraction of correct transfers over every evaluated point
        per_pair: Columns image_i, image_j, points, correct, pck
        per_label: Columns label, points, correct, pck
        n_failed: Transfers that hit the point at infinity (counted incorrect)
    """

    alpha: float
    mean: float
    per_pair: pd.DataFrame
    per_label: pd.DataFrame
    n_failed: int = 0


def _relative_warp(result, i, j):
    homographies = as_tensor(result.homographies)
    return hom_inverse(homographies[result.index_of(j)]) @ homographies[result.index_of(i)]


def _transfer_batch(result, i: int, j: int, pixels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Transfer (n, 2) pixels of image i; returns target pixels and a success mask."""
    if i == j:
        raise InvalidArgumentError("keypoint transfer needs two different images")
    src, dst = result.index_of(i), result.index_of(j)
    width_i, height_i = result.image_sizes[i]
    width_j, height_j = result.image_sizes[j]
    normalized = to_normalized(pixels, width_i, height_i).reshape(-1, 2).copy()
    if result.flips[src]:
        normalized[:, 0] = -normalized[:, 0]
    warped, ok = project_points(_relative_warp(result, i, j), normalized)
    warped = warped.numpy().copy()
    if result.flips[dst]:
        warped[:, 0] = -warped[:, 0]
    return to_pixels(warped, width_j, height_j), ok.numpy()


def transfer_point(result, i: int, j: int, p) -> np.ndarray:
    """
    Transfer a pixel of image i into image j through the shared frame.

    Raises:
        InvalidArgumentError: If i == j or an id is unknown
        PointAtInfinityError: If the relative warp sends p to infinity
    """
    pixels, ok = _transfer_batch(result, i, j, np.asarray(p, dtype=np.float64).reshape(1, 2))
    if not ok[0]:
        raise PointAtInfinityError(f"point {tuple(p)} of image {i} maps to infinity in image {j}")
    return pixels[0]


def _transferred(result, gt: GtAnnotations) -> pd.DataFrame:
    pairs = gt.co_visible()
    if pairs.empty:
        raise UndefinedMetricError("no label is visible in two images")
    missing = sorted(set(pairs['image_id_i']) - set(result.image_ids))
    if missing:
        raise InvalidArgumentError(f"ground truth references images missing from the alignment: {missing}")

    frames = []
    for (i, j), group in pairs.groupby(['image_id_i', 'image_id_j'], sort=True):
        pixels, ok = _transfer_batch(result, int(i), int(j), group[['x_i', 'y_i']].to_numpy())
        width_j, height_j = result.image_sizes[int(j)]
        target = group[['x_j', 'y_j']].to_numpy()
        frame = group[['image_id_i', 'image_id_j', 'label']].copy()
        frame['ok'] = ok
        frame['pixel_error'] = np.where(ok, np.linalg.norm(pixels - target, axis=1), np.inf)
        moved = to_normalized(np.where(ok[:, None], pixels, 0.0), width_j, height_j)
        frame['normalized_error'] = np.where(
            ok, np.linalg.norm(moved - to_normalized(target, width_j, height_j), axis=1), np.inf
        )
        frame['threshold_scale'] = float(max(width_j, height_j))
        frames.append(frame)
    return pd.concat(frames, ignore_index=True)


def pck_transfer(result, gt: GtAnnotations, alpha: float = 0.1) -> PckReport:
    """
    Percentage of correct keypoint transfers.

    A transfer from i to j is correct when its pixel distance to the
    ground-truth location in j is at most alpha * max(W_j, H_j).

    Raises:
        InvalidArgumentError: If alpha is not positive
        UndefinedMetricError: If no label is co-visible anywhere
    """
    if not alpha > 0:
        raise InvalidArgumentError(f"alpha must be positive, got {alpha}")
    transfers = _transferred(result, gt)
    transfers['correct'] = transfers['pixel_error'] <= alpha * transfers['threshold_scale']

    per_pair = transfers.groupby(['image_id_i', 'image_id_j'], sort=True).agg(
        points=('correct', 'size'), correct=('correct', 'sum')
    ).reset_index().rename(columns={'image_id_i': 'image_i', 'image_id_j': 'image_j'})
    per_pair['pck'] = per_pair['correct'] / per_pair['points']
    per_label = transfers.groupby('label', sort=True).agg(
        points=('correct', 'size'), correct=('correct', 'sum')
    ).reset_index()
    per_label['pck'] = per_label['correct'] / per_label['points']

    n_failed = int((~transfers['ok']).sum())
    if n_failed:
        logger.warning("%d keypoint transfers mapped to infinity and count as incorrect", n_failed)
    mean = float(transfers['correct'].mean())
    logger.info("PCK@%.3g = %.4f over %d transfers", alpha, mean, len(transfers))
    return PckReport(alpha=alpha, mean=mean, per_pair=per_pair, per_label=per_label, n_failed=n_failed)


def mean_transfer_error(result, gt: GtAnnotations) -> float:
    """
    Mean Euclidean transfer error in the target image's [-1, 1] frame.

    Transfers that map to infinity are left out (and logged).

    Raises:
        UndefinedMetricError: If no co-visible label can be transferred
    """
    transfers = _transferred(result, gt)
    finite = transfers[transfers['ok']]
    if finite.empty:
        raise UndefinedMetricError("every keypoint transfer mapped to infinity")
    if len(finite) < len(transfers):
        logger.warning("excluding %d transfers at infinity from the mean error", len(transfers) - len(finite))
    return float(finite['normalized_error'].mean())
