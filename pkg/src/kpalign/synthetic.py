"""
Synthetic collections with known ground truth.

Canonical keypoints are sampled in the shared frame and pushed into every
image through the inverse of that image's ground-truth warp, so the
ground-truth parameters realign them exactly. Noise, outlier matches,
horizontal flips and a sparse image-pair graph are layered on top.
"""

import logging
from dataclasses import asdict, dataclass
from typing import List, Set, Tuple

import numpy as np

from kpalign.errors import InvalidArgumentError, SyntheticError
from kpalign.evaluation import GtAnnotations
from kpalign.graph_builder import ImageMeta, RawMatchSet, count_components
from kpalign.sl3_geometry import project_points, sl3_exp, to_pixels

logger = logging.getLogger(__name__)

CANONICAL_EXTENT = 0.6
PROJECTIVE_DAMPING = 0.1
CONFIDENCE_NOISE_SCALE = 0.1
MAX_RETRIES = 10


@dataclass
class SynthSpec:
    """
    Generator settings.

    Attributes:
        n_images: Collection size (>= 2)
        n_keypoints: Canonical keypoints shared by the collection
        warp_magnitude: Bound on every ground-truth coefficient (projective
            ones are damped by 0.1)
        noise_std: Gaussian keypoint noise in normalized units
        outlier_rate: Fraction of matches whose target is replaced at random
        flip_rate: Fraction of images stored x-mirrored
        pair_density: Probability of each image pair beyond the spanning tree
        width, height: Image size in pixels
        seed: Generator seed
    """

    n_images: int = 20
    n_keypoints: int = 15
    warp_magnitude: float = 0.3
    noise_std: float = 0.005
    outlier_rate: float = 0.1
    flip_rate: float = 0.0
    pair_density: float = 0.5
    width: int = 256
    height: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.n_images < 2 or self.n_keypoints < 1:
            raise InvalidArgumentError("need n_images >= 2 and n_keypoints >= 1")
        if self.warp_magnitude < 0 or self.noise_std < 0:
            raise InvalidArgumentError("warp_magnitude and noise_std must be non-negative")
        if not 0 <= self.outlier_rate < 1 or not 0 <= self.flip_rate < 1:
            raise InvalidArgumentError("outlier_rate and flip_rate must lie in [0, 1)")
        if not 0 < self.pair_density <= 1:
            raise InvalidArgumentError("pair_density must lie in (0, 1]")
        if self.width < 2 or self.height < 2:
            raise InvalidArgumentError("image width and height must be >= 2")

    def to_dict(self):
        return asdict(self)


@dataclass
class SyntheticCollection:
    """
    Generated collection and its ground truth.

    Attributes:
        images: Image metadata, ids 1..N
        matches: One match set per sampled pair
        gt: Noise-free keypoints in each image's stored pixel frame
        thetas: (N, 8) ground-truth parameters
        flips: (N,) ground-truth flip flags
        canonical: (K, 2) canonical keypoints in the shared frame
        outliers: Per match set, mask of the matches replaced by outliers
        spec: Settings the collection was drawn from
    """

    images: List[ImageMeta]
    matches: List[RawMatchSet]
    gt: GtAnnotations
    thetas: np.ndarray
    flips: np.ndarray
    canonical: np.ndarray
    outliers: List[np.ndarray]
    spec: SynthSpec

    @property
    def n_matches(self) -> int:
        return sum(len(match_set) for match_set in self.matches)

    @property
    def n_outliers(self) -> int:
        return int(sum(mask.sum() for mask in self.outliers))


def _sample_pairs(rng: np.random.Generator, n: int, density: float) -> List[Tuple[int, int]]:
    """A random spanning tree plus every other pair with probability density."""
    order = rng.permutation(n)
    pairs: Set[Tuple[int, int]] = set()
    for k in range(1, n):
        a, b = int(order[k]), int(order[rng.integers(k)])
        pairs.add((min(a, b), max(a, b)))
    for a in range(n):
        for b in range(a + 1, n):
            if (a, b) not in pairs and rng.random() < density:
                pairs.add((a, b))
    return sorted(pairs)


def _connected(n: int, pairs: List[Tuple[int, int]]) -> bool:
    return count_components(n, pairs) == 1


def gen_collection(spec: SynthSpec) -> SyntheticCollection:
    """
    Draw a collection from spec.

    Raises:
        SyntheticError: If no connected pair graph is found in 10 attempts
    """
    rng = np.random.default_rng(spec.seed)
    n, k = spec.n_images, spec.n_keypoints
    canonical = rng.uniform(-CANONICAL_EXTENT, CANONICAL_EXTENT, size=(k, 2))

    bound = np.full(8, spec.warp_magnitude)
    bound[6:] *= PROJECTIVE_DAMPING
    thetas = rng.uniform(-1.0, 1.0, size=(n, 8)) * bound
    flips = np.zeros(n, dtype=bool)
    flips[rng.choice(n, int(round(spec.flip_rate * n)), replace=False)] = True

    clean, finite = project_points(sl3_exp(-thetas)[:, None], canonical[None])
    clean = clean.numpy().copy()
    noise = rng.normal(0.0, spec.noise_std, size=(n, k, 2)) if spec.noise_std > 0 else np.zeros((n, k, 2))
    observed = clean + noise
    visible = (
        finite.numpy()
        & (np.abs(clean) <= 1.0).all(axis=-1)
        & (np.abs(observed) <= 1.0).all(axis=-1)
    )
    clean[flips, :, 0] *= -1.0
    observed[flips, :, 0] *= -1.0
    observed_px = to_pixels(observed, spec.width, spec.height)

    for attempt in range(1, MAX_RETRIES + 1):
        pairs = [(a, b) for a, b in _sample_pairs(rng, n, spec.pair_density)
                 if (visible[a] & visible[b]).any()]
        if _connected(n, pairs):
            break
        logger.info("synthetic pair graph disconnected on attempt %d; resampling", attempt)
    else:
        raise SyntheticError(f"no connected image-pair graph after {MAX_RETRIES} attempts")

    point_sets = []
    for a, b in pairs:
        shared = np.flatnonzero(visible[a] & visible[b])
        spread = np.linalg.norm(noise[a, shared], axis=1) + np.linalg.norm(noise[b, shared], axis=1)
        conf = np.clip(1.0 - spread / CONFIDENCE_NOISE_SCALE, 0.0, 1.0)
        point_sets.append([observed_px[a, shared], observed_px[b, shared].copy(), conf])

    total = sum(len(conf) for _, _, conf in point_sets)
    n_outliers = int(np.floor(spec.outlier_rate * total + 0.5))
    chosen = np.zeros(total, dtype=bool)
    chosen[rng.choice(total, n_outliers, replace=False)] = True
    upper = np.array([spec.width - 1, spec.height - 1], dtype=np.float64)

    images = [ImageMeta(index + 1, spec.width, spec.height) for index in range(n)]
    matches, outliers, offset = [], [], 0
    for (a, b), (points_a, points_b, conf) in zip(pairs, point_sets):
        mask = chosen[offset:offset + len(conf)]
        offset += len(conf)
        points_b[mask] = rng.uniform(0.0, 1.0, size=(int(mask.sum()), 2)) * upper
        conf = conf.copy()
        conf[mask] = rng.uniform(0.5, 1.0, size=int(mask.sum()))
        matches.append(RawMatchSet(a + 1, b + 1, points_a, points_b, conf))
        outliers.append(mask.copy())

    gt = GtAnnotations.from_arrays(
        [image.id for image in images],
        [(spec.width, spec.height)] * n,
        to_pixels(clean, spec.width, spec.height),
        visible,
    )
    logger.info("synthetic collection: %d images, %d pairs, %d matches (%d outliers), %d flipped",
                n, len(matches), total, n_outliers, int(flips.sum()))
    return SyntheticCollection(images, matches, gt, thetas, flips, canonical, outliers, spec)
