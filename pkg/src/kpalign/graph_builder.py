"""
Correspondence graph construction.

Raw pairwise matches are thinned by confidence NMS, each image's surviving
keypoints are merged by DP-Means, and the cluster means become the nodes of a
single graph over the whole collection. Intra edges fully connect the nodes of
one image; inter edges link the two nodes of every surviving match.
"""

import logging
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch

from kpalign.config import BuildConfig
from kpalign.errors import GraphBuildError, InvalidArgumentError
from kpalign.sl3_geometry import DTYPE, to_normalized

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ImageMeta:
    """Image identifier and size in pixels."""

    id: int
    width: int
    height: int

    def __post_init__(self):
        if self.width < 2 or self.height < 2:
            raise InvalidArgumentError(
                f"image {self.id}: width and height must be >= 2, got {self.width}x{self.height}"
            )

    @property
    def diagonal(self) -> float:
        return float(np.hypot(self.width, self.height))


@dataclass
class RawMatchSet:
    """
    Matches between images i and j in pixel units.

    Attributes:
        i, j: Image ids
        points_i, points_j: (M, 2) matched pixel coordinates
        conf: (M,) match confidences in [0, 1]
    """

    i: int
    j: int
    points_i: np.ndarray
    points_j: np.ndarray
    conf: np.ndarray

    def __post_init__(self):
        self.points_i = np.asarray(self.points_i, dtype=np.float64).reshape(-1, 2)
        self.points_j = np.asarray(self.points_j, dtype=np.float64).reshape(-1, 2)
        self.conf = np.asarray(self.conf, dtype=np.float64).reshape(-1)
        pair = f"pair ({self.i}, {self.j})"
        if self.i == self.j:
            raise InvalidArgumentError(f"{pair}: a match set must join two different images")
        if not len(self.points_i) == len(self.points_j) == len(self.conf):
            raise InvalidArgumentError(
                f"{pair}: points_i, points_j and conf lengths differ "
                f"({len(self.points_i)}, {len(self.points_j)}, {len(self.conf)})"
            )
        if not (np.isfinite(self.points_i).all() and np.isfinite(self.points_j).all()):
            raise InvalidArgumentError(f"{pair}: non-finite point coordinates")
        if len(self.conf) and (self.conf.min() < 0 or self.conf.max() > 1):
            raise InvalidArgumentError(f"{pair}: confidences must lie in [0, 1]")

    def __len__(self):
        return len(self.conf)


@dataclass
class CorrespondenceGraph:
    """
    Single graph over an image collection.

    Attributes:
        images: Image metadata ordered by id
        coords: (V, 2) node coordinates in the [-1, 1] frame
        image_tags: (V,) index of each node's image in ``images``
        intra_edges, inter_edges: (E, 2) undirected node index pairs, a < b
        matches: (M, 2) node pairs of every surviving raw match, duplicates
            kept; column 0 lies in the lower-id image
        orphan_images: Ids of images with nodes but no inter edge
    """

    images: List[ImageMeta]
    coords: np.ndarray
    image_tags: np.ndarray
    intra_edges: np.ndarray
    inter_edges: np.ndarray
    matches: np.ndarray
    orphan_images: List[int] = field(default_factory=list)

    @property
    def n_images(self) -> int:
        return len(self.images)

    @property
    def n_nodes(self) -> int:
        return len(self.coords)

    @property
    def image_ids(self) -> List[int]:
        return [image.id for image in self.images]

    @property
    def features0(self) -> np.ndarray:
        """Initial node features: the node coordinates."""
        return self.coords

    @property
    def adjacency(self) -> np.ndarray:
        """Symmetric binary adjacency with zero diagonal."""
        adjacency = np.zeros((self.n_nodes, self.n_nodes), dtype=np.uint8)
        edges = np.concatenate([self.intra_edges, self.inter_edges]).astype(np.int64)
        adjacency[edges[:, 0], edges[:, 1]] = 1
        adjacency[edges[:, 1], edges[:, 0]] = 1
        return adjacency

    @cached_property
    def mean_operator(self) -> torch.Tensor:
        """Row-normalized adjacency; rows of isolated nodes are zero."""
        adjacency = torch.as_tensor(self.adjacency, dtype=DTYPE)
        degree = adjacency.sum(dim=1, keepdim=True)
        return adjacency / degree.clamp_min(1.0)

    def nodes_of(self, image_index: int) -> np.ndarray:
        return np.flatnonzero(self.image_tags == image_index)

    def with_coords(self, coords: np.ndarray) -> 'CorrespondenceGraph':
        """Copy with replaced node coordinates; topology is shared."""
        moved = replace(self, coords=np.asarray(coords, dtype=np.float64))
        if 'mean_operator' in self.__dict__:
            moved.__dict__['mean_operator'] = self.__dict__['mean_operator']
        return moved


def nms_select(points, scores, window: float = 30.0, k: Optional[int] = None) -> np.ndarray:
    """
    Greedy non-maximum suppression.

    The highest-scoring unsuppressed point is kept and every point within
    Chebyshev distance window / 2 of it is suppressed, until k points are kept
    or none remain. Ties go to the lower original index.

    Args:
        points: (n, 2) pixel coordinates
        scores: (n,) confidences
        window: Side of the square suppression window in pixels
        k: Maximum number of survivors; None keeps all

    Returns:
        np.ndarray: Indices of kept points in selection order
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if len(points) != len(scores):
        raise InvalidArgumentError("nms_select: points and scores lengths differ")
    if window <= 0:
        raise InvalidArgumentError(f"nms_select: window must be positive, got {window}")
    if k is not None and k < 1:
        raise InvalidArgumentError(f"nms_select: k must be >= 1, got {k}")
    limit = len(points) if k is None else k

    radius = window / 2.0
    order = np.lexsort((np.arange(len(scores)), -scores))
    suppressed = np.zeros(len(points), dtype=bool)
    kept = []
    for index in order:
        if suppressed[index]:
            continue
        kept.append(index)
        if len(kept) >= limit:
            break
        distance = np.abs(points - points[index]).max(axis=1)
        suppressed |= distance <= radius
    return np.asarray(kept, dtype=np.int64)


def _dp_objective(points, means, labels, penalty):
    return float(((points - means[labels]) ** 2).sum() + penalty * len(means))


class DPMeansResult(NamedTuple):
    means: np.ndarray
    labels: np.ndarray
    objectives: List[float]


def _farthest_point_seeds(points: np.ndarray, init_n: int, penalty: float) -> List[int]:
    seeds = [0]
    min_d2 = ((points - points[0]) ** 2).sum(axis=1)
    while len(seeds) < init_n:
        candidate = int(np.argmax(min_d2))
        # a seed must be a point that would open a cluster of its own
        if min_d2[candidate] <= penalty:
            break
        seeds.append(candidate)
        min_d2 = np.minimum(min_d2, ((points - points[candidate]) ** 2).sum(axis=1))
    return seeds


def dp_means(points, penalty: float, init_n: int = 3, max_iter: int = 50) -> DPMeansResult:
    """
    Batch DP-Means clustering.

    Seeds up to init_n means by farthest-point sampling from the first point
    (stopping once the farthest remaining point is within penalty), then
    alternates a sequential assignment pass (a point opens a new cluster when
    its squared distance to every mean exceeds penalty) with a mean update.
    Empty clusters are dropped. Stops at an assignment fixed point or after
    max_iter iterations.

    Args:
        points: (n, d) points, n >= 1
        penalty: Cluster penalty in squared point units
        init_n: Number of seeded means
        max_iter: Iteration cap

    Returns:
        DPMeansResult: means (k, d), labels (n,), objective after each iteration
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or len(points) == 0:
        raise InvalidArgumentError("dp_means needs a non-empty (n, d) array")
    if not penalty > 0:
        raise InvalidArgumentError(f"dp_means penalty must be positive, got {penalty}")

    means = [points[i].copy() for i in _farthest_point_seeds(points, init_n, penalty)]
    labels = np.full(len(points), -1, dtype=np.int64)
    objectives = []
    for iteration in range(max_iter):
        previous = labels.copy()
        for n, x in enumerate(points):
            d2 = ((np.asarray(means) - x) ** 2).sum(axis=1)
            closest = int(np.argmin(d2))
            if d2[closest] > penalty:
                means.append(x.copy())
                labels[n] = len(means) - 1
            else:
                labels[n] = closest

        used = np.unique(labels)
        remap = np.full(len(means), -1, dtype=np.int64)
        remap[used] = np.arange(len(used))
        labels = remap[labels]
        means = [points[labels == c].mean(axis=0) for c in range(len(used))]

        objectives.append(_dp_objective(points, np.asarray(means), labels, penalty))
        logger.debug("DP-Means iteration %d: %d clusters", iteration + 1, len(means))
        if np.array_equal(labels, previous):
            break
    return DPMeansResult(np.asarray(means), labels, objectives)


def _surviving_matches(match_set: RawMatchSet, config: BuildConfig) -> np.ndarray:
    if len(match_set) == 0:
        return np.zeros(0, dtype=np.int64)
    if not config.use_nms:
        return np.arange(len(match_set))
    keep_i = nms_select(match_set.points_i, match_set.conf, config.nms_window)
    keep_j = nms_select(match_set.points_j, match_set.conf, config.nms_window)
    both = np.intersect1d(keep_i, keep_j)
    order = np.lexsort((both, -match_set.conf[both]))
    return both[order][:config.top_k]


def _validate_inputs(images: Sequence[ImageMeta], matches: Sequence[RawMatchSet]) -> None:
    ids = [image.id for image in images]
    if len(set(ids)) != len(ids):
        raise GraphBuildError(f"duplicate image ids in {ids}")
    known = set(ids)
    paired = set()
    for match_set in matches:
        for image_id in (match_set.i, match_set.j):
            if image_id not in known:
                raise GraphBuildError(
                    f"match pair ({match_set.i}, {match_set.j}) references unknown image {image_id}"
                )
        paired.update((match_set.i, match_set.j))
    unpaired = sorted(known - paired)
    if unpaired:
        raise GraphBuildError(f"images {unpaired} appear in no match pair; their warps are unconstrained")


def build_graph(images: Sequence[ImageMeta], matches: Sequence[RawMatchSet],
                config: Optional[BuildConfig] = None) -> CorrespondenceGraph:
    """
    Build the collection graph from pairwise matches.

    Pipeline: per-pair NMS and top-k, pooling of surviving endpoints per image,
    per-image DP-Means, nodes at the normalized cluster means, match endpoints
    snapped to their cluster nodes, deduplicated inter edges, complete intra
    edges per image.

    Raises:
        GraphBuildError: On unknown image ids, images without any pair, or
            images left without keypoints
    """
    config = config or BuildConfig()
    images = sorted(images, key=lambda image: image.id)
    _validate_inputs(images, matches)
    index_of = {image.id: index for index, image in enumerate(images)}

    pooled: Dict[int, List[np.ndarray]] = {image.id: [] for image in images}
    endpoints: List[Tuple[int, int, int, int]] = []
    pool_size = {image.id: 0 for image in images}
    for match_set in sorted(matches, key=lambda m: (min(m.i, m.j), max(m.i, m.j))):
        kept = _surviving_matches(match_set, config)
        pooled[match_set.i].append(match_set.points_i[kept])
        pooled[match_set.j].append(match_set.points_j[kept])
        for offset in range(len(kept)):
            endpoints.append((match_set.i, pool_size[match_set.i] + offset,
                              match_set.j, pool_size[match_set.j] + offset))
        pool_size[match_set.i] += len(kept)
        pool_size[match_set.j] += len(kept)

    coords, tags, node_of = [], [], {}
    for image in images:
        if pool_size[image.id] == 0:
            raise GraphBuildError(f"image {image.id} has no surviving keypoints")
        pixels = np.concatenate(pooled[image.id])
        penalty = config.dp_penalty if config.dp_penalty is not None else (0.05 * image.diagonal) ** 2
        clusters = dp_means(pixels, penalty, config.dp_init_n, config.dp_max_iter)
        first = len(coords)
        coords.extend(to_normalized(clusters.means, image.width, image.height))
        tags.extend([index_of[image.id]] * len(clusters.means))
        node_of[image.id] = first + clusters.labels
        logger.debug("image %d: %d keypoints -> %d nodes", image.id, len(pixels), len(clusters.means))

    match_nodes = []
    for image_a, slot_a, image_b, slot_b in endpoints:
        a, b = int(node_of[image_a][slot_a]), int(node_of[image_b][slot_b])
        match_nodes.append((a, b) if image_a < image_b else (b, a))
    match_nodes = np.asarray(match_nodes, dtype=np.int64).reshape(-1, 2)
    inter_edges = np.unique(np.sort(match_nodes, axis=1), axis=0).reshape(-1, 2)

    tags = np.asarray(tags, dtype=np.int64)
    intra = []
    if config.intra_edges:
        for index in range(len(images)):
            nodes = np.flatnonzero(tags == index)
            rows, cols = np.triu_indices(len(nodes), k=1)
            intra.append(np.stack([nodes[rows], nodes[cols]], axis=1))
    intra_edges = np.concatenate(intra).reshape(-1, 2) if intra else np.zeros((0, 2), dtype=np.int64)

    orphans = find_orphans(images, tags, inter_edges)

    graph = CorrespondenceGraph(
        images=list(images),
        coords=np.asarray(coords, dtype=np.float64).reshape(-1, 2),
        image_tags=tags,
        intra_edges=intra_edges.astype(np.int64),
        inter_edges=inter_edges.astype(np.int64),
        matches=match_nodes,
        orphan_images=orphans,
    )
    components = image_components(graph)
    if components > 1:
        logger.warning("image pair graph has %d connected components; each keeps its own gauge", components)
    logger.info(
        "built graph: %d images, %d nodes, %d intra edges, %d inter edges, %d matches",
        graph.n_images, graph.n_nodes, len(graph.intra_edges), len(graph.inter_edges), len(graph.matches),
    )
    return graph


def find_orphans(images: Sequence[ImageMeta], image_tags: np.ndarray, inter_edges: np.ndarray) -> List[int]:
    """
    Ids of images that own no endpoint of any inter edge.

    Args:
        images: Images in graph order
        image_tags: (N,) image index of every node
        inter_edges: (E, 2) node index pairs

    Returns:
        list: Orphan image ids; a warning is logged when non-empty
    """
    connected = np.zeros(len(images), dtype=bool)
    connected[np.asarray(image_tags, dtype=np.int64)[np.asarray(inter_edges, dtype=np.int64).reshape(-1)]] = True
    orphans = [image.id for image, ok in zip(images, connected) if not ok]
    if orphans:
        logger.warning("images without inter-image edges: %s", orphans)
    return orphans


def count_components(n: int, pairs: Iterable[Tuple[int, int]]) -> int:
    """Number of connected components of an undirected graph on nodes 0..n-1."""
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for a, b in pairs:
        root_a, root_b = find(a), find(b)
        if root_a != root_b:
            parent[root_a] = root_b
    return len({find(a) for a in range(n)})


def image_components(graph: CorrespondenceGraph) -> int:
    """Number of connected components of the image-level match graph."""
    tags = graph.image_tags
    return count_components(graph.n_images, ((int(tags[a]), int(tags[b])) for a, b in graph.inter_edges))


def graph_stats(graph: CorrespondenceGraph) -> pd.DataFrame:
    """
    Per-image node and edge counts.

    Returns:
        pandas.DataFrame: columns image_id, nodes, intra_edges, inter_edges,
        matches (edge counts are per image endpoint)
    """
    tags = graph.image_tags
    stats = pd.DataFrame({'image_id': graph.image_ids})
    stats['nodes'] = np.bincount(tags, minlength=graph.n_images)
    stats['intra_edges'] = np.bincount(tags[graph.intra_edges[:, 0]], minlength=graph.n_images)
    stats['inter_edges'] = np.bincount(tags[graph.inter_edges.reshape(-1)], minlength=graph.n_images)
    stats['matches'] = np.bincount(tags[graph.matches.reshape(-1)], minlength=graph.n_images)
    return stats
