"""
File formats, colormap rendering and the warp micro-benchmark.

All text formats are versioned JSON documents with a "format" tag and a
"version" string; loaders reject documents of another format or another
major version. Writers produce stable key order so files diff cleanly.
"""

import json
import logging
import math
import pickle
import statistics
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from PIL import Image

from kpalign.errors import (
    AlignmentFileError,
    InvalidArgumentError,
    KpalignIOError,
    ManifestError,
)
from kpalign.evaluation import GtAnnotations, PckReport
from kpalign.graph_builder import ImageMeta, RawMatchSet
from kpalign.optimizer import AlignmentResult
from kpalign.sage_net import SageWeights
from kpalign.sl3_geometry import (
    as_tensor,
    check_homography,
    project_points,
    sl3_exp,
    to_normalized,
)

logger = logging.getLogger(__name__)

FORMAT_VERSION = '1.0'
MANIFEST_FORMAT = 'kpalign-manifest'
ALIGNMENT_FORMAT = 'kpalign-alignment'
GROUND_TRUTH_FORMAT = 'kpalign-groundtruth'
METRICS_FORMAT = 'kpalign-metrics'
WEIGHTS_FORMAT = 'kpalign-weights'

PIXEL_SLACK = 1.0
DENSE_POINTS = 70756
SPARSE_POINTS = 16
BENCH_IMAGES = 30


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"cannot serialize {type(value).__name__}")


def write_json(document: Dict[str, Any], path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(document, indent=2, default=_json_default, allow_nan=False) + '\n')
    except OSError as exc:
        raise KpalignIOError(f"cannot write file ({exc.strerror})", path) from exc
    logger.info("wrote %s", path)
    return path


def _read_json(path, error_type, expected_format: str) -> Dict[str, Any]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise KpalignIOError(f"cannot read file ({exc.strerror})", path) from exc
    try:
        document = json.loads(text)
    except json.JSONDecodeError as exc:
        raise error_type(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(document, dict):
        raise error_type(f"{path}: top level must be an object")
    if document.get('format') != expected_format:
        raise error_type(f"{path}: expected format {expected_format!r}, got {document.get('format')!r}")
    version = str(document.get('version', ''))
    if version.split('.')[0] != FORMAT_VERSION.split('.')[0]:
        raise error_type(f"{path}: unsupported version {version!r} (reader supports {FORMAT_VERSION})")
    return document


def _field(record: Dict[str, Any], key: str, where: str, error_type):
    if not isinstance(record, dict) or key not in record:
        raise error_type(f"{where}: missing field {key!r}")
    return record[key]


def _finite_or_none(value: float) -> Optional[float]:
    return float(value) if value is not None and math.isfinite(value) else None


# ---------------------------------------------------------------------------
# collection manifest
# ---------------------------------------------------------------------------

def save_manifest(images: Sequence[ImageMeta], matches: Sequence[RawMatchSet], path) -> Path:
    """Write a collection manifest."""
    document = {
        'format': MANIFEST_FORMAT,
        'version': FORMAT_VERSION,
        'images': [{'id': image.id, 'width': image.width, 'height': image.height}
                   for image in sorted(images, key=lambda image: image.id)],
        'matches': [{
            'i': match_set.i,
            'j': match_set.j,
            'points_i': match_set.points_i.tolist(),
            'points_j': match_set.points_j.tolist(),
            'conf': match_set.conf.tolist(),
        } for match_set in matches],
    }
    return write_json(document, path)


def _check_bounds(points: np.ndarray, image: ImageMeta, where: str) -> None:
    low = -PIXEL_SLACK
    if len(points) and (
        points.min() < low
        or (points[:, 0] > image.width - 1 + PIXEL_SLACK).any()
        or (points[:, 1] > image.height - 1 + PIXEL_SLACK).any()
    ):
        raise ManifestError(f"{where}: points fall outside image {image.id} ({image.width}x{image.height})")


def load_manifest(path) -> Tuple[List[ImageMeta], List[RawMatchSet]]:
    """
    Read and validate a collection manifest.

    Raises:
        ManifestError: On parse errors (with line and column), missing fields,
            an unknown version, duplicate ids or invalid match sets
        KpalignIOError: If the file cannot be read
    """
    document = _read_json(path, ManifestError, MANIFEST_FORMAT)
    images: Dict[int, ImageMeta] = {}
    for n, record in enumerate(_field(document, 'images', str(path), ManifestError)):
        where = f"images[{n}]"
        try:
            image = ImageMeta(int(_field(record, 'id', where, ManifestError)),
                              int(_field(record, 'width', where, ManifestError)),
                              int(_field(record, 'height', where, ManifestError)))
        except (TypeError, ValueError, InvalidArgumentError) as exc:
            raise ManifestError(f"{where}: {exc}") from exc
        if image.id in images:
            raise ManifestError(f"{where}: duplicate image id {image.id}")
        images[image.id] = image

    matches = []
    for n, record in enumerate(_field(document, 'matches', str(path), ManifestError)):
        where = f"matches[{n}]"
        i = _field(record, 'i', where, ManifestError)
        j = _field(record, 'j', where, ManifestError)
        where = f"{where} (pair {i}, {j})"
        for image_id in (i, j):
            if image_id not in images:
                raise ManifestError(f"{where}: unknown image id {image_id}")
        try:
            match_set = RawMatchSet(
                i, j,
                _field(record, 'points_i', where, ManifestError),
                _field(record, 'points_j', where, ManifestError),
                _field(record, 'conf', where, ManifestError),
            )
        except (TypeError, ValueError, InvalidArgumentError) as exc:
            raise ManifestError(f"{where}: {exc}") from exc
        _check_bounds(match_set.points_i, images[i], where)
        _check_bounds(match_set.points_j, images[j], where)
        matches.append(match_set)
    logger.info("loaded manifest %s: %d images, %d match sets", path, len(images), len(matches))
    return sorted(images.values(), key=lambda image: image.id), matches


# ---------------------------------------------------------------------------
# alignment file
# ---------------------------------------------------------------------------

def save_alignment(result: AlignmentResult, path, build_config: Optional[Dict[str, Any]] = None) -> Path:
    """
    Write an alignment result.

    Homography entries are written in their shortest round-trip decimal form
    (at most 17 significant digits), so loading restores them exactly. Stage
    timings are not written.
    """
    document = {
        'format': ALIGNMENT_FORMAT,
        'version': FORMAT_VERSION,
        'gauge': result.gauge,
        'gauge_fallback': bool(result.gauge_fallback),
        'loss': {
            'final': _finite_or_none(result.final_loss),
            'epochs': len(result.loss_history),
            'history': [_finite_or_none(value) for value in result.loss_history],
        },
        'config': {'train': dict(sorted(result.config.items())),
                   'build': dict(sorted((build_config or {}).items()))},
        'images': [{
            'id': int(image_id),
            'width': int(result.image_sizes[image_id][0]),
            'height': int(result.image_sizes[image_id][1]),
            'flip': bool(result.flips[index]),
            'homography': [float(v) for v in np.asarray(result.homographies[index]).reshape(-1)],
            'theta': [float(v) for v in np.asarray(result.thetas[index]).reshape(-1)],
        } for index, image_id in enumerate(result.image_ids)],
    }
    return write_json(document, path)


def load_alignment(path) -> AlignmentResult:
    """
    Read an alignment file.

    Raises:
        AlignmentFileError: On schema errors or a homography whose determinant
            is not 1 within 1e-9
    """
    document = _read_json(path, AlignmentFileError, ALIGNMENT_FORMAT)
    records = _field(document, 'images', str(path), AlignmentFileError)
    ids, sizes, homographies, thetas, flips = [], {}, [], [], []
    for n, record in enumerate(records):
        where = f"images[{n}]"
        try:
            image_id = int(_field(record, 'id', where, AlignmentFileError))
            matrix = np.asarray(_field(record, 'homography', where, AlignmentFileError), dtype=np.float64)
            theta = np.asarray(record.get('theta', [0.0] * 8), dtype=np.float64)
            sizes[image_id] = (int(_field(record, 'width', where, AlignmentFileError)),
                               int(_field(record, 'height', where, AlignmentFileError)))
        except (TypeError, ValueError) as exc:
            raise AlignmentFileError(f"{where}: {exc}") from exc
        if matrix.shape != (9,) or theta.shape != (8,):
            raise AlignmentFileError(f"{where}: homography needs 9 entries and theta 8")
        matrix = matrix.reshape(3, 3)
        if not check_homography(matrix):
            raise AlignmentFileError(f"image {image_id}: homography determinant is not 1 within 1e-9")
        ids.append(image_id)
        homographies.append(matrix)
        thetas.append(theta)
        flips.append(bool(record.get('flip', False)))
    if len(set(ids)) != len(ids):
        raise AlignmentFileError(f"{path}: duplicate image ids")

    loss = document.get('loss', {})
    config = document.get('config', {})
    final = loss.get('final')
    return AlignmentResult(
        image_ids=ids,
        image_sizes=sizes,
        homographies=np.asarray(homographies).reshape(-1, 3, 3),
        thetas=np.asarray(thetas).reshape(-1, 8),
        flips=np.asarray(flips, dtype=bool),
        final_loss=math.nan if final is None else float(final),
        loss_history=[math.nan if value is None else float(value) for value in loss.get('history', [])],
        gauge=document.get('gauge', 'none'),
        gauge_fallback=bool(document.get('gauge_fallback', False)),
        config=dict(config.get('train', {})),
    )


# ---------------------------------------------------------------------------
# ground-truth sidecar
# ---------------------------------------------------------------------------

@dataclass
class GroundTruth:
    """Contents of a ground-truth sidecar."""

    annotations: GtAnnotations
    thetas: Dict[int, np.ndarray]
    flips: Dict[int, bool]
    canonical: np.ndarray


def save_ground_truth(collection, path) -> Path:
    """Write the sidecar of a SyntheticCollection: GT thetas, flips, canonical and per-image keypoints."""
    table = collection.gt.points
    document = {
        'format': GROUND_TRUTH_FORMAT,
        'version': FORMAT_VERSION,
        'canonical': collection.canonical.tolist(),
        'images': [],
    }
    for index, image in enumerate(collection.images):
        rows = table[table['image_id'] == image.id]
        document['images'].append({
            'id': image.id,
            'width': image.width,
            'height': image.height,
            'flip': bool(collection.flips[index]),
            'theta': collection.thetas[index].tolist(),
            'keypoints': [[row.label, float(row.x), float(row.y), bool(row.visible)]
                          for row in rows.itertuples(index=False)],
        })
    return write_json(document, path)


def load_ground_truth(path) -> GroundTruth:
    """Read a ground-truth sidecar."""
    document = _read_json(path, ManifestError, GROUND_TRUTH_FORMAT)
    rows, sizes, thetas, flips = [], {}, {}, {}
    for n, record in enumerate(_field(document, 'images', str(path), ManifestError)):
        where = f"images[{n}]"
        image_id = int(_field(record, 'id', where, ManifestError))
        sizes[image_id] = (int(_field(record, 'width', where, ManifestError)),
                           int(_field(record, 'height', where, ManifestError)))
        thetas[image_id] = np.asarray(record.get('theta', [0.0] * 8), dtype=np.float64)
        flips[image_id] = bool(record.get('flip', False))
        for entry in _field(record, 'keypoints', where, ManifestError):
            try:
                label, x, y, visible = entry
            except (TypeError, ValueError) as exc:
                raise ManifestError(f"{where}: keypoints need [label, x, y, visible]") from exc
            rows.append({'image_id': image_id, 'label': str(label), 'x': float(x), 'y': float(y),
                         'visible': bool(visible)})
    points = pd.DataFrame(rows, columns=['image_id', 'label', 'x', 'y', 'visible'])
    return GroundTruth(
        annotations=GtAnnotations(points, sizes),
        thetas=thetas,
        flips=flips,
        canonical=np.asarray(document.get('canonical', []), dtype=np.float64).reshape(-1, 2),
    )


# ---------------------------------------------------------------------------
# metric report and weights
# ---------------------------------------------------------------------------

def save_metric_report(report: PckReport, mean_error: float, path) -> Path:
    """Write mean, per-pair and per-label scores."""
    document = {
        'format': METRICS_FORMAT,
        'version': FORMAT_VERSION,
        'alpha': report.alpha,
        'pck': report.mean,
        'mean_transfer_error': _finite_or_none(mean_error),
        'failed_transfers': report.n_failed,
        'per_pair': report.per_pair.to_dict(orient='records'),
        'per_label': report.per_label.to_dict(orient='records'),
    }
    return write_json(document, path)


def save_weights(weights: SageWeights, path) -> Path:
    """Checkpoint regressor weights with torch.save."""
    path = Path(path)
    payload = {
        'format': WEIGHTS_FORMAT,
        'version': FORMAT_VERSION,
        'arch': weights.arch,
        'tensors': {name: tensor.detach().clone() for name, tensor in weights.named_parameters().items()},
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(payload, path)
    except OSError as exc:
        raise KpalignIOError(f"cannot write weights ({exc.strerror})", path) from exc
    logger.info("wrote %s", path)
    return path


def load_weights(path) -> SageWeights:
    """Restore weights written by save_weights."""
    path = Path(path)
    try:
        payload = torch.load(path, weights_only=True)
    except (OSError, RuntimeError, pickle.UnpicklingError) as exc:
        raise KpalignIOError(f"cannot read weights ({exc})", path) from exc
    if payload.get('format') != WEIGHTS_FORMAT:
        raise InvalidArgumentError(f"{path} is not a weights checkpoint")
    tensors = payload['tensors']
    layers = sorted({int(name.split('.')[0][len('layer'):]) for name in tensors if name.startswith('layer')})
    return SageWeights(
        arch=payload['arch'],
        w1=[tensors[f"layer{k}.w1"] for k in layers],
        w2=[tensors[f"layer{k}.w2"] for k in layers if f"layer{k}.w2" in tensors],
        bias=[tensors[f"layer{k}.bias"] for k in layers if f"layer{k}.bias" in tensors],
        w_head=tensors.get('head.w'),
        b_head=tensors.get('head.b'),
        theta=tensors.get('theta'),
    )


# ---------------------------------------------------------------------------
# colormaps
# ---------------------------------------------------------------------------

def colormap_image(homography, width: int, height: int, flip: bool = False) -> np.ndarray:
    """
    Color one image by the canonical gradient sampled through its warp.

    Pixel x is mirrored when flip is set, mapped through homography into the
    shared frame and colored (R, G, B) = ((u + 1) / 2, (v + 1) / 2, 0.5);
    samples outside [-1, 1]^2 or at infinity are black.

    Returns:
        np.ndarray: (height, width, 3) uint8
    """
    xs, ys = np.meshgrid(np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64))
    normalized = to_normalized(np.stack([xs, ys], axis=-1), width, height)
    if flip:
        normalized[..., 0] = -normalized[..., 0]
    warped, ok = project_points(as_tensor(homography), normalized)
    warped, ok = warped.numpy(), ok.numpy()
    inside = ok & (np.abs(warped) <= 1.0).all(axis=-1)
    rgb = np.zeros((height, width, 3), dtype=np.float64)
    rgb[..., 0] = (warped[..., 0] + 1.0) / 2.0
    rgb[..., 1] = (warped[..., 1] + 1.0) / 2.0
    rgb[..., 2] = 0.5
    rgb[~inside] = 0.0
    return np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)


def render_colormaps(result: AlignmentResult, out_dir, images: Optional[Iterable[ImageMeta]] = None) -> List[Path]:
    """
    Write one binary PPM (P6) per image, named image_<id>.ppm.

    Args:
        result: Alignment to visualize
        out_dir: Output directory (created if missing)
        images: Optional subset of images; defaults to every image in result
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise KpalignIOError(f"cannot create directory ({exc.strerror})", out_dir) from exc
    wanted = [image.id for image in images] if images is not None else result.image_ids
    written = []
    for image_id in wanted:
        index = result.index_of(image_id)
        width, height = result.image_sizes[image_id]
        rgb = colormap_image(result.homographies[index], width, height, bool(result.flips[index]))
        path = out_dir / f"image_{image_id}.ppm"
        try:
            Image.fromarray(rgb).save(path, format='PPM')
        except OSError as exc:
            raise KpalignIOError(f"cannot write colormap ({exc})", path) from exc
        written.append(path)
    logger.info("rendered %d colormaps into %s", len(written), out_dir)
    return written


# ---------------------------------------------------------------------------
# warp benchmark
# ---------------------------------------------------------------------------

class BenchTiming(NamedTuple):
    n_points: int
    dim: int
    interpolation: bool
    seconds: float
    repeats: int


def _bench_step(warps, target, points, payload, feature_maps, batches: int) -> None:
    warped, ok = project_points(warps[:, None], points)
    if feature_maps is None:
        residual = ((warped - points) ** 2).sum(dim=-1)
        weight = torch.where(ok, residual / (residual + 0.0625), torch.ones_like(residual))
        loss = (weight[..., None] * payload).sum()
    else:
        loss = 0.0
        grid = warped.to(feature_maps.dtype)
        for chunk in torch.arange(warps.shape[0]).chunk(batches):
            sampled = F.grid_sample(
                feature_maps[target[chunk]], grid[chunk][:, None], mode='bilinear', align_corners=True,
            )
            loss = loss + ((sampled[:, :, 0].transpose(1, 2) - payload[chunk]) ** 2).sum()
    loss.backward()


def warp_bench(n_points: int, dim: int = 2, batches: int = 3, interpolation: bool = False,
               n_images: int = BENCH_IMAGES, repeats: int = 5, seed: int = 0) -> BenchTiming:
    """
    Time one forward and backward inverse-compositional warp.

    n_points points with dim-sized payloads are warped for n_images simulated
    images (each against its successor). With interpolation the target payload
    is resampled bilinearly from a dense feature map at the warped locations,
    processed in `batches` image chunks; without it the payload travels with
    the points. The composed warp matrices are built once outside the timed
    region, so each run times projection, penalty or resampling and the
    backward pass. Reports the median wall-clock time of `repeats` runs after
    one warm-up.
    """
    if n_points < 1 or dim < 1 or batches < 1 or repeats < 1:
        raise InvalidArgumentError("n_points, dim, batches and repeats must be >= 1")
    generator = torch.Generator().manual_seed(seed)
    points = torch.rand(n_images, n_points, 2, generator=generator, dtype=torch.float64) * 1.6 - 0.8
    payload = torch.rand(n_images, n_points, dim, generator=generator, dtype=torch.float32)
    feature_maps = None
    if interpolation:
        side = max(2, math.ceil(math.sqrt(n_points)))
        feature_maps = torch.rand(n_images, dim, side, side, generator=generator, dtype=torch.float32)
    base = torch.rand(n_images, 8, generator=generator, dtype=torch.float64) * 0.02 - 0.01
    source = torch.arange(n_images)
    target = torch.roll(source, -1)
    with torch.no_grad():
        composed = sl3_exp(-base)[target] @ sl3_exp(base)[source]

    samples = []
    for run in range(repeats + 1):
        warps = composed.clone().requires_grad_(True)
        started = time.perf_counter()
        _bench_step(warps, target, points, payload, feature_maps, batches)
        if run:
            samples.append(time.perf_counter() - started)
    seconds = statistics.median(samples)
    logger.info("warp bench: %d points, D=%d, interpolation=%s -> %.6f s", n_points, dim, interpolation, seconds)
    return BenchTiming(n_points, dim, interpolation, seconds, repeats)


def bench_grid(point_counts: Sequence[int] = (SPARSE_POINTS, 1024, DENSE_POINTS),
               dims: Sequence[int] = (2, 25), repeats: int = 5, batches: int = 3) -> pd.DataFrame:
    """
    Run warp_bench over point counts, payload sizes and both warp paths.

    Returns:
        pandas.DataFrame: columns n_points, dim, interpolation, seconds, repeats
    """
    rows = [warp_bench(n_points, dim, batches, interpolation, repeats=repeats)._asdict()
            for interpolation in (False, True)
            for dim in dims
            for n_points in point_counts]
    return pd.DataFrame(rows)
