"""
Test-time optimization of the regressor weights.

One run owns its weights: every epoch optionally runs the horizontal-flip
search, takes exact reverse-mode gradients of the loss under the current flip
configuration and applies a bias-corrected Adam update. The final parameters
are exponentiated and gauge-normalized into an AlignmentResult.
"""

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch

from kpalign.config import TrainConfig
from kpalign.errors import InvalidArgumentError, NumericalFailureError
from kpalign.objective import LossReport, apply_flips, kp_ic_loss
from kpalign.sage_net import SageWeights, forward, init_weights, preactivation_margin
from kpalign.sl3_geometry import (
    gauge_matrices,
    gauge_normalize,
    matrix_chart,
    renormalize,
)

logger = logging.getLogger(__name__)

FLIP_TOLERANCE = 1e-12

LossSink = Callable[[int, float, int], None]


@dataclass
class AdamState:
    """First/second moments shaped like the weights, the step counter and hyperparameters."""

    m: List[torch.Tensor]
    v: List[torch.Tensor]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_weights(cls, weights: SageWeights, lr: float = 1e-3, beta1: float = 0.9,
                    beta2: float = 0.999, eps: float = 1e-8) -> 'AdamState':
        params = weights.parameters()
        return cls(
            m=[torch.zeros_like(p) for p in params],
            v=[torch.zeros_like(p) for p in params],
            lr=lr, beta1=beta1, beta2=beta2, eps=eps,
        )


@dataclass
class AlignmentResult:
    """
    Output of one alignment run.

    Attributes:
        image_ids: Image ids in graph order
        image_sizes: id -> (width, height) in pixels
        homographies: (N, 3, 3) gauge-normalized warps into the shared frame
        thetas: (N, 8) raw Lie-algebra parameters
        flips: (N,) horizontal-flip flags
        final_loss: Loss after the last update
        loss_history: Loss at each epoch before its update
        gauge: Gauge mode actually applied
        gauge_fallback: True when the Karcher gauge fell back to 'first'
        config: Echo of the training (and graph build) settings
        timings: Wall-clock seconds per stage (not persisted)
        weights: Final regressor weights (not persisted in alignment files)
    """

    image_ids: List[int]
    image_sizes: Dict[int, Tuple[int, int]]
    homographies: np.ndarray
    thetas: np.ndarray
    flips: np.ndarray
    final_loss: float
    loss_history: List[float] = field(default_factory=list)
    gauge: str = 'none'
    gauge_fallback: bool = False
    config: Dict = field(default_factory=dict)
    timings: Dict[str, float] = field(default_factory=dict)
    weights: Optional[SageWeights] = field(default=None, repr=False)

    def index_of(self, image_id: int) -> int:
        try:
            return self.image_ids.index(image_id)
        except ValueError:
            raise InvalidArgumentError(f"unknown image id {image_id}") from None

    def homography(self, image_id: int) -> np.ndarray:
        return self.homographies[self.index_of(image_id)]

    @classmethod
    def identity(cls, images) -> 'AlignmentResult':
        """Result that leaves every image where it is (metric baselines)."""
        images = sorted(images, key=lambda image: image.id)
        n = len(images)
        return cls(
            image_ids=[image.id for image in images],
            image_sizes={image.id: (image.width, image.height) for image in images},
            homographies=np.tile(np.eye(3), (n, 1, 1)),
            thetas=np.zeros((n, 8)),
            flips=np.zeros(n, dtype=bool),
            final_loss=math.nan,
        )


class GradientSet(NamedTuple):
    names: List[str]
    grads: List[torch.Tensor]
    loss: LossReport


def _evaluate(graph, weights: SageWeights, config: TrainConfig) -> LossReport:
    return kp_ic_loss(graph, forward(graph, weights), config.sigma, config.robust,
                      config.normalize, config.param)


def loss_value(graph, weights: SageWeights, config: TrainConfig, flags=None) -> float:
    """Loss of the weights on the graph under the given flip flags, without gradients."""
    posed = apply_flips(graph, flags) if flags is not None else graph
    with torch.no_grad():
        return _evaluate(posed, weights, config).total


def loss_gradients(weights: SageWeights, graph, config: TrainConfig, flags=None) -> GradientSet:
    """
    Exact gradients of the loss with respect to every weight.

    Reverse-mode accumulation runs through the head, readout, message-passing
    layers, the truncated exponential series, perspective division and the
    penalty. For the 'direct' architecture the parameters are the free thetas.

    Raises:
        NumericalFailureError: Naming the first parameter with a non-finite gradient
    """
    posed = apply_flips(graph, flags) if flags is not None else graph
    live = weights.requiring_grad()
    named = live.named_parameters()
    report = _evaluate(posed, live, config)
    if not math.isfinite(report.total):
        raise NumericalFailureError(f"loss is not finite ({report.total})")
    grads = torch.autograd.grad(report.tensor, list(named.values()), allow_unused=True)
    checked = []
    for (name, param), grad in zip(named.items(), grads):
        grad = torch.zeros_like(param) if grad is None else grad.detach()
        if not bool(torch.isfinite(grad).all()):
            raise NumericalFailureError(f"non-finite gradient in {name}")
        checked.append(grad)
    return GradientSet(list(named), checked, replace(report, tensor=report.tensor.detach()))


def adam_step(weights: SageWeights, grads: Sequence[torch.Tensor],
              state: AdamState) -> Tuple[SageWeights, AdamState]:
    """
    One bias-corrected Adam update; returns new weights and state.
    """
    params = weights.parameters()
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise InvalidArgumentError("gradient shapes do not match the weights")
    step = state.step + 1
    correction1 = 1.0 - state.beta1 ** step
    correction2 = 1.0 - state.beta2 ** step
    new_params, new_m, new_v = [], [], []
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            m = state.beta1 * m + (1.0 - state.beta1) * g
            v = state.beta2 * v + (1.0 - state.beta2) * g * g
            update = (m / correction1) / (torch.sqrt(v / correction2) + state.eps)
            new_params.append(p.detach() - state.lr * update)
            new_m.append(m)
            new_v.append(v)
    new_state = replace(state, m=new_m, v=new_v, step=step)
    return weights.replace_parameters(new_params), new_state


def flip_search(graph, weights: SageWeights, flags, config: TrainConfig) -> np.ndarray:
    """
    Greedy horizontal-flip search.

    One pass over the images in id order: each image's flag is toggled and kept
    only if the total loss (parameters re-predicted on the re-posed graph)
    drops by more than 1e-12.

    Returns:
        np.ndarray: Updated flags
    """
    flags = np.array(flags, dtype=bool).reshape(-1)
    if len(flags) != graph.n_images:
        raise InvalidArgumentError(f"expected {graph.n_images} flip flags, got {len(flags)}")
    current = loss_value(graph, weights, config, flags)
    for index, image_id in enumerate(graph.image_ids):
        trial = flags.copy()
        trial[index] = not trial[index]
        value = loss_value(graph, weights, config, trial)
        if value < current - FLIP_TOLERANCE:
            logger.info("image %d flip -> %s (loss %.6g -> %.6g)", image_id, bool(trial[index]), current, value)
            flags, current = trial, value
    return flags


def enable_determinism() -> Tuple[bool, int]:
    """
    Deterministic torch kernels on a single thread.

    Returns:
        The previous (deterministic_algorithms, num_threads) settings for
        restore_determinism
    """
    previous = (torch.are_deterministic_algorithms_enabled(), torch.get_num_threads())
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)
    return previous


def restore_determinism(previous: Tuple[bool, int]) -> None:
    enabled, threads = previous
    torch.use_deterministic_algorithms(enabled)
    torch.set_num_threads(threads)


def _final_homographies(thetas: torch.Tensor, config: TrainConfig):
    if config.param == 'lie':
        return gauge_normalize(thetas, config.gauge)
    forward_h = matrix_chart(thetas)
    det = torch.linalg.det(forward_h)
    if not bool(torch.isfinite(forward_h).all()) or bool((det <= 0).any()):
        raise NumericalFailureError("matrix chart produced a warp with non-positive determinant")
    return gauge_matrices(renormalize(forward_h), config.gauge)


def align_collection(graph, config: Optional[TrainConfig] = None,
                     log_sink: Optional[LossSink] = None) -> AlignmentResult:
    """
    Optimize one collection.

    Args:
        graph: CorrespondenceGraph built from the collection
        config: Training settings (defaults to TrainConfig())
        log_sink: Called as log_sink(epoch, loss, flips_changed) every epoch

    Returns:
        AlignmentResult: Gauge-normalized warps, raw parameters, flips and history

    Raises:
        InvalidArgumentError: If the graph holds no matches
        NumericalFailureError: On non-finite gradients; carries the partial history
    """
    config = config or TrainConfig()
    if len(graph.matches) == 0:
        raise InvalidArgumentError("cannot align a graph without matches")
    if graph.orphan_images:
        logger.warning("images without inter-image constraints: %s", graph.orphan_images)
    if not config.deterministic:
        return _optimize(graph, config, log_sink)
    previous = enable_determinism()
    try:
        return _optimize(graph, config, log_sink)
    finally:
        restore_determinism(previous)


def _optimize(graph, config: TrainConfig, log_sink: Optional[LossSink]) -> AlignmentResult:
    timings = {'weights_init': 0.0, 'flip_search': 0.0, 'optimize': 0.0, 'gauge': 0.0}
    started = time.perf_counter()
    weights = init_weights(config.hidden_dim, config.layers, config.seed, config.arch,
                           config.use_bias, graph.n_images)
    state = AdamState.for_weights(weights, config.lr, config.beta1, config.beta2, config.eps)
    flags = np.zeros(graph.n_images, dtype=bool)
    history: List[float] = []
    timings['weights_init'] = time.perf_counter() - started

    for epoch in range(config.epochs):
        changed = 0
        if config.flip_search and epoch % config.flip_every == 0:
            tick = time.perf_counter()
            try:
                searched = flip_search(graph, weights, flags, config)
            except NumericalFailureError as exc:
                raise NumericalFailureError(f"epoch {epoch}: {exc}", history) from exc
            changed = int((searched != flags).sum())
            flags = searched
            timings['flip_search'] += time.perf_counter() - tick

        tick = time.perf_counter()
        try:
            gradients = loss_gradients(weights, graph, config, flags)
        except NumericalFailureError as exc:
            raise NumericalFailureError(f"epoch {epoch}: {exc}", history) from exc
        history.append(gradients.loss.total)
        weights, state = adam_step(weights, gradients.grads, state)
        timings['optimize'] += time.perf_counter() - tick

        if log_sink is not None:
            log_sink(epoch, gradients.loss.total, changed)
        if epoch % config.flip_every == 0 or epoch == config.epochs - 1:
            logger.info("epoch %d: loss %.6g, flips changed %d", epoch, gradients.loss.total, changed)

    tick = time.perf_counter()
    posed = apply_flips(graph, flags)
    with torch.no_grad():
        thetas = forward(posed, weights).detach()
        final = kp_ic_loss(posed, thetas, config.sigma, config.robust, config.normalize, config.param)
    gauged = _final_homographies(thetas, config)
    timings['gauge'] = time.perf_counter() - tick
    logger.info("alignment finished: loss %.6g, %d flipped, timings %s",
                final.total, int(flags.sum()), {k: round(v, 3) for k, v in timings.items()})

    return AlignmentResult(
        image_ids=graph.image_ids,
        image_sizes={image.id: (image.width, image.height) for image in graph.images},
        homographies=gauged.homographies.numpy(),
        thetas=thetas.numpy(),
        flips=flags,
        final_loss=final.total,
        loss_history=history,
        gauge=gauged.mode,
        gauge_fallback=gauged.fell_back,
        config=config.to_dict(),
        timings=timings,
        weights=weights.detached(),
    )


class GradientCheck(NamedTuple):
    analytic: np.ndarray
    numeric: np.ndarray
    max_relative_error: float
    preactivation_margin: float


def gradient_check(weights: SageWeights, graph, config: TrainConfig, step: float = 1e-5,
                   flags=None) -> GradientCheck:
    """
    Compare reverse-mode gradients with central finite differences.

    The relative error of each coordinate is measured against the larger of
    its analytic and numeric magnitudes, floored at 1e-3 of the largest
    numeric entry. preactivation_margin reports how close the instance is to
    a rectifier kink, where finite differences are unreliable.
    """
    posed = apply_flips(graph, flags) if flags is not None else graph
    analytic = torch.cat([g.reshape(-1) for g in loss_gradients(weights, posed, config).grads]).numpy()

    base = weights.detached()
    flat = torch.cat([p.reshape(-1) for p in base.parameters()])
    shapes = [p.shape for p in base.parameters()]
    sizes = [p.numel() for p in base.parameters()]

    def at(vector):
        return base.replace_parameters([chunk.reshape(shape) for chunk, shape in zip(torch.split(vector, sizes), shapes)])

    numeric = np.empty_like(analytic)
    for k in range(len(flat)):
        plus, minus = flat.clone(), flat.clone()
        plus[k] += step
        minus[k] -= step
        numeric[k] = (loss_value(posed, at(plus), config) - loss_value(posed, at(minus), config)) / (2 * step)

    floor = max(1e-3 * float(np.abs(numeric).max()), 1e-12)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return GradientCheck(
        analytic=analytic,
        numeric=numeric,
        max_relative_error=float(np.max(np.abs(analytic - numeric) / scale)),
        preactivation_margin=preactivation_margin(posed, base),
    )
