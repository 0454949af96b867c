"""
GraphSAGE regressor from the correspondence graph to per-image parameters.

Node coordinates pass through mean-aggregation message-passing layers, node
embeddings are averaged per image, and a linear head emits 8 Lie-algebra
coefficients per image. Weights are held as plain float64 tensors so that the
optimizer can differentiate and update them directly.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import torch
import torch.nn.functional as F

from kpalign.errors import InvalidArgumentError
from kpalign.sl3_geometry import DTYPE

logger = logging.getLogger(__name__)

INPUT_DIM = 2
OUTPUT_DIM = 8
LEAKY_SLOPE = 0.01
HEAD_SCALE = 1e-3


@dataclass
class SageWeights:
    """
    Trainable state of the regressor.

    Attributes:
        arch: 'sage', 'mlp', 'linear' or 'direct'
        w1: Per-layer self weights (d_in x d_out)
        w2: Per-layer neighbor weights; empty unless arch == 'sage'
        bias: Per-layer biases; empty when biases are disabled
        w_head: Readout projection (d_L x 8); None for 'direct'
        b_head: Head bias (8,); None for 'direct'
        theta: Free per-image parameters (N x 8); only for 'direct'
    """

    arch: str
    w1: List[torch.Tensor] = field(default_factory=list)
    w2: List[torch.Tensor] = field(default_factory=list)
    bias: List[torch.Tensor] = field(default_factory=list)
    w_head: Optional[torch.Tensor] = None
    b_head: Optional[torch.Tensor] = None
    theta: Optional[torch.Tensor] = None

    def named_parameters(self) -> Dict[str, torch.Tensor]:
        """Parameters in a fixed order, keyed by a readable name."""
        named = {}
        for layer, weight in enumerate(self.w1):
            named[f"layer{layer + 1}.w1"] = weight
            if self.w2:
                named[f"layer{layer + 1}.w2"] = self.w2[layer]
            if self.bias:
                named[f"layer{layer + 1}.bias"] = self.bias[layer]
        if self.w_head is not None:
            named["head.w"] = self.w_head
            named["head.b"] = self.b_head
        if self.theta is not None:
            named["theta"] = self.theta
        return named

    def parameters(self) -> List[torch.Tensor]:
        return list(self.named_parameters().values())

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    @property
    def dims(self) -> List[int]:
        """Dimension chain of the message-passing layers."""
        if not self.w1:
            return [INPUT_DIM]
        return [self.w1[0].shape[0]] + [w.shape[1] for w in self.w1]

    def replace_parameters(self, tensors: List[torch.Tensor]) -> 'SageWeights':
        """New weights with the same structure holding the given tensors."""
        it = iter(tensors)
        layers = len(self.w1)
        w1, w2, bias = [], [], []
        for _ in range(layers):
            w1.append(next(it))
            if self.w2:
                w2.append(next(it))
            if self.bias:
                bias.append(next(it))
        w_head = b_head = theta = None
        if self.w_head is not None:
            w_head, b_head = next(it), next(it)
        if self.theta is not None:
            theta = next(it)
        return SageWeights(self.arch, w1, w2, bias, w_head, b_head, theta)

    def detached(self) -> 'SageWeights':
        return self.replace_parameters([p.detach().clone() for p in self.parameters()])

    def requiring_grad(self) -> 'SageWeights':
        return self.replace_parameters([p.detach().clone().requires_grad_(True) for p in self.parameters()])


def _glorot(fan_in, fan_out, generator, scale=1.0):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    sample = torch.rand(fan_in, fan_out, generator=generator, dtype=DTYPE)
    return (2.0 * sample - 1.0) * bound * scale


def init_weights(hidden_dim: int = 64, layers: int = 5, seed: int = 0, arch: str = 'sage',
                 use_bias: bool = True, n_images: Optional[int] = None) -> SageWeights:
    """
    Seeded initialization.

    Layer weights are Glorot-uniform, biases zero, and the head is scaled by
    1e-3 so that initial warps are close to the identity. 'direct' starts
    every image at theta = 0 and needs n_images.

    Args:
        hidden_dim: Width d of every hidden layer
        layers: Number of message-passing (or per-node MLP) layers
        seed: Generator seed
        arch: 'sage', 'mlp', 'linear' or 'direct'
        use_bias: Include per-layer biases
        n_images: Number of images, required for 'direct'
    """
    if hidden_dim < 1 or layers < 1:
        raise InvalidArgumentError("hidden_dim and layers must be >= 1")
    if arch == 'direct':
        if not n_images:
            raise InvalidArgumentError("direct parameterization needs n_images")
        return SageWeights(arch, theta=torch.zeros(n_images, OUTPUT_DIM, dtype=DTYPE))
    if arch not in ('sage', 'mlp', 'linear'):
        raise InvalidArgumentError(f"unknown architecture {arch!r}")

    generator = torch.Generator().manual_seed(seed)
    weights = SageWeights(arch)
    dims = [INPUT_DIM] if arch == 'linear' else [INPUT_DIM] + [hidden_dim] * layers
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        weights.w1.append(_glorot(d_in, d_out, generator))
        if arch == 'sage':
            weights.w2.append(_glorot(d_in, d_out, generator))
        if use_bias:
            weights.bias.append(torch.zeros(d_out, dtype=DTYPE))
    weights.w_head = _glorot(dims[-1], OUTPUT_DIM, generator, scale=HEAD_SCALE)
    weights.b_head = torch.zeros(OUTPUT_DIM, dtype=DTYPE)
    return weights


def sage_layer(h_prev: torch.Tensor, mean_operator: Optional[torch.Tensor], w1: torch.Tensor,
               w2: Optional[torch.Tensor], bias: Optional[torch.Tensor],
               activation: bool = True) -> torch.Tensor:
    """
    One message-passing layer.

    h_v = act(W1^T h_v + W2^T mean_{u in N(v)} h_u + bias). The neighbor mean
    is the row-normalized adjacency times h_prev, so isolated nodes receive a
    zero neighbor term. mean_operator or w2 set to None drops the neighbor
    term (per-node MLP layer).
    """
    out = h_prev @ w1
    if w2 is not None and mean_operator is not None:
        out = out + (mean_operator @ h_prev) @ w2
    if bias is not None:
        out = out + bias
    return F.leaky_relu(out, LEAKY_SLOPE) if activation else out


def readout(h_final: torch.Tensor, image_tags, n_images: int) -> torch.Tensor:
    """
    Per-image average pooling.

    Returns:
        torch.Tensor: (n_images, d) mean embedding of each image's nodes

    Raises:
        InvalidArgumentError: If an image has no nodes
    """
    tags = torch.as_tensor(image_tags, dtype=torch.int64)
    counts = torch.bincount(tags, minlength=n_images).to(DTYPE)
    if bool((counts == 0).any()):
        empty = torch.nonzero(counts == 0).flatten().tolist()
        raise InvalidArgumentError(f"images at indices {empty} have no nodes")
    sums = torch.zeros(n_images, h_final.shape[1], dtype=h_final.dtype).index_add(0, tags, h_final)
    return sums / counts[:, None]


def _embed(graph, weights: SageWeights, preactivations: Optional[list] = None) -> torch.Tensor:
    h = torch.as_tensor(graph.features0, dtype=DTYPE)
    mean_operator = graph.mean_operator if weights.arch == 'sage' else None
    for layer, w1 in enumerate(weights.w1):
        w2 = weights.w2[layer] if weights.w2 else None
        bias = weights.bias[layer] if weights.bias else None
        pre = sage_layer(h, mean_operator, w1, w2, bias, activation=False)
        if preactivations is not None:
            preactivations.append(pre)
        h = F.leaky_relu(pre, LEAKY_SLOPE)
    return h


def forward(graph, weights: SageWeights) -> torch.Tensor:
    """
    Predict per-image parameters f(G) = (theta_i).

    Returns:
        torch.Tensor: (N, 8) coefficients ordered by image id; differentiable
        with respect to the weights
    """
    if weights.arch == 'direct':
        if weights.theta.shape[0] != graph.n_images:
            raise InvalidArgumentError(
                f"direct weights hold {weights.theta.shape[0]} images, graph has {graph.n_images}"
            )
        return weights.theta
    h = _embed(graph, weights)
    if h.shape[1] != weights.w_head.shape[0]:
        raise InvalidArgumentError("head input width does not match the embedding width")
    z = readout(h, graph.image_tags, graph.n_images)
    return z @ weights.w_head + weights.b_head


def preactivation_margin(graph, weights: SageWeights) -> float:
    """Smallest |pre-activation| over hidden layers; inf when there are none."""
    if weights.arch in ('direct', 'linear'):
        return math.inf
    collected = []
    with torch.no_grad():
        _embed(graph, weights.detached(), collected)
    return min(float(pre.abs().min()) for pre in collected)
