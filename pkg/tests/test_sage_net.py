"""
Unit tests for the GraphSAGE regressor.

Run with:
    pytest tests/test_sage_net.py -v
"""

import math

import numpy as np
import pytest
import torch

from kpalign.errors import InvalidArgumentError
from kpalign.graph_builder import CorrespondenceGraph, ImageMeta
from kpalign.sage_net import forward, init_weights, preactivation_margin, readout, sage_layer


def _permuted(graph, permutation):
    """Same graph with its nodes renumbered: new node n is old node permutation[n]."""
    inverse = np.argsort(permutation)
    return CorrespondenceGraph(
        images=graph.images,
        coords=graph.coords[permutation],
        image_tags=graph.image_tags[permutation],
        intra_edges=inverse[graph.intra_edges],
        inter_edges=inverse[graph.inter_edges],
        matches=inverse[graph.matches],
    )


class TestInitWeights:
    """Tests for seeded initialization."""

    def test_default_parameter_count(self):
        assert init_weights().parameter_count == 33864

    def test_parameter_count_without_bias(self):
        assert init_weights(use_bias=False).parameter_count == 33864 - 5 * 64

    def test_same_seed_same_weights(self):
        first, second = init_weights(seed=7), init_weights(seed=7)
        for a, b in zip(first.parameters(), second.parameters()):
            assert torch.equal(a, b)

    def test_different_seed_different_weights(self):
        assert not torch.equal(init_weights(seed=1).w1[0], init_weights(seed=2).w1[0])

    def test_parameters_are_float64(self):
        assert all(p.dtype == torch.float64 for p in init_weights(hidden_dim=4, layers=2).parameters())

    def test_mlp_has_no_neighbor_weights(self):
        weights = init_weights(hidden_dim=8, layers=3, arch='mlp')
        assert weights.w2 == [] and len(weights.w1) == 3

    def test_direct_needs_image_count(self):
        with pytest.raises(InvalidArgumentError):
            init_weights(arch='direct')

    def test_direct_starts_at_identity(self):
        weights = init_weights(arch='direct', n_images=3)
        assert torch.equal(weights.theta, torch.zeros(3, 8, dtype=torch.float64))

    def test_unknown_architecture_rejected(self):
        with pytest.raises(InvalidArgumentError):
            init_weights(arch='gat')

    def test_replace_parameters_round_trip(self):
        weights = init_weights(hidden_dim=4, layers=2)
        rebuilt = weights.replace_parameters(weights.parameters())
        assert list(rebuilt.named_parameters()) == list(weights.named_parameters())


class TestLayers:
    """Tests for sage_layer and readout."""

    def test_isolated_node_gets_no_neighbor_term(self):
        h = torch.tensor([[1.0, 2.0]], dtype=torch.float64)
        mean_operator = torch.zeros(1, 1, dtype=torch.float64)
        w1 = torch.eye(2, dtype=torch.float64)
        w2 = torch.full((2, 2), 5.0, dtype=torch.float64)
        out = sage_layer(h, mean_operator, w1, w2, None)
        assert torch.equal(out, h)

    def test_leaky_activation(self):
        h = torch.tensor([[-1.0, 2.0]], dtype=torch.float64)
        out = sage_layer(h, None, torch.eye(2, dtype=torch.float64), None, None)
        np.testing.assert_allclose(out.numpy(), [[-0.01, 2.0]])

    def test_neighbor_only_layer_swaps_two_nodes(self):
        h = torch.tensor([[1.0, 2.0], [3.0, 4.0]], dtype=torch.float64)
        mean_operator = torch.tensor([[0.0, 1.0], [1.0, 0.0]], dtype=torch.float64)
        out = sage_layer(h, mean_operator, torch.zeros(2, 2, dtype=torch.float64),
                         torch.eye(2, dtype=torch.float64), None, activation=False)
        assert torch.equal(out, h.flip(0))

    def test_readout_averages_per_image(self):
        h = torch.tensor([[1.0], [3.0], [10.0]], dtype=torch.float64)
        pooled = readout(h, [0, 0, 1], 2)
        np.testing.assert_allclose(pooled.numpy(), [[2.0], [10.0]])

    def test_readout_rejects_empty_image(self):
        with pytest.raises(InvalidArgumentError):
            readout(torch.ones(2, 1, dtype=torch.float64), [0, 0], 2)


class TestForward:
    """Tests for the full regressor."""

    def test_output_shape(self, clean_graph):
        thetas = forward(clean_graph, init_weights(hidden_dim=8, layers=2))
        assert thetas.shape == (clean_graph.n_images, 8)

    def test_initial_warps_near_identity(self, clean_graph):
        thetas = forward(clean_graph, init_weights())
        assert float(thetas.abs().max()) < 0.1

    def test_node_permutation_invariance(self, clean_graph):
        weights = init_weights(hidden_dim=8, layers=3)
        permutation = np.random.default_rng(0).permutation(clean_graph.n_nodes)
        moved = forward(_permuted(clean_graph, permutation), weights)
        np.testing.assert_allclose(moved.detach().numpy(), forward(clean_graph, weights).detach().numpy(),
                                   atol=1e-12)

    def test_duplicated_images_get_equal_parameters(self):
        images = [ImageMeta(1, 10, 10), ImageMeta(2, 10, 10), ImageMeta(3, 10, 10)]
        coords = np.array([[0.1, 0.2], [-0.4, 0.5], [0.1, 0.2], [-0.4, 0.5], [0.3, -0.6], [0.7, 0.1]])
        graph = CorrespondenceGraph(
            images=images,
            coords=coords,
            image_tags=np.array([0, 0, 1, 1, 2, 2]),
            intra_edges=np.array([[0, 1], [2, 3], [4, 5]]),
            inter_edges=np.array([[0, 2], [0, 4], [1, 3], [1, 5], [2, 4], [3, 5]]),
            matches=np.array([[0, 2], [0, 4], [1, 3], [1, 5], [2, 4], [3, 5]]),
        )
        thetas = forward(graph, init_weights(hidden_dim=8, layers=3, seed=4)).detach().numpy()
        np.testing.assert_allclose(thetas[0], thetas[1], atol=1e-12)
        assert not np.allclose(thetas[0], thetas[2])

    def test_direct_returns_free_parameters(self, clean_graph):
        weights = init_weights(arch='direct', n_images=clean_graph.n_images)
        assert forward(clean_graph, weights) is weights.theta

    def test_direct_size_mismatch_rejected(self, clean_graph):
        with pytest.raises(InvalidArgumentError):
            forward(clean_graph, init_weights(arch='direct', n_images=clean_graph.n_images + 1))

    def test_differentiable_in_weights(self, two_image_graph):
        weights = init_weights(hidden_dim=4, layers=2).requiring_grad()
        forward(two_image_graph, weights).sum().backward()
        assert weights.w_head.grad is not None
        assert weights.w1[0].grad is not None

    def test_sage_uses_neighbors_mlp_does_not(self):
        images = [ImageMeta(1, 10, 10), ImageMeta(2, 10, 10)]
        base = dict(images=images, image_tags=np.array([0, 1]), intra_edges=np.zeros((0, 2), dtype=np.int64),
                    inter_edges=np.array([[0, 1]]), matches=np.array([[0, 1]]))
        near = CorrespondenceGraph(coords=np.array([[0.1, 0.2], [0.3, 0.4]]), **base)
        far = CorrespondenceGraph(coords=np.array([[0.1, 0.2], [-0.7, 0.9]]), **base)
        sage = init_weights(hidden_dim=8, layers=2, arch='sage')
        mlp = init_weights(hidden_dim=8, layers=2, arch='mlp')
        assert not torch.allclose(forward(near, sage)[0], forward(far, sage)[0])
        assert torch.equal(forward(near, mlp)[0], forward(far, mlp)[0])


class TestPreactivationMargin:
    """Tests for the rectifier-kink diagnostic."""

    def test_direct_has_no_kinks(self, clean_graph):
        assert preactivation_margin(clean_graph, init_weights(arch='direct', n_images=4)) == math.inf

    def test_margin_is_positive_and_finite(self, clean_graph):
        margin = preactivation_margin(clean_graph, init_weights(hidden_dim=8, layers=2))
        assert 0.0 <= margin < math.inf
