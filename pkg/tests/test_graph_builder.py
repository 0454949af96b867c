"""
Unit tests for correspondence-graph construction: NMS, DP-Means and the
collection graph.

Run with:
    pytest tests/test_graph_builder.py -v
"""

import logging

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kpalign.config import BuildConfig
from kpalign.errors import GraphBuildError, InvalidArgumentError, ValidationError
from kpalign.graph_builder import (
    ImageMeta,
    RawMatchSet,
    build_graph,
    count_components,
    dp_means,
    find_orphans,
    graph_stats,
    image_components,
    nms_select,
)


def naive_dp_means(points, penalty, init_n=3, max_iter=50):
    """Loop-only DP-Means with the same farthest-point seeding, used as an oracle."""
    points = [tuple(float(c) for c in p) for p in points]
    dim = len(points[0])

    def d2(a, b):
        return sum((a[t] - b[t]) ** 2 for t in range(dim))

    seeds = [0]
    while len(seeds) < init_n:
        best, best_d = None, -1.0
        for n, p in enumerate(points):
            d = min(d2(p, points[s]) for s in seeds)
            if d > best_d:
                best, best_d = n, d
        if best_d <= penalty:
            break
        seeds.append(best)

    means = [points[s] for s in seeds]
    labels = [-1] * len(points)
    objective = None
    for _ in range(max_iter):
        previous = list(labels)
        for n, p in enumerate(points):
            distances = [d2(p, m) for m in means]
            closest = min(range(len(means)), key=lambda c: (distances[c], c))
            if distances[closest] > penalty:
                means.append(p)
                labels[n] = len(means) - 1
            else:
                labels[n] = closest
        used = sorted(set(labels))
        remap = {old: new for new, old in enumerate(used)}
        labels = [remap[label] for label in labels]
        means = []
        for c in range(len(used)):
            members = [points[n] for n in range(len(points)) if labels[n] == c]
            means.append(tuple(np.mean(members, axis=0)))
        objective = sum(d2(points[n], means[labels[n]]) for n in range(len(points))) + penalty * len(means)
        if labels == previous:
            break
    return labels, objective


class TestNmsSelect:
    """Tests for greedy non-maximum suppression."""

    def test_suppresses_within_window(self):
        kept = nms_select([[0, 0], [10, 0], [100, 0]], [0.5, 0.9, 0.7], window=30)
        assert kept.tolist() == [1, 2]

    def test_keeps_at_most_k(self):
        kept = nms_select([[0, 0], [50, 0], [100, 0]], [0.5, 0.9, 0.7], window=30, k=2)
        assert kept.tolist() == [1, 2]

    def test_ties_go_to_lower_index(self):
        kept = nms_select([[0, 0], [5, 5]], [0.8, 0.8], window=30)
        assert kept.tolist() == [0]

    def test_chebyshev_boundary_is_suppressed(self):
        kept = nms_select([[0, 0], [15, 0], [16, 0]], [0.9, 0.8, 0.7], window=30)
        assert kept.tolist() == [0, 2]

    def test_invalid_window_rejected(self):
        with pytest.raises(InvalidArgumentError):
            nms_select([[0, 0]], [1.0], window=0)

    def test_empty_input(self):
        assert len(nms_select(np.zeros((0, 2)), np.zeros(0))) == 0


class TestDpMeans:
    """Tests for DP-Means clustering."""

    def test_merges_close_points(self):
        result = dp_means([[0, 0], [0.01, 0], [5, 5]], penalty=1.0)
        assert len(result.means) == 2
        assert result.labels.tolist() == [0, 0, 1]
        np.testing.assert_allclose(result.means[0], [0.005, 0.0])

    def test_huge_penalty_gives_one_cluster(self):
        points = np.random.default_rng(0).uniform(0, 10, size=(20, 2))
        result = dp_means(points, penalty=1e6)
        assert len(result.means) == 1
        np.testing.assert_allclose(result.means[0], points.mean(axis=0))

    def test_tiny_penalty_gives_singletons(self):
        points = np.random.default_rng(1).uniform(0, 10, size=(12, 2))
        result = dp_means(points, penalty=1e-9)
        assert len(result.means) == 12

    def test_invalid_penalty_rejected(self):
        with pytest.raises(InvalidArgumentError):
            dp_means([[0, 0]], penalty=0.0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(min_value=0, max_value=10_000), st.floats(min_value=0.5, max_value=50.0))
    def test_objective_never_increases(self, seed, penalty):
        points = np.random.default_rng(seed).uniform(0, 20, size=(25, 2))
        objectives = dp_means(points, penalty).objectives
        assert all(b <= a + 1e-9 for a, b in zip(objectives, objectives[1:]))

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_naive_oracle(self, seed):
        rng = np.random.default_rng(seed)
        points = rng.uniform(0, 20, size=(rng.integers(1, 31), 2))
        penalty = float(rng.uniform(1.0, 40.0))
        result = dp_means(points, penalty)
        labels, objective = naive_dp_means(points, penalty)
        assert result.labels.tolist() == labels
        assert result.objectives[-1] == pytest.approx(objective, rel=1e-12)


class TestRawMatchSet:
    """Tests for match-set validation."""

    def test_mismatched_lengths_name_the_pair(self):
        with pytest.raises(InvalidArgumentError, match=r"pair \(1, 2\)"):
            RawMatchSet(1, 2, [[0, 0], [1, 1]], [[0, 0]], [0.5, 0.5])

    def test_same_image_rejected(self):
        with pytest.raises(InvalidArgumentError):
            RawMatchSet(1, 1, [[0, 0]], [[0, 0]], [0.5])

    def test_confidence_range_checked(self):
        with pytest.raises(InvalidArgumentError):
            RawMatchSet(1, 2, [[0, 0]], [[0, 0]], [1.5])

    def test_tiny_image_rejected(self):
        with pytest.raises(InvalidArgumentError):
            ImageMeta(1, 1, 10)


class TestBuildGraph:
    """Tests for build_graph."""

    def test_counts(self, two_image_graph):
        assert two_image_graph.n_nodes == 4
        assert len(two_image_graph.intra_edges) == 2
        assert len(two_image_graph.inter_edges) == 2
        assert len(two_image_graph.matches) == 2
        assert int(two_image_graph.adjacency.sum()) == 8

    def test_adjacency_symmetric_without_self_loops(self, two_image_graph):
        adjacency = two_image_graph.adjacency
        assert np.array_equal(adjacency, adjacency.T)
        assert not np.diag(adjacency).any()

    def test_node_coordinates_are_normalized(self, two_image_graph):
        np.testing.assert_allclose(two_image_graph.coords,
                                   [[-0.8, -0.8], [0.8, 0.8], [-0.76, -0.8], [0.84, 0.8]], atol=1e-12)
        assert two_image_graph.image_tags.tolist() == [0, 0, 1, 1]

    def test_matches_lead_with_lower_id_image(self, two_image_graph):
        assert two_image_graph.matches.tolist() == [[0, 2], [1, 3]]

    def test_reversed_pair_gives_same_matches(self, two_images):
        reversed_set = RawMatchSet(2, 1, [[12, 10], [92, 90]], [[10, 10], [90, 90]], [0.9, 0.8])
        graph = build_graph(two_images, [reversed_set])
        assert sorted(graph.matches.tolist()) == [[0, 2], [1, 3]]

    def test_mean_operator_rows(self, two_image_graph):
        rows = two_image_graph.mean_operator.sum(dim=1)
        np.testing.assert_allclose(rows.numpy(), np.ones(4))

    def test_without_intra_edges(self, two_images, two_image_matches):
        graph = build_graph(two_images, two_image_matches, BuildConfig(intra_edges=False))
        assert len(graph.intra_edges) == 0
        assert int(graph.adjacency.sum()) == 4

    def test_nms_thins_clustered_matches(self, two_images):
        clustered = RawMatchSet(1, 2, [[40, 40], [45, 40], [50, 40]], [[42, 40], [47, 40], [52, 40]],
                                [0.7, 0.9, 0.8])
        assert len(build_graph(two_images, [clustered]).matches) == 1
        assert len(build_graph(two_images, [clustered], BuildConfig(use_nms=False)).matches) == 3

    def test_top_k_keeps_most_confident(self, two_images):
        xs = [5, 30, 55, 80, 95]
        spread = RawMatchSet(1, 2, [[x, 5 + 20 * n] for n, x in enumerate(xs)],
                             [[x, 5 + 20 * n] for n, x in enumerate(xs)], [0.1, 0.9, 0.3, 0.8, 0.2])
        graph = build_graph(two_images, [spread], BuildConfig(top_k=2))
        assert len(graph.matches) == 2
        kept_x = sorted(np.round((graph.coords[graph.matches[:, 0], 0] + 1) * 50).astype(int).tolist())
        assert kept_x == [30, 80]

    def test_unknown_image_rejected(self, two_images):
        with pytest.raises(GraphBuildError):
            build_graph(two_images, [RawMatchSet(1, 3, [[0, 0]], [[0, 0]], [0.5])])

    def test_unpaired_image_rejected(self, two_images, two_image_matches):
        with pytest.raises(GraphBuildError):
            build_graph(two_images + [ImageMeta(3, 50, 50)], two_image_matches)

    def test_duplicate_ids_rejected(self, two_image_matches):
        with pytest.raises(GraphBuildError):
            build_graph([ImageMeta(1, 10, 10), ImageMeta(1, 10, 10), ImageMeta(2, 10, 10)], two_image_matches)

    def test_image_without_keypoints_rejected(self, two_images):
        with pytest.raises(GraphBuildError):
            build_graph(two_images, [RawMatchSet(1, 2, np.zeros((0, 2)), np.zeros((0, 2)), [])])

    def test_graph_errors_are_validation_errors(self):
        assert issubclass(GraphBuildError, ValidationError)

    def test_synthetic_collection_is_connected(self, clean_graph):
        assert image_components(clean_graph) == 1

    def test_nearby_matches_snap_to_one_edge(self, two_images):
        offsets = [[0, 0], [1, 0], [0, 1], [1, 1], [0.5, 0.5]]
        left = [[50 + dx, 50 + dy] for dx, dy in offsets]
        right = [[60 + dx, 50 + dy] for dx, dy in offsets]
        close = RawMatchSet(1, 2, left, right, [0.9, 0.8, 0.7, 0.6, 0.5])
        graph = build_graph(two_images, [close], BuildConfig(use_nms=False))
        assert graph.n_nodes == 2
        assert len(graph.inter_edges) == 1
        assert len(graph.matches) == 5
        assert graph.matches.tolist() == [[0, 1]] * 5

    def test_orphan_images_are_reported(self, caplog):
        images = [ImageMeta(1, 10, 10), ImageMeta(2, 10, 10), ImageMeta(3, 10, 10)]
        tags = np.array([0, 1, 2])
        with caplog.at_level(logging.WARNING, logger="kpalign.graph_builder"):
            orphans = find_orphans(images, tags, np.array([[0, 1]]))
        assert orphans == [3]
        assert "images without inter-image edges: [3]" in caplog.text

    def test_built_graph_has_no_orphans(self, two_image_graph, caplog):
        assert two_image_graph.orphan_images == []
        with caplog.at_level(logging.WARNING, logger="kpalign.graph_builder"):
            assert find_orphans(two_image_graph.images, two_image_graph.image_tags,
                                two_image_graph.inter_edges) == []
        assert caplog.text == ""

    def test_disconnected_pairs_warn(self, caplog):
        images = [ImageMeta(n, 101, 101) for n in (1, 2, 3, 4)]
        pairs = [RawMatchSet(1, 2, [[10, 10]], [[12, 10]], [0.9]), RawMatchSet(3, 4, [[10, 10]], [[12, 10]], [0.9])]
        with caplog.at_level(logging.WARNING, logger="kpalign.graph_builder"):
            graph = build_graph(images, pairs)
        assert image_components(graph) == 2
        assert "2 connected components" in caplog.text


class TestCountComponents:
    """Tests for the union-find component count."""

    def test_examples(self):
        assert count_components(4, [(0, 1), (2, 3)]) == 2
        assert count_components(4, [(0, 1), (1, 2), (2, 3)]) == 1
        assert count_components(3, []) == 3
        assert count_components(0, []) == 0

    @given(st.lists(st.tuples(st.integers(0, 7), st.integers(0, 7)), max_size=20))
    @settings(max_examples=50, deadline=None)
    def test_adding_edges_never_increases_count(self, pairs):
        assert count_components(8, pairs + [(0, 7)]) <= count_components(8, pairs)


class TestGraphStats:
    """Tests for the per-image statistics table."""

    def test_columns_and_counts(self, two_image_graph):
        stats = graph_stats(two_image_graph)
        assert isinstance(stats, pd.DataFrame)
        assert list(stats.columns) == ['image_id', 'nodes', 'intra_edges', 'inter_edges', 'matches']
        assert stats['nodes'].tolist() == [2, 2]
        assert stats['intra_edges'].tolist() == [1, 1]
        assert stats['inter_edges'].tolist() == [2, 2]
        assert stats['matches'].tolist() == [2, 2]

    def test_nodes_sum_to_graph_size(self, clean_graph):
        assert graph_stats(clean_graph)['nodes'].sum() == clean_graph.n_nodes
