"""
Shared pytest fixtures - small graphs, synthetic collections and configs.
"""

import numpy as np
import pytest

from kpalign.config import BuildConfig, TrainConfig
from kpalign.graph_builder import CorrespondenceGraph, ImageMeta, RawMatchSet, build_graph
from kpalign.synthetic import SynthSpec, gen_collection


# ==============================================================================
# PYTEST FIXTURES - Reusable test data
# ==============================================================================

@pytest.fixture
def two_images():
    return [ImageMeta(1, 101, 101), ImageMeta(2, 101, 101)]


@pytest.fixture
def two_image_matches():
    """Two well separated matches; image 2 is shifted 2 px to the right."""
    return [RawMatchSet(1, 2, [[10, 10], [90, 90]], [[12, 10], [92, 90]], [0.9, 0.8])]


@pytest.fixture
def two_image_graph(two_images, two_image_matches):
    return build_graph(two_images, two_image_matches)


@pytest.fixture
def exact_build():
    """Keep every match and merge only coincident keypoints."""
    return BuildConfig(use_nms=False, dp_penalty=1e-9)


@pytest.fixture(scope="session")
def clean_collection():
    return gen_collection(SynthSpec(n_images=4, n_keypoints=8, noise_std=0.0, outlier_rate=0.0, seed=3))


@pytest.fixture(scope="session")
def flipped_collection():
    return gen_collection(SynthSpec(n_images=4, n_keypoints=8, noise_std=0.0, outlier_rate=0.0,
                                    flip_rate=0.25, seed=5))


@pytest.fixture(scope="session")
def small_collection():
    return gen_collection(SynthSpec(n_images=3, n_keypoints=4, outlier_rate=0.0, seed=11))


@pytest.fixture
def clean_graph(clean_collection):
    return build_graph(clean_collection.images, clean_collection.matches,
                       BuildConfig(use_nms=False, dp_penalty=1e-9))


@pytest.fixture
def small_train():
    return TrainConfig(epochs=20, hidden_dim=8, layers=2, flip_every=10)


@pytest.fixture
def matchless_graph():
    """Graph whose matches were all filtered out."""
    return CorrespondenceGraph(
        images=[ImageMeta(1, 10, 10), ImageMeta(2, 10, 10)],
        coords=np.array([[0.0, 0.0], [0.1, 0.1]]),
        image_tags=np.array([0, 1]),
        intra_edges=np.zeros((0, 2), dtype=np.int64),
        inter_edges=np.zeros((0, 2), dtype=np.int64),
        matches=np.zeros((0, 2), dtype=np.int64),
        orphan_images=[1, 2],
    )
