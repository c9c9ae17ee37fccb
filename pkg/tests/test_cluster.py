"""Density clustering against a quadratic reference."""

from __future__ import annotations

import numpy as np
import pytest

import oracles
from semkp.cluster import dbscan_labels
from semkp.errors import SchemaError


def _instance(rng):
    """A random mix of blobs and scattered noise in 2d."""
    blobs = rng.integers(1, 5)
    pts = []
    for _ in range(blobs):
        center = rng.uniform(-10, 10, size=2)
        count = rng.integers(4, 25)
        pts.append(center + rng.normal(0, 0.3, size=(count, 2)))
    pts.append(rng.uniform(-12, 12, size=(rng.integers(0, 8), 2)))
    return np.concatenate(pts)


@pytest.mark.parametrize("seed", range(20))
def test_matches_quadratic_reference(seed):
    rng = np.random.default_rng(seed)
    pts = _instance(rng)
    eps = float(rng.uniform(0.3, 1.5))
    min_samples = int(rng.integers(2, 6))
    got = dbscan_labels(pts, eps, min_samples)
    ref = oracles.dbscan_quadratic(pts, eps, min_samples)
    assert oracles.same_partition(got, ref)


def test_two_clear_blobs():
    rng = np.random.default_rng(42)
    a = rng.normal(0, 0.1, size=(20, 2))
    b = rng.normal(8, 0.1, size=(20, 2))
    labels = dbscan_labels(np.concatenate([a, b]), eps=1.0, min_samples=3)
    assert set(labels[:20]) == {0}
    assert set(labels[20:]) == {1}


def test_all_noise_when_eps_tiny():
    rng = np.random.default_rng(1)
    labels = dbscan_labels(rng.uniform(size=(30, 2)), eps=1e-9, min_samples=2)
    assert np.all(labels == -1)


def test_single_cluster_when_eps_huge():
    rng = np.random.default_rng(2)
    labels = dbscan_labels(rng.uniform(size=(30, 2)), eps=100.0, min_samples=2)
    assert np.all(labels == 0)


def test_min_samples_one_makes_every_point_core():
    rng = np.random.default_rng(3)
    pts = rng.uniform(-5, 5, size=(25, 2))
    labels = dbscan_labels(pts, eps=1e-6, min_samples=1)
    # isolated points become singleton clusters, never noise
    assert np.array_equal(labels, np.arange(25))


def test_labels_are_first_touch_ordered():
    # three separated pairs: cluster ids follow ascending point index
    pts = np.array([[0, 0], [0, 0.1], [5, 0], [5, 0.1], [9, 0], [9, 0.1]],
                   dtype=float)
    labels = dbscan_labels(pts, eps=0.5, min_samples=2)
    assert labels.tolist() == [0, 0, 1, 1, 2, 2]


def test_duplicate_points_share_a_label():
    pts = np.array([[1.0, 1.0]] * 5 + [[4.0, 4.0]])
    labels = dbscan_labels(pts, eps=0.1, min_samples=3)
    assert set(labels[:5]) == {0}
    assert labels[5] == -1


def test_border_point_between_two_clusters():
    # the middle point is within eps of cores on both sides but is not
    # core itself; it must join exactly one cluster, not split or merge
    xs = [0.0, 0.3, 0.6, 0.9, 1.7, 2.5, 2.7, 2.9, 3.1]
    pts = np.array([[x, 0.0] for x in xs])
    labels = dbscan_labels(pts, eps=0.8, min_samples=4)
    ref = oracles.dbscan_quadratic(pts, eps=0.8, min_samples=4)
    assert oracles.same_partition(labels, ref)
    assert labels[4] in (labels[0], labels[8])
    assert labels[0] != labels[8]


def test_empty_input():
    labels = dbscan_labels(np.empty((0, 2)), eps=1.0, min_samples=2)
    assert labels.shape == (0,)


def test_deterministic_across_runs():
    rng = np.random.default_rng(7)
    pts = _instance(rng)
    a = dbscan_labels(pts, 0.8, 3)
    b = dbscan_labels(pts, 0.8, 3)
    assert np.array_equal(a, b)


def test_rejects_bad_arguments():
    pts = np.zeros((4, 2))
    with pytest.raises(SchemaError):
        dbscan_labels(np.zeros(4), eps=1.0, min_samples=2)
    with pytest.raises(SchemaError):
        dbscan_labels(pts, eps=0.0, min_samples=2)
    with pytest.raises(SchemaError):
        dbscan_labels(pts, eps=1.0, min_samples=0)
