"""Shared fixtures: tiny datasets and the identity-twin aggregation case."""

from __future__ import annotations

import numpy as np
import pytest

from semkp.aggregate import AggregateConfig
from semkp.core import ModelCloud, RawAnnotationSet
from semkp.pipeline import PipelineConfig, run_synth
from semkp.synth import SyntheticShapeSpec, generate_shape

# profile of the small dataset used by cli/server/pipeline tests; cheap
# but large enough for aggregation to find structure (cluster_eps is in
# t-SNE units, hence the large radius at this candidate-pool size)
SMALL = dict(seed=7, kind="table", n_models=4, n_annotators=6,
             gtheta_epochs=40, contrastive_epochs=30, resolution=48,
             finetune_steps=6, embed_dim=32, cluster_eps=100.0)

# settings under which a single noiseless consistent annotator is
# recovered exactly: near-zero bandwidth turns smoothing into an
# identity filter, the tiny saliency sigma makes each click's field
# one-hot at cloud spacing, and the long classifier schedule separates
# the eight classes completely
EXACT = AggregateConfig(sigma=0.003, bandwidth=1e-6, knn_k=12, epochs=400,
                        sigma_aug=0.0, hidden1=16, hidden2=32,
                        bootstrap_eps=0.15, seed=0)


def make_twins(kind: str = "table", seed: int = 500):
    """Two identical copies of one shape with identical perfect clicks.

    Returns (clouds, annotations, landmark vertex indices).  The same
    annotator clicks exactly on the eight landmark vertices of both
    copies, the cleanest instance of a consistent noiseless annotator.
    """
    cloud, truth = generate_shape(SyntheticShapeSpec(kind, seed=seed))
    verts = truth.vertex_indices
    clouds = [
        ModelCloud(f"{kind}-a", kind, cloud.points),
        ModelCloud(f"{kind}-b", kind, cloud.points),
    ]
    annotations = {
        c.model_id: [RawAnnotationSet(c.model_id, "ann00", cloud.points[verts])]
        for c in clouds
    }
    return clouds, annotations, np.asarray(verts)


@pytest.fixture(scope="session")
def small_config() -> PipelineConfig:
    return PipelineConfig(**SMALL)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory, small_config):
    """Synth output directory shared by pipeline, cli, and server tests."""
    out = tmp_path_factory.mktemp("dataset")
    run_synth(small_config, str(out))
    return out
