"""Embedding networks: forward pass, losses, gradients, training."""

from __future__ import annotations

import numpy as np
import pytest

from semkp.embed import (
    EmbeddingNet,
    NetSpec,
    TrainConfig,
    classification_accuracy,
    classification_loss,
    contrastive_loss,
    corresponding_point,
    forward_embeddings,
    gradient_check,
    init_net,
    load_net,
    save_net,
    train_contrastive,
    train_gtheta,
    zero_net,
)
from semkp.errors import (
    DegenerateLabels,
    IoError,
    NoPositivePairs,
    SchemaError,
)

TINY = NetSpec(hidden1=5, hidden2=6, embed_dim=4, n_classes=3)


def _cloud(rng, n=30):
    return rng.uniform(-1, 1, size=(n, 3))


def _class_batch(rng, spec, n_models=2):
    batch = []
    for _ in range(n_models):
        pts = _cloud(rng)
        rows = rng.choice(30, size=9, replace=False)
        labels = np.repeat(np.arange(spec.n_classes), 3)
        batch.append((pts, rows, labels))
    return batch


def _contrastive_models(rng, n_models=3, n_kp=5):
    models = []
    for _ in range(n_models):
        pts = _cloud(rng)
        rows = rng.choice(30, size=n_kp, replace=False)
        models.append((pts, rows, np.arange(n_kp)))
    return models


# ------------------------------------------------------------- structure


def test_netspec_param_count_matches_vector_layout():
    spec = TINY
    net = init_net(spec, seed=0)
    assert net.params.shape == (spec.n_params,)
    # recompute from first principles
    expect = (5 * 3 + 5) + (6 * (3 + 5) + 6) + (4 * 6 + 4) + (3 * 4 + 3)
    assert spec.n_params == expect


def test_init_net_deterministic_and_biases_zero():
    a = init_net(TINY, seed=7)
    b = init_net(TINY, seed=7)
    c = init_net(TINY, seed=8)
    assert np.array_equal(a.params, b.params)
    assert not np.array_equal(a.params, c.params)


def test_net_params_are_frozen():
    net = zero_net(TINY)
    with pytest.raises(ValueError):
        net.params[0] = 1.0


def test_embedding_net_rejects_wrong_length():
    with pytest.raises(SchemaError):
        EmbeddingNet(TINY, np.zeros(TINY.n_params + 1))


def test_netspec_validation():
    with pytest.raises(SchemaError):
        NetSpec(hidden1=0)
    with pytest.raises(SchemaError):
        NetSpec(n_classes=-1)


def test_train_config_validation():
    with pytest.raises(SchemaError):
        TrainConfig(lr=0.0)
    with pytest.raises(SchemaError):
        TrainConfig(margin=-0.5)
    with pytest.raises(SchemaError):
        TrainConfig(sigma_aug=-0.1)


def test_forward_is_permutation_equivariant():
    rng = np.random.default_rng(0)
    net = init_net(TINY, seed=1)
    pts = _cloud(rng, 40)
    perm = rng.permutation(40)
    a = forward_embeddings(net, pts)
    b = forward_embeddings(net, pts[perm])
    np.testing.assert_allclose(a[perm], b, rtol=0, atol=1e-12)


def test_forward_depends_on_global_context():
    # the pooled feature makes embeddings context-sensitive: moving one
    # far-away point changes the embedding of an untouched point
    rng = np.random.default_rng(1)
    net = init_net(TINY, seed=2)
    pts = _cloud(rng, 20)
    a = forward_embeddings(net, pts)[3]
    pts2 = pts.copy()
    pts2[15] += 4.0
    b = forward_embeddings(net, pts2)[3]
    assert not np.allclose(a, b)


# --------------------------------------------------------------- losses


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_classification_gradient_matches_fd(seed):
    rng = np.random.default_rng(seed)
    batch = _class_batch(rng, TINY)
    net = init_net(TINY, seed=seed)

    def fn(p):
        return classification_loss(p, TINY, batch)

    assert gradient_check(fn, net.params) < 1e-4


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_contrastive_gradient_matches_fd(seed):
    rng = np.random.default_rng(seed + 10)
    models = _contrastive_models(rng)
    net = init_net(TINY, seed=seed)

    def fn(p):
        return contrastive_loss(p, TINY, models, margin=1.0)

    assert gradient_check(fn, net.params) < 1e-4


def test_contrastive_zero_params_gives_exactly_zero():
    rng = np.random.default_rng(3)
    models = _contrastive_models(rng)
    net = zero_net(TINY)
    loss, grad = contrastive_loss(net.params, TINY, models, margin=1.0)
    assert loss == 0.0
    assert np.array_equal(grad, np.zeros_like(grad))


def test_contrastive_needs_shared_semantics():
    rng = np.random.default_rng(4)
    pts = _cloud(rng)
    models = [(pts, [0, 1], np.array([0, 1])), (pts, [2, 3], np.array([2, 3]))]
    with pytest.raises(NoPositivePairs):
        contrastive_loss(zero_net(TINY).params, TINY, models, margin=1.0)


def test_contrastive_margin_saturates_far_negatives():
    # two keypoints per model; force their embeddings far apart compared
    # to the margin, then the negative term must contribute -margin^2 per
    # anchor with no gradient through it
    rng = np.random.default_rng(5)
    net = init_net(TINY, seed=5)
    pts = _cloud(rng)
    models = [(pts, [0, 1], np.array([0, 1])), (pts.copy(), [0, 1], np.array([0, 1]))]
    margin_tiny = 1e-12
    loss_tiny, _ = contrastive_loss(net.params, TINY, models, margin_tiny)
    # identical clouds: the positive term is exactly zero, leaving only
    # 4 anchors' worth of clipped negatives
    assert loss_tiny == pytest.approx(-4.0 * margin_tiny ** 2)


def test_contrastive_positive_term_zero_for_identical_models():
    rng = np.random.default_rng(6)
    net = init_net(TINY, seed=6)
    pts = _cloud(rng)
    huge = 1e9  # nothing clips, so the loss is minus the sum of squared
    models = [(pts, [2, 7, 11], np.arange(3)), (pts.copy(), [2, 7, 11], np.arange(3))]
    emb = forward_embeddings(net, pts)[[2, 7, 11]]
    d2 = np.sum((emb[:, None] - emb[None]) ** 2, axis=2)
    np.fill_diagonal(d2, np.inf)
    expect = -2.0 * d2.min(axis=1).sum()  # both copies contribute
    loss, _ = contrastive_loss(net.params, TINY, models, huge)
    assert loss == pytest.approx(expect, rel=1e-12)


def test_classification_loss_rejects_degenerate_batches():
    rng = np.random.default_rng(7)
    pts = _cloud(rng)
    spec = NetSpec(hidden1=4, hidden2=4, embed_dim=4, n_classes=0)
    with pytest.raises(DegenerateLabels):
        classification_loss(zero_net(spec).params, spec, [(pts, [0], [0])])
    with pytest.raises(DegenerateLabels):
        classification_loss(zero_net(TINY).params, TINY, [])


# ------------------------------------------------------------- training


def test_train_gtheta_fits_separable_labels():
    rng = np.random.default_rng(8)
    samples = []
    for _ in range(2):
        pts = np.concatenate([
            rng.normal([0, 0, 0], 0.05, (6, 3)),
            rng.normal([1, 1, 1], 0.05, (6, 3)),
            rng.normal([-1, 1, -1], 0.05, (6, 3)),
        ])
        samples.append((pts, np.arange(18), np.repeat([0, 1, 2], 6)))
    cfg = TrainConfig(lr=5e-3, epochs=200, seed=0)
    net, losses = train_gtheta(samples, 3, cfg,
                               spec=NetSpec(hidden1=8, hidden2=8, embed_dim=8))
    assert losses[-1] < losses[0]
    assert classification_accuracy(net, samples) == 1.0


def test_train_gtheta_degenerate_inputs():
    pts = np.zeros((4, 3))
    cfg = TrainConfig(epochs=1)
    with pytest.raises(DegenerateLabels):
        train_gtheta([(pts, [0, 1], [0, 0])], 1, cfg)
    with pytest.raises(DegenerateLabels):
        train_gtheta([(pts, [0, 1, 2], [0, 0, 0])], 2, cfg)
    with pytest.raises(DegenerateLabels):
        # class 1 has a single sample
        train_gtheta([(pts, [0, 1, 2], [0, 0, 1])], 2, cfg)
    with pytest.raises(SchemaError):
        train_gtheta([(pts, [0, 1], [0, 5])], 2, cfg)


def test_train_contrastive_reduces_loss_and_separates():
    rng = np.random.default_rng(9)
    models = []
    base = _cloud(rng, 40)
    for m in range(3):
        pts = base + rng.normal(0, 0.01, base.shape)
        models.append((pts, np.arange(0, 40, 8), np.arange(5)))
    cfg = TrainConfig(lr=2e-3, epochs=120, seed=1, sigma_aug=0.0)
    net, losses = train_contrastive(models, cfg,
                                    spec=NetSpec(hidden1=8, hidden2=12, embed_dim=8))
    assert losses[-1] < losses[0]

    embs = [forward_embeddings(net, pts)[rows] for pts, rows, _ in models]
    good = total = 0
    for a in range(3):
        for b in range(3):
            if a == b:
                continue
            for k in range(5):
                d_pos = np.linalg.norm(embs[a][k] - embs[b][k])
                d_neg = min(np.linalg.norm(embs[a][k] - embs[b][j])
                            for j in range(5) if j != k)
                good += d_pos < d_neg
                total += 1
    assert good / total >= 0.95


def test_train_contrastive_needs_two_models():
    pts = np.zeros((4, 3))
    with pytest.raises(NoPositivePairs):
        train_contrastive([(pts, [0], [0])], TrainConfig(epochs=1))


def test_train_contrastive_deterministic():
    rng = np.random.default_rng(10)
    models = _contrastive_models(rng)
    cfg = TrainConfig(lr=1e-3, epochs=5, seed=3)
    spec = NetSpec(hidden1=4, hidden2=4, embed_dim=4)
    n1, l1 = train_contrastive(models, cfg, spec=spec)
    n2, l2 = train_contrastive(models, cfg, spec=spec)
    assert np.array_equal(n1.params, n2.params)
    assert l1 == l2


# ------------------------------------------------------ correspondences


def test_corresponding_point_picks_nearest_embedding():
    rng = np.random.default_rng(11)
    net = init_net(TINY, seed=11)
    src = _cloud(rng, 15)
    dst = _cloud(rng, 20)
    got = corresponding_point(net, src, 4, dst)
    d2 = np.sum((forward_embeddings(net, dst) - forward_embeddings(net, src)[4]) ** 2,
                axis=1)
    assert got == int(np.argmin(d2))


def test_corresponding_point_tie_takes_lowest_index():
    rng = np.random.default_rng(12)
    net = init_net(TINY, seed=12)
    src = _cloud(rng, 10)
    dst = _cloud(rng, 10)
    dst[7] = dst[2]  # identical points embed identically
    assert forward_embeddings(net, dst)[2] @ np.ones(4) == \
        forward_embeddings(net, dst)[7] @ np.ones(4)
    best = corresponding_point(net, src, 0, dst)
    if best in (2, 7):
        assert best == 2


# ---------------------------------------------------------- persistence


def test_save_load_round_trip(tmp_path):
    net = init_net(TINY, seed=13)
    path = tmp_path / "net.json"
    save_net(net, str(path))
    back = load_net(str(path))
    assert back.spec == net.spec
    assert np.array_equal(back.params, net.params)


def test_save_net_extra_payload(tmp_path):
    import json

    net = zero_net(TINY)
    path = tmp_path / "net.json"
    save_net(net, str(path), extra={"note": "hello"})
    obj = json.loads(path.read_text())
    assert obj["config"] == {"note": "hello"}


def test_load_net_missing_and_corrupt(tmp_path):
    with pytest.raises(IoError):
        load_net(str(tmp_path / "nope.json"))
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(IoError):
        load_net(str(bad))
    truncated = tmp_path / "short.json"
    truncated.write_text('{"hidden1": 5, "hidden2": 6, "embed_dim": 4, '
                         '"n_classes": 3, "params": [0.0, 1.0]}')
    with pytest.raises(IoError):
        load_net(str(truncated))
