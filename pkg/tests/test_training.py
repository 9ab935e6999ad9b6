import math

import numpy as np
import pytest

from csfa.errors import ArgumentError, ConfigError, RunFailure
from csfa.numerics import features, init_mlp
from csfa.prototypes import BASE
from csfa.streams import Batch, Scenario, ScenarioSpec
from csfa.training import TrainConfig, cosine_lr, cross_entropy, finetune, train_base


def blobs(n_per=30, seed=0):
    rng = np.random.default_rng(seed)
    means = np.array([[4.0, 0, 0, 0], [0, 4.0, 0, 0], [0, 0, 4.0, 0]])
    x = np.concatenate([m + 0.3 * rng.standard_normal((n_per, 4)) for m in means])
    return Batch(x, np.repeat(np.arange(3), n_per))


def test_cross_entropy_uniform_and_confident():
    loss, _ = cross_entropy(np.zeros((4, 7)), np.array([0, 3, 6, 2]))
    assert loss == pytest.approx(math.log(7), rel=1e-14)
    z = np.array([[60.0, 0.0, 0.0]])
    assert cross_entropy(z, np.array([0]))[0] < 1e-25


def test_cross_entropy_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    z = rng.standard_normal((6, 5))
    y = rng.integers(0, 5, 6)
    _, g = cross_entropy(z, y)
    fd = np.zeros_like(z)
    for idx in np.ndindex(*z.shape):
        zp, zm = z.copy(), z.copy()
        zp[idx] += 1e-5
        zm[idx] -= 1e-5
        fd[idx] = (cross_entropy(zp, y)[0] - cross_entropy(zm, y)[0]) / 2e-5
    assert np.max(np.abs(g - fd)) / np.max(np.abs(fd)) < 1e-4


def test_cross_entropy_label_range():
    with pytest.raises(ArgumentError):
        cross_entropy(np.zeros((2, 3)), np.array([0, 3]))


def test_cosine_schedule():
    assert cosine_lr(0, 100, 0.05) == 0.05
    assert cosine_lr(100, 100, 0.05) == pytest.approx(0.0, abs=1e-18)
    assert cosine_lr(50, 100, 0.05) == pytest.approx(0.025, rel=1e-14)
    with pytest.raises(ArgumentError):
        cosine_lr(101, 100, 0.05)


@pytest.mark.parametrize("bad", [dict(epochs=0), dict(lr=0.0), dict(batch_size=0), dict(momentum=1.0)])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        TrainConfig(**bad).validate()


def test_separable_blobs_reach_full_accuracy():
    batch = blobs()
    res = train_base(batch, init_mlp(4, (16, 8), seed=0), TrainConfig(epochs=30, batch_size=16))
    assert res.train_accuracy == 1.0
    assert np.array_equal(res.head.predict(features(res.params, batch.inputs)),
                          batch.labels)
    assert res.bank.origins == [BASE] * 3 and res.bank.sorted_ids.tolist() == [0, 1, 2]


def test_training_is_deterministic():
    batch = blobs()
    cfg = TrainConfig(epochs=5, seed=3)
    a = train_base(batch, init_mlp(4, (8,), seed=1), cfg)
    b = train_base(batch, init_mlp(4, (8,), seed=1), cfg)
    assert a.params.theta.tobytes() == b.params.theta.tobytes()
    assert a.bank.matrix.tobytes() == b.bank.matrix.tobytes()


def test_default_run_loss_trends_down_and_clears_floor():
    sc = Scenario(ScenarioSpec())
    base = sc.sample_source(0)
    res = train_base(base, init_mlp(16, seed=0), TrainConfig())
    assert res.epoch_losses[-1] < res.epoch_losses[0]
    assert res.train_accuracy >= 0.95
    assert not res.params.theta.flags.writeable


def test_floor_failure_is_reported():
    rng = np.random.default_rng(0)
    noise = Batch(rng.standard_normal((60, 4)), rng.integers(0, 3, 60))
    with pytest.raises(RunFailure):
        train_base(noise, init_mlp(4, (4,), seed=0), TrainConfig(epochs=1, lr=1e-4))
    res = train_base(noise, init_mlp(4, (4,), seed=0), TrainConfig(epochs=1, lr=1e-4), enforce_floor=False)
    assert res.train_accuracy < 0.95


def test_unlabelled_base_rejected():
    with pytest.raises(ArgumentError):
        train_base(Batch(np.zeros((3, 4))), init_mlp(4, (4,)))


def test_finetune_extends_head_and_moves_weights():
    batch = blobs()
    res = train_base(batch, init_mlp(4, (8,), seed=0), TrainConfig(epochs=10))
    rng = np.random.default_rng(1)
    novel = Batch(np.array([[3.0, 3.0, 0, 0]]) + 0.1 * rng.standard_normal((5, 4)), np.full(5, 7))
    params, head = finetune(res.params, res.head, novel, TrainConfig(epochs=3, batch_size=5, seed=2))
    assert head.class_ids.tolist() == [0, 1, 2, 7]
    assert head.weight.shape == (4, 8)
    assert not np.array_equal(params.theta, res.params.theta)
    assert np.array_equal(res.head.class_ids, [0, 1, 2])
