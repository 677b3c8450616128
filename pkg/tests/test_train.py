import numpy as np
import pytest

from dmsanet.errors import DivergenceDetected, InvalidConfig, ShapeMismatch
from dmsanet.network import build_toy_network
from dmsanet.params import ParamSet
from dmsanet.train import (
    SGD,
    LossCurve,
    TrainConfig,
    cross_entropy,
    evaluate,
    make_synthetic_dataset,
    param_norm,
    plot_loss_curve,
    train_toy,
)


@pytest.fixture(scope="module")
def blobs():
    return make_synthetic_dataset(100, 2, 8, seed=0)


def test_dataset_split_and_balance(blobs):
    assert blobs.x_train.shape == (80, 3, 8, 8)
    assert blobs.x_test.shape == (20, 3, 8, 8)
    labels = np.concatenate([blobs.y_train, blobs.y_test])
    assert np.bincount(labels).tolist() == [50, 50]
    assert blobs.n == 100


def test_dataset_is_deterministic(blobs):
    again = make_synthetic_dataset(100, 2, 8, seed=0)
    np.testing.assert_array_equal(again.x_train, blobs.x_train)
    np.testing.assert_array_equal(again.y_test, blobs.y_test)
    other = make_synthetic_dataset(100, 2, 8, seed=1)
    assert not np.array_equal(other.x_train, blobs.x_train)


def test_dataset_is_separable_by_centroids():
    data = make_synthetic_dataset(400, 3, 8, seed=2)
    flat_train = data.x_train.reshape(len(data.y_train), -1)
    centroids = np.stack([flat_train[data.y_train == c].mean(axis=0) for c in range(3)])
    flat_test = data.x_test.reshape(len(data.y_test), -1)
    pred = np.argmin(((flat_test[:, None] - centroids[None]) ** 2).sum(-1), axis=1)
    assert (pred == data.y_test).mean() >= 0.95


def test_dataset_rejects_bad_arguments():
    with pytest.raises(InvalidConfig):
        make_synthetic_dataset(10, 1, 8)


def test_cross_entropy():
    loss, grad = cross_entropy(np.zeros((4, 2)), np.array([0, 1, 0, 1]))
    assert loss == pytest.approx(np.log(2))
    np.testing.assert_allclose(grad.sum(axis=1), 0.0, atol=1e-15)
    with pytest.raises(ShapeMismatch):
        cross_entropy(np.zeros((3, 2)), np.array([0, 1]))


def test_sgd_matches_hand_computed_steps():
    ps = ParamSet([("w", np.array([1.0]))])
    opt = SGD(ps, lr=0.1, momentum=0.9, weight_decay=0.5)
    grads = ParamSet([("w", np.array([2.0]))])
    opt.step(grads)
    # v = 2 + 0.5 * 1 = 2.5 ; w = 1 - 0.25
    np.testing.assert_allclose(ps["w"], [0.75])
    opt.step(grads)
    # v = 0.9 * 2.5 + 2 + 0.375 = 4.625
    np.testing.assert_allclose(ps["w"], [0.75 - 0.4625])


def test_train_config_validation_and_schedule():
    cfg = TrainConfig(lr=0.1, epochs=200, decay_epochs=(100, 150))
    assert cfg.lr_at(0) == pytest.approx(0.1)
    assert cfg.lr_at(99) == pytest.approx(0.1)
    assert cfg.lr_at(100) == pytest.approx(0.01)
    assert cfg.lr_at(150) == pytest.approx(0.001)
    assert TrainConfig.low_lr_reading().lr == 1e-4
    assert TrainConfig(lr=0.0).lr == 0.0
    for bad in (dict(lr=-1.0), dict(momentum=1.0), dict(batch_size=0), dict(decay_epochs=(150, 100))):
        with pytest.raises(InvalidConfig):
            TrainConfig(**bad)


def test_zero_learning_rate_keeps_loss_constant(blobs):
    net = build_toy_network(seed=0)
    before = {name: t.copy() for name, t in net.params().items()}
    curve = train_toy(net, blobs, TrainConfig(lr=0.0, epochs=3, batch_size=32, decay_epochs=()))
    assert len(curve) == 3
    np.testing.assert_allclose(curve.train_loss, curve.train_loss[0], atol=1e-7)
    for name, t in net.params().items():
        np.testing.assert_array_equal(t, before[name])


def test_toy_training_learns(blobs):
    net = build_toy_network(seed=0)
    initial, _ = evaluate(net, blobs.x_train, blobs.y_train)
    cfg = TrainConfig(lr=0.05, momentum=0.9, weight_decay=1e-4, batch_size=16, epochs=30, decay_epochs=(20,))
    curve = train_toy(net, blobs, cfg)
    assert curve.epoch == list(range(1, 31))
    assert curve.train_loss[-1] < 0.5 * initial
    assert curve.test_accuracy[-1] >= 0.85


def test_larger_weight_decay_gives_smaller_weights(blobs):
    norms = []
    for wd in (0.05, 0.1):
        net = build_toy_network(seed=0)
        train_toy(net, blobs, TrainConfig(lr=0.05, weight_decay=wd, epochs=2, decay_epochs=()))
        norms.append(param_norm(net))
    assert norms[1] < norms[0]


def test_divergence_is_reported():
    data = make_synthetic_dataset(100, 2, 8, seed=0)
    data.x_train[0] = np.nan
    with pytest.raises(DivergenceDetected) as info:
        train_toy(build_toy_network(seed=0), data, TrainConfig(epochs=2, decay_epochs=()))
    assert info.value.epoch == 1


def test_nan_weights_are_reported_before_training(blobs):
    net = build_toy_network(seed=0)
    net.params()["stem.conv.weight"][...] = np.nan
    with pytest.raises(DivergenceDetected) as info:
        train_toy(net, blobs, TrainConfig(epochs=2, decay_epochs=()))
    assert info.value.epoch == 0


def test_training_is_deterministic_per_seed(blobs):
    cfg = TrainConfig(lr=0.05, epochs=2, decay_epochs=(), seed=3)
    first = train_toy(build_toy_network(seed=0), blobs, cfg)
    second = train_toy(build_toy_network(seed=0), blobs, cfg)
    assert first.train_loss == second.train_loss
    assert first.test_accuracy == second.test_accuracy


def test_full_batch_descent_is_monotone(blobs):
    cfg = TrainConfig(lr=1e-3, momentum=0.0, weight_decay=0.0, batch_size=len(blobs.y_train), epochs=50,
                      decay_epochs=())
    net = build_toy_network(seed=0)
    initial, _ = evaluate(net, blobs.x_train, blobs.y_train)
    curve = train_toy(net, blobs, cfg)
    losses = [initial] + curve.train_loss
    assert all(b <= a for a, b in zip(losses, losses[1:]))
    assert losses[-1] < losses[0]


@pytest.mark.slow
def test_toy_recipe_reaches_target():
    data = make_synthetic_dataset(500, 2, 8, seed=0)
    curve = train_toy(build_toy_network(seed=0), data, TrainConfig(seed=0))
    assert len(curve) == 200
    assert curve.test_accuracy[-1] >= 0.9
    assert curve.train_loss[-1] < 0.1


def test_loss_curve_csv_and_plot(tmp_path):
    curve = LossCurve()
    curve.append(1, 0.9, 1.0, 0.5)
    curve.append(2, 0.4, 0.5, 0.8)
    path = tmp_path / "curve.csv"
    curve.to_csv(path)
    assert path.read_text().splitlines()[0] == "epoch,train_loss,test_loss,test_accuracy"
    back = LossCurve.from_csv(path)
    assert back.epoch == [1, 2]
    assert back.train_loss == pytest.approx([0.9, 0.4])

    png = tmp_path / "curve.png"
    plot_loss_curve(str(path), str(png))
    assert png.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
