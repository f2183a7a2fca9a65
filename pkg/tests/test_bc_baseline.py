import numpy as np
import pytest

from hamchain.bc_baseline import (
    MlpParams,
    TrainConfig,
    bc_rollout,
    bc_rollout_batch,
    dataset,
    forward,
    init_params,
    loss_and_grads,
    raw_output,
    train,
)
from hamchain.errors import ConfigurationError
from hamchain.expert import replay

BOX = np.array([[-20.0, 20.0]])


def zero_params(n=2, m=1):
    p = init_params(n, m, np.random.default_rng(0), BOX)
    p.weights = [np.zeros_like(w) for w in p.weights]
    return p


def test_layer_sizes():
    p = init_params(2, 1, np.random.default_rng(0), BOX)
    assert p.sizes == (2, 24, 24, 16, 1)
    assert [w.shape for w in p.weights] == [(2, 24), (24, 24), (24, 16), (16, 1)]
    lim = np.sqrt(6.0 / 26)
    assert np.all(np.abs(p.weights[0]) <= lim)


def test_zero_weights_give_zero():
    assert forward(zero_params(), [0.3, -1.2]) == pytest.approx([0.0])


def test_output_clamp():
    p = zero_params()
    p.biases[-1] = np.array([30.0])
    assert raw_output(p, [0.0, 0.0])[0, 0] == 30.0
    assert forward(p, [0.0, 0.0])[0] == 20.0
    p.biases[-1] = np.array([-30.0])
    assert forward(p, [0.0, 0.0])[0] == -20.0


def test_hand_computed_forward():
    # one hidden unit of width 1 per layer: weights chosen so every step is checkable by hand
    p = MlpParams((2, 1, 1), [np.array([[1.0], [2.0]]), np.array([[3.0]])], [np.array([0.5]), np.array([-1.0])],
                  np.array([1.0, 0.0]), np.array([2.0, 1.0]), np.array([-20.0]), np.array([20.0]))
    x = np.array([3.0, -0.25])
    z = (3.0 - 1.0) / 2.0 * 1.0 + (-0.25) * 2.0 + 0.5
    expected = 3.0 * np.tanh(z) - 1.0
    assert forward(p, x)[0] == pytest.approx(expected, rel=1e-15)


def test_gradient_check():
    rng = np.random.default_rng(4)
    p = init_params(2, 1, rng, BOX)
    p.biases = [rng.normal(size=b.shape) * 0.1 for b in p.biases]
    x = rng.normal(size=(32, 2))
    y = rng.normal(size=(32, 1))
    _, gw, gb = loss_and_grads(p, x, y)
    tensors = p.weights + p.biases
    grads = gw + gb
    h = 1e-5
    for _ in range(10):
        t = int(rng.integers(len(tensors)))
        idx = tuple(int(rng.integers(s)) for s in tensors[t].shape)
        old = tensors[t][idx]
        tensors[t][idx] = old + h
        up = loss_and_grads(p, x, y)[0]
        tensors[t][idx] = old - h
        down = loss_and_grads(p, x, y)[0]
        tensors[t][idx] = old
        fd = (up - down) / (2 * h)
        an = grads[t][idx]
        assert abs(an - fd) <= 1e-4 * max(abs(an), abs(fd), 1e-8)


def test_empty_dataset_rejected(sm, sm_spec):
    empty = replay(sm, sm_spec, [0.02, 0.0], np.zeros((0, 1)), 1e-3)
    with pytest.raises(ConfigurationError):
        dataset([empty])
    with pytest.raises(ConfigurationError):
        train([], TrainConfig(), BOX)
    with pytest.raises(ConfigurationError):
        TrainConfig(lr=0.0)


def test_training_is_deterministic_and_reduces_loss(sm_demo):
    cfg = TrainConfig(epochs=5, seed=3)
    a = train([sm_demo], cfg, BOX)
    b = train([sm_demo], cfg, BOX)
    assert a.to_json() == b.to_json()
    assert len(a.losses) == 5
    assert a.losses[-1] <= a.losses[0]
    c = train([sm_demo], TrainConfig(epochs=5, seed=4), BOX)
    assert c.to_json() != a.to_json()


def test_normalization_is_stored(sm_demo):
    p = train([sm_demo], TrainConfig(epochs=1), BOX)
    x, _ = dataset([sm_demo])
    np.testing.assert_allclose(p.mean, x.mean(axis=0))
    np.testing.assert_allclose(p.std, x.std(axis=0))


def test_json_roundtrip(sm_demo):
    p = train([sm_demo], TrainConfig(epochs=1), BOX)
    back = MlpParams.from_json(p.to_json())
    assert back.to_json() == p.to_json()
    xs = np.random.default_rng(0).normal(size=(20, 2))
    np.testing.assert_array_equal(forward(back, xs), forward(p, xs))
    with pytest.raises(ConfigurationError):
        MlpParams.from_json(p.to_json().replace('"version": 1', '"version": 5'))


def test_rollout_bookkeeping(sm, sm_spec):
    p = zero_params()
    rec = bc_rollout(sm, sm_spec, p, [0.5, 0.0], 2.0)  # zero input keeps the energy layer
    assert not rec.reached and rec.reach_time == 2.0
    rec = bc_rollout(sm, sm_spec, p, [0.05, 0.0], 2.0)
    assert rec.reached and rec.reach_time == 0.0
    # constant braking bias pushes the mass off the box edge
    p.biases[-1] = np.array([20.0])
    rec = bc_rollout(sm, sm_spec, p, [0.0, 4.9], 2.0)
    assert not rec.reached and rec.failure == "left state box"


def test_batch_matches_single(sm, sm_spec, sm_demo):
    p = train([sm_demo], TrainConfig(epochs=3), BOX)
    xs = np.random.default_rng(1).uniform(-0.7, 0.7, size=(5, 2))
    batch = bc_rollout_batch(sm, sm_spec, p, xs, 5.0)
    for x, rb in zip(xs, batch):
        rs = bc_rollout(sm, sm_spec, p, x, 5.0)
        assert (rs.reached, rs.reach_time) == (rb.reached, rb.reach_time)
