import numpy as np
import pytest

from pod_scaling.errors import ShapeError
from pod_scaling.networks import ConvNet, LstmClassifier, softmax_cross_entropy


def _float64_arrays(network, seed):
    params = network.init_params(np.random.default_rng(seed))
    arrays = {name: t.data.astype(np.float64) for name, t in zip(params.names, params.tensors)}
    rng = np.random.default_rng(seed + 100)
    # Non-trivial BN affine so every gradient path is exercised.
    if "bn/gamma" in arrays:
        arrays["bn/gamma"] = rng.uniform(0.5, 1.5, size=arrays["bn/gamma"].shape)
        arrays["bn/beta"] = rng.normal(0.0, 0.1, size=arrays["bn/beta"].shape)
    else:
        arrays["lstm/bias"] = rng.normal(0.0, 0.1, size=arrays["lstm/bias"].shape)
    arrays["dense/bias"] = rng.normal(0.0, 0.1, size=arrays["dense/bias"].shape)
    return arrays


def _shards(shape, cores, per_core, classes, seed, dtype=np.float64):
    rng = np.random.default_rng(seed)
    shards = [rng.normal(size=(per_core,) + tuple(shape)).astype(dtype) for _ in range(cores)]
    labels = [rng.integers(0, classes, size=per_core) for _ in range(cores)]
    return shards, labels


def _summed(grads):
    return {name: sum(g[name] for g in grads) for name in grads[0]}


def _check_finite_differences(network, arrays, shards, labels, samples=3, eps=1e-6):
    def loss_fn(a):
        return network.loss_and_grads(a, shards, labels)[0]

    grads = _summed(network.loss_and_grads(arrays, shards, labels)[1])
    rng = np.random.default_rng(7)
    for name, analytic in grads.items():
        for _ in range(samples):
            index = tuple(int(rng.integers(0, n)) for n in arrays[name].shape)
            plus = dict(arrays, **{name: arrays[name].copy()})
            minus = dict(arrays, **{name: arrays[name].copy()})
            plus[name][index] += eps
            minus[name][index] -= eps
            numeric = (loss_fn(plus) - loss_fn(minus)) / (2 * eps)
            assert analytic[index] == pytest.approx(numeric, rel=1e-3, abs=1e-6), (name, index)


def test_cross_entropy_of_uniform_logits():
    logits = np.zeros((4, 3), dtype=np.float32)
    loss, d_logits = softmax_cross_entropy(logits, np.array([0, 1, 2, 0]), scale=4)
    assert float(loss) == pytest.approx(np.log(3.0), rel=1e-6)
    np.testing.assert_allclose(d_logits.sum(axis=1), 0.0, atol=1e-7)
    assert d_logits.dtype == np.float32


def test_cross_entropy_rejects_empty_class_axis():
    with pytest.raises(ShapeError):
        softmax_cross_entropy(np.zeros((2, 0)), np.zeros(2, dtype=int), scale=2)


def test_convnet_gradients_match_finite_differences():
    network = ConvNet(input_shape=(4, 4, 2), channels=3, classes=3)
    arrays = _float64_arrays(network, 0)
    shards, labels = _shards(network.input_shape, cores=2, per_core=3, classes=3, seed=1)
    _check_finite_differences(network, arrays, shards, labels)


def test_lstm_classifier_gradients_match_finite_differences():
    network = LstmClassifier(steps=4, features=3, hidden=5, classes=3)
    arrays = _float64_arrays(network, 2)
    shards, labels = _shards(network.input_shape, cores=2, per_core=3, classes=3, seed=3)
    _check_finite_differences(network, arrays, shards, labels)


@pytest.mark.parametrize("network", [
    ConvNet(input_shape=(4, 4, 2), channels=3, classes=4),
    LstmClassifier(steps=5, features=2, hidden=4, classes=4),
])
def test_core_count_does_not_change_the_global_gradient(network):
    params = network.init_params(np.random.default_rng(4))
    full, labels = _shards(network.input_shape, cores=1, per_core=8, classes=4, seed=5, dtype=np.float32)
    split = [full[0][i * 2:(i + 1) * 2] for i in range(4)]
    split_labels = [labels[0][i * 2:(i + 1) * 2] for i in range(4)]
    one = network.forward_backward(params, network.init_state(), full, labels)
    four = network.forward_backward(params, network.init_state(), split, split_labels)
    assert four.loss == pytest.approx(one.loss, rel=1e-5)
    combined = sum(g.flatten().astype(np.float64) for g in four.grads)
    np.testing.assert_allclose(combined, one.grads[0].flatten(), rtol=1e-4, atol=1e-6)


def test_convnet_updates_running_statistics():
    network = ConvNet(input_shape=(4, 4, 1), channels=2, classes=2)
    params = network.init_params(np.random.default_rng(6))
    shards, labels = _shards(network.input_shape, cores=2, per_core=2, classes=2, seed=7, dtype=np.float32)
    result = network.forward_backward(params, network.init_state(), shards, labels)
    assert result.state is not None
    assert not np.array_equal(result.state.mean, network.init_state().mean)
    logits = network.predict(params, result.state, shards[0])
    assert logits.shape == (2, 2)


def test_bf16_convnet_runs_in_f32_accumulators():
    network = ConvNet(input_shape=(4, 4, 1), channels=2, classes=2, bf16_conv=True)
    params = network.init_params(np.random.default_rng(8))
    shards, labels = _shards(network.input_shape, cores=1, per_core=4, classes=2, seed=9, dtype=np.float32)
    result = network.forward_backward(params, network.init_state(), shards, labels)
    assert np.isfinite(result.loss)
    assert result.grads[0]["conv/kernel"].data.dtype == np.float32


def test_lstm_classifier_has_no_running_state():
    network = LstmClassifier(steps=3, features=2, hidden=4, classes=2)
    params = network.init_params(np.random.default_rng(10))
    shards, labels = _shards(network.input_shape, cores=1, per_core=2, classes=2, seed=11, dtype=np.float32)
    result = network.forward_backward(params, None, shards, labels)
    assert result.state is None
    assert network.predict(params, None, shards[0]).shape == (2, 2)


def test_networks_reject_mismatched_shards():
    network = ConvNet(input_shape=(4, 4, 1), channels=2, classes=2)
    params = network.init_params(np.random.default_rng(12))
    with pytest.raises(ShapeError):
        network.forward_backward(params, None, [np.zeros((2, 5, 5, 1), dtype=np.float32)], [np.zeros(2, dtype=int)])
