import numpy as np
import pytest

from pod_scaling.errors import ShapeError
from pod_scaling.rnn_opt import (
    LstmParams,
    LstmState,
    backward_arrays,
    concat_input_features,
    forward_arrays,
    lstm_backward_deferred,
    lstm_backward_stepwise,
    lstm_forward_hoisted,
    lstm_forward_standard,
)
from pod_scaling.tensor_core import Tensor, bf16_round


def _arrays64(seed, steps=5, batch=2, features=3, hidden=4):
    rng = np.random.default_rng(seed)
    return dict(
        x=rng.normal(size=(steps, batch, features)),
        w_x=rng.normal(0.0, 0.5, size=(features, 4 * hidden)),
        w_h=rng.normal(0.0, 0.5, size=(hidden, 4 * hidden)),
        bias=rng.normal(0.0, 0.5, size=4 * hidden),
        h0=rng.normal(0.0, 0.5, size=(batch, hidden)),
        c0=rng.normal(0.0, 0.5, size=(batch, hidden)),
    )


def _tensors(seed, steps=5, batch=2, features=3, hidden=4):
    rng = np.random.default_rng(seed)
    params = LstmParams.random(rng, features, hidden)
    x = Tensor(data=rng.normal(size=(steps, batch, features)))
    return x, params, LstmState.zeros(batch, hidden)


def _scalar_lstm(a):
    def sigmoid(z):
        return 1.0 / (1.0 + np.exp(-z))

    steps, batch, _ = a["x"].shape
    hidden = a["w_h"].shape[0]
    out = np.zeros((steps, batch, hidden))
    for b in range(batch):
        h, c = a["h0"][b].copy(), a["c0"][b].copy()
        for t in range(steps):
            z = np.concatenate([a["x"][t, b], h]) @ np.concatenate([a["w_x"], a["w_h"]]) + a["bias"]
            i, f = sigmoid(z[:hidden]), sigmoid(z[hidden:2 * hidden])
            g, o = np.tanh(z[2 * hidden:3 * hidden]), sigmoid(z[3 * hidden:])
            c = f * c + i * g
            h = o * np.tanh(c)
            out[t, b] = h
    return out


def _loss(a, upstream, hoisted=True):
    result = forward_arrays(a["x"], a["w_x"], a["w_h"], a["bias"], a["h0"], a["c0"], hoisted=hoisted)
    return float(np.sum(result.h_seq * upstream))


def test_zero_weights_give_zero_state():
    x = Tensor(data=np.random.default_rng(0).normal(size=(1, 2, 3)))
    params = LstmParams(w_x=Tensor.zeros((3, 8)), w_h=Tensor.zeros((2, 8)), bias=Tensor.zeros((8,)))
    result = lstm_forward_standard(x, params, LstmState.zeros(2, 2))
    assert not np.any(result.h_seq)


def test_zero_input_zero_bias_keeps_state_at_zero():
    rng = np.random.default_rng(1)
    params = LstmParams(
        w_x=Tensor(data=rng.normal(size=(3, 8))),
        w_h=Tensor(data=rng.normal(size=(2, 8))),
        bias=Tensor.zeros((8,)),
    )
    result = lstm_forward_hoisted(Tensor.zeros((4, 2, 3)), params, LstmState.zeros(2, 2))
    assert not np.any(result.h_seq)
    assert not np.any(result.c_final)


def test_forward_matches_scalar_reference():
    a = _arrays64(2)
    result = forward_arrays(a["x"], a["w_x"], a["w_h"], a["bias"], a["h0"], a["c0"], hoisted=False)
    np.testing.assert_allclose(result.h_seq, _scalar_lstm(a), rtol=1e-12, atol=1e-12)
    assert np.array_equal(result.h_final, result.h_seq[-1])


@pytest.mark.parametrize("steps", [1, 5, 17])
def test_hoisted_forward_is_bitwise_equal_to_standard(steps):
    x, params, init = _tensors(3 + steps, steps=steps)
    standard = lstm_forward_standard(x, params, init)
    hoisted = lstm_forward_hoisted(x, params, init)
    assert hoisted.h_seq.tobytes() == standard.h_seq.tobytes()
    assert hoisted.c_final.tobytes() == standard.c_final.tobytes()


def test_hoisted_forward_matches_standard_on_bf16_inputs():
    x, params, init = _tensors(4)
    rounded = Tensor(data=bf16_round(x.data))
    standard = lstm_forward_standard(rounded, params, init)
    hoisted = lstm_forward_hoisted(rounded, params, init)
    assert hoisted.h_seq.tobytes() == standard.h_seq.tobytes()


def test_hoisting_batches_the_input_projection():
    x, params, init = _tensors(5, steps=6, batch=3)
    standard = lstm_forward_standard(x, params, init).stats
    hoisted = lstm_forward_hoisted(x, params, init).stats
    assert (standard.calls, standard.rows_per_call) == (6, 3)
    assert (hoisted.calls, hoisted.rows_per_call) == (1, 18)
    assert hoisted.elements_per_call == 18 * 16


def test_deferred_backward_equals_stepwise_for_one_step():
    x, params, init = _tensors(6, steps=1)
    forward = lstm_forward_hoisted(x, params, init)
    upstream = np.random.default_rng(7).normal(size=forward.h_seq.shape).astype(np.float32)
    deferred = lstm_backward_deferred(params, forward, upstream)
    stepwise = lstm_backward_stepwise(params, forward, upstream)
    for name in ("w_x", "w_h", "bias", "x_seq", "h0", "c0"):
        assert np.array_equal(getattr(deferred, name), getattr(stepwise, name)), name


def test_deferred_backward_matches_stepwise_within_tolerance():
    x, params, init = _tensors(8, steps=7)
    forward = lstm_forward_hoisted(x, params, init)
    upstream = np.random.default_rng(9).normal(size=forward.h_seq.shape).astype(np.float32)
    deferred = lstm_backward_deferred(params, forward, upstream)
    stepwise = lstm_backward_stepwise(params, forward, upstream)
    for name in ("w_x", "w_h", "bias", "x_seq"):
        np.testing.assert_allclose(getattr(deferred, name), getattr(stepwise, name), rtol=1e-5, atol=1e-6)


def test_zero_upstream_gives_zero_gradients():
    x, params, init = _tensors(10)
    forward = lstm_forward_standard(x, params, init)
    grads = lstm_backward_deferred(params, forward, np.zeros(forward.h_seq.shape, dtype=np.float32))
    assert not np.any(grads.w_x)
    assert not np.any(grads.w_h)
    assert not np.any(grads.bias)


@pytest.mark.parametrize("seed", range(50))
def test_backward_matches_central_differences(seed):
    shape_rng = np.random.default_rng(1000 + seed)
    steps, batch, features, hidden = (int(shape_rng.integers(1, hi + 1)) for hi in (5, 3, 4, 8))
    a = _arrays64(seed, steps, batch, features, hidden)
    upstream = shape_rng.normal(size=(steps, batch, hidden))
    forward = forward_arrays(a["x"], a["w_x"], a["w_h"], a["bias"], a["h0"], a["c0"], hoisted=True)
    grads = backward_arrays(forward.cache, a["w_x"], a["w_h"], upstream)
    eps = 1e-5
    checks = {"w_x": grads.w_x, "w_h": grads.w_h, "bias": grads.bias, "x": grads.x_seq, "h0": grads.h0, "c0": grads.c0}
    rng = np.random.default_rng(2000 + seed)
    for name, analytic in checks.items():
        for _ in range(4):
            index = tuple(int(rng.integers(0, n)) for n in a[name].shape)
            plus = {k: v.copy() for k, v in a.items()}
            minus = {k: v.copy() for k, v in a.items()}
            plus[name][index] += eps
            minus[name][index] -= eps
            numeric = (_loss(plus, upstream) - _loss(minus, upstream)) / (2 * eps)
            assert analytic[index] == pytest.approx(numeric, rel=1e-4, abs=1e-6), (seed, name, index)


def test_final_state_gradients_flow_into_parameters():
    a = _arrays64(14, steps=3)
    forward = forward_arrays(a["x"], a["w_x"], a["w_h"], a["bias"], a["h0"], a["c0"], hoisted=True)
    zero = np.zeros_like(forward.h_seq)
    d_c = np.ones_like(forward.c_final)
    grads = backward_arrays(forward.cache, a["w_x"], a["w_h"], zero, d_c_final=d_c)
    eps = 1e-5
    totals = []
    for sign in (1.0, -1.0):
        bumped = {k: v.copy() for k, v in a.items()}
        bumped["bias"][0] += sign * eps
        result = forward_arrays(*(bumped[k] for k in ("x", "w_x", "w_h", "bias", "h0", "c0")), hoisted=True)
        totals.append(np.sum(result.c_final))
    numeric = (totals[0] - totals[1]) / (2 * eps)
    assert grads.bias[0] == pytest.approx(numeric, rel=1e-4, abs=1e-8)


def test_masked_tail_does_not_change_real_steps():
    a = _arrays64(15, steps=6, batch=2)
    mask = np.ones((6, 2), dtype=bool)
    mask[3:, 0] = False
    masked = forward_arrays(a["x"], a["w_x"], a["w_h"], a["bias"], a["h0"], a["c0"], hoisted=True, mask=mask)
    short = forward_arrays(a["x"][:3], a["w_x"], a["w_h"], a["bias"], a["h0"], a["c0"], hoisted=True)
    assert np.array_equal(masked.h_final[0], short.h_final[0])
    assert np.array_equal(masked.c_final[0], short.c_final[0])
    assert not np.any(masked.h_seq[3:, 0])


def test_masked_steps_contribute_no_gradient():
    a = _arrays64(16, steps=6, batch=2)
    mask = np.ones((6, 2), dtype=bool)
    mask[4:, :] = False
    upstream = np.random.default_rng(17).normal(size=(6, 2, 4))
    masked = forward_arrays(a["x"], a["w_x"], a["w_h"], a["bias"], a["h0"], a["c0"], hoisted=True, mask=mask)
    short = forward_arrays(a["x"][:4], a["w_x"], a["w_h"], a["bias"], a["h0"], a["c0"], hoisted=True)
    with_mask = backward_arrays(masked.cache, a["w_x"], a["w_h"], upstream)
    without = backward_arrays(short.cache, a["w_x"], a["w_h"], upstream[:4])
    np.testing.assert_allclose(with_mask.w_x, without.w_x, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(with_mask.w_h, without.w_h, rtol=1e-12, atol=1e-12)
    assert not np.any(with_mask.x_seq[4:])


def test_backward_without_cache_is_rejected():
    x, params, _ = _tensors(18)
    with pytest.raises(ValueError, match="forward cache"):
        lstm_backward_deferred(params, None, np.zeros((5, 2, 4), dtype=np.float32))


def test_forward_rejects_wrong_feature_count():
    _, params, init = _tensors(19)
    with pytest.raises(ShapeError, match="dim 2"):
        lstm_forward_standard(Tensor.zeros((5, 2, 7)), params, init)


def test_params_reject_inconsistent_gate_width():
    with pytest.raises(ShapeError):
        LstmParams(w_x=Tensor.zeros((3, 8)), w_h=Tensor.zeros((3, 8)), bias=Tensor.zeros((8,)))


def test_concat_input_features_extends_last_axis():
    x = Tensor.zeros((4, 2, 3))
    extra = Tensor(data=np.ones((4, 2, 5)))
    combined = concat_input_features(x, extra)
    assert combined.shape == (4, 2, 8)
    with pytest.raises(ShapeError):
        concat_input_features(x, Tensor.zeros((3, 2, 5)))
