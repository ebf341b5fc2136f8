import struct

import numpy as np
import pytest

from pod_scaling.errors import ShapeError
from pod_scaling.tensor_core import (
    ConvParams,
    DType,
    Padding,
    Tensor,
    batch_stats,
    bf16_round,
    conv2d,
    conv2d_array,
    conv2d_backward_array,
    load_tensor,
    matmul,
    max_deviation,
    normalize,
    save_tensor,
    to_bf16,
)


def _bits(value):
    return struct.unpack("<I", struct.pack("<f", value))[0]


def _from_bits(bits):
    return struct.unpack("<f", struct.pack("<I", bits))[0]


def _scalar_bf16(value):
    bits = _bits(value)
    if (bits & 0x7F800000) == 0x7F800000 and bits & 0x007FFFFF:
        return float("nan")
    lower = bits & 0xFFFF
    upper = bits >> 16
    if lower > 0x8000 or (lower == 0x8000 and upper & 1):
        upper += 1
    return _from_bits((upper << 16) & 0xFFFFFFFF)


def _naive_conv(x, kernel, pad):
    n, h, w, cin = x.shape
    k = kernel.shape[0]
    cout = kernel.shape[3]
    out = np.zeros((n, h, w, cout), dtype=np.float64)
    for b in range(n):
        for i in range(h):
            for j in range(w):
                for co in range(cout):
                    total = 0.0
                    for kh in range(k):
                        for kw in range(k):
                            r, c = i + kh - pad, j + kw - pad
                            if 0 <= r < h and 0 <= c < w:
                                for ci in range(cin):
                                    total += float(x[b, r, c, ci]) * float(kernel[kh, kw, ci, co])
                    out[b, i, j, co] = total
    return out


def test_bf16_round_known_values():
    assert bf16_round(1.0) == np.float32(1.0)
    assert bf16_round(0.0) == np.float32(0.0)
    assert _bits(float(bf16_round(0.1))) == 0x3DCD0000


def test_bf16_round_ties_go_to_even():
    # 1 + 2^-8 sits exactly between two bf16 neighbours; the even one is 1.0.
    assert bf16_round(_from_bits(0x3F808000)) == np.float32(1.0)
    assert _bits(float(bf16_round(_from_bits(0x3F818000)))) == 0x3F820000


def test_bf16_round_special_values():
    assert np.isposinf(bf16_round(np.inf))
    assert np.isneginf(bf16_round(-np.inf))
    assert np.isnan(bf16_round(np.nan))


def test_bf16_round_matches_scalar_reference_on_sampled_bits():
    rng = np.random.default_rng(0)
    bits = rng.integers(0, 2**32, size=2**16, dtype=np.uint64).astype(np.uint32)
    values = bits.view(np.float32)
    rounded = bf16_round(values)
    for value, got in zip(values.tolist(), rounded.tolist()):
        expected = _scalar_bf16(value)
        if np.isnan(expected):
            assert np.isnan(got)
        else:
            assert _bits(got) == _bits(expected)


def test_bf16_round_is_idempotent_and_close():
    rng = np.random.default_rng(1)
    values = rng.normal(0.0, 100.0, size=4096).astype(np.float32)
    once = bf16_round(values)
    assert np.array_equal(bf16_round(once).view(np.uint32), once.view(np.uint32))
    rel = np.abs(once.astype(np.float64) - values) / np.abs(values)
    assert rel.max() <= 2.0**-8


def test_bf16_tensor_stores_rounded_values():
    tensor = Tensor.from_flat([0.1, 1.0], [2], DType.BF16)
    assert _bits(float(tensor.flat[0])) == 0x3DCD0000
    assert not tensor.data.flags.writeable


def test_from_flat_rejects_wrong_length():
    with pytest.raises(ShapeError):
        Tensor.from_flat([1.0, 2.0, 3.0], [2, 2])


def test_conv2d_identity_kernel_returns_input():
    rng = np.random.default_rng(2)
    x = Tensor.from_array(rng.normal(size=(2, 5, 5, 1)))
    kernel = Tensor.from_array(np.ones((1, 1, 1, 1)))
    out = conv2d(x, kernel, ConvParams(kernel_size=1, in_channels=1, out_channels=1))
    assert out.bitwise_equal(x)


def test_conv2d_zero_input_gives_zero_output():
    x = Tensor.zeros((1, 6, 6, 2))
    kernel = Tensor.from_array(np.random.default_rng(3).normal(size=(3, 3, 2, 4)))
    out = conv2d(x, kernel, ConvParams(kernel_size=3, in_channels=2, out_channels=4))
    assert out.shape == (1, 6, 6, 4)
    assert not np.any(out.data)


def test_conv2d_matches_nested_loop_reference():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(1, 8, 8, 1)).astype(np.float32)
    kernel = rng.normal(size=(3, 3, 1, 2)).astype(np.float32)
    out = conv2d(Tensor.from_array(x), Tensor.from_array(kernel), ConvParams(3, 1, 2))
    np.testing.assert_allclose(out.data, _naive_conv(x, kernel, pad=1), rtol=1e-5, atol=1e-6)


def test_conv2d_valid_and_strided_output_extents():
    x = Tensor.zeros((1, 8, 8, 1))
    kernel = Tensor.zeros((3, 3, 1, 1))
    valid = conv2d(x, kernel, ConvParams(3, 1, 1, padding=Padding.VALID))
    strided = conv2d(x, kernel, ConvParams(3, 1, 1, stride=2))
    assert valid.shape == (1, 6, 6, 1)
    assert strided.shape == (1, 4, 4, 1)


def test_conv2d_names_mismatched_dimension():
    x = Tensor.zeros((1, 4, 4, 3))
    kernel = Tensor.zeros((3, 3, 2, 1))
    with pytest.raises(ShapeError, match="dim 3"):
        conv2d(x, kernel, ConvParams(3, 2, 1))


def test_conv_params_reject_even_kernel():
    with pytest.raises(ValueError):
        ConvParams(kernel_size=2, in_channels=1, out_channels=1)


def test_pointwise_conv_equals_channel_matmul_bitwise():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 4, 4, 3)).astype(np.float32)
    kernel = rng.normal(size=(1, 1, 3, 5)).astype(np.float32)
    conv = conv2d(Tensor.from_array(x), Tensor.from_array(kernel), ConvParams(1, 3, 5))
    mm = matmul(Tensor.from_array(x.reshape(-1, 3)), Tensor.from_array(kernel.reshape(3, 5)))
    assert conv.bitwise_equal(Tensor.from_array(mm.data.reshape(2, 4, 4, 5)))


def test_conv2d_backward_matches_finite_differences():
    rng = np.random.default_rng(6)
    params = ConvParams(3, 2, 2)
    x = rng.normal(size=(1, 4, 4, 2))
    kernel = rng.normal(size=(3, 3, 2, 2))
    weights = rng.normal(size=(1, 4, 4, 2))
    grad_x, grad_k = conv2d_backward_array(x, kernel, weights, params)
    eps = 1e-6
    for index in [(0, 1, 2, 0), (0, 3, 0, 1)]:
        bumped = x.copy()
        bumped[index] += eps
        numeric = (np.sum(conv2d_array(bumped, kernel, params) * weights)
                   - np.sum(conv2d_array(x, kernel, params) * weights)) / eps
        assert grad_x[index] == pytest.approx(numeric, rel=1e-4, abs=1e-6)
    for index in [(0, 0, 1, 1), (2, 1, 0, 0)]:
        bumped = kernel.copy()
        bumped[index] += eps
        numeric = (np.sum(conv2d_array(x, bumped, params) * weights)
                   - np.sum(conv2d_array(x, kernel, params) * weights)) / eps
        assert grad_k[index] == pytest.approx(numeric, rel=1e-4, abs=1e-6)


def test_matmul_identity_and_zeros():
    rng = np.random.default_rng(7)
    a = Tensor.from_array(rng.normal(size=(3, 3)))
    assert matmul(Tensor.from_array(np.eye(3)), a).bitwise_equal(a)
    assert not np.any(matmul(Tensor.zeros((2, 3)), a).data)


def test_matmul_matches_reference_and_is_deterministic():
    rng = np.random.default_rng(8)
    a = Tensor.from_array(rng.normal(size=(3, 4)))
    b = Tensor.from_array(rng.normal(size=(4, 2)))
    first = matmul(a, b)
    reference = a.data.astype(np.float64) @ b.data.astype(np.float64)
    np.testing.assert_allclose(first.data, reference, rtol=1e-5, atol=1e-6)
    assert matmul(a, b).bitwise_equal(first)


def test_matmul_rejects_inner_mismatch():
    with pytest.raises(ShapeError):
        matmul(Tensor.zeros((2, 3)), Tensor.zeros((2, 3)))


def test_batch_stats_examples():
    mean, var, count = batch_stats(Tensor.from_flat([0.0, 2.0], [2, 1]))
    assert count == 2
    assert mean.flat.tolist() == [1.0]
    assert var.flat.tolist() == [1.0]

    mean, var, _ = batch_stats(Tensor.from_flat([3.0, 3.0, 3.0], [3, 1]))
    assert mean.flat.tolist() == [3.0]
    assert var.flat.tolist() == [0.0]

    mean, var, _ = batch_stats(Tensor.from_flat([0.1] * 7, [7, 1]))
    assert var.flat.tolist() == [0.0]
    assert not np.any(normalize(Tensor.from_flat([0.1] * 7, [7, 1]), mean, var).data)


def test_normalize_uses_batch_statistics():
    x = Tensor.from_flat([0.0, 2.0], [2, 1])
    mean, var, _ = batch_stats(x)
    out = normalize(x, mean, var, eps=0.0)
    assert out.flat.tolist() == [-1.0, 1.0]


def test_to_bf16_rounds_and_retags():
    x = Tensor.from_flat([0.1, 1.0], [2])
    rounded = to_bf16(x)
    assert rounded.dtype is DType.BF16
    assert _bits(rounded.flat[0]) == 0x3DCD0000
    assert rounded.flat[1] == 1.0


def test_batch_stats_rejects_empty_batch():
    with pytest.raises(ValueError):
        batch_stats(Tensor.zeros((0, 3)))


def test_max_deviation_reports_location():
    deviation, location = max_deviation(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[1.0, 2.0], [3.0, 4.5]]))
    assert deviation == pytest.approx(0.5)
    assert location == (1, 1)


def test_tensor_fixture_round_trip(tmp_path):
    tensor = Tensor.from_array(np.arange(6, dtype=np.float32).reshape(2, 3))
    path = tmp_path / "t.bin"
    save_tensor(path, tensor)
    assert load_tensor(path).bitwise_equal(tensor)
    assert path.read_bytes()[:8] == (2).to_bytes(8, "little")


def test_load_tensor_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError, match="Tensor file not found"):
        load_tensor(tmp_path / "missing.bin")
