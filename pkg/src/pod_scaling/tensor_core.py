"""Dense tensor values, bfloat16 emulation and the shared numeric kernels.

Every accumulation in this module walks its reduction axis in a fixed
left-to-right order (conv: kh, kw, then input channel; matmul: the inner
index) with one elementwise float32 add per term. A given output element
therefore sees exactly the same sequence of roundings whatever the batch
extent, spatial window or row count around it, which is what lets the
sharded and hoisted variants elsewhere be compared bit for bit.

Only NHWC layout is supported.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence, Tuple, Union

import numpy as np

from .errors import ShapeError

logger = logging.getLogger(__name__)

BN_EPSILON = 1e-5

_HEADER_DTYPE = np.dtype("<u8")
_DATA_DTYPE = np.dtype("<f4")


class DType(str, Enum):
    F32 = "f32"
    BF16 = "bf16"


class Padding(str, Enum):
    SAME = "SAME"
    VALID = "VALID"


def bf16_round(x: Union[float, np.ndarray]) -> Union[np.float32, np.ndarray]:
    """Round float32 values to the nearest bfloat16-representable value.

    Round-to-nearest-even on the 16 truncated mantissa bits. NaN stays a
    (quiet) NaN, infinities are preserved, subnormals are rounded like any
    other value. Scalars come back as ``np.float32``, arrays as float32
    arrays of the same shape.
    """

    scalar = np.ndim(x) == 0 and not isinstance(x, np.ndarray)
    values = np.asarray(x, dtype=np.float32)
    bits = values.view(np.uint32)
    wide = bits.astype(np.uint64)
    lsb = (wide >> 16) & 1
    rounded = ((wide + 0x7FFF + lsb) & 0xFFFF0000).astype(np.uint32)
    nan = np.isnan(values)
    if np.any(nan):
        quiet = (bits | np.uint32(0x00400000)) & np.uint32(0xFFFF0000)
        rounded = np.where(nan, quiet, rounded).astype(np.uint32)
    result = rounded.view(np.float32)
    if scalar:
        return np.float32(result)
    return result.reshape(values.shape)


@dataclass(frozen=True, eq=False)
class Tensor:
    """Immutable dense float tensor with an element-type tag.

    BF16 tensors hold float32 storage whose values are already rounded to
    bfloat16, so re-rounding is a no-op.
    """

    data: np.ndarray
    dtype: DType = DType.F32

    def __post_init__(self) -> None:
        array = np.array(self.data, dtype=np.float32, copy=True)
        if self.dtype is DType.BF16:
            array = np.ascontiguousarray(bf16_round(array))
        array.setflags(write=False)
        object.__setattr__(self, "data", array)

    @classmethod
    def from_array(cls, array: np.ndarray, dtype: DType = DType.F32) -> "Tensor":
        return cls(data=np.asarray(array), dtype=dtype)

    @classmethod
    def from_flat(cls, values: Sequence[float], shape: Sequence[int], dtype: DType = DType.F32) -> "Tensor":
        flat = np.asarray(values, dtype=np.float32).ravel()
        expected = int(np.prod(shape, dtype=np.int64))
        if flat.size != expected:
            raise ShapeError(f"shape {tuple(shape)} needs {expected} values, got {flat.size}")
        return cls(data=flat.reshape(tuple(shape)), dtype=dtype)

    @classmethod
    def zeros(cls, shape: Sequence[int], dtype: DType = DType.F32) -> "Tensor":
        return cls(data=np.zeros(tuple(shape), dtype=np.float32), dtype=dtype)

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def nbytes(self) -> int:
        return 4 * self.size

    @property
    def flat(self) -> np.ndarray:
        """Row-major flat view of the values."""
        return self.data.reshape(-1)

    def as_array(self) -> np.ndarray:
        """Writable float32 copy of the values."""
        return np.array(self.data, dtype=np.float32, copy=True)

    def bitwise_equal(self, other: "Tensor") -> bool:
        return self.shape == other.shape and bool(
            np.array_equal(self.data.view(np.uint32), other.data.view(np.uint32))
        )


def to_bf16(tensor: Tensor) -> Tensor:
    return Tensor(data=tensor.data, dtype=DType.BF16)


def max_deviation(actual: np.ndarray, expected: np.ndarray) -> Tuple[float, Tuple[int, ...]]:
    """Largest absolute elementwise difference and where it occurs."""

    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    if actual.shape != expected.shape:
        raise ShapeError(f"cannot compare shapes {actual.shape} and {expected.shape}")
    if actual.size == 0:
        return 0.0, ()
    diff = np.abs(actual - expected)
    index = np.unravel_index(int(np.argmax(diff)), diff.shape)
    return float(diff[index]), tuple(int(i) for i in index)


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConvParams:
    kernel_size: int
    in_channels: int
    out_channels: int
    stride: int = 1
    padding: Padding = Padding.SAME

    def __post_init__(self) -> None:
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be a positive odd integer, got {self.kernel_size}")
        if self.stride < 1:
            raise ValueError(f"stride must be positive, got {self.stride}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError(
                f"channel counts must be positive, got {self.in_channels}->{self.out_channels}"
            )
        object.__setattr__(self, "padding", Padding(self.padding))


def conv_output_size(extent: int, kernel_size: int, stride: int, padding: Padding) -> int:
    if padding is Padding.SAME:
        return -(-extent // stride)
    if extent < kernel_size:
        return 0
    return (extent - kernel_size) // stride + 1


def same_padding(extent: int, kernel_size: int, stride: int) -> Tuple[int, int]:
    """(before, after) zero padding of one axis under SAME semantics."""

    out = conv_output_size(extent, kernel_size, stride, Padding.SAME)
    total = max((out - 1) * stride + kernel_size - extent, 0)
    return total // 2, total - total // 2


def conv_window_accumulate(
    xpad: np.ndarray,
    kernel: np.ndarray,
    stride: int,
    out_h: int,
    out_w: int,
) -> np.ndarray:
    """VALID cross-correlation of an already padded NHWC block.

    Produces exactly ``out_h`` x ``out_w`` outputs starting at the block's
    top-left corner.
    """

    n = xpad.shape[0]
    k, _, cin, cout = kernel.shape
    acc = np.zeros((n, out_h, out_w, cout), dtype=np.result_type(xpad, kernel))
    if out_h <= 0 or out_w <= 0 or n == 0:
        return acc
    row_stop = (out_h - 1) * stride + 1
    col_stop = (out_w - 1) * stride + 1
    for kh in range(k):
        for kw in range(k):
            window = xpad[:, kh:kh + row_stop:stride, kw:kw + col_stop:stride, :]
            for ci in range(cin):
                acc += window[..., ci:ci + 1] * kernel[kh, kw, ci]
    return acc


def _check_conv_shapes(x_shape: Tuple[int, ...], k_shape: Tuple[int, ...], params: ConvParams) -> None:
    if len(x_shape) != 4:
        raise ShapeError(f"conv input must be NHWC, got rank {len(x_shape)}")
    if len(k_shape) != 4:
        raise ShapeError(f"conv kernel must be [K,K,Cin,Cout], got rank {len(k_shape)}")
    k = params.kernel_size
    if k_shape[0] != k or k_shape[1] != k:
        raise ShapeError(f"kernel spatial extents {k_shape[:2]} do not match kernel_size {k}")
    if x_shape[3] != params.in_channels:
        raise ShapeError(f"input channels (dim 3) is {x_shape[3]}, params expect {params.in_channels}")
    if k_shape[2] != params.in_channels:
        raise ShapeError(f"kernel Cin (dim 2) is {k_shape[2]}, params expect {params.in_channels}")
    if k_shape[3] != params.out_channels:
        raise ShapeError(f"kernel Cout (dim 3) is {k_shape[3]}, params expect {params.out_channels}")


def pad_for_conv(x: np.ndarray, params: ConvParams) -> Tuple[np.ndarray, int, int]:
    """Apply global zero padding; returns (padded, out_h, out_w)."""

    _, h, w, _ = x.shape
    k, s = params.kernel_size, params.stride
    out_h = conv_output_size(h, k, s, params.padding)
    out_w = conv_output_size(w, k, s, params.padding)
    if params.padding is Padding.SAME:
        top, bottom = same_padding(h, k, s)
        left, right = same_padding(w, k, s)
        x = np.pad(x, ((0, 0), (top, bottom), (left, right), (0, 0)))
    return x, out_h, out_w


def conv2d_array(x: np.ndarray, kernel: np.ndarray, params: ConvParams) -> np.ndarray:
    _check_conv_shapes(x.shape, kernel.shape, params)
    xpad, out_h, out_w = pad_for_conv(x, params)
    return conv_window_accumulate(xpad, kernel, params.stride, out_h, out_w)


def conv2d(input: Tensor, kernel: Tensor, params: ConvParams) -> Tensor:
    """Cross-correlation of an NHWC input with a [K,K,Cin,Cout] kernel.

    When either operand is BF16 both are rounded to bf16 before the
    multiply; the accumulator and the result are always f32.
    """

    x, w = input.data, kernel.data
    if input.dtype is DType.BF16 or kernel.dtype is DType.BF16:
        x, w = bf16_round(x), bf16_round(w)
    return Tensor(data=conv2d_array(x, w, params))


def conv2d_backward_array(
    x: np.ndarray,
    kernel: np.ndarray,
    grad_out: np.ndarray,
    params: ConvParams,
) -> Tuple[np.ndarray, np.ndarray]:
    """Gradients of conv2d with respect to its input and kernel."""

    _check_conv_shapes(x.shape, kernel.shape, params)
    xpad, out_h, out_w = pad_for_conv(x, params)
    if grad_out.shape[1:3] != (out_h, out_w):
        raise ShapeError(f"grad_out spatial extents {grad_out.shape[1:3]} != {(out_h, out_w)}")
    k, s = params.kernel_size, params.stride
    grad_xpad = np.zeros_like(xpad)
    grad_kernel = np.zeros_like(kernel)
    row_stop = (out_h - 1) * s + 1
    col_stop = (out_w - 1) * s + 1
    for kh in range(k):
        for kw in range(k):
            rows = slice(kh, kh + row_stop, s)
            cols = slice(kw, kw + col_stop, s)
            window = xpad[:, rows, cols, :]
            grad_kernel[kh, kw] = np.tensordot(window, grad_out, axes=([0, 1, 2], [0, 1, 2]))
            grad_xpad[:, rows, cols, :] += np.tensordot(grad_out, kernel[kh, kw], axes=([3], [1]))
    h, w = x.shape[1:3]
    if params.padding is Padding.SAME:
        top, _ = same_padding(h, k, s)
        left, _ = same_padding(w, k, s)
    else:
        top = left = 0
    return grad_xpad[:, top:top + h, left:left + w, :], grad_kernel


# ---------------------------------------------------------------------------
# Matmul and normalization statistics
# ---------------------------------------------------------------------------


def matmul_array(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got ranks {a.ndim} and {b.ndim}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner extents differ: a dim 1 is {a.shape[1]}, b dim 0 is {b.shape[0]}")
    acc = np.zeros((a.shape[0], b.shape[1]), dtype=np.result_type(a, b))
    for k in range(a.shape[1]):
        acc += a[:, k:k + 1] * b[k:k + 1, :]
    return acc


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """[M,K] x [K,N] with f32 accumulation in a fixed k order."""

    x, y = a.data, b.data
    if a.dtype is DType.BF16 or b.dtype is DType.BF16:
        x, y = bf16_round(x), bf16_round(y)
    return Tensor(data=matmul_array(x, y))


def snap_variance(var: np.ndarray, mean: np.ndarray, count: int) -> np.ndarray:
    """Zero the variances that are only rounding noise of ``mean``.

    A constant feature whose value is not exactly representable leaves a
    residual of at most ``count * eps * |mean|`` per row after centring.
    """

    noise = np.square(count * np.finfo(np.float64).eps * np.abs(mean))
    return np.where(var <= noise, 0.0, var)


def batch_stats(x: Tensor) -> Tuple[Tensor, Tensor, int]:
    """Per-feature mean and biased variance over axis 0, plus the row count."""

    if len(x.shape) != 2:
        raise ShapeError(f"batch_stats expects [N,F], got shape {x.shape}")
    count = x.shape[0]
    if count == 0:
        raise ValueError("batch_stats of an empty batch")
    values = x.data.astype(np.float64)
    mean = values.sum(axis=0) / count
    var = snap_variance(np.square(values - mean).sum(axis=0) / count, mean, count)
    return Tensor(data=mean), Tensor(data=var), count


def normalize_array(x: np.ndarray, mean: np.ndarray, var: np.ndarray, eps: float = BN_EPSILON) -> np.ndarray:
    """(x - mean) / sqrt(var + eps); features with zero variance map to exact zeros."""

    centred = np.where(var > 0, x.astype(np.float64) - mean, 0.0)
    out = centred / np.sqrt(var + eps)
    return out.astype(x.dtype if x.dtype == np.float64 else np.float32)


def normalize(x: Tensor, mean: Tensor, var: Tensor, eps: float = BN_EPSILON) -> Tensor:
    return Tensor(data=normalize_array(x.data, mean.data.astype(np.float64), var.data.astype(np.float64), eps))


# ---------------------------------------------------------------------------
# Fixture I/O
# ---------------------------------------------------------------------------


def save_tensor(path: Path, tensor: Tensor) -> None:
    """Write little-endian f32 values after a u64 header (rank, then extents)."""

    header = np.array([len(tensor.shape), *tensor.shape], dtype=_HEADER_DTYPE)
    payload = header.tobytes() + tensor.data.astype(_DATA_DTYPE).tobytes()
    Path(path).write_bytes(payload)
    logger.debug("Wrote tensor %s to %s", tensor.shape, path)


def load_tensor(path: Path, dtype: DType = DType.F32) -> Tensor:
    tensor_path = Path(path)
    if not tensor_path.exists():
        raise FileNotFoundError(f"Tensor file not found: {tensor_path}")
    raw = tensor_path.read_bytes()
    if len(raw) < 8:
        raise ValueError(f"{tensor_path} is too short to hold a tensor header")
    rank = int(np.frombuffer(raw, dtype=_HEADER_DTYPE, count=1)[0])
    header_bytes = 8 * (rank + 1)
    if len(raw) < header_bytes:
        raise ValueError(f"{tensor_path} header declares rank {rank} but is truncated")
    shape = tuple(int(v) for v in np.frombuffer(raw, dtype=_HEADER_DTYPE, count=rank, offset=8))
    values = np.frombuffer(raw, dtype=_DATA_DTYPE, offset=header_bytes)
    return Tensor.from_flat(values, shape, dtype)
