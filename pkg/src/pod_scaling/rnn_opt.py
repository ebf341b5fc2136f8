"""LSTM layer in two forward forms and two backward forms.

Gate layout along the 4H axis is (i, f, g, o); i, f and o use the logistic
sigmoid and g uses tanh. The concatenated-input product ``[x, h] . W`` is
evaluated as ``(x . W_x + b) + h . W_h``:

* the standard form computes ``x_t . W_x + b`` inside the time loop, one
  ``[B, F]`` product per step;
* the hoisted form computes ``x . W_x + b`` for all steps at once as a
  single ``[T*B, F]`` product before the loop, leaving only ``h . W_h``
  loop-carried.

``matmul_array`` produces every output element with the same sequence of
roundings whatever the row count, so both forms agree bit for bit.

The deferred backward pass stores each step's gate gradients in a
``[T, B, 4H]`` array and contracts the weight gradients over all steps in one
product after the loop; the step-wise pass accumulates them inside the loop
and serves as its oracle.

An optional ``[T, B]`` mask marks real steps. Masked steps carry ``(h, c)``
through unchanged, emit zeros and contribute no gradient.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .errors import ShapeError
from .tensor_core import Tensor, matmul_array

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class LstmParams:
    w_x: Tensor
    w_h: Tensor
    bias: Tensor

    def __post_init__(self) -> None:
        if len(self.w_x.shape) != 2 or len(self.w_h.shape) != 2 or len(self.bias.shape) != 1:
            raise ShapeError("LSTM params must be W_x [F,4H], W_h [H,4H], bias [4H]")
        gates = self.w_h.shape[1]
        if gates % 4:
            raise ShapeError(f"gate width {gates} is not divisible by 4")
        if self.w_h.shape[0] * 4 != gates:
            raise ShapeError(f"W_h shape {self.w_h.shape} is not [H, 4H]")
        if self.w_x.shape[1] != gates or self.bias.shape[0] != gates:
            raise ShapeError(f"W_x {self.w_x.shape} and bias {self.bias.shape} must have {gates} gate columns")

    @property
    def hidden_size(self) -> int:
        return self.w_h.shape[0]

    @property
    def input_size(self) -> int:
        return self.w_x.shape[0]

    @classmethod
    def random(cls, rng: np.random.Generator, input_size: int, hidden_size: int, scale: float = 0.5) -> "LstmParams":
        return cls(
            w_x=Tensor(data=rng.normal(0.0, scale, size=(input_size, 4 * hidden_size))),
            w_h=Tensor(data=rng.normal(0.0, scale, size=(hidden_size, 4 * hidden_size))),
            bias=Tensor(data=rng.normal(0.0, scale, size=4 * hidden_size)),
        )


@dataclass(frozen=True, eq=False)
class LstmState:
    h: Tensor
    c: Tensor

    def __post_init__(self) -> None:
        if self.h.shape != self.c.shape or len(self.h.shape) != 2:
            raise ShapeError(f"h {self.h.shape} and c {self.c.shape} must both be [B, H]")

    @classmethod
    def zeros(cls, batch: int, hidden_size: int) -> "LstmState":
        return cls(h=Tensor.zeros((batch, hidden_size)), c=Tensor.zeros((batch, hidden_size)))


@dataclass(frozen=True)
class ProjectionStats:
    """Input-projection work: number of products and rows fed to each."""

    calls: int
    rows_per_call: int
    gate_width: int

    @property
    def elements_per_call(self) -> int:
        return self.rows_per_call * self.gate_width


@dataclass(frozen=True, eq=False)
class LstmCache:
    x_seq: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray
    c: np.ndarray
    gates: np.ndarray
    mask: Optional[np.ndarray]


@dataclass(frozen=True, eq=False)
class LstmForward:
    h_seq: np.ndarray
    h_final: np.ndarray
    c_final: np.ndarray
    cache: LstmCache
    stats: ProjectionStats


@dataclass(frozen=True, eq=False)
class LstmGrads:
    w_x: np.ndarray
    w_h: np.ndarray
    bias: np.ndarray
    x_seq: np.ndarray
    h0: np.ndarray
    c0: np.ndarray


def _sigmoid(z: np.ndarray) -> np.ndarray:
    one = z.dtype.type(1.0)
    return one / (one + np.exp(-z))


def _check_sequence(x: np.ndarray, w_x: np.ndarray, h0: np.ndarray, mask: Optional[np.ndarray]) -> None:
    if x.ndim != 3:
        raise ShapeError(f"x_seq must be [T,B,F], got shape {x.shape}")
    if x.shape[0] < 1:
        raise ShapeError("x_seq needs at least one time step")
    if x.shape[2] != w_x.shape[0]:
        raise ShapeError(f"x_seq features (dim 2) {x.shape[2]} != W_x rows {w_x.shape[0]}")
    if h0.shape != (x.shape[1], w_x.shape[1] // 4):
        raise ShapeError(f"initial state {h0.shape} does not match batch {x.shape[1]} / hidden {w_x.shape[1] // 4}")
    if mask is not None and mask.shape != x.shape[:2]:
        raise ShapeError(f"mask shape {mask.shape} != [T,B] {x.shape[:2]}")


def forward_arrays(
    x: np.ndarray,
    w_x: np.ndarray,
    w_h: np.ndarray,
    bias: np.ndarray,
    h0: np.ndarray,
    c0: np.ndarray,
    hoisted: bool,
    mask: Optional[np.ndarray] = None,
) -> LstmForward:
    """LSTM forward on raw arrays; float64 inputs stay float64."""

    _check_sequence(x, w_x, h0, mask)
    steps, batch, features = x.shape
    hidden = w_h.shape[0]
    dtype = np.result_type(x, w_x, w_h)

    if hoisted:
        projected = (matmul_array(x.reshape(steps * batch, features), w_x) + bias).reshape(steps, batch, 4 * hidden)
        stats = ProjectionStats(calls=1, rows_per_call=steps * batch, gate_width=4 * hidden)
    else:
        projected = None
        stats = ProjectionStats(calls=steps, rows_per_call=batch, gate_width=4 * hidden)

    h = h0.astype(dtype)
    c = c0.astype(dtype)
    h_seq = np.zeros((steps, batch, hidden), dtype=dtype)
    h_prev = np.zeros_like(h_seq)
    c_prev = np.zeros_like(h_seq)
    c_all = np.zeros_like(h_seq)
    gates_all = np.zeros((steps, batch, 4 * hidden), dtype=dtype)
    for t in range(steps):
        h_prev[t], c_prev[t] = h, c
        step_input = projected[t] if projected is not None else matmul_array(x[t], w_x) + bias
        pre = step_input + matmul_array(h, w_h)
        i = _sigmoid(pre[:, :hidden])
        f = _sigmoid(pre[:, hidden:2 * hidden])
        g = np.tanh(pre[:, 2 * hidden:3 * hidden])
        o = _sigmoid(pre[:, 3 * hidden:])
        c_new = f * c + i * g
        h_new = o * np.tanh(c_new)
        gates_all[t] = np.concatenate([i, f, g, o], axis=1)
        if mask is None:
            h, c = h_new, c_new
            h_seq[t] = h_new
        else:
            live = mask[t][:, None]
            h = np.where(live, h_new, h)
            c = np.where(live, c_new, c)
            h_seq[t] = np.where(live, h_new, 0)
        c_all[t] = c
    cache = LstmCache(x_seq=x, h_prev=h_prev, c_prev=c_prev, c=c_all, gates=gates_all, mask=mask)
    return LstmForward(h_seq=h_seq, h_final=h, c_final=c, cache=cache, stats=stats)


def _step_gate_grads(
    cache: LstmCache,
    t: int,
    dh: np.ndarray,
    dc_next: np.ndarray,
    hidden: int,
) -> Tuple[np.ndarray, np.ndarray]:
    gates = cache.gates[t]
    i, f = gates[:, :hidden], gates[:, hidden:2 * hidden]
    g, o = gates[:, 2 * hidden:3 * hidden], gates[:, 3 * hidden:]
    one = gates.dtype.type(1.0)
    tanh_c = np.tanh(cache.c[t]) if cache.mask is None else np.tanh(
        f * cache.c_prev[t] + i * g
    )
    d_o = dh * tanh_c
    dc = dc_next + dh * o * (one - tanh_c * tanh_c)
    d_i = dc * g
    d_g = dc * i
    d_f = dc * cache.c_prev[t]
    d_gates = np.concatenate(
        [d_i * i * (one - i), d_f * f * (one - f), d_g * (one - g * g), d_o * o * (one - o)],
        axis=1,
    )
    return d_gates, dc * f


def _backward(
    cache: Optional[LstmCache],
    w_x: np.ndarray,
    w_h: np.ndarray,
    d_h_seq: np.ndarray,
    d_h_final: Optional[np.ndarray],
    d_c_final: Optional[np.ndarray],
    deferred: bool,
) -> LstmGrads:
    if cache is None:
        raise ValueError("LSTM backward needs the forward cache")
    x = cache.x_seq
    steps, batch, features = x.shape
    hidden = w_h.shape[0]
    if d_h_seq.shape != (steps, batch, hidden):
        raise ShapeError(f"upstream gradient {d_h_seq.shape} != [T,B,H] {(steps, batch, hidden)}")
    dtype = cache.gates.dtype
    dh_next = np.zeros((batch, hidden), dtype=dtype) if d_h_final is None else d_h_final.astype(dtype)
    dc_next = np.zeros((batch, hidden), dtype=dtype) if d_c_final is None else d_c_final.astype(dtype)
    w_h_t = w_h.T

    d_gates_all = np.zeros((steps, batch, 4 * hidden), dtype=dtype)
    d_w_x = np.zeros(w_x.shape, dtype=dtype)
    d_w_h = np.zeros(w_h.shape, dtype=dtype)
    d_bias = np.zeros(4 * hidden, dtype=dtype)
    d_x = np.zeros(x.shape, dtype=dtype)
    for t in reversed(range(steps)):
        if cache.mask is None:
            dh = dh_next + d_h_seq[t]
            d_gates, dc_prev = _step_gate_grads(cache, t, dh, dc_next, hidden)
            dh_prev = matmul_array(d_gates, w_h_t)
        else:
            live = cache.mask[t][:, None]
            dh = dh_next + np.where(live, d_h_seq[t], 0)
            d_gates, dc_prev = _step_gate_grads(cache, t, dh, dc_next, hidden)
            d_gates = np.where(live, d_gates, 0)
            dh_prev = np.where(live, matmul_array(d_gates, w_h_t), dh)
            dc_prev = np.where(live, dc_prev, dc_next)
        d_gates_all[t] = d_gates
        if not deferred:
            d_w_x += matmul_array(x[t].T, d_gates)
            d_w_h += matmul_array(cache.h_prev[t].T, d_gates)
            d_bias += d_gates.sum(axis=0)
            d_x[t] = matmul_array(d_gates, w_x.T)
        dh_next, dc_next = dh_prev, dc_prev

    if deferred:
        flat_gates = d_gates_all.reshape(steps * batch, 4 * hidden)
        d_w_x = matmul_array(x.reshape(steps * batch, features).T, flat_gates)
        d_w_h = matmul_array(cache.h_prev.reshape(steps * batch, hidden).T, flat_gates)
        d_bias = flat_gates.sum(axis=0)
        d_x = matmul_array(flat_gates, w_x.T).reshape(steps, batch, features)
    return LstmGrads(w_x=d_w_x, w_h=d_w_h, bias=d_bias, x_seq=d_x, h0=dh_next, c0=dc_next)


def backward_arrays(
    cache: Optional[LstmCache],
    w_x: np.ndarray,
    w_h: np.ndarray,
    d_h_seq: np.ndarray,
    d_h_final: Optional[np.ndarray] = None,
    d_c_final: Optional[np.ndarray] = None,
    deferred: bool = True,
) -> LstmGrads:
    return _backward(cache, w_x, w_h, d_h_seq, d_h_final, d_c_final, deferred)


def _unpack(x_seq: Tensor, params: LstmParams, init: LstmState):
    return x_seq.data, params.w_x.data, params.w_h.data, params.bias.data, init.h.data, init.c.data


def lstm_forward_standard(
    x_seq: Tensor,
    params: LstmParams,
    init: LstmState,
    mask: Optional[np.ndarray] = None,
) -> LstmForward:
    return forward_arrays(*_unpack(x_seq, params, init), hoisted=False, mask=mask)


def lstm_forward_hoisted(
    x_seq: Tensor,
    params: LstmParams,
    init: LstmState,
    mask: Optional[np.ndarray] = None,
) -> LstmForward:
    result = forward_arrays(*_unpack(x_seq, params, init), hoisted=True, mask=mask)
    logger.debug("hoisted projection: %d rows in one call", result.stats.rows_per_call)
    return result


def lstm_backward_deferred(
    params: LstmParams,
    forward: Optional[LstmForward],
    d_h_seq: np.ndarray,
    d_h_final: Optional[np.ndarray] = None,
    d_c_final: Optional[np.ndarray] = None,
) -> LstmGrads:
    """Parameter gradients with the weight contraction done once after the loop."""

    cache = forward.cache if forward is not None else None
    return _backward(cache, params.w_x.data, params.w_h.data, d_h_seq, d_h_final, d_c_final, deferred=True)


def lstm_backward_stepwise(
    params: LstmParams,
    forward: Optional[LstmForward],
    d_h_seq: np.ndarray,
    d_h_final: Optional[np.ndarray] = None,
    d_c_final: Optional[np.ndarray] = None,
) -> LstmGrads:
    cache = forward.cache if forward is not None else None
    return _backward(cache, params.w_x.data, params.w_h.data, d_h_seq, d_h_final, d_c_final, deferred=False)


def concat_input_features(x_seq: Tensor, extra: Tensor) -> Tensor:
    """Append an extra per-step feature block (e.g. a bidirectional or attention output)."""

    if len(extra.shape) != 3 or extra.shape[:2] != x_seq.shape[:2]:
        raise ShapeError(f"extra features {extra.shape} must share [T,B] with x_seq {x_seq.shape}")
    return Tensor(data=np.concatenate([x_seq.data, extra.data], axis=2))
