"""The two toy classifiers trained by the data-parallel loop.

``ConvNet``: conv K=3 SAME -> batch norm over the whole global batch -> ReLU
-> dense -> softmax cross-entropy. ``LstmClassifier``: hoisted LSTM -> dense
on the final hidden state. Both run one simulated core per input shard and
return per-core gradient sets that still have to be summed across cores.

The loss is the global-batch mean, so each core's gradient is its share of
the global gradient and summing over cores reproduces the single-core value.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from .errors import ShapeError
from .rnn_opt import backward_arrays, forward_arrays
from .spatial_partition import all_reduce_group, distributed_moments
from .tensor_core import (
    BN_EPSILON,
    ConvParams,
    Padding,
    Tensor,
    bf16_round,
    conv2d_array,
    conv2d_backward_array,
    matmul_array,
    normalize_array,
)
from .torus_sim import GradientSet

logger = logging.getLogger(__name__)

BN_MOMENTUM = 0.9

Arrays = Dict[str, np.ndarray]


@dataclass(frozen=True, eq=False)
class BnState:
    """Running batch-norm statistics used at evaluation time."""

    mean: np.ndarray
    var: np.ndarray


@dataclass(frozen=True, eq=False)
class StepResult:
    loss: float
    grads: List[GradientSet]
    state: Optional[BnState]


class Network(Protocol):
    input_shape: Tuple[int, ...]
    classes: int

    def init_params(self, rng: np.random.Generator) -> GradientSet: ...

    def init_state(self) -> Optional[BnState]: ...

    def forward_backward(
        self,
        params: GradientSet,
        state: Optional[BnState],
        shards: Sequence[np.ndarray],
        labels: Sequence[np.ndarray],
    ) -> StepResult: ...

    def predict(self, params: GradientSet, state: Optional[BnState], x: np.ndarray) -> np.ndarray: ...


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray, scale: int) -> Tuple[np.ndarray, np.ndarray]:
    """Summed cross-entropy divided by ``scale``, and its gradient w.r.t. the logits."""

    if logits.ndim != 2 or logits.shape[1] == 0:
        raise ShapeError(f"logits must be [B, C] with C > 0, got shape {logits.shape}")
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"labels shape {labels.shape} does not match {logits.shape[0]} rows")
    divisor = logits.dtype.type(scale)
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    denom = exp.sum(axis=1, keepdims=True)
    rows = np.arange(logits.shape[0])
    log_probs = shifted - np.log(denom)
    loss = -log_probs[rows, labels].sum() / divisor
    d_logits = exp / denom
    d_logits[rows, labels] -= logits.dtype.type(1.0)
    return np.asarray(loss), d_logits / divisor


def _sum_losses(losses: Sequence[np.ndarray]) -> float:
    cores = list(range(len(losses)))
    return float(all_reduce_group([np.reshape(l, 1) for l in losses], cores)[0])


def _check_shards(shards: Sequence[np.ndarray], labels: Sequence[np.ndarray], input_shape: Tuple[int, ...]) -> int:
    if not shards or len(shards) != len(labels):
        raise ShapeError(f"{len(shards)} input shards for {len(labels)} label shards")
    for core, (x, y) in enumerate(zip(shards, labels)):
        if x.shape[1:] != input_shape:
            raise ShapeError(f"core {core} inputs have shape {x.shape[1:]}, expected {input_shape}")
        if x.shape[0] != y.shape[0] or x.shape[0] == 0:
            raise ShapeError(f"core {core} has {x.shape[0]} inputs and {y.shape[0]} labels")
    return sum(y.shape[0] for y in labels)


class ConvNet:
    """conv(K=3, SAME, no bias) -> BN -> ReLU -> dense."""

    def __init__(self, input_shape: Sequence[int], channels: int, classes: int, bf16_conv: bool = False) -> None:
        if len(input_shape) != 3:
            raise ShapeError(f"ConvNet input must be [H, W, C], got {tuple(input_shape)}")
        self.input_shape = tuple(int(v) for v in input_shape)
        self.channels = channels
        self.classes = classes
        self.bf16_conv = bf16_conv
        self.conv = ConvParams(
            kernel_size=3,
            in_channels=self.input_shape[2],
            out_channels=channels,
            stride=1,
            padding=Padding.SAME,
        )

    @property
    def flat_features(self) -> int:
        return self.input_shape[0] * self.input_shape[1] * self.channels

    def init_params(self, rng: np.random.Generator) -> GradientSet:
        fan_in = 9 * self.input_shape[2]
        return GradientSet.from_arrays({
            "conv/kernel": rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(3, 3, self.input_shape[2], self.channels)),
            "bn/gamma": np.ones(self.channels),
            "bn/beta": np.zeros(self.channels),
            "dense/kernel": rng.normal(0.0, np.sqrt(1.0 / self.flat_features), size=(self.flat_features, self.classes)),
            "dense/bias": np.zeros(self.classes),
        })

    def init_state(self) -> BnState:
        return BnState(mean=np.zeros(self.channels, dtype=np.float32), var=np.ones(self.channels, dtype=np.float32))

    def loss_and_grads(
        self,
        arrays: Arrays,
        shards: Sequence[np.ndarray],
        labels: Sequence[np.ndarray],
    ) -> Tuple[float, List[Arrays], Tuple[np.ndarray, np.ndarray]]:
        """Array-level pass; float64 parameters and inputs give a float64 pass."""

        global_batch = _check_shards(shards, labels, self.input_shape)
        cores = list(range(len(shards)))
        kernel = arrays["conv/kernel"]
        gamma, beta = arrays["bn/gamma"], arrays["bn/beta"]
        w_dense, b_dense = arrays["dense/kernel"], arrays["dense/bias"]
        if self.bf16_conv:
            kernel = bf16_round(kernel)
            shards = [bf16_round(x) for x in shards]

        conv_out = [conv2d_array(x, kernel, self.conv) for x in shards]
        rows = [z.reshape(-1, self.channels) for z in conv_out]
        mean, var, count = distributed_moments(rows, cores)
        inv_std = 1.0 / np.sqrt(var + BN_EPSILON)

        losses: List[np.ndarray] = []
        cache = []
        for core in cores:
            x_hat = normalize_array(rows[core], mean, var)
            pre_act = gamma * x_hat + beta
            flat = np.maximum(pre_act, 0).reshape(shards[core].shape[0], -1)
            logits = matmul_array(flat, w_dense) + b_dense
            loss, d_logits = softmax_cross_entropy(logits, labels[core], global_batch)
            losses.append(loss)
            cache.append((x_hat, pre_act, flat, d_logits))

        # BN backward needs the global sums of dx_hat and dx_hat * x_hat.
        partials: List[Optional[np.ndarray]] = []
        upstream = []
        for core in cores:
            x_hat, pre_act, flat, d_logits = cache[core]
            d_act = matmul_array(d_logits, w_dense.T).reshape(-1, self.channels)
            d_pre = np.where(pre_act > 0, d_act, 0)
            d_x_hat = d_pre * gamma
            partials.append(np.concatenate([
                d_x_hat.astype(np.float64).sum(axis=0),
                (d_x_hat.astype(np.float64) * x_hat).sum(axis=0),
            ]))
            upstream.append((d_pre, d_x_hat))
        merged = all_reduce_group(partials, cores)
        mean_d = merged[:self.channels] / count
        mean_dx = merged[self.channels:] / count

        grads: List[Arrays] = []
        for core in cores:
            x_hat, _, flat, d_logits = cache[core]
            d_pre, d_x_hat = upstream[core]
            d_conv = (inv_std * (d_x_hat - mean_d - x_hat * mean_dx)).astype(x_hat.dtype)
            _, d_kernel = conv2d_backward_array(shards[core], kernel, d_conv.reshape(conv_out[core].shape), self.conv)
            grads.append({
                "conv/kernel": d_kernel,
                "bn/gamma": (d_pre * x_hat).sum(axis=0),
                "bn/beta": d_pre.sum(axis=0),
                "dense/kernel": matmul_array(flat.T, d_logits),
                "dense/bias": d_logits.sum(axis=0),
            })
        return _sum_losses(losses), grads, (mean, var)

    def forward_backward(
        self,
        params: GradientSet,
        state: Optional[BnState],
        shards: Sequence[np.ndarray],
        labels: Sequence[np.ndarray],
    ) -> StepResult:
        loss, grads, (mean, var) = self.loss_and_grads(params.as_arrays(), shards, labels)
        previous = state if state is not None else self.init_state()
        new_state = BnState(
            mean=(BN_MOMENTUM * previous.mean + (1.0 - BN_MOMENTUM) * mean).astype(np.float32),
            var=(BN_MOMENTUM * previous.var + (1.0 - BN_MOMENTUM) * var).astype(np.float32),
        )
        return StepResult(loss=loss, grads=[_as_gradient_set(params, g) for g in grads], state=new_state)

    def predict(self, params: GradientSet, state: Optional[BnState], x: np.ndarray) -> np.ndarray:
        """Logits with the running BN statistics."""

        stats = state if state is not None else self.init_state()
        kernel = params["conv/kernel"].data
        if self.bf16_conv:
            kernel, x = bf16_round(kernel), bf16_round(x)
        rows = conv2d_array(x.astype(np.float32), kernel, self.conv).reshape(-1, self.channels)
        x_hat = normalize_array(rows, stats.mean.astype(np.float64), stats.var.astype(np.float64))
        pre_act = params["bn/gamma"].data * x_hat + params["bn/beta"].data
        flat = np.maximum(pre_act, 0).reshape(x.shape[0], -1)
        return matmul_array(flat, params["dense/kernel"].data) + params["dense/bias"].data


class LstmClassifier:
    """Hoisted LSTM over [T, F] sequences, dense layer on the final hidden state."""

    def __init__(self, steps: int, features: int, hidden: int, classes: int) -> None:
        self.input_shape = (steps, features)
        self.hidden = hidden
        self.classes = classes

    def init_params(self, rng: np.random.Generator) -> GradientSet:
        features = self.input_shape[1]
        scale = 1.0 / np.sqrt(self.hidden)
        return GradientSet.from_arrays({
            "lstm/w_x": rng.uniform(-scale, scale, size=(features, 4 * self.hidden)),
            "lstm/w_h": rng.uniform(-scale, scale, size=(self.hidden, 4 * self.hidden)),
            "lstm/bias": np.zeros(4 * self.hidden),
            "dense/kernel": rng.normal(0.0, scale, size=(self.hidden, self.classes)),
            "dense/bias": np.zeros(self.classes),
        })

    def init_state(self) -> None:
        return None

    def _final_hidden(self, arrays: Arrays, x: np.ndarray):
        x_seq = np.ascontiguousarray(np.transpose(x, (1, 0, 2)))
        zeros = np.zeros((x.shape[0], self.hidden), dtype=x_seq.dtype)
        return forward_arrays(x_seq, arrays["lstm/w_x"], arrays["lstm/w_h"], arrays["lstm/bias"], zeros, zeros, hoisted=True)

    def loss_and_grads(
        self,
        arrays: Arrays,
        shards: Sequence[np.ndarray],
        labels: Sequence[np.ndarray],
    ) -> Tuple[float, List[Arrays]]:
        global_batch = _check_shards(shards, labels, self.input_shape)
        losses: List[np.ndarray] = []
        grads: List[Arrays] = []
        for x, y in zip(shards, labels):
            forward = self._final_hidden(arrays, x)
            h_final = forward.h_final
            logits = matmul_array(h_final, arrays["dense/kernel"]) + arrays["dense/bias"]
            loss, d_logits = softmax_cross_entropy(logits, y, global_batch)
            losses.append(loss)
            d_h = matmul_array(d_logits, arrays["dense/kernel"].T)
            lstm = backward_arrays(
                forward.cache,
                arrays["lstm/w_x"],
                arrays["lstm/w_h"],
                np.zeros_like(forward.h_seq),
                d_h_final=d_h,
            )
            grads.append({
                "lstm/w_x": lstm.w_x,
                "lstm/w_h": lstm.w_h,
                "lstm/bias": lstm.bias,
                "dense/kernel": matmul_array(h_final.T, d_logits),
                "dense/bias": d_logits.sum(axis=0),
            })
        return _sum_losses(losses), grads

    def forward_backward(
        self,
        params: GradientSet,
        state: Optional[BnState],
        shards: Sequence[np.ndarray],
        labels: Sequence[np.ndarray],
    ) -> StepResult:
        loss, grads = self.loss_and_grads(params.as_arrays(), shards, labels)
        return StepResult(loss=loss, grads=[_as_gradient_set(params, g) for g in grads], state=None)

    def predict(self, params: GradientSet, state: Optional[BnState], x: np.ndarray) -> np.ndarray:
        arrays = params.as_arrays()
        forward = self._final_hidden(arrays, x.astype(np.float32))
        return matmul_array(forward.h_final, arrays["dense/kernel"]) + arrays["dense/bias"]


def _as_gradient_set(params: GradientSet, grads: Arrays) -> GradientSet:
    return GradientSet(names=params.names, tensors=tuple(Tensor(data=grads[n]) for n in params.names))
