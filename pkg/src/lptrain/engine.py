"""Rounded training: forward/backward with one rounding per tensor per step.

Internal arithmetic runs in float64 and is never rounded; rounding happens
exactly once per tensor-set member per step, at the boundaries:

* ``x1``      the input batch as it enters the network
* ``x{i+1}``  each operator's output
* ``w{j}``    the working copy of each weight, taken from the master
* ``dx{m+1}`` the backward seed, ``loss_scale * 1``
* ``dx{i}``   each accumulated activation gradient
* ``dw{j}``   each weight gradient (returned unscaled for the update)

Master weights live outside the rounded tensor set in a wide format
(fp32 by default) and are updated by plain SGD.  Dynamic loss scaling
backs off and skips the update on any backward overflow and grows after a
clean interval; overflow-driven promotion irreversibly moves forward
tensors whose per-step overflow ratio exceeds a threshold to the hi level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .assign import PrecisionAssignment, PrecisionCandidate, low_precision_ratio, materialize_formats
from .fpnum import FP32, FpFormat, round_tensor
from .graph import Graph, OpNode

__all__ = [
    "TrainConfig",
    "StepStats",
    "EpochRecord",
    "TrainResult",
    "LossScaler",
    "init_weights",
    "forward_backward",
    "raw_loss",
    "evaluate_accuracy",
    "sgd_step",
    "promote_overflowing",
    "train",
]


# ---------------------------------------------------------------------------
# operator kernels (batched, float64, no rounding)
# ---------------------------------------------------------------------------


def _im2col(x: np.ndarray, k: int, pad: int):
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    b = x.shape[0]
    win = sliding_window_view(x, (k, k), axis=(2, 3))  # (B, C, Ho, Wo, k, k)
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b, ho * wo, -1)
    return cols, ho, wo


def _conv_forward(x, wmat, pad):
    oc = wmat.shape[0]
    cols, ho, wo = _im2col(x, wmat.shape[2], pad)
    y = cols @ wmat.reshape(oc, -1).T
    return y.transpose(0, 2, 1).reshape(x.shape[0], oc, ho, wo)


def _conv_backward(gout, x, wmat, pad):
    b, oc, ho, wo = gout.shape
    k = wmat.shape[2]
    gm = gout.reshape(b, oc, ho * wo).transpose(0, 2, 1)  # (B, HoWo, OC)
    cols, _, _ = _im2col(x, k, pad)
    dw = np.einsum("bno,bnc->oc", gm, cols).reshape(wmat.shape)
    dcols = gm @ wmat.reshape(oc, -1)  # (B, HoWo, C*k*k)
    _, c, h, w = x.shape
    buf = np.zeros((b, c, h + 2 * pad, w + 2 * pad))
    dc = dcols.reshape(b, ho, wo, c, k, k).transpose(0, 3, 1, 2, 4, 5)
    for di in range(k):
        for dj in range(k):
            buf[:, :, di : di + ho, dj : dj + wo] += dc[:, :, :, :, di, dj]
    return dw, buf[:, :, pad : pad + h, pad : pad + w] if pad else buf


def _softmax(z):
    zs = z - z.max(axis=1, keepdims=True)
    e = np.exp(zs)
    return e / e.sum(axis=1, keepdims=True)


def _ce_forward(z, labels):
    # logsumexp keeps the loss finite even for saturated logits
    zmax = z.max(axis=1)
    lse = zmax + np.log(np.exp(z - zmax[:, None]).sum(axis=1))
    return np.asarray((lse - z[np.arange(len(labels)), labels]).mean())


def _forward_op(op: OpNode, inputs, param, targets):
    k = op.kind
    if k == "dense":
        return inputs[0] @ param.T
    if k == "conv2d":
        return _conv_forward(inputs[0], param, op.padding)
    if k == "relu":
        return np.maximum(inputs[0], 0.0)
    if k == "global_avg_pool":
        return inputs[0].mean(axis=(2, 3))
    if k == "scale":
        return op.scale * inputs[0]
    if k == "add":
        return inputs[0] + inputs[1]
    if k == "split":
        return inputs[0]
    if k == "sum":
        out = None
        for a in inputs:
            s = a.reshape(a.shape[0], -1).sum(axis=1)
            out = s if out is None else out + s
        return out
    if k == "softmax_cross_entropy":
        return _ce_forward(inputs[0], targets)
    if k == "l1_loss":
        return np.asarray((op.scale * np.abs(inputs[0] - targets)).mean())
    raise ValueError(f"unknown op kind {k!r}")


def _backward_op(op: OpNode, gout, inputs, param, targets):
    """Gradients of the loss w.r.t. each input (aligned with op.inputs)
    and w.r.t. the parameters (or None)."""
    k = op.kind
    if k == "dense":
        return [gout @ param], gout.T @ inputs[0]
    if k == "conv2d":
        dw, dx = _conv_backward(gout, inputs[0], param, op.padding)
        return [dx], dw
    if k == "relu":
        return [gout * (inputs[0] > 0)], None
    if k == "global_avg_pool":
        b, c, h, w = inputs[0].shape
        return [np.broadcast_to(gout[:, :, None, None] / (h * w), (b, c, h, w))], None
    if k == "scale":
        return [op.scale * gout], None
    if k == "add":
        return [gout, gout], None
    if k == "split":
        return [gout], None
    if k == "sum":
        return [np.broadcast_to(gout.reshape(-1, *([1] * (a.ndim - 1))), a.shape) for a in inputs], None
    if k == "softmax_cross_entropy":
        z = inputs[0]
        b = z.shape[0]
        p = _softmax(z)
        p[np.arange(b), targets] -= 1.0
        return [(float(gout) / b) * p], None
    if k == "l1_loss":
        v = inputs[0]
        b = v.shape[0]
        return [(float(gout) * op.scale / b) * np.sign(v - targets)], None
    raise ValueError(f"unknown op kind {k!r}")


# ---------------------------------------------------------------------------
# rounded step
# ---------------------------------------------------------------------------


@dataclass
class StepStats:
    loss: float
    grads: dict[int, np.ndarray]
    overflow: dict[str, tuple[int, int]]
    backward_overflow: bool
    round_calls: int


def _gather(op: OpNode, values) -> list[np.ndarray]:
    out = []
    for ref in op.inputs:
        v = values[ref.tensor]
        if ref.is_slice:
            v = v[:, ref.start : ref.stop]
        out.append(v)
    return out


def forward_backward(
    g: Graph,
    formats: dict[str, FpFormat],
    weights: dict[int, np.ndarray],
    x_batch: np.ndarray,
    y_batch: np.ndarray,
    loss_scale: float = 1.0,
) -> StepStats:
    """One rounded training step on a batch.

    Every tensor-set member is rounded exactly once; weight gradients come
    back divided by ``loss_scale`` (the division happens after rounding, on
    the float64 carrier).  ``overflow`` maps every tensor id to its
    (saturated elements, total elements) for this step.
    """
    m = g.op_count
    stats = StepStats(math.nan, {}, {}, False, 0)

    def site(tid: str, arr) -> np.ndarray:
        rt = round_tensor(formats[tid], arr)
        stats.overflow[tid] = (rt.overflow_count, rt.element_count)
        stats.round_calls += 1
        if rt.overflow_count and g.meta(tid).is_backward:
            stats.backward_overflow = True
        return rt.values

    values = {1: site("x1", np.asarray(x_batch, dtype=np.float64))}
    params = {}
    for op in g.ops:
        if op.has_params:
            params[op.index] = site(f"w{op.index}", weights[op.index])
        raw = _forward_op(
            op,
            _gather(op, values),
            params.get(op.index),
            y_batch if op.is_loss else None,
        )
        values[op.index + 1] = site(f"x{op.index + 1}", raw)
    stats.loss = float(values[m + 1])

    buf = {j: np.zeros_like(values[j]) for j in range(1, m + 1)}
    buf[m + 1] = loss_scale * np.ones_like(values[m + 1])
    for op in reversed(g.ops):
        i = op.index
        gout = site(f"dx{i + 1}", buf[i + 1])
        in_grads, dparam = _backward_op(
            op,
            gout,
            _gather(op, values),
            params.get(i),
            y_batch if op.is_loss else None,
        )
        for ref, gr in zip(op.inputs, in_grads):
            if ref.is_slice:
                buf[ref.tensor][:, ref.start : ref.stop] += gr
            else:
                buf[ref.tensor] += gr
        if op.has_params:
            stats.grads[i] = site(f"dw{i}", dparam) / loss_scale
    site("dx1", buf[1])
    return stats


def raw_loss(g: Graph, weights: dict[int, np.ndarray], x_batch, y_batch) -> float:
    """Loss of the unrounded float64 forward pass (no format anywhere)."""
    values = {1: np.asarray(x_batch, dtype=np.float64)}
    for op in g.ops:
        values[op.index + 1] = _forward_op(
            op,
            _gather(op, values),
            weights.get(op.index),
            y_batch if op.is_loss else None,
        )
    return float(values[g.op_count + 1])


def evaluate_accuracy(
    g: Graph, formats: dict[str, FpFormat], weights, x_eval, y_eval
) -> float:
    """Classification accuracy of the rounded forward pass."""
    if g.ops[-1].kind != "softmax_cross_entropy":
        raise ValueError("accuracy needs a classification graph")

    def site(tid, arr):
        return round_tensor(formats[tid], arr).values

    values = {1: site("x1", np.asarray(x_eval, dtype=np.float64))}
    for op in g.ops[: g.model_op_count]:
        param = None
        if op.has_params:
            param = site(f"w{op.index}", weights[op.index])
        raw = _forward_op(op, _gather(op, values), param, None)
        values[op.index + 1] = site(f"x{op.index + 1}", raw)
    logits = values[g.model_op_count + 1]
    return float((logits.argmax(axis=1) == y_eval).mean())


# ---------------------------------------------------------------------------
# update rules
# ---------------------------------------------------------------------------


def init_weights(g: Graph, seed: int, master_format: FpFormat = FP32) -> dict[int, np.ndarray]:
    """Uniform(+-1/sqrt(fan_in)) init, rounded into the master format."""
    rng = np.random.default_rng(seed)
    return _draw_weights(g, rng, master_format)


def _draw_weights(g, rng, master_format):
    weights = {}
    for op in g.ops:
        if not op.has_params:
            continue
        if op.kind == "dense":
            fan_in = op.param_shape[1]
        else:  # conv2d
            fan_in = op.param_shape[1] * op.param_shape[2] * op.param_shape[3]
        bound = 1.0 / math.sqrt(fan_in)
        w = rng.uniform(-bound, bound, op.param_shape)
        weights[op.index] = round_tensor(master_format, w).values
    return weights


def sgd_step(
    weights: dict[int, np.ndarray],
    grads: dict[int, np.ndarray],
    learning_rate: float,
    master_format: FpFormat = FP32,
) -> dict[int, np.ndarray]:
    """One SGD update on the master weights, rounded to the master format."""
    return {
        i: round_tensor(master_format, w - learning_rate * grads[i]).values
        for i, w in weights.items()
    }


@dataclass
class LossScaler:
    """Dynamic loss scaling: back off and skip on overflow, grow when clean.

    Back-off wins when an overflow lands on a step where growth is due.
    """

    scale: float = 2.0**16
    growth_factor: float = 2.0
    backoff_factor: float = 0.5
    growth_interval_steps: int = 1
    enabled: bool = True
    steps_since_growth: int = 0

    def update(self, overflowed: bool) -> bool:
        """Advance one step; returns True when the update must be skipped."""
        if not self.enabled:
            return False
        if overflowed:
            self.scale *= self.backoff_factor
            self.steps_since_growth = 0
            return True
        self.steps_since_growth += 1
        if self.steps_since_growth >= self.growth_interval_steps:
            self.scale *= self.growth_factor
            self.steps_since_growth = 0
        return False


def promote_overflowing(
    g: Graph,
    assignment: PrecisionAssignment,
    overflow: dict[str, tuple[int, int]],
    threshold: float,
) -> list[str]:
    """Promote forward tensors whose step overflow ratio strictly exceeds
    ``threshold`` to the hi level. Promotion is irreversible and never
    touches backward tensors."""
    promoted = []
    for t in g.tensor_ids():
        if t not in overflow or not g.meta(t).is_forward:
            continue
        count, total = overflow[t]
        if total and count / total > threshold and assignment.level_of[t] == "lo":
            assignment.level_of[t] = "hi"
            promoted.append(t)
    return promoted


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.1
    promote_threshold: float = 0.01
    promotion_enabled: bool = True
    loss_scaling_enabled: bool = True
    loss_scale_init: float = 2.0**16
    growth_factor: float = 2.0
    backoff_factor: float = 0.5
    growth_interval: float = 1.0  # fraction of an epoch
    seed: int = 0
    master_format: FpFormat = FP32

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 < self.promote_threshold < 1:
            raise ValueError("promote_threshold must lie in (0, 1)")
        if self.loss_scale_init <= 0 or self.growth_interval <= 0:
            raise ValueError("loss_scale_init and growth_interval must be positive")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    eval_accuracy: float
    eval_accuracy_fp32: float
    low_ratio: float
    loss_scale_end: float
    promotions: int
    skipped_steps: int


@dataclass
class TrainResult:
    weights: dict[int, np.ndarray]
    records: list[EpochRecord]
    assignment: PrecisionAssignment
    promotion_log: list[tuple[int, str]] = field(default_factory=list)
    step_low_ratio: list[float] = field(default_factory=list)

    @property
    def mean_low_ratio(self) -> float:
        return float(np.mean([r.low_ratio for r in self.records]))

    @property
    def best_eval_accuracy(self) -> float:
        return max(r.eval_accuracy for r in self.records)


def train(
    g: Graph,
    candidate: PrecisionCandidate,
    assignment: PrecisionAssignment,
    cfg: TrainConfig,
    data: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray],
) -> TrainResult:
    """Seeded minibatch training with per-step order:
    forward/backward, promotion, loss-scale update, SGD (unless skipped)."""
    x_train, y_train, x_eval, y_eval = data
    rng = np.random.default_rng(cfg.seed)
    weights = _draw_weights(g, rng, cfg.master_format)
    live = assignment.copy()
    steps_per_epoch = max(1, math.ceil(len(x_train) / cfg.batch_size))
    scaler = LossScaler(
        scale=cfg.loss_scale_init if cfg.loss_scaling_enabled else 1.0,
        growth_factor=cfg.growth_factor,
        backoff_factor=cfg.backoff_factor,
        growth_interval_steps=max(1, round(cfg.growth_interval * steps_per_epoch)),
        enabled=cfg.loss_scaling_enabled,
    )
    fp32_formats = {t: FP32 for t in g.tensor_ids()}
    records: list[EpochRecord] = []
    promotion_log: list[tuple[int, str]] = []
    step_ratios: list[float] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(x_train))
        losses = []
        promos = 0
        skipped = 0
        for lo in range(0, len(x_train), cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            formats = materialize_formats(candidate, live)
            st = forward_backward(
                g, formats, weights, x_train[idx], y_train[idx], scaler.scale
            )
            losses.append(st.loss)
            if cfg.promotion_enabled:
                newly = promote_overflowing(g, live, st.overflow, cfg.promote_threshold)
                promos += len(newly)
                promotion_log += [(step, t) for t in newly]
            if scaler.update(st.backward_overflow):
                skipped += 1
            else:
                weights = sgd_step(weights, st.grads, cfg.learning_rate, cfg.master_format)
            step_ratios.append(low_precision_ratio(g, live))
            step += 1
        formats = materialize_formats(candidate, live)
        records.append(
            EpochRecord(
                epoch=epoch,
                train_loss=float(np.mean(losses)),
                eval_accuracy=evaluate_accuracy(g, formats, weights, x_eval, y_eval),
                eval_accuracy_fp32=evaluate_accuracy(g, fp32_formats, weights, x_eval, y_eval),
                low_ratio=low_precision_ratio(g, live),
                loss_scale_end=scaler.scale,
                promotions=promos,
                skipped_steps=skipped,
            )
        )
    return TrainResult(weights, records, live, promotion_log, step_ratios)
