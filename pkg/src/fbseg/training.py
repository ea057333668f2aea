"""Adam optimizer and the full-trajectory training loop.

The feedback model unrolls its T update steps on one tape and backpropagates
a loss summed over every per-step prediction, so each optimizer step sees
the gradient accumulated across the whole trajectory.  The feedforward
baseline takes the same number of optimizer steps from a single-pass loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from fbseg import autodiff as ad
from fbseg.autodiff import ContractError, Tape, Tensor, backward
from fbseg.network import (
    ArchConfig,
    DivergenceError,
    ModelParams,
    TrajectoryRecord,
    feedforward_predict,
    run_trajectory,
)
from fbseg.seeding import stream


@dataclass
class OptimizerState:
    """Per-parameter Adam moments plus the shared step counter."""

    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    w: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params: ModelParams, learning_rate: float = 0.01,
                   beta1: float = 0.9, beta2: float = 0.999,
                   epsilon: float = 1e-8) -> "OptimizerState":
        state = cls(learning_rate=learning_rate, beta1=beta1, beta2=beta2,
                    epsilon=epsilon)
        for t in params.tensors():
            state.m.append(np.zeros_like(t.values))
            state.w.append(np.zeros_like(t.values))
        return state


def adam_step(params: ModelParams, opt: OptimizerState) -> None:
    """One bias-corrected Adam update from the accumulated grads.

    Caller zeroes grads afterwards; parameters with no gradient (never
    touched by the loss) stay untouched because their moments stay zero.
    """
    opt.step_count += 1
    t = opt.step_count
    bc1 = 1.0 - opt.beta1 ** t
    bc2 = 1.0 - opt.beta2 ** t
    for i, (name, tensor) in enumerate(params.named()):
        grad = tensor.grad
        if grad is None:
            grad = np.zeros_like(tensor.values)
        if not np.isfinite(grad).all():
            raise DivergenceError(f"non-finite gradient for {name} at step {t}")
        opt.m[i] = opt.beta1 * opt.m[i] + (1.0 - opt.beta1) * grad
        opt.w[i] = opt.beta2 * opt.w[i] + (1.0 - opt.beta2) * grad * grad
        m_hat = opt.m[i] / bc1
        w_hat = opt.w[i] / bc2
        # new array, not in-place: tape closures may still reference the old one
        tensor.values = tensor.values - opt.learning_rate * m_hat / (np.sqrt(w_hat) + opt.epsilon)


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 1
    learning_rate: float = 0.01
    timesteps: int = 5
    tau: float = 1.0
    use_decay: bool = True
    use_softmax_projection: bool = True
    feedback_enabled: bool = True
    seed: int = 0
    clip_grad_norm: float | None = None  # opt-in safety valve for ablations

    def __post_init__(self):
        if self.epochs < 1:
            raise ContractError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size != 1:
            raise ContractError("only batch size 1 is supported")

    def arch(self, **overrides) -> ArchConfig:
        base = dict(
            timesteps=self.timesteps,
            tau=self.tau,
            feedback=self.feedback_enabled,
            use_decay=self.use_decay,
            use_softmax=self.use_softmax_projection,
        )
        base.update(overrides)
        return ArchConfig(**base)


def one_hot_mask(mask: np.ndarray, n_classes: int) -> np.ndarray:
    out = np.zeros((1, n_classes, *mask.shape))
    for c in range(n_classes):
        out[0, c] = mask == c
    return out


def trajectory_loss(record: TrajectoryRecord, target: Tensor) -> Tensor:
    """Sum of per-step cross-entropies over the whole trajectory: one
    backward through this scalar accumulates every step's gradient.

    Evaluated in fused log-softmax form on the recorded head logits, which
    equals the per-step cross-entropy of the recorded predictions but keeps
    a live gradient on saturated pixels.
    """
    if not record.predictions:
        raise ContractError("trajectory record holds no predictions")
    if len(record.predictions) != len(record.deltas) or len(record.logits) != len(record.deltas):
        raise ContractError(
            f"record length mismatch: {len(record.predictions)} predictions "
            f"for {len(record.deltas)} steps")
    total = ad.softmax_cross_entropy(record.logits[0], target)
    for logits in record.logits[1:]:
        total = ad.add(total, ad.softmax_cross_entropy(logits, target))
    return total


def _clip_grads(params: ModelParams, max_norm: float) -> None:
    total = 0.0
    for t in params.tensors():
        if t.grad is not None:
            total += float((t.grad ** 2).sum())
    norm = np.sqrt(total)
    if norm > max_norm:
        factor = max_norm / norm
        for t in params.tensors():
            if t.grad is not None:
                t.grad = t.grad * factor


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    max_delta_norm: float


def train(params: ModelParams, samples, config: TrainConfig):
    """Train in place over (image, mask) pairs; returns per-epoch stats.

    Deterministic for a given (config, seed): the per-epoch visit order is
    drawn from a seeded stream and every optimizer step is pure numpy.
    """
    if len(samples) == 0:
        raise ContractError("training requires a nonempty dataset")
    arch = params.config
    if (arch.feedback != config.feedback_enabled
            or arch.use_decay != config.use_decay
            or arch.use_softmax != config.use_softmax_projection):
        raise ContractError("params were built for a different flag combination")
    opt = OptimizerState.for_params(params, learning_rate=config.learning_rate)
    curve = []
    for epoch in range(config.epochs):
        order = stream("epoch-order", config.seed, epoch).permutation(len(samples))
        losses = []
        max_delta = 0.0
        for pos, idx in enumerate(order):
            image, mask = samples[idx]
            x = Tensor(np.asarray(image, dtype=np.float64)[None, None])
            y = Tensor(one_hot_mask(np.asarray(mask), arch.n_classes))
            tape = Tape()
            try:
                with tape:
                    if config.feedback_enabled:
                        record = run_trajectory(x, params, config.timesteps)
                        loss = trajectory_loss(record, y)
                        for delta in record.deltas:
                            max_delta = max(max_delta, float(np.linalg.norm(delta.values)))
                    else:
                        logits, _ = feedforward_predict(x, params)
                        loss = ad.softmax_cross_entropy(logits, y)
                    loss_value = loss.item()
                    if not np.isfinite(loss_value):
                        raise DivergenceError(
                            f"non-finite loss at epoch {epoch}, instance {idx}",
                            epoch=epoch, instance=int(idx))
                    backward(loss)
            except DivergenceError as err:
                err.epoch = epoch if err.epoch is None else err.epoch
                err.instance = int(idx) if err.instance is None else err.instance
                raise
            finally:
                tape.clear()
            if config.clip_grad_norm is not None:
                _clip_grads(params, config.clip_grad_norm)
            adam_step(params, opt)
            params.zero_grads()
            if not params.all_finite():
                raise DivergenceError(
                    f"non-finite parameters after epoch {epoch}, instance {idx}",
                    epoch=epoch, instance=int(idx))
            losses.append(loss_value)
        curve.append(EpochStats(epoch=epoch, mean_loss=float(np.mean(losses)),
                                max_delta_norm=max_delta))
    return curve
