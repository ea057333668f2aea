"""Reverse-mode automatic differentiation on dense float64 arrays.

The engine is a classic Wengert list: every differentiable operation
executed while a :class:`Tape` is active appends a record (output, inputs,
adjoint rule).  ``backward`` replays the records in exact reverse execution
order and accumulates gradients into the ``grad`` buffers of leaf tensors.
Only the operations the feedback segmentation network needs are provided;
everything is single-threaded per tape (separate tapes may run in parallel
threads or processes).
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np



class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(ValueError):
    """An operation was called outside its contract (non-scalar loss, ...)."""


_TLS = threading.local()


def _tape_stack() -> list:
    stack = getattr(_TLS, "stack", None)
    if stack is None:
        stack = []
        _TLS.stack = stack
    return stack


def active_tape():
    """The innermost active tape, or None when not recording."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense float64 array with optional gradient accumulation.

    ``grad`` is populated by :func:`backward` for leaf tensors (tensors not
    produced by a recorded operation) and accumulates across repeated
    backward calls until :meth:`zero_grad` is called.
    """

    __slots__ = ("values", "requires_grad", "grad", "_tape")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape = None

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of executed operations, replayed in reverse by backward.

    Use as a context manager to activate recording.  Records are kept after
    the context exits (so backward can run outside it) and are dropped only
    by an explicit :meth:`clear`.
    """

    __slots__ = ("_records",)

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape context exited out of order")
        stack.pop()

    def __len__(self) -> int:
        return len(self._records)

    def clear(self) -> None:
        self._records.clear()


def _result(values: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap an op result, recording it when grads are needed and a tape is live."""
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(values, requires_grad=track)
    if track:
        out._tape = tape
        tape._records.append((out, tuple(inputs), backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """Replay the loss tensor's tape in reverse, accumulating leaf gradients.

    Repeated calls accumulate: callers must zero parameter grads between
    optimizer steps.
    """
    if loss.values.shape != ():
        raise ContractError(f"backward expects a scalar, got shape {loss.values.shape}")
    tape = loss._tape
    if tape is None:
        raise ContractError("backward: loss was not produced on an active tape")
    adjoints: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    for out, inputs, backward_fn in reversed(tape._records):
        grad_out = adjoints.pop(id(out), None)
        if grad_out is None:
            continue
        contribs = backward_fn(grad_out)
        for inp, contrib in zip(inputs, contribs):
            if contrib is None or not inp.requires_grad:
                continue
            if inp._tape is None:
                inp.grad = contrib if inp.grad is None else inp.grad + contrib
            else:
                key = id(inp)
                prev = adjoints.get(key)
                adjoints[key] = contrib if prev is None else prev + contrib


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")

    def bw(g):
        return (g, g)

    return _result(a.values + b.values, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    av, bv = a.values, b.values

    def bw(g):
        return (g * bv if a.requires_grad else None,
                g * av if b.requires_grad else None)

    return _result(av * bv, (a, b), bw)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def bw(g):
        return (g * s,)

    return _result(a.values * s, (a,), bw)


def relu(a: Tensor) -> Tensor:
    av = a.values

    def bw(g):
        return (g * (av > 0.0),)

    return _result(np.maximum(av, 0.0), (a,), bw)


def tensor_sum(a: Tensor) -> Tensor:
    shape = a.shape

    def bw(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(a.values.sum(), dtype=np.float64), (a,), bw)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 4 or b.values.ndim != 4:
        raise DimensionError("concat_channels expects rank-4 tensors")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise DimensionError(
            f"concat_channels: batch/spatial mismatch {a.shape} vs {b.shape}")
    ca = a.shape[1]

    def bw(g):
        return (np.ascontiguousarray(g[:, :ca]), np.ascontiguousarray(g[:, ca:]))

    return _result(np.concatenate((a.values, b.values), axis=1), (a, b), bw)


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    if a.values.ndim != 4:
        raise DimensionError("slice_channels expects a rank-4 tensor")
    if not (0 <= start <= stop <= a.shape[1]):
        raise DimensionError(
            f"slice_channels: [{start}:{stop}] out of range for {a.shape[1]} channels")
    shape = a.shape

    def bw(g):
        out = np.zeros(shape, dtype=np.float64)
        out[:, start:stop] = g
        return (out,)

    return _result(np.ascontiguousarray(a.values[:, start:stop]), (a,), bw)


# ---------------------------------------------------------------------------
# convolution / pooling / resampling


def conv2d(input: Tensor, kernel: Tensor, bias: Tensor,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over [B, C, H, W] with per-output-channel bias.

    Channels-first im2col: per kernel tap the copy runs over contiguous
    image rows, and the contraction is a single BLAS matmul.
    """
    if input.values.ndim != 4 or kernel.values.ndim != 4:
        raise DimensionError("conv2d expects rank-4 input and kernel")
    batch, cin, height, width = input.shape
    cout, cin_k, kh, kw = kernel.shape
    if cin_k != cin:
        raise DimensionError(
            f"conv2d: input has {cin} channels but kernel expects {cin_k}")
    if bias.shape != (cout,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    if stride < 1:
        raise DimensionError(f"conv2d: stride must be >= 1, got {stride}")
    hp, wp = height + 2 * padding, width + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(
            f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    h_out = (hp - kh) // stride + 1
    w_out = (wp - kw) // stride + 1

    if padding:
        padded = np.zeros((batch, cin, hp, wp), dtype=np.float64)
        padded[:, :, padding:padding + height, padding:padding + width] = input.values
    else:
        padded = input.values
    cols6 = np.empty((cin, kh, kw, batch, h_out, w_out), dtype=np.float64)
    for p in range(kh):
        for q in range(kw):
            tap = padded[:, :, p:p + stride * h_out:stride, q:q + stride * w_out:stride]
            cols6[:, p, q] = tap.transpose(1, 0, 2, 3)
    cols = cols6.reshape(cin * kh * kw, batch * h_out * w_out)
    w2 = kernel.values.reshape(cout, -1)
    out = (w2 @ cols).reshape(cout, batch, h_out, w_out)
    out += bias.values[:, None, None, None]
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def bw(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        d_bias = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        d_kernel = (g2 @ cols.T).reshape(cout, cin, kh, kw) if kernel.requires_grad else None
        d_input = None
        if input.requires_grad:
            d_cols = (w2.T @ g2).reshape(cin, kh, kw, batch, h_out, w_out)
            dpad = np.zeros((batch, cin, hp, wp), dtype=np.float64)
            for p in range(kh):
                for q in range(kw):
                    dpad[:, :, p:p + stride * h_out:stride,
                         q:q + stride * w_out:stride] += d_cols[:, p, q].transpose(1, 0, 2, 3)
            if padding:
                d_input = np.ascontiguousarray(
                    dpad[:, :, padding:padding + height, padding:padding + width])
            else:
                d_input = dpad
        return (d_input, d_kernel, d_bias)

    return _result(out, (input, kernel, bias), bw)


def maxpool2(input: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties route the gradient to the first
    element of the window in row-major scan order."""
    if input.values.ndim != 4:
        raise DimensionError("maxpool2 expects a rank-4 tensor")
    batch, ch, height, width = input.shape
    if height % 2 or width % 2:
        raise DimensionError(f"maxpool2: H and W must be even, got {height}x{width}")
    v = input.values
    corners = (v[:, :, 0::2, 0::2], v[:, :, 0::2, 1::2],
               v[:, :, 1::2, 0::2], v[:, :, 1::2, 1::2])
    out = np.maximum(np.maximum(corners[0], corners[1]),
                     np.maximum(corners[2], corners[3]))

    def bw(g):
        d_in = np.zeros_like(v)
        taken = np.zeros(out.shape, dtype=bool)
        slots = (d_in[:, :, 0::2, 0::2], d_in[:, :, 0::2, 1::2],
                 d_in[:, :, 1::2, 0::2], d_in[:, :, 1::2, 1::2])
        for corner, slot in zip(corners, slots):
            hit = (corner == out) & ~taken
            slot[hit] = g[hit]
            taken |= hit
        return (d_in,)

    return _result(out, (input,), bw)


def upsample2(input: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling; the adjoint sums each 2x2 window."""
    if input.values.ndim != 4:
        raise DimensionError("upsample2 expects a rank-4 tensor")
    batch, ch, height, width = input.shape
    out = input.values.repeat(2, axis=2).repeat(2, axis=3)

    def bw(g):
        return (g.reshape(batch, ch, height, 2, width, 2).sum(axis=(3, 5)),)

    return _result(out, (input,), bw)


# ---------------------------------------------------------------------------
# channel-vector linear algebra and normalization


def matmul2d(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul2d: incompatible shapes {a.shape} @ {b.shape}")
    av, bv = a.values, b.values

    def bw(g):
        return (g @ bv.T if a.requires_grad else None,
                av.T @ g if b.requires_grad else None)

    return _result(av @ bv, (a, b), bw)


def matmul_channels(matrix: Tensor, input: Tensor) -> Tensor:
    """Apply a [C, C] matrix to every pixel's channel vector of [B, C, H, W]."""
    if matrix.values.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise DimensionError(f"matmul_channels: matrix must be square, got {matrix.shape}")
    if input.values.ndim != 4 or input.shape[1] != matrix.shape[0]:
        raise DimensionError(
            f"matmul_channels: {matrix.shape} does not act on {input.shape} channels")
    mv, xv = matrix.values, input.values
    batch, ch, height, width = input.shape
    if batch == 1:
        x2 = xv.reshape(ch, height * width)
        out = (mv @ x2).reshape(1, ch, height, width)
    else:
        out = np.ascontiguousarray(
            np.tensordot(mv, xv, axes=([1], [1])).transpose(1, 0, 2, 3))

    def bw(g):
        d_matrix = None
        d_input = None
        if batch == 1:
            g2 = g.reshape(ch, height * width)
            x2g = xv.reshape(ch, height * width)
            if matrix.requires_grad:
                d_matrix = g2 @ x2g.T
            if input.requires_grad:
                d_input = (mv.T @ g2).reshape(1, ch, height, width)
        else:
            if matrix.requires_grad:
                d_matrix = np.tensordot(g, xv, axes=([0, 2, 3], [0, 2, 3]))
            if input.requires_grad:
                d_input = np.ascontiguousarray(
                    np.tensordot(mv.T, g, axes=([1], [1])).transpose(1, 0, 2, 3))
        return (d_matrix, d_input)

    return _result(out, (matrix, input), bw)


def softmax_channels(input: Tensor) -> Tensor:
    """Per-pixel softmax over the channel axis, max-subtracted so large
    logits cannot overflow."""
    if input.values.ndim != 4:
        raise DimensionError("softmax_channels expects a rank-4 tensor")
    v = input.values
    shifted = v - v.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - dot),)

    return _result(out, (input,), bw)


_CLAMP_LO = 1e-7
_CLAMP_HI = 1.0 - 1e-7


def cross_entropy(pred: Tensor, target: Tensor) -> Tensor:
    """Mean over pixels of -sum_k y * log(y_hat), with y_hat clamped to
    [1e-7, 1 - 1e-7] so saturated predictions keep the loss finite.

    ``pred`` holds per-pixel class probabilities [B, K, H, W]; ``target``
    must be one-hot over the channel axis.
    """
    if pred.values.ndim != 4 or pred.shape != target.shape:
        raise DimensionError(
            f"cross_entropy: pred {pred.shape} and target {target.shape} must be rank-4 and equal")
    tv = target.values
    if not np.isin(tv, (0.0, 1.0)).all() or not (tv.sum(axis=1) == 1.0).all():
        raise ContractError("cross_entropy: target is not one-hot over channels")
    batch, _, height, width = pred.shape
    n_pixels = batch * height * width
    pv = pred.values
    clamped = np.clip(pv, _CLAMP_LO, _CLAMP_HI)
    loss = -(tv * np.log(clamped)).sum() / n_pixels

    def bw(g):
        if not pred.requires_grad:
            return (None, None)
        inside = (pv >= _CLAMP_LO) & (pv <= _CLAMP_HI)
        d_pred = (-(tv / clamped) * inside) * (float(g) / n_pixels)
        return (d_pred, None)

    return _result(np.asarray(loss, dtype=np.float64), (pred, target), bw)


def softmax_cross_entropy(logits: Tensor, target: Tensor) -> Tensor:
    """Mean cross-entropy of per-pixel class logits against a one-hot target,
    computed in fused log-sum-exp form.

    The value equals cross_entropy(softmax_channels(logits), target) away
    from saturation, but the gradient is the exact (softmax - target) / N,
    which never vanishes on wrongly saturated pixels; the training loop
    relies on this to keep learning once predictions harden.
    """
    if logits.values.ndim != 4 or logits.shape != target.shape:
        raise DimensionError(
            f"softmax_cross_entropy: logits {logits.shape} and target "
            f"{target.shape} must be rank-4 and equal")
    tv = target.values
    if not (((tv == 0.0) | (tv == 1.0)).all() and (tv.sum(axis=1) == 1.0).all()):
        raise ContractError("softmax_cross_entropy: target is not one-hot over channels")
    batch, _, height, width = logits.shape
    n_pixels = batch * height * width
    z = logits.values
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -(tv * log_probs).sum() / n_pixels

    def bw(g):
        if not logits.requires_grad:
            return (None, None)
        probs = np.exp(log_probs)
        return ((probs - tv) * (float(g) / n_pixels), None)

    return _result(np.asarray(loss, dtype=np.float64), (logits, target), bw)


# ---------------------------------------------------------------------------
# verification


def grad_check(f: Callable[[Tensor], Tensor], point: Tensor, epsilon: float = 1e-4) -> float:
    """Compare the analytic gradient of scalar-valued ``f`` at ``point``
    against central finite differences.

    Returns max_i |analytic_i - numeric_i| / max(1e-12, |analytic_i| + |numeric_i|).
    """
    base = np.array(point.values, dtype=np.float64)
    leaf = Tensor(base.copy(), requires_grad=True)
    with Tape() as tape:
        out = f(leaf)
        if out.values.shape != ():
            raise ContractError("grad_check: f must be scalar-valued")
        backward(out)
    tape.clear()
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(base)

    def evaluate(values: np.ndarray) -> float:
        result = f(Tensor(values))
        val = float(result.values)
        return val

    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        hi = evaluate(base)
        flat[i] = orig - epsilon
        lo = evaluate(base)
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise ContractError(f"grad_check: non-finite evaluation at flat index {i}")
        num_flat[i] = (hi - lo) / (2.0 * epsilon)

    a = analytic.reshape(-1)
    n = numeric.reshape(-1)
    denom = np.maximum(1e-12, np.abs(a) + np.abs(n))
    return float((np.abs(a - n) / denom).max())
