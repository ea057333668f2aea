"""The feedback U-Net: state field, decay operator, per-step update, and
the single-pass feedforward baseline.

The model keeps a per-pixel state of d = l + k channels: the first l feed
the segmentation head, the last k are projected onto the class simplex and
concatenated with the input image as the recurrent feedback signal.  Every
step adds a decayed error proposal to the state, so with decay enabled the
updates vanish geometrically and the state settles.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fbseg import autodiff as ad
from fbseg.autodiff import Tensor
from fbseg.seeding import stream


class ConfigError(ValueError):
    """Architecture or checkpoint configuration is inconsistent."""


class DivergenceError(RuntimeError):
    """A non-finite value appeared in states or parameters."""

    def __init__(self, message, epoch=None, instance=None, step=None):
        super().__init__(message)
        self.epoch = epoch
        self.instance = instance
        self.step = step


CHECKPOINT_MAGIC = b"FBSGCKPT"
CHECKPOINT_VERSION = 1

OUT_INIT_SCALE = 0.05

# static attenuation exponent used by the single-pass baseline, matching the
# final timestep of a 5-step trajectory at unit time constant
STATIC_DECAY_STEP = 5


@dataclass(frozen=True)
class ArchConfig:
    """Shape of the model; everything needed to rebuild parameter arrays."""

    seg_channels: int = 4          # state channels feeding the head
    n_classes: int = 2             # classes; also the feedback channel count
    enc_channels: tuple = (8, 16)  # encoder widths, shallow to deep
    bottleneck_channels: int = 32
    timesteps: int = 5
    tau: float = 1.0
    feedback: bool = True          # feedback channels appended to the input
    use_decay: bool = True
    use_softmax: bool = True

    @property
    def state_channels(self) -> int:
        return self.seg_channels + self.n_classes

    @property
    def in_channels(self) -> int:
        return 1 + (self.n_classes if self.feedback else 0)

    def to_dict(self) -> dict:
        return {
            "seg_channels": self.seg_channels,
            "n_classes": self.n_classes,
            "enc_channels": list(self.enc_channels),
            "bottleneck_channels": self.bottleneck_channels,
            "timesteps": self.timesteps,
            "tau": self.tau,
            "feedback": self.feedback,
            "use_decay": self.use_decay,
            "use_softmax": self.use_softmax,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "ArchConfig":
        return cls(
            seg_channels=int(raw["seg_channels"]),
            n_classes=int(raw["n_classes"]),
            enc_channels=tuple(raw["enc_channels"]),
            bottleneck_channels=int(raw["bottleneck_channels"]),
            timesteps=int(raw["timesteps"]),
            tau=float(raw["tau"]),
            feedback=bool(raw["feedback"]),
            use_decay=bool(raw["use_decay"]),
            use_softmax=bool(raw["use_softmax"]),
        )


def _conv_shapes(config: ArchConfig):
    """(name, (cout, cin, kh, kw)) for every convolution, in declaration order."""
    c1, c2 = config.enc_channels
    cb = config.bottleneck_channels
    d = config.state_channels
    cin = config.in_channels
    return [
        ("enc1a", (c1, cin, 3, 3)),
        ("enc1b", (c1, c1, 3, 3)),
        ("enc2a", (c2, c1, 3, 3)),
        ("enc2b", (c2, c2, 3, 3)),
        ("bott_a", (cb, c2, 3, 3)),
        ("bott_b", (cb, cb, 3, 3)),
        ("dec2a", (c2, cb + c2, 3, 3)),
        ("dec2b", (c2, c2, 3, 3)),
        ("dec1a", (c1, c2 + c1, 3, 3)),
        ("dec1b", (c1, c1, 3, 3)),
        ("out", (d, c1, 1, 1)),
        ("head", (config.n_classes, config.seg_channels, 1, 1)),
    ]


class ModelParams:
    """All learnable tensors, attribute-addressable and iterable in a fixed
    declaration order (which the checkpoint format relies on)."""

    def __init__(self, config: ArchConfig, tensors: dict):
        self.config = config
        self._order = []
        for name, tensor in tensors.items():
            setattr(self, name, tensor)
            self._order.append(name)

    @classmethod
    def initialize(cls, config: ArchConfig, seed: int) -> "ModelParams":
        """Kaiming-style fan-in normal init for kernels and the decay basis
        factors; zero biases.

        The state-emitting convolution starts near zero (scaled by
        OUT_INIT_SCALE) so initial predictions stay unsaturated whatever the
        input noise scale; without this the first optimizer steps are spent
        unwinding confident garbage.
        """
        tensors = {}
        for name, shape in _conv_shapes(config):
            cout, cin, kh, kw = shape
            rng = stream("init", seed, name)
            std = np.sqrt(2.0 / (cin * kh * kw))
            if name == "out":
                std *= OUT_INIT_SCALE
            tensors[f"{name}_w"] = Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)
            tensors[f"{name}_b"] = Tensor(np.zeros(cout), requires_grad=True)
        d = config.state_channels
        std = np.sqrt(2.0 / d)
        rng = stream("init", seed, "basis")
        tensors["basis"] = Tensor(rng.normal(0.0, std, size=(d, d)), requires_grad=True)
        rng = stream("init", seed, "basis_inv")
        tensors["basis_inv"] = Tensor(rng.normal(0.0, std, size=(d, d)), requires_grad=True)
        return cls(config, tensors)

    def named(self):
        return [(name, getattr(self, name)) for name in self._order]

    def tensors(self):
        return [getattr(self, name) for name in self._order]

    def zero_grads(self) -> None:
        for t in self.tensors():
            t.zero_grad()

    def all_finite(self) -> bool:
        return all(np.isfinite(t.values).all() for t in self.tensors())

    def count(self) -> int:
        return sum(t.values.size for t in self.tensors())


@dataclass
class StateField:
    """Per-pixel internal state h(t): [1, l + k, H, W] at timestep t."""

    h: Tensor
    t: int


def state_seg(state: StateField, config: ArchConfig) -> Tensor:
    return ad.slice_channels(state.h, 0, config.seg_channels)


def state_feedback(state: StateField, config: ArchConfig) -> Tensor:
    return ad.slice_channels(state.h, config.seg_channels, config.state_channels)


@dataclass
class TrajectoryRecord:
    """Everything produced along one trajectory: states h(0..T), the raw
    network outputs, undecayed proposals, deltas, head logits and class
    predictions for steps 1..T."""

    states: list = field(default_factory=list)        # T + 1 tensors
    deltas: list = field(default_factory=list)        # T tensors
    unet_outputs: list = field(default_factory=list)  # T tensors, F([x, v(t)])
    proposals: list = field(default_factory=list)     # T tensors, (basis @ basis_inv) f(t)
    logits: list = field(default_factory=list)        # T tensors, head pre-softmax
    predictions: list = field(default_factory=list)   # T tensors, per-pixel class probs

    @property
    def timesteps(self) -> int:
        return len(self.deltas)


def unet_forward(params: ModelParams, input: Tensor) -> Tensor:
    """Two-level U-Net emitting the full d-channel state proposal."""
    config = params.config
    if input.values.ndim != 4 or input.shape[1] != config.in_channels:
        raise ConfigError(
            f"expected input with {config.in_channels} channels, got {input.shape}")
    if input.shape[2] % 4 or input.shape[3] % 4:
        raise ConfigError(f"H and W must be divisible by 4, got {input.shape[2:]}")

    e1 = ad.relu(ad.conv2d(input, params.enc1a_w, params.enc1a_b, padding=1))
    e1 = ad.relu(ad.conv2d(e1, params.enc1b_w, params.enc1b_b, padding=1))
    p1 = ad.maxpool2(e1)
    e2 = ad.relu(ad.conv2d(p1, params.enc2a_w, params.enc2a_b, padding=1))
    e2 = ad.relu(ad.conv2d(e2, params.enc2b_w, params.enc2b_b, padding=1))
    p2 = ad.maxpool2(e2)
    b = ad.relu(ad.conv2d(p2, params.bott_a_w, params.bott_a_b, padding=1))
    b = ad.relu(ad.conv2d(b, params.bott_b_w, params.bott_b_b, padding=1))
    u2 = ad.concat_channels(ad.upsample2(b), e2)
    d2 = ad.relu(ad.conv2d(u2, params.dec2a_w, params.dec2a_b, padding=1))
    d2 = ad.relu(ad.conv2d(d2, params.dec2b_w, params.dec2b_b, padding=1))
    u1 = ad.concat_channels(ad.upsample2(d2), e1)
    d1 = ad.relu(ad.conv2d(u1, params.dec1a_w, params.dec1a_b, padding=1))
    d1 = ad.relu(ad.conv2d(d1, params.dec1b_w, params.dec1b_b, padding=1))
    return ad.conv2d(d1, params.out_w, params.out_b)


def decay_factor(config: ArchConfig, t: int) -> float:
    if config.tau <= 0:
        raise ConfigError(f"tau must be positive, got {config.tau}")
    if not config.use_decay:
        return 1.0
    return float(np.exp(-t / config.tau))


def decay_matrix(params: ModelParams, t: int) -> Tensor:
    """The error-scaling matrix at step t: exp(-t/tau) * basis @ basis_inv."""
    if t < 0:
        raise ConfigError(f"t must be >= 0, got {t}")
    product = ad.matmul2d(params.basis, params.basis_inv)
    return ad.scale(product, decay_factor(params.config, t))


def project_feedback(state: StateField, config: ArchConfig) -> Tensor:
    """Per-pixel simplex projection of the feedback channels."""
    return ad.softmax_channels(state_feedback(state, config))


def head_logits(params: ModelParams, seg: Tensor) -> Tensor:
    return ad.conv2d(seg, params.head_w, params.head_b)


def predict_from_state(params: ModelParams, state: StateField) -> tuple:
    """(pre-softmax logits, per-pixel class probabilities) from h(t)."""
    logits = head_logits(params, state_seg(state, params.config))
    return logits, ad.softmax_channels(logits)


def _feedback_step_full(state: StateField, x: Tensor, params: ModelParams):
    config = params.config
    if config.use_softmax:
        v = project_feedback(state, config)
    else:
        v = state_feedback(state, config)
    net_in = ad.concat_channels(x, v)
    f_out = unet_forward(params, net_in)
    proposal = ad.matmul_channels(ad.matmul2d(params.basis, params.basis_inv), f_out)
    delta = ad.scale(proposal, decay_factor(config, state.t))
    if not np.isfinite(delta.values).all():
        raise DivergenceError(
            f"non-finite state update at step {state.t} "
            f"(max magnitude {np.abs(delta.values[np.isfinite(delta.values)]).max(initial=0.0):.3e})",
            step=state.t)
    new_state = StateField(h=ad.add(state.h, delta), t=state.t + 1)
    return new_state, delta, f_out, proposal


def feedback_step(state: StateField, x: Tensor, params: ModelParams):
    """One update h(t+1) = h(t) + decayed error proposal; returns the new
    state and the applied delta."""
    new_state, delta, _, _ = _feedback_step_full(state, x, params)
    return new_state, delta


def zero_state(config: ArchConfig, height: int, width: int) -> StateField:
    return StateField(h=Tensor(np.zeros((1, config.state_channels, height, width))), t=0)


def run_trajectory(x: Tensor, params: ModelParams, timesteps: int) -> TrajectoryRecord:
    """Iterate the feedback update from the blank state, recording states,
    deltas and per-step predictions."""
    if timesteps < 1:
        raise ConfigError(f"timesteps must be >= 1, got {timesteps}")
    config = params.config
    if not config.feedback:
        raise ConfigError("run_trajectory requires feedback-enabled params")
    state = zero_state(config, x.shape[2], x.shape[3])
    record = TrajectoryRecord()
    record.states.append(state.h)
    for _ in range(timesteps):
        state, delta, f_out, proposal = _feedback_step_full(state, x, params)
        logits, pred = predict_from_state(params, state)
        record.states.append(state.h)
        record.deltas.append(delta)
        record.unet_outputs.append(f_out)
        record.proposals.append(proposal)
        record.logits.append(logits)
        record.predictions.append(pred)
    return record


def feedforward_predict(x: Tensor, params: ModelParams, use_static_decay: bool | None = None):
    """Single U-Net pass; optionally attenuated by the static factor
    exp(-5/tau) * basis @ basis_inv before the head.

    Returns (logits, prediction).
    """
    config = params.config
    if config.feedback:
        raise ConfigError("feedforward_predict requires feedforward params")
    if use_static_decay is None:
        use_static_decay = config.use_decay
    f_out = unet_forward(params, x)
    if use_static_decay:
        product = ad.matmul2d(params.basis, params.basis_inv)
        factor = float(np.exp(-STATIC_DECAY_STEP / config.tau))
        f_out = ad.scale(ad.matmul_channels(product, f_out), factor)
    seg = ad.slice_channels(f_out, 0, config.seg_channels)
    logits = head_logits(params, seg)
    return logits, ad.softmax_channels(logits)


def predict_mask(params: ModelParams, image: np.ndarray) -> np.ndarray:
    """Hard segmentation for one H x W image; ties go to background."""
    x = Tensor(image[None, None].astype(np.float64))
    if params.config.feedback:
        record = run_trajectory(x, params, params.config.timesteps)
        probs = record.predictions[-1].values
    else:
        _, pred = feedforward_predict(x, params)
        probs = pred.values
    # argmax keeps the first (background) class on exact ties
    return probs[0].argmax(axis=0).astype(np.uint8)


# ---------------------------------------------------------------------------
# checkpoint format: magic, version, config JSON, tensors in order, crc32


def save_checkpoint(params: ModelParams, path) -> None:
    config_blob = json.dumps(params.config.to_dict(), sort_keys=True).encode()
    parts = [CHECKPOINT_MAGIC, CHECKPOINT_VERSION.to_bytes(4, "little"),
             len(config_blob).to_bytes(4, "little"), config_blob]
    for name, tensor in params.named():
        name_b = name.encode()
        parts.append(len(name_b).to_bytes(2, "little"))
        parts.append(name_b)
        shape = tensor.values.shape
        parts.append(len(shape).to_bytes(1, "little"))
        for dim in shape:
            parts.append(int(dim).to_bytes(4, "little"))
        parts.append(tensor.values.astype("<f8").tobytes())
    body = b"".join(parts)
    body += (zlib.crc32(body) & 0xFFFFFFFF).to_bytes(4, "little")
    Path(path).write_bytes(body)


def load_checkpoint(path) -> ModelParams:
    blob = Path(path).read_bytes()
    if len(blob) < 20 or blob[:8] != CHECKPOINT_MAGIC:
        raise ConfigError(f"{Path(path).name}: not a checkpoint file")
    stored = int.from_bytes(blob[-4:], "little")
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != stored:
        raise ConfigError(f"{Path(path).name}: checkpoint checksum mismatch")
    version = int.from_bytes(blob[8:12], "little")
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"{Path(path).name}: checkpoint version {version} unsupported")
    off = 12
    config_len = int.from_bytes(blob[off:off + 4], "little")
    off += 4
    config = ArchConfig.from_dict(json.loads(blob[off:off + config_len].decode()))
    off += config_len
    tensors = {}
    end = len(blob) - 4
    while off < end:
        name_len = int.from_bytes(blob[off:off + 2], "little")
        off += 2
        name = blob[off:off + name_len].decode()
        off += name_len
        ndim = blob[off]
        off += 1
        shape = tuple(int.from_bytes(blob[off + 4 * i:off + 4 * i + 4], "little")
                      for i in range(ndim))
        off += 4 * ndim
        n_bytes = int(np.prod(shape)) * 8 if shape else 8
        values = np.frombuffer(blob[off:off + n_bytes], dtype="<f8").reshape(shape).copy()
        off += n_bytes
        tensors[name] = Tensor(values, requires_grad=True)
    params = ModelParams(config, tensors)
    expected = {f"{n}_{s}" for n, _ in _conv_shapes(config) for s in ("w", "b")}
    expected |= {"basis", "basis_inv"}
    if set(name for name, _ in params.named()) != expected:
        raise ConfigError(f"{Path(path).name}: checkpoint tensors do not match config")
    return params
