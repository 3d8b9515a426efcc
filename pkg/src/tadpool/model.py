"""Small MLP classifier with hand-written backprop and SGD.

The network is ``input -> hidden... -> feature`` with ReLU between
encoder layers (the feature layer itself is linear), plus a linear
classification head read off the *un-normalized* feature.  Gradients
arrive through two independent ports: ``grad_feature`` (the contrastive
path, which touches encoder parameters only, routed through the
L2-normalization Jacobian when the forward normalized) and
``grad_logits`` (the cross-entropy path, which touches head and encoder).

Everything is dtype-preserving: float32 for training, float64 when a
verification caller passes float64 parameters.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from tadpool import io
from tadpool.numerics import REAL, Rng


@dataclass
class ModelParams:
    """Weights, biases, and their momentum buffers."""

    encoder: list[list[np.ndarray]]  # per layer [W (out,in), b (out,)]
    head: list[np.ndarray]  # [W (C,d), b (C,)]
    encoder_velocity: list[list[np.ndarray]] = field(default_factory=list)
    head_velocity: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.encoder_velocity:
            self.encoder_velocity = [[np.zeros_like(w), np.zeros_like(b)] for w, b in self.encoder]
        if not self.head_velocity:
            self.head_velocity = [np.zeros_like(a) for a in self.head]

    @property
    def input_dim(self) -> int:
        return self.encoder[0][0].shape[1]

    @property
    def feature_dim(self) -> int:
        return self.encoder[-1][0].shape[0]

    @property
    def num_classes(self) -> int:
        return self.head[0].shape[0]

    def copy(self) -> "ModelParams":
        return ModelParams(
            encoder=[[w.copy(), b.copy()] for w, b in self.encoder],
            head=[a.copy() for a in self.head],
            encoder_velocity=[[vw.copy(), vb.copy()] for vw, vb in self.encoder_velocity],
            head_velocity=[v.copy() for v in self.head_velocity],
        )


@dataclass
class Grads:
    encoder: list[list[np.ndarray]]
    head: list[np.ndarray]


def init_params(
    input_dim: int,
    hidden_dims: list[int],
    feature_dim: int,
    num_classes: int,
    rng: Rng,
    dtype=REAL,
) -> ModelParams:
    """Xavier-uniform weights (+-sqrt(6/(fan_in+fan_out))), zero biases."""
    dims = [input_dim, *hidden_dims, feature_dim]
    encoder = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = float(np.sqrt(6.0 / (fan_in + fan_out)))
        w = rng.uniform(-bound, bound, (fan_out, fan_in)).astype(dtype)
        encoder.append([w, np.zeros(fan_out, dtype=dtype)])
    bound = float(np.sqrt(6.0 / (feature_dim + num_classes)))
    head_w = rng.uniform(-bound, bound, (num_classes, feature_dim)).astype(dtype)
    head = [head_w, np.zeros(num_classes, dtype=dtype)]
    return ModelParams(encoder=encoder, head=head)


def forward(
    params: ModelParams, x: np.ndarray, normalize_features: bool = False
) -> tuple[np.ndarray, np.ndarray, dict]:
    """Batched forward pass; returns (feature, logits, cache).

    ``feature`` is L2-normalized iff ``normalize_features`` — the raw
    encoder output always feeds the head.  Non-finite outputs abort.
    """
    x = np.asarray(x)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    h = x
    inputs: list[np.ndarray] = []
    pre_acts: list[np.ndarray] = []
    last = len(params.encoder) - 1
    for i, (w, b) in enumerate(params.encoder):
        inputs.append(h)
        pre = h @ w.T + b
        pre_acts.append(pre)
        h = np.maximum(pre, 0) if i < last else pre
    z = h
    head_w, head_b = params.head
    logits = z @ head_w.T + head_b
    if normalize_features:
        norms = np.sqrt(np.sum(z.astype(np.float64) ** 2, axis=1, keepdims=True))
        if np.any(norms < 1e-12):
            raise ValueError("degenerate embedding")
        norms = norms.astype(z.dtype)
        feature = z / norms
    else:
        norms = None
        feature = z
    if not (np.all(np.isfinite(feature)) and np.all(np.isfinite(logits))):
        raise ValueError("numerical blowup")
    cache = {
        "inputs": inputs,
        "pre_acts": pre_acts,
        "z": z,
        "norms": norms,
        "feature": feature,
        "normalized": normalize_features,
        "single": single,
    }
    if single:
        return feature[0], logits[0], cache
    return feature, logits, cache


def backward(
    params: ModelParams,
    cache: dict,
    grad_feature: np.ndarray | None,
    grad_logits: np.ndarray | None,
) -> Grads:
    """Exact gradients for upstream (grad_feature, grad_logits) rows.

    Contributions are summed over the batch; pass pre-scaled rows (e.g.
    divided by the batch size) to get mean-loss gradients.
    """
    z = cache["z"]
    batch, feature_dim = z.shape

    def rows(g, width):
        if g is None:
            return np.zeros((batch, width), dtype=z.dtype)
        g = np.asarray(g, dtype=z.dtype)
        return g[None, :] if g.ndim == 1 else g

    g_feat = rows(grad_feature, feature_dim)
    g_logits = rows(grad_logits, params.num_classes)

    head_w, _ = params.head
    g_head_w = g_logits.T @ z
    g_head_b = g_logits.sum(axis=0)
    d_z = g_logits @ head_w

    if cache["normalized"]:
        norms = cache["norms"]
        feature = cache["feature"]
        inner = np.sum(feature * g_feat, axis=1, keepdims=True)
        d_z = d_z + (g_feat - inner * feature) / norms
    else:
        d_z = d_z + g_feat

    encoder_grads: list[list[np.ndarray]] = [None] * len(params.encoder)
    d_h = d_z
    last = len(params.encoder) - 1
    for i in range(last, -1, -1):
        d_pre = d_h if i == last else d_h * (cache["pre_acts"][i] > 0)
        encoder_grads[i] = [d_pre.T @ cache["inputs"][i], d_pre.sum(axis=0)]
        if i > 0:
            d_h = d_pre @ params.encoder[i][0]
    return Grads(encoder=encoder_grads, head=[g_head_w, g_head_b])


def sgd_step(
    params: ModelParams,
    grads: Grads,
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 0.0,
) -> None:
    """In-place SGD: v <- momentum*v + g (+ wd*w on weights); p <- p - lr*v.

    Weight decay applies to weight matrices only, never biases.
    """
    tensors = [g for pair in grads.encoder for g in pair] + list(grads.head)
    if not all(np.all(np.isfinite(t)) for t in tensors):
        raise ValueError("non-finite gradient")

    def update(param, vel, grad, decay):
        vel *= momentum
        vel += grad
        if decay:
            vel += decay * param
        param -= lr * vel

    for (w, b), (vw, vb), (gw, gb) in zip(params.encoder, params.encoder_velocity, grads.encoder):
        update(w, vw, gw, weight_decay)
        update(b, vb, gb, 0.0)
    (hw, hb), (vhw, vhb), (ghw, ghb) = params.head, params.head_velocity, grads.head
    update(hw, vhw, ghw, weight_decay)
    update(hb, vhb, ghb, 0.0)


@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup from start_lr to base_lr, then cosine decay to min_lr."""

    start_lr: float
    base_lr: float
    min_lr: float
    warmup_steps: int
    total_steps: int

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be at least 1")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError("warmup_steps must lie inside the run")
        if min(self.start_lr, self.base_lr, self.min_lr) <= 0:
            raise ValueError("learning rates must be positive")
        if self.min_lr > self.base_lr:
            raise ValueError("min_lr must not exceed base_lr")

    def lr_at(self, step: int) -> float:
        if not 0 <= step < self.total_steps:
            raise ValueError(f"step {step} out of schedule range")
        if step < self.warmup_steps:
            frac = step / self.warmup_steps
            return self.start_lr + (self.base_lr - self.start_lr) * frac
        span = self.total_steps - 1 - self.warmup_steps
        progress = 1.0 if span == 0 else (step - self.warmup_steps) / span
        return float(
            self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + np.cos(np.pi * progress))
        )


def flatten_params(params: ModelParams) -> np.ndarray:
    """All weights and biases as one float64 vector (no velocities)."""
    parts = [t.ravel() for pair in params.encoder for t in pair]
    parts += [t.ravel() for t in params.head]
    return np.concatenate([p.astype(np.float64) for p in parts])


def set_flat_params(params: ModelParams, flat: np.ndarray) -> None:
    """Inverse of :func:`flatten_params` (dtype of each tensor preserved)."""
    pos = 0
    tensors = [t for pair in params.encoder for t in pair] + list(params.head)
    for t in tensors:
        t[...] = flat[pos : pos + t.size].reshape(t.shape).astype(t.dtype)
        pos += t.size
    if pos != len(flat):
        raise ValueError("flat vector length mismatch")


def save_checkpoint(params: ModelParams, path: str) -> None:
    """Serialize parameters + momentum buffers in the shared container.

    Payload after the envelope: u32 layer count; per encoder layer u32
    (out, in); u32 (classes, feature_dim); then float32 tensors in order
    encoder W/b per layer, head W/b, followed by the velocities in the
    same order.
    """
    chunks = [io.envelope_bytes(), struct.pack("<I", len(params.encoder))]
    for w, _ in params.encoder:
        chunks.append(struct.pack("<II", w.shape[0], w.shape[1]))
    chunks.append(struct.pack("<II", params.num_classes, params.feature_dim))
    tensor_groups = [params.encoder, [params.head], params.encoder_velocity, [params.head_velocity]]
    for group in tensor_groups:
        for pair in group:
            for t in pair:
                chunks.append(np.ascontiguousarray(t, dtype="<f4").tobytes())
    io.atomic_write(path, b"".join(chunks))


def load_checkpoint(path: str) -> ModelParams:
    with open(path, "rb") as f:
        reader = io.Reader(f.read(), origin=str(path))
    io.read_envelope(reader)
    num_layers = reader.u32()
    shapes = [(reader.u32(), reader.u32()) for _ in range(num_layers)]
    num_classes = reader.u32()
    feature_dim = reader.u32()

    def tensor_pairs():
        pairs = []
        for out, inp in shapes:
            w = reader.array("<f4", out * inp).reshape(out, inp)
            b = reader.array("<f4", out)
            pairs.append([w, b])
        hw = reader.array("<f4", num_classes * feature_dim).reshape(num_classes, feature_dim)
        hb = reader.array("<f4", num_classes)
        return pairs, [hw, hb]

    encoder, head = tensor_pairs()
    encoder_velocity, head_velocity = tensor_pairs()
    reader.expect_end()
    return ModelParams(
        encoder=encoder,
        head=head,
        encoder_velocity=encoder_velocity,
        head_velocity=head_velocity,
    )
