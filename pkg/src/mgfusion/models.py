"""Classifier architectures and the checkpoint container.

Every model maps a :class:`~mgfusion.dataio.Batch` to class logits of shape
``[B, C]``. Inputs are keyed by stream: ``T`` (text) and the speech
granularities ``P`` (phone), ``W`` (word), ``S`` (syllable), ``F`` (frame).
No positional encodings are used, so all sequence models are invariant to
jointly permuting positions and masks.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .diffcore import (
    Module,
    Parameter,
    Tensor,
    affine,
    attention_bias,
    concat,
    dropout,
    layer_norm,
    masked_mean,
    relu,
    softmax,
)
from .errors import ConfigError, DimensionError, EmptySequenceError, LoadError
from .granularity import LayerMixer

SPEECH_KEYS = ("P", "W", "S", "F")
ARCHITECTURES = ("linear", "transformer", "late_fusion", "coattention", "concat")
FF_ARCHITECTURES = ("linear", "late_fusion", "concat")
CLASS_NAMES = ("angry", "happy", "sad", "neutral")


@dataclass(frozen=True)
class ModelSpec:
    arch: str
    granularities: tuple[str, ...] = ("F",)
    text: bool = True
    dim: int = 768
    text_layers: int = 12
    speech_layers: int = 12
    hidden1: int = 128
    hidden2: int = 128
    heads: int = 8
    ff_mult: int = 4
    coattention_layers: int = 3
    encoder_layers: int = 3
    dropout: float = 0.2
    n_classes: int = 4
    seed: int = 0

    def __post_init__(self):
        gs = tuple(self.granularities)
        if any(g not in SPEECH_KEYS for g in gs) or len(set(gs)) != len(gs):
            raise ConfigError(f"granularities must be distinct members of {SPEECH_KEYS}, got {gs}")
        object.__setattr__(self, "granularities", tuple(g for g in SPEECH_KEYS if g in gs))
        if self.arch not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.arch!r}; choose from {ARCHITECTURES}")
        n_inputs = len(gs) + int(self.text)
        if self.arch in ("linear", "transformer") and n_inputs != 1:
            raise ConfigError(f"{self.arch} takes exactly one input stream, got {self.inputs}")
        if self.arch in ("late_fusion", "coattention") and not (self.text and gs):
            raise ConfigError(f"{self.arch} needs text plus at least one speech granularity")
        if self.arch == "concat" and not (self.text and self.granularities == ("F",)):
            raise ConfigError("concat early fusion takes text plus frame-level speech (F)")
        if self.arch in ("transformer", "coattention") and self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} is not divisible by {self.heads} heads")
        if self.dim < 2 or self.n_classes < 2:
            raise ConfigError("dim and n_classes must both be at least 2")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def inputs(self) -> tuple[str, ...]:
        return (("T",) if self.text else ()) + self.granularities

    @property
    def default_lr(self) -> float:
        return 1e-3 if self.arch in FF_ARCHITECTURES else 5e-5

    def layers_for(self, key: str) -> int:
        return self.text_layers if key == "T" else self.speech_layers

    def to_json(self) -> str:
        d = asdict(self)
        d["granularities"] = list(self.granularities)
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model spec keys: {sorted(unknown)}")
        d = dict(d)
        if "granularities" in d:
            d["granularities"] = tuple(d["granularities"])
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        return cls.from_dict(json.loads(text))


@dataclass
class Prediction:
    """Logits and posteriors, either for one utterance ``[C]`` or a batch ``[B, C]``."""

    logits: np.ndarray
    posterior: np.ndarray
    ids: list[str] = field(default_factory=list)

    @property
    def labels(self) -> np.ndarray:
        return np.argmax(self.posterior, axis=-1)


def posterior_of(logits) -> np.ndarray:
    return softmax(Tensor(np.asarray(logits))).data


def combine_scores(logits_a, logits_b) -> Prediction:
    """Average two models' logits and renormalise."""
    a, b = np.asarray(logits_a), np.asarray(logits_b)
    if a.shape != b.shape:
        raise DimensionError(f"cannot combine logits of shapes {a.shape} and {b.shape}")
    mean = (a + b) / 2
    return Prediction(mean, posterior_of(mean))


# -- building blocks -----------------------------------------------------------
class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float32):
        bound = 1.0 / math.sqrt(n_in)
        self.W = Parameter(rng.uniform(-bound, bound, size=(n_in, n_out)), dtype=dtype)
        self.b = Parameter(np.zeros(n_out), dtype=dtype)

    def __call__(self, x) -> Tensor:
        return affine(x, self.W, self.b)


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32):
        self.gain = Parameter(np.ones(dim), dtype=dtype)
        self.bias = Parameter(np.zeros(dim), dtype=dtype)

    def __call__(self, x) -> Tensor:
        return layer_norm(x, self.gain, self.bias)


def _drop(x, p, rng):
    return dropout(x, p, training=rng is not None, rng=rng)


class LinearBranch(Module):
    """Two position-wise ReLU layers, global average, logit layer."""

    def __init__(self, dim, hidden1, hidden2, n_classes, p, rng):
        self.fc1 = Linear(dim, hidden1, rng)
        self.fc2 = Linear(hidden1, hidden2, rng)
        self.out = Linear(hidden2, n_classes, rng)
        self.p = p

    def __call__(self, seq, mask, rng=None) -> Tensor:
        h = _drop(relu(self.fc1(seq)), self.p, rng)
        h = _drop(relu(self.fc2(h)), self.p, rng)
        return self.out(masked_mean(h, mask))


class MultiHeadAttention(Module):
    def __init__(self, dim, heads, rng):
        if dim % heads:
            raise DimensionError(f"dim {dim} not divisible by {heads} heads")
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.o = Linear(dim, dim, rng)
        self.heads = heads

    def __call__(self, xq, xkv, kv_mask) -> Tensor:
        """``xq[B, Kq, D]`` attends over ``xkv[B, Kv, D]``; False in ``kv_mask`` hides a key."""
        kv_mask = np.asarray(kv_mask, dtype=bool)
        if not np.all(kv_mask.any(axis=-1)):
            raise EmptySequenceError("attention over a sequence whose keys are all masked")
        B, Kq, D = xq.shape
        Kv = xkv.shape[1]
        H, d = self.heads, D // self.heads

        def split(t, n):
            return t.reshape(B, n, H, d).swapaxes(1, 2)

        Q, K, V = split(self.q(xq), Kq), split(self.k(xkv), Kv), split(self.v(xkv), Kv)
        scores = (Q @ K.swapaxes(-1, -2)) * (1.0 / math.sqrt(d))
        scores = scores + attention_bias(kv_mask, scores.dtype)[:, None, None, :]
        out = (softmax(scores) @ V).swapaxes(1, 2).reshape(B, Kq, D)
        return self.o(out)


class EncoderBlock(Module):
    """Attention then position-wise FF, each with residual + layer norm.

    With ``xkv is xq`` this is a self-attention encoder layer; with another
    stream as keys/values it is one branch of a coattention layer.
    """

    def __init__(self, dim, heads, ff_mult, p, rng):
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.ln1 = LayerNorm(dim)
        self.ff1 = Linear(dim, ff_mult * dim, rng)
        self.ff2 = Linear(ff_mult * dim, dim, rng)
        self.ln2 = LayerNorm(dim)
        self.p = p

    def __call__(self, xq, xkv, kv_mask, rng=None) -> Tensor:
        x = self.ln1(xq + self.attn(xq, xkv, kv_mask))
        f = self.ff2(_drop(relu(self.ff1(x)), self.p, rng))
        return self.ln2(x + f)


class CoattentionLayer(Module):
    def __init__(self, dim, heads, ff_mult, p, rng):
        self.text_branch = EncoderBlock(dim, heads, ff_mult, p, rng)
        self.speech_branch = EncoderBlock(dim, heads, ff_mult, p, rng)

    def __call__(self, t, s, t_mask, s_mask, rng=None):
        t_new = self.text_branch(t, s, s_mask, rng)
        s_new = self.speech_branch(s, t, t_mask, rng)
        return t_new, s_new


class CoattentionStack(Module):
    """Stacked paired cross-attention; returns the mean of both pooled branches."""

    def __init__(self, dim, heads, ff_mult, p, n_layers, rng):
        self.layers = [CoattentionLayer(dim, heads, ff_mult, p, rng) for _ in range(n_layers)]

    def branches(self, t, s, t_mask, s_mask, rng=None) -> tuple[Tensor, Tensor]:
        for layer in self.layers:
            t, s = layer(t, s, t_mask, s_mask, rng)
        return masked_mean(t, t_mask), masked_mean(s, s_mask)

    def __call__(self, t, s, t_mask, s_mask, rng=None) -> Tensor:
        a, b = self.branches(t, s, t_mask, s_mask, rng)
        return (a + b) * 0.5


class EarlyFusionHead(Module):
    def __init__(self, dim, n_classes, p, rng):
        self.fc = Linear(dim, dim, rng)
        self.ln = LayerNorm(dim)
        self.out = Linear(dim, n_classes, rng)
        self.p = p

    def __call__(self, c, rng=None) -> Tensor:
        g = self.ln(_drop(relu(self.fc(c)), self.p, rng) + c)
        return self.out(g)


# -- whole models --------------------------------------------------------------
class FusionModel(Module):
    """Base class: one layer mixer per input stream, then an architecture body."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.mixers = {k: LayerMixer(spec.layers_for(k), spec.dim) for k in spec.inputs}

    def mixed(self, batch, key) -> tuple[Tensor, np.ndarray]:
        stack, mask = batch.inputs[key]
        return self.mixers[key](stack), mask

    def __call__(self, batch, rng=None) -> Tensor:
        raise NotImplementedError

    def predict(self, batch) -> Prediction:
        logits = self(batch).data
        return Prediction(logits, posterior_of(logits), list(batch.ids))


class LateFusionModel(FusionModel):
    """Per-stream linear branches whose logits are summed.

    With a single input stream this is the single-modality linear model.
    """

    def __init__(self, spec: ModelSpec):
        super().__init__(spec)
        rng = np.random.default_rng(spec.seed)
        self.branches = {
            k: LinearBranch(spec.dim, spec.hidden1, spec.hidden2, spec.n_classes, spec.dropout, rng)
            for k in spec.inputs}

    def branch_logits(self, batch, rng=None) -> dict[str, Tensor]:
        out = {}
        for k in self.spec.inputs:
            seq, mask = self.mixed(batch, k)
            out[k] = self.branches[k](seq, mask, rng)
        return out

    def __call__(self, batch, rng=None) -> Tensor:
        parts = self.branch_logits(batch, rng)
        self.last_branch_logits = {k: v.data for k, v in parts.items()}
        total = None
        for k in self.spec.inputs:
            total = parts[k] if total is None else total + parts[k]
        return total


class TransformerClassifier(FusionModel):
    def __init__(self, spec: ModelSpec):
        super().__init__(spec)
        rng = np.random.default_rng(spec.seed)
        self.encoder = [EncoderBlock(spec.dim, spec.heads, spec.ff_mult, spec.dropout, rng)
                        for _ in range(spec.encoder_layers)]
        self.fc1 = Linear(spec.dim, spec.hidden1, rng)
        self.fc2 = Linear(spec.hidden1, spec.n_classes, rng)

    def __call__(self, batch, rng=None) -> Tensor:
        (key,) = self.spec.inputs
        x, mask = self.mixed(batch, key)
        for block in self.encoder:
            x = block(x, x, mask, rng)
        h = _drop(relu(self.fc1(masked_mean(x, mask))), self.spec.dropout, rng)
        return self.fc2(h)


class CoattentionFusionModel(FusionModel):
    """Text paired with each speech granularity through its own coattention stack."""

    def __init__(self, spec: ModelSpec):
        super().__init__(spec)
        rng = np.random.default_rng(spec.seed)
        self.stacks = {
            g: CoattentionStack(spec.dim, spec.heads, spec.ff_mult, spec.dropout,
                                spec.coattention_layers, rng)
            for g in spec.granularities}
        width = spec.dim * len(spec.granularities)
        self.head = EarlyFusionHead(width, spec.n_classes, spec.dropout, rng)

    def fused_embedding(self, batch, rng=None) -> Tensor:
        t, t_mask = self.mixed(batch, "T")
        parts = []
        for g in self.spec.granularities:
            s, s_mask = self.mixed(batch, g)
            parts.append(self.stacks[g](t, s, t_mask, s_mask, rng))
        return parts[0] if len(parts) == 1 else concat(parts, axis=-1)

    def __call__(self, batch, rng=None) -> Tensor:
        return self.head(self.fused_embedding(batch, rng), rng)


class ConcatFusionModel(FusionModel):
    """Pooled text and frame vectors concatenated into one linear branch."""

    def __init__(self, spec: ModelSpec):
        super().__init__(spec)
        rng = np.random.default_rng(spec.seed)
        self.branch = LinearBranch(2 * spec.dim, spec.hidden1, spec.hidden2,
                                   spec.n_classes, spec.dropout, rng)

    def __call__(self, batch, rng=None) -> Tensor:
        t, t_mask = self.mixed(batch, "T")
        f, f_mask = self.mixed(batch, "F")
        joined = concat([masked_mean(t, t_mask), masked_mean(f, f_mask)], axis=-1)
        B = joined.shape[0]
        return self.branch(joined.reshape(B, 1, 2 * self.spec.dim), np.ones((B, 1), bool), rng)


_ARCH_CLASSES = {
    "linear": LateFusionModel,
    "late_fusion": LateFusionModel,
    "transformer": TransformerClassifier,
    "coattention": CoattentionFusionModel,
    "concat": ConcatFusionModel,
}


def build_model(spec: ModelSpec) -> FusionModel:
    return _ARCH_CLASSES[spec.arch](spec)


# -- checkpoints ---------------------------------------------------------------
CHECKPOINT_MAGIC = b"MGCK"
CHECKPOINT_VERSION = 1


def encode_checkpoint(model: FusionModel) -> bytes:
    """Spec as JSON text followed by named little-endian float32 tensors."""
    spec = model.spec.to_json().encode("utf-8")
    params = list(model.named_parameters())
    out = [CHECKPOINT_MAGIC, struct.pack("<HI", CHECKPOINT_VERSION, len(spec)), spec,
           struct.pack("<I", len(params))]
    for name, p in params:
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack(f"<I{p.ndim}I", p.ndim, *p.shape))
        out.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    return b"".join(out)


def decode_checkpoint(buf: bytes, expected: ModelSpec | None = None) -> FusionModel:
    view = memoryview(buf)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise LoadError(f"checkpoint truncated at byte {pos} (needed {n} more)")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != CHECKPOINT_MAGIC:
        raise LoadError("not a checkpoint file (bad magic)")
    version, spec_len = struct.unpack("<HI", take(6))
    if version != CHECKPOINT_VERSION:
        raise LoadError(f"unsupported checkpoint version {version}")
    try:
        spec = ModelSpec.from_json(bytes(take(spec_len)).decode("utf-8"))
    except (ValueError, TypeError) as exc:
        raise LoadError(f"checkpoint spec is invalid: {exc}") from exc
    if expected is not None and expected != spec:
        raise LoadError(f"checkpoint spec {spec} does not match expected {expected}")
    (count,) = struct.unpack("<I", take(4))
    state = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        name = bytes(take(n)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape)) if rank else 1
        state[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape)
    if pos != len(view):
        raise LoadError(f"{len(view) - pos} trailing bytes after last parameter")
    model = build_model(spec)
    model.load_state_dict(state)
    return model


def save_checkpoint(model: FusionModel, path) -> None:
    Path(path).write_bytes(encode_checkpoint(model))


def load_checkpoint(path, expected: ModelSpec | None = None) -> FusionModel:
    return decode_checkpoint(Path(path).read_bytes(), expected)
