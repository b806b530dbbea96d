"""Forced-alignment tiers, segment pooling and learnable layer mixing.

Alignment files are line oriented::

    #stride_ms 20
    phone 0 5 AH
    phone 5 9 T
    word 0 9 AT

Frame indices are base-0 and segments are half-open ``[start, end)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .diffcore import Module, Parameter, Tensor, layer_norm, mul, tsum
from .errors import DegenerateWeightsError, DimensionError, ParseError, ValidationError

log = logging.getLogger(__name__)

TIERS = ("phone", "word", "syllable")
DEFAULT_STRIDE_MS = 20
ARPABET_VOWELS = frozenset({
    "AA", "AE", "AH", "AO", "AW", "AY", "EH", "ER", "EY",
    "IH", "IY", "OW", "OY", "UH", "UW",
})
MIN_WEIGHT_SUM = 1e-8

MODALITIES = ("speech", "text")
GRANULARITIES = ("frame", "phone", "syllable", "word", "wordpiece")


@dataclass(frozen=True)
class Segment:
    start: int
    end: int
    label: str = ""

    @property
    def length(self) -> int:
        return self.end - self.start


@dataclass
class AlignmentTiers:
    utterance_id: str = ""
    phones: tuple[Segment, ...] = ()
    words: tuple[Segment, ...] = ()
    syllables: tuple[Segment, ...] | None = None
    stride_ms: int = DEFAULT_STRIDE_MS
    warnings: list[str] = field(default_factory=list, compare=False)

    def tier(self, name: str) -> tuple[Segment, ...] | None:
        return {"phone": self.phones, "word": self.words, "syllable": self.syllables}[name]


@dataclass
class LayeredEmbedding:
    """Per-utterance stack of ``L`` layers x ``K`` positions x ``D`` dims."""

    modality: str
    granularity: str
    data: np.ndarray

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValidationError(f"unknown modality {self.modality!r}")
        if self.granularity not in GRANULARITIES:
            raise ValidationError(f"unknown granularity {self.granularity!r}")
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValidationError(f"stack must be a non-empty L x K x D array, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValidationError("stack contains non-finite values")

    @property
    def L(self) -> int:
        return self.data.shape[0]

    @property
    def K(self) -> int:
        return self.data.shape[1]

    @property
    def D(self) -> int:
        return self.data.shape[2]

    def __eq__(self, other):
        if not isinstance(other, LayeredEmbedding):
            return NotImplemented
        return (self.modality == other.modality and self.granularity == other.granularity
                and self.data.shape == other.data.shape
                and self.data.tobytes() == other.data.tobytes())


def frame_of(seconds: float, stride_ms: int = DEFAULT_STRIDE_MS) -> int:
    """Map a time in seconds to the frame index containing it."""
    return int(np.floor(seconds * 1000.0 / stride_ms + 1e-9))


# -- parsing -------------------------------------------------------------------
def _check_tier(name: str, segs: list[Segment], frame_count: int | None):
    prev_end = None
    for s in segs:
        if s.end <= s.start:
            raise ValidationError(f"{name} segment {s.label!r} is empty: [{s.start}, {s.end})")
        if s.start < 0 or (frame_count is not None and s.end > frame_count):
            raise ValidationError(
                f"{name} segment {s.label!r} [{s.start}, {s.end}) outside [0, {frame_count})")
        if prev_end is not None and s.start < prev_end:
            raise ValidationError(
                f"{name} segments overlap or are out of order at {s.label!r} [{s.start}, {s.end})")
        prev_end = s.end


def validate_tiers(tiers: AlignmentTiers, frame_count: int | None = None) -> None:
    for name in TIERS:
        segs = tiers.tier(name)
        if segs:
            _check_tier(name, list(segs), frame_count)
    if tiers.syllables and tiers.phones:
        edges = {s.start for s in tiers.phones} | {s.end for s in tiers.phones}
        for syl in tiers.syllables:
            if syl.start not in edges or syl.end not in edges:
                raise ValidationError(
                    f"syllable {syl.label!r} [{syl.start}, {syl.end}) does not sit on phone boundaries")


def parse_alignment(text: str, frame_count: int, utterance_id: str = "") -> AlignmentTiers:
    """Parse alignment text, clipping segment ends to ``frame_count``."""
    stride = DEFAULT_STRIDE_MS
    found: dict[str, list[Segment]] = {t: [] for t in TIERS}
    seen_syllable = False
    warnings: list[str] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if parts and parts[0] == "stride_ms":
                if len(parts) != 2 or not parts[1].isdigit() or int(parts[1]) == 0:
                    raise ParseError(f"bad stride header {raw!r}", lineno)
                stride = int(parts[1])
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ParseError(f"expected '<tier> <start> <end> <label>', got {raw!r}", lineno)
        tier, s, e, label = parts
        if tier not in found:
            raise ParseError(f"unknown tier {tier!r}", lineno)
        if not (s.isdigit() and e.isdigit()):
            raise ParseError(f"frame indices must be non-negative integers, got {s!r} {e!r}", lineno)
        start, end = int(s), int(e)
        if end > frame_count:
            warnings.append(
                f"line {lineno}: {tier} {label} end {end} clipped to {frame_count}")
            end = frame_count
        if end <= start:
            raise ValidationError(f"line {lineno}: empty {tier} segment [{start}, {end})")
        found[tier].append(Segment(start, end, label))
        seen_syllable |= tier == "syllable"
    tiers = AlignmentTiers(
        utterance_id=utterance_id,
        phones=tuple(found["phone"]),
        words=tuple(found["word"]),
        syllables=tuple(found["syllable"]) if seen_syllable else None,
        stride_ms=stride,
        warnings=warnings,
    )
    validate_tiers(tiers, frame_count)
    for w in warnings:
        log.warning("%s: %s", utterance_id or "<alignment>", w)
    return tiers


def serialize_alignment(tiers: AlignmentTiers) -> str:
    lines = [f"#stride_ms {tiers.stride_ms}"]
    for name in TIERS:
        for seg in tiers.tier(name) or ():
            lines.append(f"{name} {seg.start} {seg.end} {seg.label}")
    return "\n".join(lines) + "\n"


# -- syllables -----------------------------------------------------------------
def _is_vowel(label: str, vowels) -> bool:
    return label.upper().rstrip("012") in vowels


def syllabify(phones, vowels=ARPABET_VOWELS) -> tuple[Segment, ...]:
    """Group one word's phones into syllables.

    Each vowel is a nucleus. Consonants between two nuclei go to the later
    one (maximal onset), leading consonants join the first syllable and
    trailing ones the last. A word without vowels is a single syllable.
    Syllables tile the span from the first phone start to the last phone end.
    """
    phones = list(phones)
    if not phones:
        return ()
    if not vowels:
        raise ValueError("vowel set must not be empty")
    nuclei = [i for i, p in enumerate(phones) if _is_vowel(p.label, vowels)]
    if not nuclei:
        groups = [phones]
    else:
        # Syllable j starts right after nucleus j-1 (all intervening consonants
        # are onset of j); the first syllable also takes leading consonants.
        starts = [0] + [nuclei[j - 1] + 1 for j in range(1, len(nuclei))]
        ends = starts[1:] + [len(phones)]
        groups = [phones[a:b] for a, b in zip(starts, ends)]
    out = []
    for j, g in enumerate(groups):
        start = g[0].start
        end = groups[j + 1][0].start if j + 1 < len(groups) else g[-1].end
        out.append(Segment(start, end, "-".join(p.label for p in g)))
    return tuple(out)


def syllabify_tiers(tiers: AlignmentTiers, vowels=ARPABET_VOWELS) -> tuple[Segment, ...]:
    """Syllabify word by word; phones outside any word form their own runs."""
    if not tiers.words:
        return syllabify(tiers.phones, vowels)
    groups: list[list[Segment]] = []
    wi, current_word = 0, None
    words = list(tiers.words)
    for p in tiers.phones:
        while wi < len(words) and words[wi].end <= p.start:
            wi += 1
        inside = wi < len(words) and words[wi].start <= p.start and p.end <= words[wi].end
        key = wi if inside else ("gap", wi)
        if key != current_word or not groups:
            groups.append([])
            current_word = key
        groups[-1].append(p)
    out: list[Segment] = []
    for g in groups:
        out.extend(syllabify(g, vowels))
    return tuple(out)


def resolve_tier(tiers: AlignmentTiers, name: str,
                 vowels=ARPABET_VOWELS) -> tuple[tuple[Segment, ...], bool]:
    """Segments for ``name``; the bool reports a syllabify fallback."""
    if name == "syllable" and tiers.syllables is None:
        return syllabify_tiers(tiers, vowels), True
    segs = tiers.tier(name)
    return tuple(segs or ()), False


# -- pooling -------------------------------------------------------------------
def pool_segments(frames: LayeredEmbedding, segments, granularity: str = "phone") -> LayeredEmbedding:
    """Average frame vectors inside each ``[start, end)`` segment, per layer."""
    segments = list(segments)
    if not segments:
        raise ValidationError("cannot pool an empty segmentation")
    starts = np.array([s.start for s in segments])
    ends = np.array([s.end for s in segments])
    if np.any(starts < 0) or np.any(ends > frames.K) or np.any(ends <= starts):
        raise ValidationError(f"segments fall outside the {frames.K}-frame stack or are empty")
    cs = np.zeros((frames.L, frames.K + 1, frames.D), dtype=np.float64)
    np.cumsum(frames.data, axis=1, dtype=np.float64, out=cs[:, 1:])
    pooled = (cs[:, ends] - cs[:, starts]) / (ends - starts)[None, :, None]
    return LayeredEmbedding(frames.modality, granularity, pooled.astype(np.float32))


# -- layer mixing --------------------------------------------------------------
class LayerMixer(Module):
    """Weighted layer average followed by layer normalisation.

    Weights start at 1 and are free in sign; only a near-zero sum is refused.
    """

    def __init__(self, n_layers: int, dim: int, dtype=np.float32):
        self.weights = Parameter(np.ones(n_layers), dtype=dtype)
        self.ln_gain = Parameter(np.ones(dim), dtype=dtype)
        self.ln_bias = Parameter(np.zeros(dim), dtype=dtype)

    @property
    def n_layers(self) -> int:
        return self.weights.shape[0]

    def __call__(self, stack) -> Tensor:
        """``stack[..., L, K, D]`` -> ``[..., K, D]``."""
        if isinstance(stack, LayeredEmbedding):
            stack = stack.data
        data = np.asarray(stack, dtype=self.weights.dtype)
        if data.ndim < 3 or data.shape[-3] != self.n_layers:
            raise DimensionError(
                f"mixer has {self.n_layers} weights but stack has shape {data.shape}")
        total = float(self.weights.data.sum())
        if abs(total) < MIN_WEIGHT_SUM:
            raise DegenerateWeightsError(
                f"layer weights sum to {total:.3e}; cannot normalise")
        w = self.weights.reshape(self.n_layers, 1, 1)
        mixed = tsum(mul(Tensor(data), w), axis=-3) / tsum(self.weights)
        return layer_norm(mixed, self.ln_gain, self.ln_bias)


def mix_layers(stack, mixer: LayerMixer) -> Tensor:
    return mixer(stack)
