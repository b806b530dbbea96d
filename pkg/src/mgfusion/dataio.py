"""Embedding-stack files, manifests, batching and the synthetic corpus.

Stack file layout (little-endian)::

    offset  size  field
    0       4     magic  b"MGEF"
    4       2     u16 version (1)
    6       1     u8 modality     (0 speech, 1 text)
    7       1     u8 granularity  (0 frame, 1 phone, 2 syllable, 3 word, 4 wordpiece)
    8       12    u32 L, u32 K, u32 D
    20      ...   L*K*D float32, layer-major, then position, then dim

Manifest: one tab-separated record per line,
``id  session  label  speech_path  text_path  alignment_path``; relative
paths are resolved against the manifest's directory.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CodecError, ConfigError, DataError, ParseError, ValidationError
from .granularity import (
    ARPABET_VOWELS,
    AlignmentTiers,
    LayeredEmbedding,
    Segment,
    parse_alignment,
    pool_segments,
    resolve_tier,
    serialize_alignment,
    syllabify_tiers,
)
from .models import CLASS_NAMES

log = logging.getLogger(__name__)

STACK_MAGIC = b"MGEF"
STACK_VERSION = 1
HEADER = struct.Struct("<4sHBBIII")
MODALITY_CODES = {"speech": 0, "text": 1}
GRANULARITY_CODES = {"frame": 0, "phone": 1, "syllable": 2, "word": 3, "wordpiece": 4}
MAX_VALUES = 2**31 - 1

# Stream key -> (granularity name, alignment tier used for pooling).
STREAMS = {
    "T": ("wordpiece", None),
    "F": ("frame", None),
    "P": ("phone", "phone"),
    "S": ("syllable", "syllable"),
    "W": ("word", "word"),
}

REFERENCE_CLASS_COUNTS = (1103, 1636, 1084, 1708)


# -- stack codec ---------------------------------------------------------------
def encode_stack(stack: LayeredEmbedding) -> bytes:
    head = HEADER.pack(STACK_MAGIC, STACK_VERSION, MODALITY_CODES[stack.modality],
                       GRANULARITY_CODES[stack.granularity], stack.L, stack.K, stack.D)
    return head + np.ascontiguousarray(stack.data, dtype="<f4").tobytes()


def decode_stack(buf: bytes) -> LayeredEmbedding:
    if len(buf) < HEADER.size:
        raise CodecError(f"truncated header: {len(buf)} of {HEADER.size} bytes", len(buf))
    magic, version, mod, gran, L, K, D = HEADER.unpack_from(buf)
    if magic != STACK_MAGIC:
        raise CodecError(f"bad magic {magic!r}", 0)
    if version != STACK_VERSION:
        raise CodecError(f"unsupported version {version}", 4)
    modality = {v: k for k, v in MODALITY_CODES.items()}.get(mod)
    granularity = {v: k for k, v in GRANULARITY_CODES.items()}.get(gran)
    if modality is None:
        raise CodecError(f"unknown modality code {mod}", 6)
    if granularity is None:
        raise CodecError(f"unknown granularity code {gran}", 7)
    if min(L, K, D) == 0:
        raise CodecError(f"zero extent in shape ({L}, {K}, {D})", 8)
    count = L * K * D
    if count > MAX_VALUES:
        raise CodecError(f"shape ({L}, {K}, {D}) overflows the value count", 8)
    expected = HEADER.size + 4 * count
    if len(buf) != expected:
        kind = "truncated" if len(buf) < expected else "oversized"
        raise CodecError(f"{kind} payload: expected {expected} bytes, got {len(buf)}",
                         min(len(buf), expected))
    data = np.frombuffer(buf, dtype="<f4", offset=HEADER.size).reshape(L, K, D)
    try:
        return LayeredEmbedding(modality, granularity, data.astype(np.float32))
    except ValidationError as exc:
        raise CodecError(str(exc), HEADER.size) from exc


def write_stack(path, stack: LayeredEmbedding) -> None:
    Path(path).write_bytes(encode_stack(stack))


def read_stack(path) -> LayeredEmbedding:
    return decode_stack(Path(path).read_bytes())


# -- manifest ------------------------------------------------------------------
@dataclass(frozen=True)
class UtteranceRecord:
    utterance_id: str
    session: str
    label: int
    speech_path: str
    text_path: str
    alignment_path: str

    @property
    def label_name(self) -> str:
        return CLASS_NAMES[self.label]


def parse_manifest(text: str) -> list[UtteranceRecord]:
    records, seen = [], set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip() or raw.lstrip().startswith("#"):
            continue
        parts = raw.rstrip("\r\n").split("\t")
        if len(parts) != 6 or not all(p.strip() for p in parts):
            raise ParseError(f"expected 6 tab-separated fields, got {len(parts)}", lineno)
        uid, session, label, speech, text_path, align = (p.strip() for p in parts)
        if label not in CLASS_NAMES:
            raise ParseError(f"unknown label {label!r}; expected one of {CLASS_NAMES}", lineno)
        if uid in seen:
            raise ParseError(f"duplicate utterance id {uid!r}", lineno)
        seen.add(uid)
        records.append(UtteranceRecord(uid, session, CLASS_NAMES.index(label),
                                       speech, text_path, align))
    return records


def serialize_manifest(records) -> str:
    return "".join(
        "\t".join([r.utterance_id, r.session, r.label_name, r.speech_path,
                   r.text_path, r.alignment_path]) + "\n"
        for r in records)


def read_manifest(path) -> list[UtteranceRecord]:
    return parse_manifest(Path(path).read_text(encoding="utf-8"))


# -- utterances and batches ------------------------------------------------------
@dataclass
class Utterance:
    utterance_id: str
    session: str
    label: int
    streams: dict[str, np.ndarray]
    notes: list[str] = field(default_factory=list)


def load_utterance(record: UtteranceRecord, base_dir, keys,
                   vowels=ARPABET_VOWELS) -> Utterance:
    base = Path(base_dir)
    paths = [base / p for p in (record.speech_path, record.text_path, record.alignment_path)]
    for p in paths:
        if not p.exists():
            raise DataError(f"{record.utterance_id}: missing file {p}")
    speech = read_stack(paths[0])
    text = read_stack(paths[1])
    streams, notes = {}, []
    tiers = None
    for key in keys:
        gran, tier = STREAMS[key]
        if key == "T":
            streams[key] = text.data
        elif key == "F":
            streams[key] = speech.data
        else:
            if tiers is None:
                tiers = parse_alignment(paths[2].read_text(encoding="utf-8"), speech.K,
                                        record.utterance_id)
                notes.extend(tiers.warnings)
            segs, fallback = resolve_tier(tiers, tier, vowels)
            if not segs:
                raise DataError(f"{record.utterance_id}: alignment has no {tier} segments")
            if fallback:
                notes.append("syllable tier derived by syllabify")
            streams[key] = pool_segments(speech, segs, gran).data
    return Utterance(record.utterance_id, record.session, record.label, streams, notes)


def load_dataset(manifest_path, keys=("T", "P", "W", "S", "F"),
                 vowels=ARPABET_VOWELS) -> list[Utterance]:
    manifest_path = Path(manifest_path)
    records = read_manifest(manifest_path)
    return [load_utterance(r, manifest_path.parent, keys, vowels) for r in records]


@dataclass
class Batch:
    """Padded streams: ``inputs[key] = (stack[B, L, K, D], mask[B, K])``."""

    inputs: dict[str, tuple[np.ndarray, np.ndarray]]
    labels: np.ndarray
    ids: list[str]

    def __len__(self):
        return len(self.ids)


def pad_stacks(stacks, pad_to: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    L, _, D = stacks[0].shape
    K = max(s.shape[1] for s in stacks)
    if pad_to is not None:
        K = max(K, pad_to)
    out = np.zeros((len(stacks), L, K, D), dtype=np.float32)
    mask = np.zeros((len(stacks), K), dtype=bool)
    for i, s in enumerate(stacks):
        if s.shape[0] != L or s.shape[2] != D:
            raise DataError(f"stack shape {s.shape} inconsistent with ({L}, *, {D})")
        out[i, :, :s.shape[1]] = s
        mask[i, :s.shape[1]] = True
    return out, mask


def infer_dims(utterances) -> dict[str, int]:
    """``dim``, ``text_layers`` and ``speech_layers`` as seen in the data."""
    u = utterances[0]
    text = u.streams.get("T")
    speech = next((u.streams[k] for k in ("F", "P", "S", "W") if k in u.streams), None)
    ref = text if text is not None else speech
    dims = {"dim": int(ref.shape[2])}
    if text is not None:
        dims["text_layers"] = int(text.shape[0])
    if speech is not None:
        dims["speech_layers"] = int(speech.shape[0])
    return dims


def collate(utterances, keys) -> Batch:
    inputs = {k: pad_stacks([u.streams[k] for u in utterances]) for k in keys}
    labels = np.array([u.label for u in utterances], dtype=np.int64)
    return Batch(inputs, labels, [u.utterance_id for u in utterances])


# -- synthetic corpus ------------------------------------------------------------
CONSONANTS = ("B", "D", "F", "G", "K", "L", "M", "N", "P", "R", "S", "T", "V", "Z")
VOWELS = tuple(sorted(ARPABET_VOWELS))


@dataclass
class SynthConfig:
    n: int = 400
    sessions: int = 5
    layers: int = 12
    dim: int = 32
    words: tuple[int, int] = (4, 9)
    phones_per_word: tuple[int, int] = (2, 6)
    frames_per_phone: tuple[int, int] = (2, 5)
    silence_frames: tuple[int, int] = (0, 3)
    text_separation: float = 1.0
    speech_separation: float = 1.0
    jitter: float = 0.5
    noise: float = 1.0
    frame_noise: float = 1.0
    scheme: str = "complementary"
    class_counts: tuple[int, ...] = REFERENCE_CLASS_COUNTS
    write_syllables: bool = False
    seed: int = 0

    def validate(self) -> None:
        C = len(self.class_counts)
        if self.scheme not in ("complementary", "segmental"):
            raise ConfigError(f"unknown scheme {self.scheme!r}")
        if C != len(CLASS_NAMES):
            raise ConfigError(f"class_counts needs {len(CLASS_NAMES)} entries")
        if self.sessions < 1 or self.n < self.sessions * C:
            raise ConfigError(
                f"n={self.n} too small: need at least sessions*classes = {self.sessions * C}")
        if self.layers < 1 or self.dim < 4:
            raise ConfigError("need layers >= 1 and dim >= 4")
        for name in ("words", "phones_per_word", "frames_per_phone", "silence_frames"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < (0 if name == "silence_frames" else 1):
                raise ConfigError(f"bad range {name}={lo, hi}")
        if min(self.class_counts) <= 0:
            raise ConfigError("class_counts must be positive")
        if min(self.counts()) < self.sessions:
            raise ConfigError(
                f"n={self.n} leaves a class with fewer than {self.sessions} utterances "
                f"(counts {self.counts()}); every session needs every class")

    def counts(self) -> list[int]:
        """Largest-remainder scaling of ``class_counts`` to ``n`` utterances."""
        w = np.asarray(self.class_counts, dtype=float)
        raw = self.n * w / w.sum()
        base = np.floor(raw).astype(int)
        order = np.argsort(-(raw - base), kind="stable")
        base[order[: self.n - base.sum()]] += 1
        return [int(c) for c in base]


def _class_means(rng, dim, scale):
    """Orthonormal directions and per-class means for both modalities.

    Text separates classes 0 and 1 but gives 2 and 3 the same mean; speech
    does the reverse. Each modality alone therefore tops out at UA 0.75.
    """
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    u = q.T[:6]
    text = np.stack([u[0], -u[0], u[1], u[1]])
    speech = np.stack([u[2], u[2], u[3], -u[3]])
    speech_seg = np.stack([u[4], u[4], u[3], u[5]])
    return text * scale[0], speech * scale[1], speech_seg * scale[1]


def _word_phones(rng, lo, hi):
    n = int(rng.integers(lo, hi + 1))
    labels = [str(rng.choice(CONSONANTS)) for _ in range(n)]
    for i in range(n):
        if rng.random() < 0.45:
            labels[i] = str(rng.choice(VOWELS))
    if not any(lab in ARPABET_VOWELS for lab in labels):
        labels[int(rng.integers(n))] = str(rng.choice(VOWELS))
    return labels


def _make_alignment(rng, cfg: SynthConfig, uid: str) -> tuple[AlignmentTiers, int]:
    phones, words = [], []
    t = int(rng.integers(cfg.silence_frames[0], cfg.silence_frames[1] + 1))
    for w in range(int(rng.integers(cfg.words[0], cfg.words[1] + 1))):
        w_start = t
        labels = _word_phones(rng, *cfg.phones_per_word)
        for lab in labels:
            d = int(rng.integers(cfg.frames_per_phone[0], cfg.frames_per_phone[1] + 1))
            phones.append(Segment(t, t + d, lab))
            t += d
        words.append(Segment(w_start, t, f"w{w}"))
        t += int(rng.integers(cfg.silence_frames[0], cfg.silence_frames[1] + 1))
    K = max(t, phones[-1].end)
    tiers = AlignmentTiers(uid, tuple(phones), tuple(words))
    if cfg.write_syllables:
        tiers.syllables = syllabify_tiers(tiers)
    return tiers, K


def _layer_profile(L):
    return np.linspace(0.5, 1.5, L) if L > 1 else np.ones(1)


def _speech_stack(rng, cfg, tiers, K, label, means):
    L, D = cfg.layers, cfg.dim
    alpha = _layer_profile(L)[:, None, None]
    frames = np.zeros((K, D))
    if cfg.scheme == "complementary":
        for p in tiers.phones:
            offset = means[1][label] + cfg.jitter * rng.standard_normal(D)
            frames[p.start:p.end] += offset
        content = frames[None] * alpha
        noise = cfg.frame_noise * rng.standard_normal((L, K, D))
        return content + noise
    # Segmental scheme: each syllable carries +/- the class mean with balanced
    # random signs, and frame noise is centred within every syllable, so the
    # class lives only in per-syllable means, not in any frame-level shift.
    sylls = syllabify_tiers(tiers)
    signs = np.resize([1.0, -1.0], len(sylls))
    rng.shuffle(signs)
    wobble = np.zeros((K, D))
    for sign, s in zip(signs, sylls):
        frames[s.start:s.end] += sign * means[2][label] + 0.1 * cfg.jitter * rng.standard_normal(D)
        n = cfg.frame_noise * rng.standard_normal((s.length, D))
        wobble[s.start:s.end] = n - n.mean(axis=0)
    content = frames[None] * alpha + wobble[None]
    return content + 0.1 * cfg.noise * rng.standard_normal((L, K, D))


def _text_stack(rng, cfg, n_words, label, means):
    L, D = cfg.layers, cfg.dim
    pieces = n_words + int(rng.integers(0, max(1, n_words // 3) + 1))
    alpha = _layer_profile(L)[:, None, None]
    content = means[0][label] + cfg.jitter * rng.standard_normal((pieces, D))
    return content[None] * alpha + cfg.noise * rng.standard_normal((L, pieces, D))


def generate_synthetic(cfg: SynthConfig, out_dir) -> Path:
    """Write stacks, alignments and ``manifest.tsv`` under ``out_dir``."""
    cfg.validate()
    out = Path(out_dir)
    (out / "speech").mkdir(parents=True, exist_ok=True)
    (out / "text").mkdir(exist_ok=True)
    (out / "align").mkdir(exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    means = _class_means(rng, cfg.dim, (cfg.text_separation, cfg.speech_separation))

    labels, sessions = [], []
    for c, count in enumerate(cfg.counts()):
        sess = np.arange(count) % cfg.sessions
        rng.shuffle(sess)
        labels.extend([c] * count)
        sessions.extend(sess.tolist())
    order = rng.permutation(len(labels))

    records = []
    for i, j in enumerate(order):
        label, session = labels[j], sessions[j]
        uid = f"Ses{session + 1:02d}_utt{i:05d}"
        tiers, K = _make_alignment(rng, cfg, uid)
        speech = _speech_stack(rng, cfg, tiers, K, label, means)
        text = _text_stack(rng, cfg, len(tiers.words), label, means)
        rel = (f"speech/{uid}.mgef", f"text/{uid}.mgef", f"align/{uid}.txt")
        write_stack(out / rel[0], LayeredEmbedding("speech", "frame", speech))
        write_stack(out / rel[1], LayeredEmbedding("text", "wordpiece", text))
        (out / rel[2]).write_text(serialize_alignment(tiers), encoding="utf-8")
        records.append(UtteranceRecord(uid, f"Ses{session + 1:02d}", label, *rel))
    manifest = out / "manifest.tsv"
    manifest.write_text(serialize_manifest(records), encoding="utf-8")
    log.info("wrote %d utterances to %s", len(records), out)
    return manifest
