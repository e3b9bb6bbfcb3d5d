"""Dataset manifests, the text-embedding cache format, tokenization,
WAV I/O, and the deterministic synthetic audio-caption corpus."""

from __future__ import annotations

import hashlib
import json
import os
import struct
import wave
from dataclasses import dataclass, field

import numpy as np

from .config import SAMPLE_RATE
from .errors import FormatError, InvalidInput, ParseError

MISSING_CAPTION_TEMPLATE = "The sound of {labels}"


@dataclass
class ManifestEntry:
    id: str
    caption: str
    duration_s: float
    source: str | dict  # wav path, or a synth spec mapping
    labels: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({
            "id": self.id, "source": self.source, "caption": self.caption,
            "labels": self.labels, "duration_s": self.duration_s,
        }, sort_keys=True)


def _entry_from_record(record: dict, line: int) -> ManifestEntry:
    if not isinstance(record, dict):
        raise ParseError("manifest line is not a JSON object", line=line)
    for key in ("id", "source", "duration_s"):
        if key not in record:
            raise ParseError(f"missing required field {key!r}", line=line)
    labels = list(record.get("labels", []))
    caption = record.get("caption", "")
    if not caption:
        if not labels:
            raise ParseError("entry needs a caption or labels to derive one", line=line)
        caption = MISSING_CAPTION_TEMPLATE.format(labels=", ".join(labels))
    duration = float(record["duration_s"])
    if duration <= 0:
        raise ParseError("duration_s must be positive", line=line)
    return ManifestEntry(
        id=str(record["id"]), caption=caption, duration_s=duration,
        source=record["source"], labels=labels,
    )


def load_manifest(path) -> list[ManifestEntry]:
    """Read a JSON-Lines manifest; rejects duplicates and bad records."""
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", line=lineno) from exc
            entry = _entry_from_record(record, lineno)
            if entry.id in seen:
                raise InvalidInput(f"duplicate manifest id {entry.id!r}")
            seen.add(entry.id)
            entries.append(entry)
    return entries


def save_manifest(path, entries: list[ManifestEntry]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(entry.to_json() + "\n" for entry in entries)


# -- embedding cache -------------------------------------------------------------

CACHE_MAGIC = b"M2DC"
CACHE_VERSION = 1
DIGEST_BYTES = 32


def caption_digest(caption: str) -> bytes:
    return hashlib.sha256(caption.encode("utf-8")).digest()


@dataclass
class EmbeddingCache:
    dim: int
    rows: dict[bytes, np.ndarray]

    def lookup(self, caption: str) -> np.ndarray:
        digest = caption_digest(caption)
        if digest not in self.rows:
            raise InvalidInput(f"caption not in cache: {caption!r}")
        return self.rows[digest]


def cache_write(path, dim: int, rows: dict[bytes, np.ndarray]) -> None:
    if dim < 1:
        raise InvalidInput("cache dim must be positive")
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<IIQ", CACHE_VERSION, dim, len(rows)))
        for digest, vector in rows.items():
            if len(digest) != DIGEST_BYTES:
                raise InvalidInput("cache keys must be 32-byte digests")
            arr = np.ascontiguousarray(vector, dtype="<f4")
            if arr.shape != (dim,):
                raise InvalidInput(f"vector shape {arr.shape} does not match dim {dim}")
            fh.write(digest)
            fh.write(arr.tobytes())


def cache_read(path) -> EmbeddingCache:
    with open(path, "rb") as fh:
        if fh.read(4) != CACHE_MAGIC:
            raise FormatError("bad cache magic")
        header = fh.read(16)
        if len(header) != 16:
            raise FormatError("truncated cache header")
        version, dim, count = struct.unpack("<IIQ", header)
        if version != CACHE_VERSION:
            raise FormatError(f"unsupported cache version {version}")
        rows: dict[bytes, np.ndarray] = {}
        record = DIGEST_BYTES + 4 * dim
        for _ in range(count):
            chunk = fh.read(record)
            if len(chunk) != record:
                raise FormatError("truncated cache record")
            rows[chunk[:DIGEST_BYTES]] = np.frombuffer(
                chunk[DIGEST_BYTES:], dtype="<f4").astype(np.float64)
        if fh.read(1):
            raise FormatError("trailing bytes after cache payload")
    return EmbeddingCache(dim=dim, rows=rows)


# -- tokenizer --------------------------------------------------------------------

END_ID = 0
PAD_ID = 1
OOV_ID = 2
_SPECIALS = 3


class Tokenizer:
    """Lowercase word tokenizer over a fixed vocabulary with an OOV id."""

    def __init__(self, vocab: list[str]):
        self.vocab = list(vocab)
        self._ids = {word: _SPECIALS + i for i, word in enumerate(self.vocab)}

    @property
    def size(self) -> int:
        return _SPECIALS + len(self.vocab)

    @staticmethod
    def words(text: str) -> list[str]:
        out, current = [], []
        for ch in text.lower():
            if ch.isalnum():
                current.append(ch)
            elif current:
                out.append("".join(current))
                current = []
        if current:
            out.append("".join(current))
        return out

    @classmethod
    def fit(cls, captions: list[str], max_vocab: int = 4096) -> "Tokenizer":
        counts: dict[str, int] = {}
        for caption in captions:
            for word in cls.words(caption):
                counts[word] = counts.get(word, 0) + 1
        ranked = sorted(counts, key=lambda w: (-counts[w], w))
        return cls(ranked[:max_vocab])

    def encode(self, text: str) -> list[int]:
        return [self._ids.get(w, OOV_ID) for w in self.words(text)] + [END_ID]

    def decode(self, ids: list[int]) -> str:
        words = [self.vocab[i - _SPECIALS] for i in ids
                 if i >= _SPECIALS and i - _SPECIALS < len(self.vocab)]
        return " ".join(words)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.writelines(word + "\n" for word in self.vocab)

    @classmethod
    def load(cls, path) -> "Tokenizer":
        with open(path, "r", encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh if line.rstrip("\n")])


_DEFAULT_WORDS = (
    ["the", "sound", "of", "class", "tone", "can", "be", "heard", "music",
     "musical", "instrument", "a", "an", "and"]
    + [str(n) for n in range(32)]
)
DEFAULT_TOKENIZER = Tokenizer(_DEFAULT_WORDS)


def tokenize(caption: str) -> list[int]:
    """Tokenize with the built-in default vocabulary."""
    return DEFAULT_TOKENIZER.encode(caption)


# -- WAV I/O ---------------------------------------------------------------------


def write_wav(path, samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    clipped = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    pcm = np.round(clipped * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate)
        fh.writeframes(pcm.tobytes())


def read_wav(path) -> np.ndarray:
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
            raise FormatError("expected 16-bit mono PCM")
        if fh.getframerate() != SAMPLE_RATE:
            raise InvalidInput(f"expected {SAMPLE_RATE} Hz audio")
        raw = fh.readframes(fh.getnframes())
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32767.0


# -- synthetic corpus --------------------------------------------------------------


@dataclass
class SynthSpec:
    class_id: int
    carrier: str  # sine | noise | chirp
    f0: float
    seed: int


def synth_waveform(spec: SynthSpec, duration_s: float) -> np.ndarray:
    """Deterministic clip: carrier at f0 plus a small seeded noise floor."""
    rng = np.random.default_rng(spec.seed)
    n = int(round(duration_s * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    phase = rng.uniform(0.0, 2.0 * np.pi)
    if spec.carrier == "sine":
        tone = np.sin(2.0 * np.pi * spec.f0 * t + phase)
    elif spec.carrier == "chirp":
        sweep = spec.f0 * (1.0 + t / max(duration_s, 1e-9))
        tone = np.sin(2.0 * np.pi * sweep * t + phase)
    elif spec.carrier == "noise":
        tone = rng.standard_normal(n) * 0.3
    else:
        raise InvalidInput(f"unknown carrier {spec.carrier!r}")
    return 0.5 * tone + 0.01 * rng.standard_normal(n)


def synth_spec_from(source: dict) -> SynthSpec:
    try:
        return SynthSpec(
            class_id=int(source["class_id"]), carrier=str(source["carrier"]),
            f0=float(source["f0"]), seed=int(source["seed"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidInput(f"bad synth source spec: {source!r}") from exc


def synth_caption(class_id: int) -> str:
    return f"the sound of class-{class_id} tone can be heard"


def synth_corpus(n_classes: int, per_class: int, duration_s: float,
                 seed: int) -> tuple[list[np.ndarray], list[ManifestEntry], np.ndarray]:
    """Seeded tone corpus plus mutually orthogonal class embeddings.

    Class c is a sine at 200*(c+1) Hz; the 4096-d class embeddings are
    orthonormal by construction, so contrastive targets are separable.
    """
    if n_classes < 2:
        raise InvalidInput("need at least two classes")
    rng = np.random.default_rng(seed)
    gauss = rng.standard_normal((4096, n_classes))
    q, _ = np.linalg.qr(gauss)
    embeddings = q.T.copy()  # [n_classes, 4096], orthonormal rows

    waveforms: list[np.ndarray] = []
    entries: list[ManifestEntry] = []
    for c in range(n_classes):
        for i in range(per_class):
            spec = SynthSpec(class_id=c, carrier="sine", f0=200.0 * (c + 1),
                             seed=seed * 1_000_000 + c * 10_000 + i)
            waveforms.append(synth_waveform(spec, duration_s))
            entries.append(ManifestEntry(
                id=f"synth-{c:02d}-{i:04d}",
                caption=synth_caption(c),
                duration_s=duration_s,
                source={"class_id": c, "carrier": spec.carrier,
                        "f0": spec.f0, "seed": spec.seed},
                labels=[f"class-{c} tone"],
            ))
    return waveforms, entries, embeddings


def load_entry_audio(entry: ManifestEntry, wav_dir=None) -> np.ndarray:
    """Waveform for a manifest entry: synthesized or read from disk."""
    if isinstance(entry.source, dict):
        return synth_waveform(synth_spec_from(entry.source), entry.duration_s)
    path = entry.source
    if wav_dir is not None and not os.path.isabs(path):
        path = os.path.join(wav_dir, path)
    return read_wav(path)
