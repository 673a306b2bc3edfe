"""Vocabulary, feature I/O, normalization, SpecAugment, and synthetic data.

Feature files are binary: magic "STFE", u32 version (1), u32 n_frames,
u32 feat_dim, then n_frames*feat_dim little-endian float32 values in
row-major order. Transcripts are UTF-8 TSV lines "utt_id<TAB>text"; text
corpora are one sentence per line.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError

BLANK_TOKEN = "<blank>"
FEATURE_MAGIC = b"STFE"
FEATURE_VERSION = 1
VARIANCE_FLOOR = 1e-8


@dataclass(frozen=True)
class Vocabulary:
    """Token inventory with the blank symbol pinned at id 0.

    Real tokens occupy ids 1..size_lm. The transducer and CTC output spaces
    are one wider than the LM's because they include the blank.
    """

    tokens: tuple[str, ...]
    blank_id: int = 0

    def __post_init__(self) -> None:
        if len(self.tokens) < 2:
            raise ConfigError("vocabulary needs at least one real token besides the blank")
        if self.tokens[0] != BLANK_TOKEN:
            raise ConfigError(f"token 0 must be {BLANK_TOKEN!r}, got {self.tokens[0]!r}")
        if self.blank_id != 0:
            raise ConfigError("blank id is fixed at 0")
        if len(set(self.tokens)) != len(self.tokens):
            raise ConfigError("duplicate tokens in vocabulary")

    @property
    def size_lm(self) -> int:
        return len(self.tokens) - 1

    @property
    def size_trans(self) -> int:
        return self.size_lm + 1

    @property
    def size_ctc(self) -> int:
        return self.size_trans

    def encode(self, text: str) -> tuple[int, ...]:
        table = {tok: i for i, tok in enumerate(self.tokens)}
        try:
            return tuple(table[ch] for ch in text)
        except KeyError as err:
            raise DataError(f"character {err.args[0]!r} not in vocabulary") from None

    def decode(self, ids: Sequence[int]) -> str:
        for i in ids:
            if not 1 <= i <= self.size_lm:
                raise DataError(f"token id {i} outside [1, {self.size_lm}]")
        return "".join(self.tokens[i] for i in ids)


def build_char_vocab(sentences: Iterable[str]) -> Vocabulary:
    """Blank at id 0, then the sorted distinct characters of the corpus."""
    chars: set[str] = set()
    empty = True
    for sentence in sentences:
        empty = False
        chars.update(sentence)
    if empty or not chars:
        raise DataError("cannot build a vocabulary from an empty corpus")
    return Vocabulary((BLANK_TOKEN, *sorted(chars)))


@dataclass
class Utterance:
    utt_id: str
    features: np.ndarray  # (T, feat_dim)
    tokens: tuple[int, ...]

    def __post_init__(self) -> None:
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise DataError(f"utterance {self.utt_id!r}: bad feature shape {self.features.shape}")
        if any(t < 1 for t in self.tokens):
            raise DataError(f"utterance {self.utt_id!r}: blank or invalid id in targets")


@dataclass
class TextCorpus:
    sentences: list[tuple[int, ...]]

    def __post_init__(self) -> None:
        if not self.sentences:
            raise DataError("text corpus is empty")
        for sent in self.sentences:
            if any(t < 1 for t in sent):
                raise DataError("blank or invalid id in corpus sentence")


@dataclass(frozen=True)
class SpecAugmentConfig:
    time_warp_w: int = 5
    freq_mask_f: int = 32
    freq_mask_count: int = 2
    time_mask_t: int = 40
    time_mask_count: int = 2
    seed: int = 0

    def __post_init__(self) -> None:
        if min(self.time_warp_w, self.freq_mask_f, self.freq_mask_count,
               self.time_mask_t, self.time_mask_count) < 0:
            raise ConfigError("SpecAugment parameters must be nonnegative")


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    var: np.ndarray


def normalize_global(utterances: Sequence[Utterance]) -> tuple[list[Utterance], NormStats]:
    """Zero-mean unit-variance per feature bin over all training frames."""
    if not utterances:
        raise DataError("normalize_global: no utterances")
    stacked = np.concatenate([u.features.astype(np.float64) for u in utterances], axis=0)
    mean = stacked.mean(axis=0)
    var = np.maximum(stacked.var(axis=0), VARIANCE_FLOOR)
    stats = NormStats(mean=mean, var=var)
    return [apply_normalization(u, stats) for u in utterances], stats


def apply_normalization(utt: Utterance, stats: NormStats) -> Utterance:
    feats = (utt.features.astype(np.float64) - stats.mean) / np.sqrt(stats.var)
    return Utterance(utt.utt_id, feats, utt.tokens)


# ---------------------------------------------------------------------------
# SpecAugment
# ---------------------------------------------------------------------------


def _time_warp(feats: np.ndarray, w: int, rng: np.random.Generator) -> np.ndarray:
    """Displace one interior anchor by up to `w` frames, resampling linearly."""
    t = feats.shape[0]
    if w == 0 or t < 2 * w + 2:
        return feats
    anchor = int(rng.integers(w, t - w))
    shift = int(rng.integers(-w, w + 1))
    if shift == 0:
        return feats
    src_knots = np.array([0.0, anchor, t - 1.0])
    dst_knots = np.array([0.0, anchor + shift, t - 1.0])
    # map each output frame back to a source position, then interpolate
    positions = np.interp(np.arange(t, dtype=np.float64), dst_knots, src_knots)
    lo = np.floor(positions).astype(int)
    hi = np.minimum(lo + 1, t - 1)
    frac = (positions - lo)[:, None]
    return feats[lo] * (1.0 - frac) + feats[hi] * frac


def spec_augment(utt: Utterance, cfg: SpecAugmentConfig, rng: np.random.Generator) -> Utterance:
    """Time warp plus frequency and time masking; masked cells are zeroed."""
    feats = utt.features.astype(np.float64, copy=True)
    t, d = feats.shape
    feats = _time_warp(feats, cfg.time_warp_w, rng)
    for _ in range(cfg.freq_mask_count):
        width = int(rng.integers(0, min(cfg.freq_mask_f, d) + 1))
        if width:
            start = int(rng.integers(0, d - width + 1))
            feats[:, start : start + width] = 0.0
    for _ in range(cfg.time_mask_count):
        width = int(rng.integers(0, min(cfg.time_mask_t, t) + 1))
        if width:
            start = int(rng.integers(0, t - width + 1))
            feats[start : start + width, :] = 0.0
    return Utterance(utt.utt_id, feats, utt.tokens)


# ---------------------------------------------------------------------------
# synthetic desk-scale data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthLanguage:
    """Fixed word inventory and per-token feature templates."""

    words: tuple[str, ...]
    templates: np.ndarray  # (size_lm + 1, feat_dim); row 0 unused (blank)


@dataclass
class SynthDataset:
    utterances: list[Utterance]
    corpus: TextCorpus
    language: SynthLanguage


def make_language(
    vocab: Vocabulary,
    feat_dim: int,
    language_seed: int,
    n_words: int = 10,
    word_len: tuple[int, int] = (2, 4),
) -> SynthLanguage:
    """Deterministic word inventory over the vocabulary's letters.

    The space character, when present, is reserved as the word separator and
    never appears inside a word.
    """
    rng = np.random.default_rng(language_seed)
    letters = [tok for tok in vocab.tokens[1:] if tok != " "]
    if not letters:
        raise ConfigError("vocabulary has no non-space tokens to build words from")
    words: list[str] = []
    seen: set[str] = set()
    guard = 0
    while len(words) < n_words:
        guard += 1
        if guard > 1000 * n_words:
            raise ConfigError("could not generate enough distinct words; enlarge alphabet")
        length = int(rng.integers(word_len[0], word_len[1] + 1))
        word = "".join(letters[int(i)] for i in rng.integers(0, len(letters), size=length))
        if word not in seen:
            seen.add(word)
            words.append(word)
    templates = rng.normal(0.0, 1.0, size=(vocab.size_trans, feat_dim))
    return SynthLanguage(tuple(words), templates)


def _sample_sentence(language: SynthLanguage, rng: np.random.Generator,
                     words_per_sentence: tuple[int, int], separator: str) -> str:
    n = int(rng.integers(words_per_sentence[0], words_per_sentence[1] + 1))
    picks = rng.integers(0, len(language.words), size=n)
    return separator.join(language.words[int(i)] for i in picks)


def synth_dataset(
    seed: int,
    n_utts: int,
    vocab: Vocabulary,
    frames_per_token: int,
    *,
    feat_dim: int = 16,
    noise: float = 0.3,
    language_seed: int = 7777,
    n_words: int = 10,
    words_per_sentence: tuple[int, int] = (1, 3),
    word_len: tuple[int, int] = (2, 4),
    n_extra_text: int = 200,
) -> SynthDataset:
    """Noisy per-token template utterances plus a larger text-only corpus.

    The word inventory and templates depend only on (vocab, feat_dim,
    language_seed), so datasets drawn with different `seed`s share one
    distribution. Same seed twice gives bit-identical output.
    """
    if frames_per_token < 2:
        raise ConfigError("frames_per_token must be >= 2")
    if n_utts < 1:
        raise ConfigError("synth_dataset needs n_utts >= 1")
    language = make_language(vocab, feat_dim, language_seed, n_words, word_len)
    separator = " " if " " in vocab.tokens else ""
    rng = np.random.default_rng(seed)

    utterances: list[Utterance] = []
    sentences: list[tuple[int, ...]] = []
    for i in range(n_utts):
        text = _sample_sentence(language, rng, words_per_sentence, separator)
        tokens = vocab.encode(text)
        frames = np.repeat(language.templates[list(tokens)], frames_per_token, axis=0)
        frames = frames + noise * rng.normal(size=frames.shape)
        utterances.append(Utterance(f"utt_{i:04d}", frames.astype(np.float32), tokens))
        sentences.append(tokens)
    for _ in range(n_extra_text):
        text = _sample_sentence(language, rng, words_per_sentence, separator)
        sentences.append(vocab.encode(text))
    return SynthDataset(utterances, TextCorpus(sentences), language)


def nearest_template_decode(features: np.ndarray, language: SynthLanguage,
                            frames_per_token: int) -> tuple[int, ...]:
    """Oracle classifier: mean-pool each token span, pick the closest template."""
    t = features.shape[0]
    n_tokens = t // frames_per_token
    out = []
    for i in range(n_tokens):
        pooled = features[i * frames_per_token : (i + 1) * frames_per_token].mean(axis=0)
        dists = np.linalg.norm(language.templates[1:] - pooled, axis=1)
        out.append(int(dists.argmin()) + 1)
    return tuple(out)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def write_features(path: str | Path, features: np.ndarray) -> None:
    feats = np.ascontiguousarray(features, dtype=np.float32)
    if feats.ndim != 2:
        raise DataError(f"write_features: expected a 2-D matrix, got shape {feats.shape}")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<III", FEATURE_VERSION, feats.shape[0], feats.shape[1]))
        fh.write(feats.astype("<f4").tobytes())


def read_features(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    header = len(FEATURE_MAGIC) + 12
    if len(raw) < 4:
        raise DataError(f"{path}: truncated header at byte {len(raw)} (need 4 magic bytes)")
    if raw[:4] != FEATURE_MAGIC:
        raise DataError(f"{path}: bad magic at byte 0: {raw[:4]!r} != {FEATURE_MAGIC!r}")
    if len(raw) < header:
        raise DataError(f"{path}: truncated header at byte {len(raw)} (need {header})")
    version, n_frames, feat_dim = struct.unpack("<III", raw[4:header])
    if version != FEATURE_VERSION:
        raise DataError(f"{path}: unsupported version {version} at byte 4")
    expected = header + 4 * n_frames * feat_dim
    if len(raw) < expected:
        raise DataError(
            f"{path}: truncated payload at byte {len(raw)}: header declares "
            f"{n_frames}x{feat_dim} floats ({expected} bytes total)"
        )
    flat = np.frombuffer(raw[header:expected], dtype="<f4")
    return flat.reshape(n_frames, feat_dim).copy()


def write_transcripts(path: str | Path, entries: Sequence[tuple[str, str]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for utt_id, text in entries:
            fh.write(f"{utt_id}\t{text}\n")


def read_transcripts(path: str | Path) -> list[tuple[str, str]]:
    entries = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line:
            continue
        if "\t" not in line:
            raise DataError(f"{path}:{lineno}: expected 'utt_id<TAB>text'")
        utt_id, text = line.split("\t", 1)
        entries.append((utt_id, text))
    return entries


def write_corpus(path: str | Path, sentences: Sequence[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sentence in sentences:
            fh.write(sentence + "\n")


def read_corpus(path: str | Path) -> list[str]:
    return [line for line in Path(path).read_text(encoding="utf-8").split("\n")[:-1]]


def write_vocab(path: str | Path, vocab: Vocabulary) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for token in vocab.tokens:
            fh.write(token + "\n")


def read_vocab(path: str | Path) -> Vocabulary:
    lines = Path(path).read_text(encoding="utf-8").split("\n")[:-1]
    if not lines:
        raise DataError(f"{path}: empty vocabulary file")
    return Vocabulary(tuple(lines))
