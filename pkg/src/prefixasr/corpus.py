"""Deterministic synthetic multilingual speech-text corpus.

Every token id owns a fixed random acoustic template in R^F; an utterance
samples tokens from its language's contiguous id range (with a small
code-mixing probability of drawing from another language) and emits each
template for a few frames plus Gaussian noise. Token ranges partition
[0, V) so hypothesis tokens can be language-tagged exactly via the lexicon.

On disk a corpus is line-delimited JSON, one utterance per line; the
lexicon maps token id to language tag, one pair per line.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np


class CorpusFormatError(ValueError):
    pass


@dataclass
class Utterance:
    id: str
    lang_id: int
    lang: str
    frames: np.ndarray          # [T x F]
    tokens: list[int]
    raw_text: str | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError(f"utterance {self.id}: frames must be [T x F] with T >= 1")
        if not np.isfinite(self.frames).all():
            raise ValueError(f"utterance {self.id}: non-finite frames")
        if len(self.tokens) < 1:
            raise ValueError(f"utterance {self.id}: empty token sequence")


@dataclass
class CorpusSpec:
    """Pure function of (spec, seed): regenerating gives identical corpora."""

    languages: int
    vocab: int
    train_per_language: list[int]
    test_per_language: list[int]
    feature_dim: int = 8
    utt_len_range: tuple[int, int] = (3, 6)
    frames_per_token_range: tuple[int, int] = (4, 4)
    noise_std: float = 0.4
    codemix_prob: float = 0.05
    # Weight of a template component shared by the k-th token of every
    # language. Above zero, corresponding tokens across languages become
    # acoustic near-neighbors, so language identity carries real signal.
    cross_lang_confusability: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.vocab % self.languages != 0:
            raise ValueError("vocab must split evenly across languages")
        if len(self.train_per_language) != self.languages:
            raise ValueError("train_per_language needs one count per language")
        if len(self.test_per_language) != self.languages:
            raise ValueError("test_per_language needs one count per language")
        lo, hi = self.utt_len_range
        if not 1 <= lo <= hi:
            raise ValueError(f"bad utterance length range {self.utt_len_range}")
        lo, hi = self.frames_per_token_range
        if not 1 <= lo <= hi:
            raise ValueError(f"bad frames-per-token range {self.frames_per_token_range}")
        if not 0.0 <= self.codemix_prob < 1.0:
            raise ValueError(f"bad codemix_prob {self.codemix_prob}")
        if not 0.0 <= self.cross_lang_confusability < 1.0:
            raise ValueError(f"bad cross_lang_confusability {self.cross_lang_confusability}")

    @property
    def tokens_per_language(self) -> int:
        return self.vocab // self.languages

    def lang_tag(self, lang_id: int) -> str:
        return f"l{lang_id}"

    def token_range(self, lang_id: int) -> range:
        k = self.tokens_per_language
        return range(lang_id * k, (lang_id + 1) * k)

    def language_of_token(self, token: int) -> int:
        if not 0 <= token < self.vocab:
            raise ValueError(f"token {token} outside [0, {self.vocab})")
        return token // self.tokens_per_language

    def lexicon(self) -> dict[int, str]:
        return {t: self.lang_tag(self.language_of_token(t)) for t in range(self.vocab)}


def _token_templates(spec: CorpusSpec) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(spec.seed, 0x74706c)))
    k = spec.tokens_per_language
    c = spec.cross_lang_confusability
    shared = rng.normal(0.0, 1.0, size=(k, spec.feature_dim))
    own = rng.normal(0.0, 1.0, size=(spec.vocab, spec.feature_dim))
    if c == 0.0:
        return own
    tiled = np.tile(shared, (spec.languages, 1))
    return math.sqrt(c) * tiled + math.sqrt(1.0 - c) * own


def _make_utterance(spec: CorpusSpec, templates: np.ndarray, split: int,
                    lang_id: int, index: int) -> Utterance:
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=(spec.seed, split, lang_id, index)))
    lo, hi = spec.utt_len_range
    u = int(rng.integers(lo, hi + 1))
    tokens = []
    for _ in range(u):
        if spec.languages > 1 and rng.random() < spec.codemix_prob:
            other = int(rng.integers(0, spec.languages - 1))
            if other >= lang_id:
                other += 1
            src = other
        else:
            src = lang_id
        tokens.append(int(rng.integers(spec.token_range(src).start,
                                       spec.token_range(src).stop)))
    rlo, rhi = spec.frames_per_token_range
    chunks = []
    for tok in tokens:
        r = int(rng.integers(rlo, rhi + 1))
        noise = rng.normal(0.0, spec.noise_std, size=(r, spec.feature_dim))
        chunks.append(templates[tok][None, :] + noise)
    split_tag = "train" if split == 0 else "test"
    return Utterance(
        id=f"{split_tag}-{spec.lang_tag(lang_id)}-{index:05d}",
        lang_id=lang_id,
        lang=spec.lang_tag(lang_id),
        frames=np.concatenate(chunks, axis=0),
        tokens=tokens,
    )


def generate_synthetic_corpus(spec: CorpusSpec) -> tuple[list[Utterance], list[Utterance]]:
    """Train and test utterance lists with exact per-language counts."""
    templates = _token_templates(spec)
    train, test = [], []
    for lang_id in range(spec.languages):
        for i in range(spec.train_per_language[lang_id]):
            train.append(_make_utterance(spec, templates, 0, lang_id, i))
        for i in range(spec.test_per_language[lang_id]):
            test.append(_make_utterance(spec, templates, 1, lang_id, i))
    return train, test


# ---------------------------------------------------------------------------
# on-disk formats

_REQUIRED_FIELDS = ("id", "lang", "lang_id", "frames", "tokens")


def write_corpus(path, utterances: list[Utterance]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for utt in utterances:
            rec = {
                "id": utt.id,
                "lang": utt.lang,
                "lang_id": utt.lang_id,
                "frames": [[float(v) for v in row] for row in utt.frames],
                "tokens": [int(t) for t in utt.tokens],
            }
            fh.write(json.dumps(rec) + "\n")


def read_corpus(path) -> list[Utterance]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"{path}:{lineno}: malformed record: {exc}") from exc
            for key in _REQUIRED_FIELDS:
                if key not in rec:
                    raise CorpusFormatError(f"{path}:{lineno}: missing field {key!r}")
            out.append(Utterance(
                id=rec["id"], lang_id=int(rec["lang_id"]), lang=rec["lang"],
                frames=np.asarray(rec["frames"], dtype=np.float64),
                tokens=[int(t) for t in rec["tokens"]],
            ))
    return out


def write_lexicon(path, lexicon: dict[int, str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for token in sorted(lexicon):
            fh.write(f"{token} {lexicon[token]}\n")


def read_lexicon(path) -> dict[int, str]:
    out: dict[int, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise CorpusFormatError(f"{path}:{lineno}: expected 'token tag'")
            out[int(parts[0])] = parts[1]
    return out


# ---------------------------------------------------------------------------
# corpus-spec file (key = value per line)


def parse_corpus_spec(text: str) -> CorpusSpec:
    kv: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CorpusFormatError(f"corpus spec line {lineno}: expected key = value")
        key, val = (part.strip() for part in line.split("=", 1))
        kv[key] = val

    def ints(s: str) -> list[int]:
        return [int(p) for p in s.split(",")]

    def pair(s: str) -> tuple[int, int]:
        parts = ints(s)
        if len(parts) != 2:
            raise CorpusFormatError(f"expected 'lo,hi', got {s!r}")
        return parts[0], parts[1]

    try:
        languages = int(kv.pop("languages"))
        vocab = int(kv.pop("vocab"))
        train = ints(kv.pop("train_per_language"))
        test = ints(kv.pop("test_per_language"))
    except KeyError as exc:
        raise CorpusFormatError(f"corpus spec missing required key {exc}") from exc
    spec = CorpusSpec(
        languages=languages, vocab=vocab,
        train_per_language=train, test_per_language=test,
        feature_dim=int(kv.pop("feature_dim", 8)),
        utt_len_range=pair(kv.pop("utt_len_range", "3,6")),
        frames_per_token_range=pair(kv.pop("frames_per_token_range", "4,4")),
        noise_std=float(kv.pop("noise_std", 0.4)),
        codemix_prob=float(kv.pop("codemix_prob", 0.05)),
        cross_lang_confusability=float(kv.pop("cross_lang_confusability", 0.0)),
        seed=int(kv.pop("seed", 0)),
    )
    if kv:
        raise CorpusFormatError(f"corpus spec has unknown keys: {sorted(kv)}")
    return spec
