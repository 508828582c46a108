"""Caption and metadata similarity measures.

All scores lie in [0, 1]:

* ``sbert_similarity``: cosine of sentence embeddings, negatives floored at 0.
* ``bm25_similarity``: Okapi BM25 of the prediction against the reference,
  divided by the reference's score against itself.
* ``length_similarity``: ``exp(-|Lp - Lr| / tau)`` over word counts.
* ``pos_similarity``: cosine of part-of-speech tag histograms.
"""

from __future__ import annotations

import math
import re
import subprocess
from collections import Counter
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

import numpy as np

TAGSET: tuple[str, ...] = ("NOUN", "VERB", "ADJ", "ADV", "PRON", "DET", "ADP", "NUM", "CONJ", "PART", "INTJ", "OTHER")
TAG_INDEX = {t: i for i, t in enumerate(TAGSET)}

DEFAULT_TAU = 10.0
DEFAULT_K1 = 1.2
DEFAULT_B = 0.75

_TOKEN_RE = re.compile(r"[^\W_]+")


class EmptyInput(ValueError):
    pass


class RefNotIndexed(KeyError):
    pass


class TaggerError(RuntimeError):
    pass


@dataclass(frozen=True)
class TokenizedText:
    tokens: tuple[str, ...]
    source: str

    def __len__(self) -> int:
        return len(self.tokens)


def tokenize(text: str) -> TokenizedText:
    return TokenizedText(tuple(_TOKEN_RE.findall(text.lower())), text)


def _tokens(text) -> tuple[str, ...]:
    if isinstance(text, TokenizedText):
        return text.tokens
    if isinstance(text, tuple):
        return text
    return tokenize(text).tokens


# ── Embedding similarity ─────────────────────────────────────────────────────
def cosine(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return 0.0
    return float(np.dot(u, v) / (nu * nv))


def clamp01(x: float) -> float:
    return min(1.0, max(0.0, x))


def sbert_similarity(pred: str, ref: str, embedder: Callable[[Sequence[str]], Sequence]) -> float:
    """``embedder`` maps a list of texts to a list of vectors."""
    vecs = embedder([pred, ref])
    return clamp01(cosine(vecs[0], vecs[1]))


def sbert_similarities(pairs: Sequence[tuple[str, str]], embedder) -> list[float]:
    """Batched form of :func:`sbert_similarity`; one embedder call in total."""
    if not pairs:
        return []
    uniq = list(dict.fromkeys(t for pair in pairs for t in pair))
    vectors = embedder(uniq)
    table = {t: vectors[i] for i, t in enumerate(uniq)}
    return [clamp01(cosine(table[p], table[r])) for p, r in pairs]


# ── BM25 ─────────────────────────────────────────────────────────────────────
class Bm25Index:
    """Document statistics for Okapi BM25 over a set of reference texts."""

    def __init__(self, documents: Iterable, k1: float = DEFAULT_K1, b: float = DEFAULT_B):
        if k1 < 0:
            raise ValueError("k1 must be >= 0")
        if not 0 <= b <= 1:
            raise ValueError("b must lie in [0, 1]")
        self.k1 = k1
        self.b = b
        self.docs: dict[tuple[str, ...], Counter] = {}
        self.df: Counter = Counter()
        lengths = []
        for doc in documents:
            toks = _tokens(doc)
            tf = Counter(toks)
            self.df.update(tf.keys())
            lengths.append(len(toks))
            self.docs.setdefault(toks, tf)
        self.n_docs = len(lengths)
        if self.n_docs < 1:
            raise EmptyInput("BM25 index needs at least one document")
        self.avgdl = sum(lengths) / self.n_docs
        if self.avgdl <= 0:
            raise EmptyInput("BM25 index needs nonempty documents")

    def idf(self, term: str) -> float:
        df = self.df.get(term, 0)
        return math.log(1 + (self.n_docs - df + 0.5) / (df + 0.5))

    def score(self, query, document) -> float:
        doc = _tokens(document)
        if doc not in self.docs:
            raise RefNotIndexed(" ".join(doc))
        tf = self.docs[doc]
        norm = self.k1 * (1 - self.b + self.b * len(doc) / self.avgdl)
        total = 0.0
        for term in _tokens(query):
            f = tf.get(term, 0)
            if f:
                total += self.idf(term) * f * (self.k1 + 1) / (f + norm)
        return total


def bm25_similarity(pred, ref, index: Bm25Index) -> float:
    ref_toks = _tokens(ref)
    if ref_toks not in index.docs:
        raise RefNotIndexed(" ".join(ref_toks))
    pred_toks = _tokens(pred)
    if not pred_toks or not ref_toks:
        return 0.0
    self_score = index.score(ref_toks, ref_toks)
    if self_score <= 0:
        return 0.0
    return clamp01(index.score(pred_toks, ref_toks) / self_score)


# ── Length ───────────────────────────────────────────────────────────────────
def length_similarity(pred, ref, tau: float = DEFAULT_TAU) -> float:
    if tau <= 0:
        raise ValueError("tau must be > 0")
    return math.exp(-abs(len(_tokens(pred)) - len(_tokens(ref))) / tau)


# ── Part of speech ───────────────────────────────────────────────────────────
@lru_cache(maxsize=1)
def default_lexicon() -> dict[str, str]:
    text = resources.files("metacap").joinpath("assets", "pos_lexicon.txt").read_text(encoding="utf-8")
    lexicon: dict[str, str] = {}
    for line in text.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        tag, words = line.split("\t", 1)
        if tag not in TAG_INDEX:
            raise ValueError(f"lexicon uses unknown tag {tag!r}")
        for w in words.split():
            lexicon.setdefault(w, tag)
    return lexicon


_SUFFIX_RULES: tuple[tuple[str, str], ...] = (
    ("ly", "ADV"),
    ("ing", "VERB"),
    ("ed", "VERB"),
    ("ous", "ADJ"),
    ("ful", "ADJ"),
    ("ive", "ADJ"),
)


class LexiconTagger:
    """Lexicon lookup, then plural stripping, then suffix heuristics."""

    def __init__(self, lexicon: dict[str, str] | None = None):
        self.lexicon = default_lexicon() if lexicon is None else lexicon

    def tag_word(self, word: str) -> str:
        word = word.lower()
        if word in self.lexicon:
            return self.lexicon[word]
        if word.isdigit() or _is_number(word):
            return "NUM"
        for stem in _plural_stems(word):
            if self.lexicon.get(stem) in ("NOUN", "VERB"):
                return self.lexicon[stem]
        for suffix, tag in _SUFFIX_RULES:
            if word.endswith(suffix) and len(word) > len(suffix) + 1:
                return tag
        return "NOUN"

    def __call__(self, tokens: Sequence[str]) -> list[str]:
        return [self.tag_word(t) for t in tokens]


def _is_number(word: str) -> bool:
    return bool(re.fullmatch(r"\d+(st|nd|rd|th|s|k)?", word))


def _plural_stems(word: str) -> list[str]:
    stems = []
    if word.endswith("ies") and len(word) > 4:
        stems.append(word[:-3] + "y")
    if word.endswith("es") and len(word) > 3:
        stems.append(word[:-2])
    if word.endswith("s") and len(word) > 2:
        stems.append(word[:-1])
    return stems


class SubprocessTagger:
    """External tagger speaking one token per line in, one tag per line out."""

    def __init__(self, command: Sequence[str], timeout: float = 30.0):
        self.command = list(command)
        self.timeout = timeout

    def __call__(self, tokens: Sequence[str]) -> list[str]:
        if not tokens:
            return []
        try:
            proc = subprocess.run(
                self.command,
                input="".join(t + "\n" for t in tokens),
                capture_output=True,
                text=True,
                timeout=self.timeout,
                check=True,
            )
        except (OSError, subprocess.SubprocessError) as exc:
            raise TaggerError(f"external tagger failed: {exc}") from exc
        tags = proc.stdout.splitlines()
        if len(tags) != len(tokens):
            raise TaggerError(f"tagger returned {len(tags)} tags for {len(tokens)} tokens")
        return [t.strip() for t in tags]


@dataclass(frozen=True)
class PosHistogram:
    values: tuple[float, ...]

    def __getitem__(self, tag: str) -> float:
        return self.values[TAG_INDEX[tag]]

    def as_dict(self) -> dict[str, float]:
        return dict(zip(TAGSET, self.values))

    def is_zero(self) -> bool:
        return not any(self.values)


_DEFAULT_TAGGER: LexiconTagger | None = None


def _default_tagger() -> LexiconTagger:
    global _DEFAULT_TAGGER
    if _DEFAULT_TAGGER is None:
        _DEFAULT_TAGGER = LexiconTagger()
    return _DEFAULT_TAGGER


def pos_histogram(text, tagger=None) -> PosHistogram:
    tagger = tagger or _default_tagger()
    toks = _tokens(text)
    counts = [0] * len(TAGSET)
    for tag in tagger(list(toks)):
        counts[TAG_INDEX.get(tag, TAG_INDEX["OTHER"])] += 1
    total = sum(counts)
    if total == 0:
        return PosHistogram(tuple(0.0 for _ in TAGSET))
    return PosHistogram(tuple(c / total for c in counts))


def pos_similarity(pred, ref, tagger=None) -> float:
    hp = pos_histogram(pred, tagger)
    hr = pos_histogram(ref, tagger)
    if hp.is_zero() or hr.is_zero():
        return 0.0
    return clamp01(cosine(hp.values, hr.values))


# ── Aggregation ──────────────────────────────────────────────────────────────
METRICS: tuple[str, ...] = ("sbert", "bm25", "length", "pos")


def mean(values: Iterable[float]) -> float:
    values = list(values)
    if not values:
        raise EmptyInput("mean of no values")
    return math.fsum(values) / len(values)


@dataclass(frozen=True)
class ScoreRow:
    sbert: float | None = None
    bm25: float | None = None
    length: float | None = None
    pos: float | None = None
    avg: float | None = None

    def __post_init__(self):
        present = [getattr(self, m) for m in METRICS if getattr(self, m) is not None]
        if self.avg is None and present:
            object.__setattr__(self, "avg", mean(present))

    def as_dict(self) -> dict[str, float | None]:
        return {m: getattr(self, m) for m in METRICS + ("avg",)}


def aggregate(rows: Sequence[ScoreRow]) -> ScoreRow:
    """Per-metric means; ``avg`` is the mean of those per-metric means."""
    rows = list(rows)
    if not rows:
        raise EmptyInput("aggregate() needs at least one row")
    means = {}
    for m in METRICS:
        vals = [getattr(r, m) for r in rows if getattr(r, m) is not None]
        means[m] = mean(vals) if vals else None
    return ScoreRow(**means)


class CaptionScorer:
    """Scores predicted captions against one dataset's references."""

    def __init__(self, references: Sequence[str], embedder, tagger=None, tau: float = DEFAULT_TAU,
                 k1: float = DEFAULT_K1, b: float = DEFAULT_B):
        self.index = Bm25Index(references, k1=k1, b=b)
        self.embedder = embedder
        self.tagger = tagger
        self.tau = tau

    def score_all(self, pairs: Sequence[tuple[str, str]]) -> list[ScoreRow]:
        sims = sbert_similarities(pairs, self.embedder)
        return [
            ScoreRow(
                sbert=s,
                bm25=bm25_similarity(p, r, self.index),
                length=length_similarity(p, r, self.tau),
                pos=pos_similarity(p, r, self.tagger),
            )
            for (p, r), s in zip(pairs, sims)
        ]
