"""Readability scores for model responses.

Counting heuristics (syllables, sentences, difficult words) are pinned here
because they, far more than the published formulas, decide whether two
implementations agree.
"""
from __future__ import annotations

import hashlib
import math
import re
from dataclasses import asdict, dataclass, fields
from functools import lru_cache
from importlib import resources
from typing import Sequence

READABILITY_COLUMNS = (
    "fre",
    "fkg",
    "fog",
    "smog",
    "ari",
    "cli",
    "linsear",
    "dale_chall",
    "diff_words",
    "syllables",
    "sentences",
)

# header labels in report tables
READABILITY_LABELS = {
    "fre": "FRE",
    "fkg": "FKG",
    "fog": "Fog",
    "smog": "SMOG",
    "ari": "ARI",
    "cli": "CLI",
    "linsear": "Linsear",
    "dale_chall": "DaleChall",
    "diff_words": "DiffWords",
    "syllables": "Syllables (mean/resp.)",
    "sentences": "Sentences (mean/resp.)",
}

LINSEAR_SAMPLE = 100
SMOG_MIN_SENTENCES = 30

ABBREVIATIONS = frozenset(
    """
    mr mrs ms dr prof sr jr st mt vs etc inc ltd co corp dept est fig no vol approx
    e.g i.e a.m p.m u.s u.k jan feb mar apr jun jul aug sep sept oct nov dec
    """.split()
)

_VOWELS = "aeiouy"
_VOWEL_GROUP = re.compile(r"[aeiouy]+")
_TERMINATOR = re.compile(r"[.!?]+(?=\s|$)")
_LAST_WORD = re.compile(r"(\S+)$")
_EDGE_PUNCT = re.compile(r"^[^\w]+|[^\w]+$")


class ReadabilityDomainError(ValueError):
    pass


@lru_cache(maxsize=1)
def easy_words() -> frozenset[str]:
    text = resources.files("esg_forge").joinpath("data/easy_words.txt").read_text(encoding="utf-8")
    return frozenset(w.strip().lower() for w in text.splitlines() if w.strip())


@lru_cache(maxsize=1)
def easy_words_sha256() -> str:
    data = resources.files("esg_forge").joinpath("data/easy_words.txt").read_bytes()
    return hashlib.sha256(data).hexdigest()


def count_syllables(word: str) -> int:
    """Vowel groups (a, e, i, o, u, y), minus a silent final ``e``.

    The final ``e`` counts as silent when it is a vowel group on its own,
    except in consonant + ``le`` endings (``people``, ``table``). Never less
    than 1 for a word with letters.
    """
    w = "".join(ch for ch in word.lower() if ch.isalpha())
    if not w:
        return 0
    n = len(_VOWEL_GROUP.findall(w))
    if len(w) >= 2 and w[-1] == "e" and w[-2] not in _VOWELS:
        consonant_le = w[-2] == "l" and len(w) >= 3 and w[-3] not in _VOWELS
        if not consonant_le:
            n -= 1
    return max(1, n)


def split_sentences(text: str) -> list[str]:
    """Split after ``.``, ``!`` or ``?`` runs followed by whitespace or the
    end of text. A lone ``.`` after a known abbreviation does not split."""
    sentences = []
    start = 0
    for m in _TERMINATOR.finditer(text):
        if m.group() == ".":
            prev = _LAST_WORD.search(text, start, m.start())
            if prev and prev.group(1).lower().lstrip("([\"'") in ABBREVIATIONS:
                continue
        chunk = text[start : m.end()].strip()
        if chunk:
            sentences.append(chunk)
        start = m.end()
    tail = text[start:].strip()
    if tail:
        sentences.append(tail)
    return sentences


def words_of(text: str) -> list[str]:
    """Whitespace tokens with edge punctuation removed; tokens without a
    letter (numbers, stray symbols) are not words."""
    out = []
    for tok in text.split():
        tok = _EDGE_PUNCT.sub("", tok)
        if any(ch.isalpha() for ch in tok):
            out.append(tok)
    return out


def word_syllables(word: str) -> int:
    # hyphenated or digit-split words are counted part by part
    parts = re.findall(r"[^\W\d_]+", word)
    return sum(count_syllables(p) for p in parts) or 1


def is_difficult(word: str) -> bool:
    easy = easy_words()
    w = word.lower().replace("’", "'")
    return w not in easy and "".join(ch for ch in w if ch.isalpha()) not in easy


@dataclass(frozen=True)
class TextStats:
    words: int
    sentences: int
    letters: int
    syllables: int
    polysyllables: int
    difficult_words: int
    # Linsear Write works on the first LINSEAR_SAMPLE words
    linsear_words: int = 0
    linsear_easy: int = 0
    linsear_hard: int = 0

    def __post_init__(self):
        if self.polysyllables > self.words or self.difficult_words > self.words:
            raise ValueError("polysyllables and difficult words cannot exceed words")
        if self.words >= 1 and (self.syllables < self.words or self.sentences < 1):
            raise ValueError("a text with words needs >= 1 sentence and >= 1 syllable per word")


def compute_stats(text: str) -> TextStats:
    words = words_of(text)
    if not words:
        return TextStats(0, 0, 0, 0, 0, 0)
    syll = [word_syllables(w) for w in words]
    sample = syll[:LINSEAR_SAMPLE]
    return TextStats(
        words=len(words),
        sentences=max(1, len(split_sentences(text))),
        letters=sum(ch.isalpha() for w in words for ch in w),
        syllables=sum(syll),
        polysyllables=sum(1 for s in syll if s >= 3),
        difficult_words=sum(1 for w in words if is_difficult(w)),
        linsear_words=len(sample),
        linsear_easy=sum(1 for s in sample if s <= 2),
        linsear_hard=sum(1 for s in sample if s >= 3),
    )


@dataclass(frozen=True)
class ReadabilityReport:
    fre: float
    fkg: float
    fog: float
    smog: float
    ari: float
    cli: float
    linsear: float
    dale_chall: float
    diff_words: float
    syllables: float
    sentences: float

    def to_dict(self) -> dict[str, float]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "ReadabilityReport":
        return cls(**{f.name: float(d[f.name]) for f in fields(cls)})


def linsear_write(stats: TextStats) -> float:
    # sentence count prorated to the sample when the text is longer than it
    sample_sentences = stats.sentences * stats.linsear_words / stats.words
    r = (stats.linsear_easy + 3 * stats.linsear_hard) / sample_sentences
    return r / 2 if r > 20 else r / 2 - 1


def readability_scores(stats: TextStats) -> ReadabilityReport:
    W, S = stats.words, stats.sentences
    if W < 1 or S < 1:
        raise ReadabilityDomainError("readability needs at least one word and one sentence")
    wps = W / S
    spw = stats.syllables / W
    diff_pct = 100 * stats.difficult_words / W
    dale = 0.1579 * diff_pct + 0.0496 * wps
    if stats.difficult_words / W > 0.05:
        dale += 3.6365
    return ReadabilityReport(
        fre=206.835 - 1.015 * wps - 84.6 * spw,
        fkg=0.39 * wps + 11.8 * spw - 15.59,
        fog=0.4 * (wps + 100 * stats.polysyllables / W),
        smog=1.0430 * math.sqrt(stats.polysyllables * 30 / S) + 3.1291,
        ari=4.71 * stats.letters / W + 0.5 * wps - 21.43,
        cli=0.0588 * (100 * stats.letters / W) - 0.296 * (100 * S / W) - 15.8,
        linsear=linsear_write(stats),
        dale_chall=dale,
        diff_words=float(stats.difficult_words),
        syllables=float(stats.syllables),
        sentences=float(S),
    )


def smog_low_confidence(stats: TextStats) -> bool:
    """SMOG was calibrated on samples of 30+ sentences."""
    return stats.sentences < SMOG_MIN_SENTENCES


def score_text(text: str) -> ReadabilityReport | None:
    """Scores for one response, or ``None`` when it has no words (degenerate)."""
    stats = compute_stats(text)
    if stats.words == 0:
        return None
    return readability_scores(stats)


def mean_reports(reports: Sequence[ReadabilityReport]) -> ReadabilityReport | None:
    if not reports:
        return None
    return ReadabilityReport(
        **{c: math.fsum(getattr(r, c) for r in reports) / len(reports) for c in READABILITY_COLUMNS}
    )
