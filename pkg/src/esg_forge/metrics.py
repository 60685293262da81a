"""Reference-based open-generation QA metrics.

Every overlap metric works on the same normalised tokens
(:func:`normalize_tokenize`), so scores are comparable only within that
normalisation.
"""
from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import asdict, dataclass, fields
from typing import Iterable, Sequence

import numpy as np

from . import _kernels
from .embeddings import EmbeddingProvider

NORMALIZATION_ID = "lower+strip-punct+whitespace-v1"

GEN_COLUMNS = (
    "f1",
    "meteor",
    "bleu",
    "rouge1",
    "rouge2",
    "rougeL",
    "rougeLsum",
    "bert_precision",
    "bert_recall",
    "bert_f1",
)

_PUNCT = re.compile(r"[^\w\s]|_")


def normalize_tokenize(text: str) -> list[str]:
    """Lowercase, turn punctuation/symbol characters into spaces, split."""
    return _PUNCT.sub(" ", text.lower()).split()


def _f_measure(overlap: float, n_pred: int, n_ref: int) -> float:
    if overlap == 0:
        return 0.0
    p, r = overlap / n_pred, overlap / n_ref
    return 2 * p * r / (p + r)


def token_f1(pred: Sequence[str], ref: Sequence[str]) -> float:
    if not pred and not ref:
        return 1.0
    if not pred or not ref:
        return 0.0
    overlap = sum((Counter(pred) & Counter(ref)).values())
    return _f_measure(overlap, len(pred), len(ref))


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _bleu_counts(pred: Sequence[str], ref: Sequence[str], max_n: int) -> list[tuple[int, int]]:
    out = []
    for n in range(1, max_n + 1):
        pc = ngrams(pred, n)
        out.append((sum((pc & ngrams(ref, n)).values()), sum(pc.values())))
    return out


def _bleu_from_counts(counts: list[tuple[int, int]], pred_len: int, ref_len: int, smoothing: bool) -> float:
    # orders the candidate is too short to have are left out of the mean
    counts = [(m, t) for m, t in counts if t > 0]
    if not counts or pred_len == 0:
        return 0.0
    if smoothing and any(m == 0 for m, _ in counts[1:]):
        counts = [counts[0]] + [(m + 1, t + 1) for m, t in counts[1:]]
    if any(m == 0 for m, _ in counts):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in counts) / len(counts)
    bp = math.exp(min(0.0, 1.0 - ref_len / pred_len))
    return bp * math.exp(log_p)


def bleu(pred: Sequence[str], ref: Sequence[str], max_n: int = 4, smoothing: bool = False) -> float:
    """Sentence BLEU: uniform geometric mean of clipped n-gram precisions
    times the brevity penalty.

    Orders longer than the candidate are skipped rather than scored as zero.
    ``smoothing`` adds one to numerator and denominator of every n > 1
    precision when any of them has no matches.
    """
    if max_n < 1:
        raise ValueError("max_n must be >= 1")
    if not pred or not ref:
        return 0.0
    return _bleu_from_counts(_bleu_counts(pred, ref, max_n), len(pred), len(ref), smoothing)


def corpus_bleu(pairs: Iterable[tuple[Sequence[str], Sequence[str]]], max_n: int = 4, smoothing: bool = False) -> float:
    totals = [[0, 0] for _ in range(max_n)]
    pred_len = ref_len = 0
    for pred, ref in pairs:
        pred_len += len(pred)
        ref_len += len(ref)
        for n, (m, t) in enumerate(_bleu_counts(pred, ref, max_n)):
            totals[n][0] += m
            totals[n][1] += t
    if ref_len == 0:
        return 0.0
    return _bleu_from_counts([tuple(c) for c in totals], pred_len, ref_len, smoothing)


def rouge_n(pred: Sequence[str], ref: Sequence[str], n: int) -> float:
    if n < 1:
        raise ValueError("n must be >= 1")
    pc, rc = ngrams(pred, n), ngrams(ref, n)
    if not pc and not rc:
        # both too short to have n-grams: fall back to exact match
        return 1.0 if list(pred) == list(ref) else 0.0
    if not pc or not rc:
        return 0.0
    return _f_measure(sum((pc & rc).values()), sum(pc.values()), sum(rc.values()))


def rouge_l(pred: Sequence[str], ref: Sequence[str]) -> float:
    if not pred and not ref:
        return 1.0
    if not pred or not ref:
        return 0.0
    return _f_measure(_kernels.lcs_length(pred, ref), len(pred), len(ref))


def _sentence_tokens(text: str) -> list[list[str]]:
    from .readability import split_sentences

    sents = [normalize_tokenize(s) for s in split_sentences(text)]
    return [s for s in sents if s]


def rouge_lsum(pred: str, ref: str) -> float:
    """Summary-level ROUGE-L: per reference sentence, the union of its LCS
    hits against every predicted sentence, clipped by token counts."""
    pred_sents, ref_sents = _sentence_tokens(pred), _sentence_tokens(ref)
    n_pred = sum(map(len, pred_sents))
    n_ref = sum(map(len, ref_sents))
    if n_pred == 0 and n_ref == 0:
        return 1.0
    if n_pred == 0 or n_ref == 0:
        return 0.0
    pred_counts = Counter(t for s in pred_sents for t in s)
    ref_counts = Counter(t for s in ref_sents for t in s)
    hits = 0
    for r in ref_sents:
        union = [False] * len(r)
        for c in pred_sents:
            for i, used in enumerate(_kernels.lcs_mask(r, c)):
                union[i] = union[i] or used
        for tok, used in zip(r, union):
            if used and pred_counts[tok] > 0 and ref_counts[tok] > 0:
                hits += 1
                pred_counts[tok] -= 1
                ref_counts[tok] -= 1
    return _f_measure(hits, n_pred, n_ref)


def _greedy_alignment(pred: Sequence[str], ref: Sequence[str]) -> list[tuple[int, int]]:
    """Longest run of equal unaligned tokens first (earliest in ``pred``,
    then ``ref``, on ties), repeated until nothing else can match."""
    positions: dict[str, list[int]] = {}
    for j, tok in enumerate(ref):
        positions.setdefault(tok, []).append(j)
    pairs = [(i, j) for i, tok in enumerate(pred) for j in positions.get(tok, ())]
    used_p: set[int] = set()
    used_r: set[int] = set()
    alignment: list[tuple[int, int]] = []
    while True:
        run: dict[tuple[int, int], int] = {}
        best = (0, 0, 0)  # (length, -i, -j)
        for i, j in reversed(pairs):
            if i in used_p or j in used_r:
                continue
            length = 1 + run.get((i + 1, j + 1), 0)
            run[(i, j)] = length
            key = (length, -i, -j)
            if key > best:
                best = key
        length, i, j = best[0], -best[1], -best[2]
        if length == 0:
            return sorted(alignment)
        for t in range(length):
            alignment.append((i + t, j + t))
            used_p.add(i + t)
            used_r.add(j + t)


class _BudgetExceeded(Exception):
    pass


def meteor_alignment(
    pred: Sequence[str], ref: Sequence[str], search_budget: int = 20_000
) -> list[tuple[int, int]]:
    """Exact-match alignment with the most matches and, among those, the
    fewest chunks.

    The greedy longest-run alignment seeds a branch-and-bound search over
    all maximum matchings. If the search visits more than ``search_budget``
    nodes the best alignment found so far is returned, which is never worse
    than the greedy one.
    """
    greedy = _greedy_alignment(pred, ref)
    best_chunks = count_chunks(greedy)
    if best_chunks <= 1:
        return greedy
    cp, cr = Counter(pred), Counter(ref)
    skips = {w: c - min(c, cr.get(w, 0)) for w, c in cp.items()}
    ref_pos: dict[str, list[int]] = {}
    for j, tok in enumerate(ref):
        ref_pos.setdefault(tok, []).append(j)
    best = [best_chunks, greedy]
    used: set[int] = set()
    current: list[tuple[int, int]] = []
    nodes = 0

    def search(i: int, prev_j: int | None, chunks: int) -> None:
        nonlocal nodes
        nodes += 1
        if nodes > search_budget:
            raise _BudgetExceeded
        if chunks >= best[0]:
            return
        if i == len(pred):
            best[0], best[1] = chunks, sorted(current)
            return
        tok = pred[i]
        cands = [j for j in ref_pos.get(tok, ()) if j not in used]
        if prev_j is not None and prev_j + 1 in cands:
            cands.remove(prev_j + 1)
            cands.insert(0, prev_j + 1)
        for j in cands:
            used.add(j)
            current.append((i, j))
            search(i + 1, j, chunks + (0 if prev_j is not None and j == prev_j + 1 else 1))
            current.pop()
            used.discard(j)
        if skips[tok] > 0:
            skips[tok] -= 1
            search(i + 1, None, chunks)
            skips[tok] += 1

    try:
        search(0, None, 0)
    except _BudgetExceeded:
        pass
    return best[1]


def count_chunks(alignment: Sequence[tuple[int, int]]) -> int:
    chunks = 0
    prev = None
    for i, j in sorted(alignment):
        if prev is None or (i, j) != (prev[0] + 1, prev[1] + 1):
            chunks += 1
        prev = (i, j)
    return chunks


def meteor_from_counts(matches: int, chunks: int, n_pred: int, n_ref: int) -> float:
    if matches == 0:
        return 0.0
    p, r = matches / n_pred, matches / n_ref
    f_mean = 10 * p * r / (r + 9 * p)
    # integer cubes first: one rounding, so identical inputs give exactly 1 - 0.5/m^3
    penalty = 0.5 * chunks**3 / matches**3
    return f_mean * (1 - penalty)


def meteor(pred: Sequence[str], ref: Sequence[str]) -> float:
    """Exact-match METEOR: ``Fmean * (1 - 0.5 * (chunks/matches)^3)``."""
    alignment = meteor_alignment(pred, ref)
    return meteor_from_counts(len(alignment), count_chunks(alignment), len(pred), len(ref))


def bertscore(pred: Sequence[str], ref: Sequence[str], embedder: EmbeddingProvider) -> tuple[float, float, float]:
    """Greedy cosine matching of token embeddings; no IDF, no rescaling.

    Per-token best similarities are clipped to [0, 1].
    """
    if not pred or not ref:
        return 0.0, 0.0, 0.0
    vectors = np.asarray(embedder.embed(list(pred) + list(ref)), dtype=np.float64)
    if vectors.shape[0] != len(pred) + len(ref):
        raise ValueError(f"embedder returned {vectors.shape[0]} vectors for {len(pred) + len(ref)} tokens")
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("embedder returned a zero vector; cannot normalise")
    unit = vectors / norms
    sim = unit[: len(pred)] @ unit[len(pred) :].T
    precision = float(np.clip(sim.max(axis=1), 0.0, 1.0).mean())
    recall = float(np.clip(sim.max(axis=0), 0.0, 1.0).mean())
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


@dataclass(frozen=True)
class GenScores:
    f1: float
    meteor: float
    bleu: float
    rouge1: float
    rouge2: float
    rougeL: float
    rougeLsum: float
    bert_precision: float
    bert_recall: float
    bert_f1: float

    def to_dict(self) -> dict[str, float]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "GenScores":
        return cls(**{f.name: float(d[f.name]) for f in fields(cls)})


def score_pair(
    prediction: str,
    reference: str,
    embedder: EmbeddingProvider | None = None,
    *,
    bleu_smoothing: bool = True,
) -> GenScores:
    """All generative metrics for one prediction. Without an embedder the
    BERTScore fields are NaN."""
    p, r = normalize_tokenize(prediction), normalize_tokenize(reference)
    if embedder is not None:
        bp, br, bf = bertscore(p, r, embedder)
    else:
        bp = br = bf = float("nan")
    return GenScores(
        f1=token_f1(p, r),
        meteor=meteor(p, r),
        bleu=bleu(p, r, smoothing=bleu_smoothing),
        rouge1=rouge_n(p, r, 1),
        rouge2=rouge_n(p, r, 2),
        rougeL=rouge_l(p, r),
        rougeLsum=rouge_lsum(prediction, reference),
        bert_precision=bp,
        bert_recall=br,
        bert_f1=bf,
    )


def mean_scores(scores: Sequence[GenScores]) -> GenScores | None:
    if not scores:
        return None
    return GenScores(**{c: float(np.mean([getattr(s, c) for s in scores])) for c in GEN_COLUMNS})
