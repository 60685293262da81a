from __future__ import annotations

import itertools
import math
import random
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from esg_forge.embeddings import HashingEmbedder
from esg_forge.metrics import (
    GEN_COLUMNS,
    GenScores,
    bertscore,
    bleu,
    corpus_bleu,
    count_chunks,
    mean_scores,
    meteor,
    meteor_alignment,
    normalize_tokenize,
    rouge_l,
    rouge_lsum,
    rouge_n,
    score_pair,
    token_f1,
)

seqs = st.lists(st.sampled_from(list("abcdef")), max_size=10)


class TableEmbedder:
    model_id = "table"

    def __init__(self, table):
        self.table = table

    def embed(self, texts):
        return np.array([self.table[t] for t in texts], dtype=float)


# ---------------------------------------------------------------- oracles


def oracle_f1(pred, ref):
    if not pred and not ref:
        return 1.0
    if not pred or not ref:
        return 0.0
    remaining = list(ref)
    overlap = 0
    for tok in pred:
        if tok in remaining:
            remaining.remove(tok)
            overlap += 1
    if overlap == 0:
        return 0.0
    p, r = overlap / len(pred), overlap / len(ref)
    return 2 * p * r / (p + r)


def oracle_grams(tokens, n):
    return [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]


def oracle_clipped(pred_grams, ref_grams):
    remaining = list(ref_grams)
    hit = 0
    for g in pred_grams:
        if g in remaining:
            remaining.remove(g)
            hit += 1
    return hit


def oracle_bleu(pred, ref, max_n=4):
    """Product form of the geometric mean, evaluated without logarithms."""
    if not pred or not ref:
        return 0.0
    precisions = []
    for n in range(1, max_n + 1):
        pg = oracle_grams(pred, n)
        if not pg:
            continue
        precisions.append(oracle_clipped(pg, oracle_grams(ref, n)) / len(pg))
    if not precisions or min(precisions) == 0:
        return 0.0
    bp = 1.0 if len(pred) > len(ref) else math.exp(1 - len(ref) / len(pred))
    return bp * math.prod(precisions) ** (1 / len(precisions))


def oracle_rouge_n(pred, ref, n):
    pg, rg = oracle_grams(pred, n), oracle_grams(ref, n)
    if not pg and not rg:
        return 1.0 if pred == ref else 0.0
    if not pg or not rg:
        return 0.0
    hit = oracle_clipped(pg, rg)
    if hit == 0:
        return 0.0
    p, r = hit / len(pg), hit / len(rg)
    return 2 * p * r / (p + r)


def is_subsequence(sub, seq):
    it = iter(seq)
    return all(any(x == y for y in it) for x in sub)


def brute_lcs(a, b):
    for r in range(len(a), 0, -1):
        for idx in itertools.combinations(range(len(a)), r):
            if is_subsequence([a[i] for i in idx], b):
                return r
    return 0


def oracle_rouge_l(pred, ref):
    if not pred and not ref:
        return 1.0
    if not pred or not ref:
        return 0.0
    lcs = brute_lcs(pred, ref)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(pred), lcs / len(ref)
    return 2 * p * r / (p + r)


def brute_meteor_counts(pred, ref):
    """Enumerate every injective exact-match alignment."""
    best = (0, 0)
    options = [[j for j, r in enumerate(ref) if r == p] + [None] for p in pred]
    for choice in itertools.product(*options):
        js = [j for j in choice if j is not None]
        if len(js) != len(set(js)):
            continue
        align = [(i, j) for i, j in enumerate(choice) if j is not None]
        m = len(align)
        key = (m, -count_chunks(align))
        if key > (best[0], -best[1]) or best == (0, 0):
            best = (m, count_chunks(align))
    return best


# ---------------------------------------------------------------- examples


def test_tokenizer_examples():
    assert normalize_tokenize("The cat sat.") == ["the", "cat", "sat"]
    assert normalize_tokenize("") == []
    assert normalize_tokenize("CO2-e (kg)") == ["co2", "e", "kg"]


@given(st.text(max_size=40))
def test_tokenizer_idempotent(text):
    toks = normalize_tokenize(text)
    assert normalize_tokenize(" ".join(toks)) == toks
    assert all(not any(c.isspace() for c in t) for t in toks)


def test_worked_examples():
    assert token_f1(["the", "cat", "sat"], ["the", "cat"]) == pytest.approx(0.8)
    assert token_f1([], []) == 1.0 and token_f1(["a"], []) == 0.0
    assert bleu(["the", "cat"], ["the", "cat", "sat"], max_n=2) == pytest.approx(math.exp(1 - 1.5))
    assert bleu(list("abcde"), list("abxde")) == 0.0
    assert rouge_n(list("abd"), list("acb"), 1) == pytest.approx(2 / 3)
    assert rouge_l(list("abd"), list("acb")) == pytest.approx(2 / 3)
    assert meteor(list("abcd"), list("abcd")) == 0.9921875
    assert meteor(["b", "a"], ["a", "b"]) == 0.5
    assert meteor(["x"], ["y"]) == 0.0


def test_bertscore_worked_example():
    h = math.sqrt(2) / 2
    emb = TableEmbedder({"p1": (1, 0), "p2": (0, 1), "r1": (1, 0), "r2": (h, h)})
    p, r, f = bertscore(["p1", "p2"], ["r1", "r2"], emb)
    assert p == pytest.approx((1 + h) / 2) and r == pytest.approx((1 + h) / 2) and f == pytest.approx((1 + h) / 2)
    orth = TableEmbedder({"a": (1, 0), "b": (0, 1)})
    assert bertscore(["a"], ["b"], orth) == (0.0, 0.0, 0.0)
    assert bertscore([], ["b"], orth) == (0.0, 0.0, 0.0)


def test_bertscore_identity_any_embedder():
    toks = normalize_tokenize("Scope 3 emissions cover the value chain")
    assert bertscore(toks, toks, HashingEmbedder()) == pytest.approx((1.0, 1.0, 1.0))


def test_rouge_lsum():
    assert rouge_lsum("the cat sat on the mat", "the cat lay on the mat") == pytest.approx(
        rouge_l(normalize_tokenize("the cat sat on the mat"), normalize_tokenize("the cat lay on the mat"))
    )
    text = "Emissions fell. Water use rose. Board diversity improved."
    assert rouge_lsum(text, text) == 1.0
    # reordered sentences keep every hit at summary level
    assert rouge_lsum("Water use rose. Emissions fell.", "Emissions fell. Water use rose.") == 1.0
    assert rouge_lsum("", "x") == 0.0


# ---------------------------------------------------------------- oracle equivalence


def random_pairs(n, seed=0, vocab="abcdefgh", max_len=12):
    rng = random.Random(seed)
    for _ in range(n):
        yield (
            [rng.choice(vocab) for _ in range(rng.randint(0, max_len))],
            [rng.choice(vocab) for _ in range(rng.randint(0, max_len))],
        )


def test_overlap_metrics_match_oracles():
    for pred, ref in random_pairs(300, seed=1):
        assert abs(token_f1(pred, ref) - oracle_f1(pred, ref)) <= 1e-9
        assert abs(bleu(pred, ref) - oracle_bleu(pred, ref)) <= 1e-9
        for n in (1, 2):
            assert abs(rouge_n(pred, ref, n) - oracle_rouge_n(pred, ref, n)) <= 1e-9


def test_rouge_l_matches_brute_force():
    for pred, ref in random_pairs(300, seed=2, vocab="abcd", max_len=10):
        assert abs(rouge_l(pred, ref) - oracle_rouge_l(pred, ref)) <= 1e-12


def test_meteor_alignment_is_optimal():
    for pred, ref in random_pairs(300, seed=3, vocab="abc", max_len=7):
        m, chunks = brute_meteor_counts(pred, ref)
        align = meteor_alignment(pred, ref)
        assert (len(align), count_chunks(align)) == (m, chunks)


@pytest.mark.parametrize("m", range(1, 21))
def test_meteor_identity_closed_form(m):
    toks = [f"t{i}" for i in range(m)]
    assert meteor(toks, toks) == 1 - 0.5 / m**3


# ---------------------------------------------------------------- properties


@given(seqs, seqs)
@settings(max_examples=300, deadline=None)
def test_range(pred, ref):
    for v in (
        token_f1(pred, ref),
        bleu(pred, ref),
        bleu(pred, ref, smoothing=True),
        rouge_n(pred, ref, 1),
        rouge_n(pred, ref, 2),
        rouge_l(pred, ref),
        meteor(pred, ref),
    ):
        assert 0.0 <= v <= 1.0


@given(st.lists(st.sampled_from(list("abcdef")), min_size=1, max_size=10))
def test_identity(toks):
    assert token_f1(toks, toks) == bleu(toks, toks) == rouge_n(toks, toks, 1) == rouge_n(toks, toks, 2) == rouge_l(toks, toks) == 1.0


@given(seqs, seqs)
@settings(max_examples=200, deadline=None)
def test_rouge_n_symmetric(pred, ref):
    assert rouge_n(pred, ref, 1) == pytest.approx(rouge_n(ref, pred, 1))
    assert rouge_n(pred, ref, 2) == pytest.approx(rouge_n(ref, pred, 2))


def test_bleu_is_asymmetric():
    a, b = ["the", "cat"], ["the", "cat", "sat"]
    assert bleu(a, b) != bleu(b, a)


@given(st.lists(st.sampled_from(list("abcdef")), min_size=1, max_size=10), st.data())
@settings(max_examples=200, deadline=None)
def test_monotone_corruption(ref, data):
    pred = list(ref)
    i = data.draw(st.integers(0, len(pred) - 1))
    corrupted = pred[:i] + ["<oov>"] + pred[i + 1 :]
    assert token_f1(corrupted, ref) <= token_f1(pred, ref)
    assert rouge_n(corrupted, ref, 1) <= rouge_n(pred, ref, 1)
    assert bleu(corrupted, ref) <= bleu(pred, ref)


def test_smoothing_rescues_short_answers():
    pred, ref = ["net", "zero", "by", "2050"], ["net", "zero", "in", "2050"]
    assert bleu(pred, ref) == 0.0
    assert 0.0 < bleu(pred, ref, smoothing=True) < 1.0


def test_corpus_bleu():
    pairs = [(list("abcd"), list("abcd")), (list("abce"), list("abcf"))]
    assert 0 < corpus_bleu(pairs) < 1
    assert corpus_bleu([(list("abcd"), list("abcd"))]) == 1.0


def test_score_pair_and_means():
    s = score_pair("Net zero by 2050.", "Net zero by 2050.", HashingEmbedder())
    assert s.f1 == s.bleu == s.rouge1 == s.rougeLsum == 1.0 and s.bert_f1 == pytest.approx(1.0)
    no_bert = score_pair("a b", "a c")
    assert math.isnan(no_bert.bert_f1)
    empty = score_pair("", "answer text")
    assert all(getattr(empty, c) == 0.0 for c in GEN_COLUMNS if not c.startswith("bert"))
    avg = mean_scores([s, GenScores(**{c: 0.0 for c in GEN_COLUMNS})])
    assert avg.f1 == 0.5
    assert GenScores.from_dict(s.to_dict()) == s
    assert mean_scores([]) is None
