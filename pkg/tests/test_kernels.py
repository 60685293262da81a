from __future__ import annotations

import itertools
import os
import random
import subprocess
import sys

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from esg_forge import _kernels
from esg_forge._kernels import _as_ids, _pykernels

try:
    from esg_forge._kernels import _ckernels
except ImportError:  # extension not built in this environment
    _ckernels = None

needs_ext = pytest.mark.skipif(_ckernels is None, reason="compiled kernels not built")

tokens = st.lists(st.sampled_from("abcde"), max_size=12)


def brute_lcs(a, b) -> int:
    best = 0
    for r in range(len(a), 0, -1):
        for idx in itertools.combinations(range(len(a)), r):
            sub = [a[i] for i in idx]
            it = iter(b)
            if all(any(x == y for y in it) for x in sub):
                return r
    return best


def brute_levenshtein(s: str, t: str) -> int:
    # classic recursion with memo, independent of the kernels' DP layout
    from functools import lru_cache

    @lru_cache(maxsize=None)
    def d(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (s[i - 1] != t[j - 1]))

    return d(len(s), len(t))


def test_backend_name():
    assert _kernels.BACKEND in ("cython", "python")


def test_known_values():
    assert _kernels.lcs_length(list("abcbdab"), list("bdcaba")) == 4
    assert _kernels.levenshtein("ESGRetriver", "ESGRetriever") == 1
    assert _kernels.levenshtein("", "abc") == 3
    assert _kernels.lcs_length([], list("abc")) == 0


@given(tokens, tokens)
@settings(max_examples=200, deadline=None)
def test_lcs_matches_brute_force(a, b):
    if len(a) > 8:
        a = a[:8]
    assert _pykernels.lcs_length(a, b) == brute_lcs(a, b)
    assert _kernels.lcs_length(a, b) == brute_lcs(a, b)


@given(tokens, tokens)
@settings(max_examples=200, deadline=None)
def test_lcs_mask_is_a_common_subsequence(a, b):
    for impl in (_pykernels.lcs_mask, _kernels.lcs_mask):
        mask = impl(a, b)
        assert len(mask) == len(a)
        picked = [x for x, m in zip(a, mask) if m]
        assert len(picked) == _pykernels.lcs_length(a, b)
        it = iter(b)
        assert all(any(x == y for y in it) for x in picked)


@given(st.text("abcxyz", max_size=10), st.text("abcxyz", max_size=10))
@settings(max_examples=200, deadline=None)
def test_levenshtein_matches_recursion(s, t):
    assert _pykernels.levenshtein(s, t) == brute_levenshtein(s, t)
    assert _kernels.levenshtein(s, t) == brute_levenshtein(s, t)


@needs_ext
def test_backends_agree_on_long_inputs():
    rng = random.Random(7)
    vocab = [f"w{i}" for i in range(30)]
    for _ in range(30):
        a = rng.choices(vocab, k=rng.randint(0, 150))
        b = rng.choices(vocab, k=rng.randint(0, 150))
        ia, ib = _as_ids(a, b)
        assert _ckernels.lcs_length(ia, ib) == _pykernels.lcs_length(a, b)
        assert _ckernels.lcs_mask(ia, ib) == _pykernels.lcs_mask(a, b)
        s, t = "".join(rng.choices("abcdé", k=40)), "".join(rng.choices("abcdé", k=35))
        assert _ckernels.levenshtein(s, t) == _pykernels.levenshtein(s, t)


def test_pure_python_can_be_forced():
    out = subprocess.run(
        [sys.executable, "-c", "from esg_forge import _kernels; print(_kernels.BACKEND)"],
        env={**os.environ, "ESG_FORGE_PURE_PYTHON": "1"},
        capture_output=True,
        text=True,
        check=True,
    )
    assert out.stdout.strip() == "python"
