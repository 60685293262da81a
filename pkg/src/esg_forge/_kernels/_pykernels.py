"""Pure-Python reference kernels.

These are the fallback when the compiled module is unavailable and the
behavioural reference the compiled versions are tested against.
"""
from __future__ import annotations

from typing import Sequence


def lcs_length(a: Sequence[int], b: Sequence[int]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            if x == y:
                cur.append(prev[j] + 1)
            else:
                cur.append(max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def lcs_mask(a: Sequence[int], b: Sequence[int]) -> list[bool]:
    """Mark the positions of ``a`` used by one longest common subsequence.

    Backtracking prefers the diagonal, then the upper cell on ties, so the
    chosen subsequence is deterministic.
    """
    n, m = len(a), len(b)
    mask = [False] * n
    if n == 0 or m == 0:
        return mask
    table = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        row, up = table[i], table[i - 1]
        ai = a[i - 1]
        for j in range(1, m + 1):
            if ai == b[j - 1]:
                row[j] = up[j - 1] + 1
            else:
                row[j] = up[j] if up[j] >= row[j - 1] else row[j - 1]
    i, j = n, m
    while i > 0 and j > 0:
        if a[i - 1] == b[j - 1]:
            mask[i - 1] = True
            i -= 1
            j -= 1
        elif table[i - 1][j] >= table[i][j - 1]:
            i -= 1
        else:
            j -= 1
    return mask


def levenshtein(s: str, t: str) -> int:
    if s == t:
        return 0
    if not s:
        return len(t)
    if not t:
        return len(s)
    prev = list(range(len(t) + 1))
    for i, cs in enumerate(s, 1):
        cur = [i]
        for j, ct in enumerate(t, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (cs != ct)))
        prev = cur
    return prev[-1]
