# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled LCS and edit-distance kernels (mirror ``_pykernels``)."""
from libc.stdlib cimport malloc, free, calloc


def lcs_length(const int[::1] a, const int[::1] b):
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], i, j
    cdef int *prev
    cdef int *cur
    cdef int *tmp
    cdef int best
    if n == 0 or m == 0:
        return 0
    prev = <int *> calloc(m + 1, sizeof(int))
    cur = <int *> calloc(m + 1, sizeof(int))
    if prev == NULL or cur == NULL:
        free(prev)
        free(cur)
        raise MemoryError()
    with nogil:
        for i in range(n):
            cur[0] = 0
            for j in range(m):
                if a[i] == b[j]:
                    cur[j + 1] = prev[j] + 1
                else:
                    cur[j + 1] = prev[j + 1] if prev[j + 1] > cur[j] else cur[j]
            tmp = prev
            prev = cur
            cur = tmp
        best = prev[m]
    free(prev)
    free(cur)
    return best


def lcs_mask(const int[::1] a, const int[::1] b):
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], i, j, w = m + 1
    cdef int *table
    cdef int up, left
    mask = [False] * n
    if n == 0 or m == 0:
        return mask
    table = <int *> calloc((n + 1) * w, sizeof(int))
    if table == NULL:
        raise MemoryError()
    with nogil:
        for i in range(1, n + 1):
            for j in range(1, m + 1):
                if a[i - 1] == b[j - 1]:
                    table[i * w + j] = table[(i - 1) * w + j - 1] + 1
                else:
                    up = table[(i - 1) * w + j]
                    left = table[i * w + j - 1]
                    table[i * w + j] = up if up >= left else left
    i = n
    j = m
    while i > 0 and j > 0:
        if a[i - 1] == b[j - 1]:
            mask[i - 1] = True
            i -= 1
            j -= 1
        elif table[(i - 1) * w + j] >= table[i * w + j - 1]:
            i -= 1
        else:
            j -= 1
    free(table)
    return mask


def levenshtein(str s, str t):
    cdef Py_ssize_t n = len(s), m = len(t), i, j
    cdef Py_UCS4 cs
    cdef int *prev
    cdef int *cur
    cdef int *tmp
    cdef int best, sub, ins, dele
    if s == t:
        return 0
    if n == 0:
        return m
    if m == 0:
        return n
    prev = <int *> malloc((m + 1) * sizeof(int))
    cur = <int *> malloc((m + 1) * sizeof(int))
    if prev == NULL or cur == NULL:
        free(prev)
        free(cur)
        raise MemoryError()
    for j in range(m + 1):
        prev[j] = j
    for i in range(n):
        cs = s[i]
        cur[0] = i + 1
        for j in range(m):
            sub = prev[j] + (0 if cs == t[j] else 1)
            ins = cur[j] + 1
            dele = prev[j + 1] + 1
            best = sub
            if ins < best:
                best = ins
            if dele < best:
                best = dele
            cur[j + 1] = best
        tmp = prev
        prev = cur
        cur = tmp
    best = prev[m]
    free(prev)
    free(cur)
    return best
