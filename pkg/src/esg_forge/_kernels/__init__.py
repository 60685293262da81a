"""Hot inner loops: LCS (ROUGE-L/Lsum) and Levenshtein (tool-name matching).

The compiled module is used when importable; set ``ESG_FORGE_PURE_PYTHON=1``
to force the fallback. ``BACKEND`` names the active implementation.
"""
from __future__ import annotations

import os
from typing import Hashable, Sequence

import numpy as np

from . import _pykernels

try:
    if os.environ.get("ESG_FORGE_PURE_PYTHON"):
        raise ImportError("pure-Python kernels forced by environment")
    from . import _ckernels
except ImportError:
    _ckernels = None

BACKEND = "cython" if _ckernels is not None else "python"


def _as_ids(a: Sequence[Hashable], b: Sequence[Hashable]) -> tuple[np.ndarray, np.ndarray]:
    vocab: dict = {}
    ia = np.fromiter((vocab.setdefault(x, len(vocab)) for x in a), dtype=np.int32, count=len(a))
    ib = np.fromiter((vocab.setdefault(x, len(vocab)) for x in b), dtype=np.int32, count=len(b))
    return ia, ib


def lcs_length(a: Sequence[Hashable], b: Sequence[Hashable]) -> int:
    if _ckernels is None:
        return _pykernels.lcs_length(a, b)
    return _ckernels.lcs_length(*_as_ids(a, b))


def lcs_mask(a: Sequence[Hashable], b: Sequence[Hashable]) -> list[bool]:
    """Positions of ``a`` that belong to one (deterministic) LCS with ``b``."""
    if _ckernels is None:
        return _pykernels.lcs_mask(a, b)
    return _ckernels.lcs_mask(*_as_ids(a, b))


def levenshtein(s: str, t: str) -> int:
    if _ckernels is None:
        return _pykernels.levenshtein(s, t)
    return _ckernels.levenshtein(s, t)


__all__ = ["BACKEND", "lcs_length", "lcs_mask", "levenshtein"]
