"""Generative rank: mean of per-column competition ranks, then competition
ranking of those means (higher metric values are better)."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

from ..metrics import GEN_COLUMNS


@dataclass(frozen=True)
class RankResult:
    ranks: dict[str, int | None]
    mean_ranks: dict[str, float]
    excluded: list[str]


def competition_ranks(values: Sequence[float], higher_is_better: bool = True) -> list[int]:
    """1-2-2-4 style: rank = 1 + number of strictly better values."""
    sign = -1 if higher_is_better else 1
    keys = [sign * v for v in values]
    return [1 + sum(1 for other in keys if other < mine) for mine in keys]


def _usable(v) -> bool:
    try:
        return v is not None and not math.isnan(float(v))
    except (TypeError, ValueError):
        return False


def rank_table(table: Mapping[str, Mapping[str, float]], columns: Sequence[str] = GEN_COLUMNS) -> RankResult:
    """Rank labelled rows; rows missing any column are excluded (rank None)."""
    if not columns:
        raise ValueError("need at least one metric column")
    labels = list(table)
    kept = [lab for lab in labels if all(_usable(table[lab].get(c)) for c in columns)]
    excluded = [lab for lab in labels if lab not in kept]
    # integer rank sums compare exactly; the mean is only for display
    sums = [0] * len(kept)
    for c in columns:
        for i, r in enumerate(competition_ranks([float(table[lab][c]) for lab in kept])):
            sums[i] += r
    final = competition_ranks(sums, higher_is_better=False)
    ranks: dict[str, int | None] = {lab: None for lab in labels}
    ranks.update(zip(kept, final))
    return RankResult(ranks, {lab: s / len(columns) for lab, s in zip(kept, sums)}, excluded)


def aggregate_rank(rows: Sequence, columns: Sequence[str] = GEN_COLUMNS) -> list:
    """Return copies of ``ModelRow`` objects with ``rank`` assigned."""
    table = {}
    for row in rows:
        if row.model_label in table:
            raise ValueError(f"duplicate model label {row.model_label!r}")
        table[row.model_label] = row.gen.to_dict() if row.gen is not None else {}
    result = rank_table(table, columns)
    return [row.with_rank(result.ranks[row.model_label]) for row in rows]


def kendall_tau(a: Sequence[float], b: Sequence[float]) -> float:
    """Kendall tau-b (tie-corrected)."""
    if len(a) != len(b) or len(a) < 2:
        raise ValueError("need two equal-length sequences of length >= 2")
    concordant = discordant = ties_a = ties_b = 0
    n = len(a)
    for i in range(n):
        for j in range(i + 1, n):
            da = (a[i] > a[j]) - (a[i] < a[j])
            db = (b[i] > b[j]) - (b[i] < b[j])
            if da == 0 and db == 0:
                continue
            if da == 0:
                ties_a += 1
            elif db == 0:
                ties_b += 1
            elif da == db:
                concordant += 1
            else:
                discordant += 1
    denom = math.sqrt((concordant + discordant + ties_a) * (concordant + discordant + ties_b))
    if denom == 0:
        return float("nan")
    return (concordant - discordant) / denom
