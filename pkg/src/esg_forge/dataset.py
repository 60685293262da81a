"""ESG-QA triplet loading and pillar-stratified splitting."""
from __future__ import annotations

import enum
import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

SPLIT_NAMES = ("train", "val", "test")
DEFAULT_FRACTIONS = (0.7, 0.1, 0.2)

DEFAULT_FIELD_MAP = {
    "id": "id",
    "question": "question",
    "answer": "answer",
    "context": "context",
    "pillar": "pillar",
}


class Pillar(str, enum.Enum):
    ENVIRONMENTAL = "Environmental"
    SOCIAL = "Social"
    GOVERNANCE = "Governance"


DEFAULT_PILLAR_ALIASES = {
    "e": Pillar.ENVIRONMENTAL,
    "env": Pillar.ENVIRONMENTAL,
    "env.": Pillar.ENVIRONMENTAL,
    "environment": Pillar.ENVIRONMENTAL,
    "environmental": Pillar.ENVIRONMENTAL,
    "s": Pillar.SOCIAL,
    "soc": Pillar.SOCIAL,
    "soc.": Pillar.SOCIAL,
    "social": Pillar.SOCIAL,
    "g": Pillar.GOVERNANCE,
    "gov": Pillar.GOVERNANCE,
    "gov.": Pillar.GOVERNANCE,
    "governance": Pillar.GOVERNANCE,
}


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class QaTriplet:
    id: str
    question: str
    answer: str
    context: str
    pillar: Pillar

    def __post_init__(self):
        for name in ("question", "answer", "context"):
            if not getattr(self, name).strip():
                raise DatasetError(f"triplet {self.id!r}: empty {name}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pillar"] = self.pillar.value
        return d


def parse_pillar(label, aliases: Mapping[str, Pillar] | None = None) -> Pillar:
    table = {k.lower(): v for k, v in (aliases or DEFAULT_PILLAR_ALIASES).items()}
    table.update({p.value.lower(): p for p in Pillar})
    key = str(label).strip().lower()
    if key not in table:
        raise DatasetError(f"unknown pillar label {label!r}")
    return table[key]


def load_triplets(
    path: str | os.PathLike,
    field_map: Mapping[str, str] | None = None,
    pillar_aliases: Mapping[str, Pillar] | None = None,
) -> list[QaTriplet]:
    """Read line-delimited JSON; blank lines are skipped.

    ``field_map`` maps our field names to the file's keys. Items without an
    id get their 0-based line index.
    """
    fields = {**DEFAULT_FIELD_MAP, **(field_map or {})}
    out = []
    with open(path, encoding="utf-8") as fh:
        for index, line in enumerate(fh):
            if not line.strip():
                continue
            lineno = index + 1
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"line {lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(record, dict):
                raise DatasetError(f"line {lineno}: expected a JSON object")
            try:
                values = {k: record[fields[k]] for k in ("question", "answer", "context", "pillar")}
            except KeyError as exc:
                raise DatasetError(f"line {lineno}: missing field {exc.args[0]!r}") from None
            raw_id = record.get(fields["id"])
            try:
                pillar = parse_pillar(values["pillar"], pillar_aliases)
                out.append(
                    QaTriplet(
                        id=str(raw_id) if raw_id is not None else str(index),
                        question=str(values["question"]),
                        answer=str(values["answer"]),
                        context=str(values["context"]),
                        pillar=pillar,
                    )
                )
            except DatasetError as exc:
                raise DatasetError(f"line {lineno}: {exc}") from None
    return out


@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple[float, float, float] = DEFAULT_FRACTIONS
    seed: int = 0

    def __post_init__(self):
        if len(self.fractions) != 3 or any(f < 0 for f in self.fractions):
            raise DatasetError("need three non-negative fractions")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise DatasetError(f"fractions sum to {sum(self.fractions)}, not 1")
        if not 0 <= self.seed < 2**64:
            raise DatasetError("seed must fit in 64 bits")


def largest_remainder(n: int, fractions: Sequence[float]) -> list[int]:
    """Integer counts summing to ``n``; leftover units go to the largest
    fractional parts, ties to the earlier split."""
    quotas = [Fraction(f).limit_denominator(10**12) * n for f in fractions]
    # exact rational quotas, rescaled in case the floats summed to 1 only approximately
    total = sum(quotas)
    if total:
        quotas = [q * n / total for q in quotas]
    counts = [math.floor(q) for q in quotas]
    leftover = n - sum(counts)
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:leftover]:
        counts[i] += 1
    return counts


def _shuffle(items: list, seed: int, stream: int) -> list:
    """Fisher-Yates with an explicit PCG64 stream per pillar."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, stream])))
    items = list(items)
    for i in range(len(items) - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        items[i], items[j] = items[j], items[i]
    return items


def stratified_split(
    items: Sequence[QaTriplet], spec: SplitSpec = SplitSpec()
) -> tuple[list[QaTriplet], list[QaTriplet], list[QaTriplet]]:
    if not items:
        raise DatasetError("cannot split an empty dataset")
    ids = [t.id for t in items]
    if len(set(ids)) != len(ids):
        raise DatasetError("triplet ids must be unique")
    splits: tuple[list, list, list] = ([], [], [])
    for stream, pillar in enumerate(Pillar):
        group = [t for t in items if t.pillar is pillar]
        if not group:
            continue
        shuffled = _shuffle(group, spec.seed, stream)
        start = 0
        for bucket, count in zip(splits, largest_remainder(len(group), spec.fractions)):
            bucket.extend(shuffled[start : start + count])
            start += count
    return splits


def split_counts(splits: Iterable[Sequence[QaTriplet]]) -> dict[str, dict[str, int]]:
    out = {}
    for name, bucket in zip(SPLIT_NAMES, splits):
        out[name] = {p.value: sum(1 for t in bucket if t.pillar is p) for p in Pillar}
    return out


def write_splits(splits, out_dir: str | os.PathLike, spec: SplitSpec, source: str | None = None) -> dict:
    """Write ``train/val/test.jsonl`` and ``manifest.json``; returns the manifest.

    The manifest has no timestamps, so equal seeds give byte-equal manifests.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    hashes = {}
    for name, bucket in zip(SPLIT_NAMES, splits):
        payload = "".join(json.dumps(t.to_dict(), ensure_ascii=False, sort_keys=True) + "\n" for t in bucket)
        data = payload.encode("utf-8")
        (out_dir / f"{name}.jsonl").write_bytes(data)
        hashes[name] = hashlib.sha256(data).hexdigest()
    manifest = {
        "seed": spec.seed,
        "fractions": list(spec.fractions),
        "counts": split_counts(splits),
        "totals": {name: len(b) for name, b in zip(SPLIT_NAMES, splits)},
        "sha256": hashes,
        "content_hash": hashlib.sha256("".join(hashes[n] for n in SPLIT_NAMES).encode()).hexdigest(),
    }
    if source is not None:
        manifest["source"] = source
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
