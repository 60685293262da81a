"""Report emission: generative, readability and consumption tables (CSV
and Markdown), a trade-off CSV for plotting, and a run manifest.

Every artifact except ``manifest.json`` is a pure function of the rows, so
reruns with the same inputs are byte-identical; the manifest alone carries
a timestamp.
"""
from __future__ import annotations

import csv
import datetime as _dt
import io
import json
import math
import platform
from pathlib import Path
from typing import Mapping, Sequence

from .. import __version__, _kernels
from ..eco import ConsumptionRow, consumption_csv
from ..metrics import GEN_COLUMNS, NORMALIZATION_ID
from ..prompts import template_hashes
from ..readability import READABILITY_COLUMNS, READABILITY_LABELS, easy_words_sha256
from .ranking import aggregate_rank, rank_table
from .runner import ModelRow

GEN_LABELS = {
    "f1": "F1",
    "meteor": "METEOR",
    "bleu": "BLEU",
    "rouge1": "R1",
    "rouge2": "R2",
    "rougeL": "RL",
    "rougeLsum": "RLs",
    "bert_precision": "BERT-P",
    "bert_recall": "BERT-R",
    "bert_f1": "BERT-F1",
}
TRADEOFF_COLUMNS = ("model", "f1", "bert_f1", "time_h", "co2_kg")


def _fmt(v, digits: int = 3) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return f"{v:.{digits}f}"


def _csv(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _markdown(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(r) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def generative_table(rows: Sequence[ModelRow]) -> tuple[list[str], list[list[str]]]:
    header = ["Model", "Rank", *(GEN_LABELS[c] for c in GEN_COLUMNS), "Corpus BLEU", "Items", "Failed"]
    body = []
    for r in rows:
        vals = r.gen.to_dict() if r.gen else {}
        body.append(
            [r.model_label, "" if r.rank is None else str(r.rank), *(_fmt(vals.get(c)) for c in GEN_COLUMNS), _fmt(r.corpus_bleu), str(r.n_items), str(r.n_failed)]
        )
    return header, body


def readability_table(rows: Sequence[ModelRow]) -> tuple[list[str], list[list[str]]]:
    header = ["Model", *(READABILITY_LABELS[c] for c in READABILITY_COLUMNS), "Degenerate", "Failed"]
    body = []
    for r in rows:
        vals = r.readability.to_dict() if r.readability else {}
        body.append([r.model_label, *(_fmt(vals.get(c)) for c in READABILITY_COLUMNS), str(r.n_degenerate), str(r.n_failed)])
    return header, body


def consumption_rows(rows: Sequence[ModelRow]) -> list[ConsumptionRow]:
    return [
        ConsumptionRow(r.model_label, r.time_h, r.energy_kwh, r.co2_kg, r.vram_gb_peak, r.region, r.intensity)
        for r in rows
    ]


def tradeoff_csv(rows: Sequence[ModelRow]) -> str:
    body = []
    for r in rows:
        g = r.gen.to_dict() if r.gen else {}
        body.append([r.model_label, _fmt(g.get("f1")), _fmt(g.get("bert_f1")), _fmt(r.time_h), _fmt(r.co2_kg)])
    return _csv(TRADEOFF_COLUMNS, body)


def build_manifest(configs: Sequence[Mapping], extra: Mapping | None = None, *, now: str | None = None) -> dict:
    manifest = {
        "created_at": now or _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "package_version": __version__,
        "kernel_backend": _kernels.BACKEND,
        "python": platform.python_version(),
        "normalization": NORMALIZATION_ID,
        "templates_sha256": template_hashes(),
        "easy_words_sha256": easy_words_sha256(),
        "runs": list(configs),
    }
    if extra:
        manifest.update(extra)
    return manifest


def emit_reports(
    rows: Sequence[ModelRow],
    out_dir,
    *,
    configs: Sequence[Mapping] = (),
    manifest_extra: Mapping | None = None,
    rank: bool = True,
) -> dict[str, Path]:
    """Write all report artifacts into ``out_dir``; returns name -> path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if rank:
        rows = aggregate_rank(rows)
    written: dict[str, Path] = {}

    def put(name: str, text: str) -> None:
        path = out / name
        path.write_text(text, encoding="utf-8")
        written[name] = path

    for stem, (header, body) in (("generative", generative_table(rows)), ("readability", readability_table(rows))):
        put(f"{stem}.csv", _csv(header, body))
        put(f"{stem}.md", _markdown(header, body))
    cons = consumption_rows(rows)
    put("consumption.csv", consumption_csv(cons))
    put("consumption.md", _markdown(["Model", "Time (h)", "Energy (kWh)", "CO2eq (kg)", "vRAM peak (GB)", "Region", "Intensity (kg/kWh)"], [c.cells() for c in cons]))
    put("tradeoff.csv", tradeoff_csv(rows))
    put("rows.json", json.dumps([r.to_dict() for r in rows], indent=2, sort_keys=True) + "\n")
    put("manifest.json", json.dumps(build_manifest(configs, manifest_extra), indent=2, sort_keys=True) + "\n")
    return written


def read_metric_csv(path, columns: Sequence[str] = GEN_COLUMNS) -> dict[str, dict[str, float]]:
    """Read an external metrics table: a ``model`` column plus one column per
    metric, named either by key (``rouge1``) or by table label (``R1``)."""
    by_label = {v.lower(): k for k, v in GEN_LABELS.items()}
    table: dict[str, dict[str, float]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        fieldnames = reader.fieldnames or []
        model_col = next((f for f in fieldnames if f.strip().lower() == "model"), None)
        if model_col is None:
            raise ValueError(f"{path}: no 'model' column")
        mapping = {}
        for f in fieldnames:
            key = f.strip()
            key = key if key in columns else by_label.get(key.lower(), key)
            if key in columns:
                mapping[f] = key
        for row in reader:
            vals = {}
            for f, key in mapping.items():
                cell = (row.get(f) or "").strip()
                vals[key] = float(cell) if cell else float("nan")
            table[row[model_col].strip()] = vals
    return table


def rank_csv(table: Mapping[str, Mapping[str, float]], columns: Sequence[str] = GEN_COLUMNS) -> str:
    result = rank_table(table, columns)
    body = [
        [label, "" if result.ranks[label] is None else str(result.ranks[label]), _fmt(result.mean_ranks.get(label), 2)]
        for label in table
    ]
    return _csv(["model", "rank", "mean_rank"], body)
