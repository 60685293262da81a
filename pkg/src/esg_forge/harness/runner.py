"""Evaluation runs: prompt, generate, score, attribute cost, journal.

Every finished item is appended to a JSONL journal (one writer, flushed
per line). Resuming reads the journal back, drops a torn final line left
by a killed process, and only runs the items that are missing, so the
final row equals that of an uninterrupted run.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

from ..dataset import QaTriplet
from ..eco import ConstantProbe, Ledger, PowerProbe, to_emissions
from ..embeddings import EmbeddingProvider
from ..metrics import GenScores, corpus_bleu, mean_scores, normalize_tokenize, score_pair
from ..prompts import zero_shot_prompt
from ..readability import ReadabilityReport, mean_reports, score_text
from ..retrieval import KbIndex, assemble_ekb_prompt, retrieve, run_nkb_loop
from .backend import ChatBackend, GenParams, generate
from .config import Mode, RunConfig

log = logging.getLogger(__name__)

JOURNAL_VERSION = 1


class JournalError(RuntimeError):
    pass


@dataclass
class Transcript:
    item_id: str
    mode: str
    prompt: str
    raw_output: str = ""
    answer: str = ""
    hits: list[dict] = field(default_factory=list)
    tool_calls: list[dict] = field(default_factory=list)
    truncated: bool = False
    latency_s: float = 0.0
    energy_kwh: float = 0.0
    energy_ref: str = ""
    peak_memory_gb: float | None = None
    attempts: int = 0
    usage: dict = field(default_factory=dict)
    status: str = "ok"
    error: str = ""
    scores: dict | None = None
    readability: dict | None = None

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "Transcript":
        return cls(**d)


@dataclass(frozen=True)
class ModelRow:
    model_label: str
    gen: GenScores | None
    readability: ReadabilityReport | None
    n_items: int
    n_failed: int
    n_degenerate: int
    n_tool_calls: int
    n_malformed_calls: int
    time_h: float
    energy_kwh: float
    co2_kg: float
    vram_gb_peak: float | None
    intensity: float
    region: str
    # reference only, never ranked
    corpus_bleu: float | None = None
    # assigned by aggregate_rank only
    rank: int | None = field(default=None, init=False)

    def with_rank(self, rank: int | None) -> "ModelRow":
        row = replace(self)
        object.__setattr__(row, "rank", rank)
        return row

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gen"] = self.gen.to_dict() if self.gen else None
        d["readability"] = self.readability.to_dict() if self.readability else None
        return d

    @classmethod
    def from_dict(cls, d) -> "ModelRow":
        d = dict(d)
        rank = d.pop("rank", None)
        d["gen"] = GenScores.from_dict(d["gen"]) if d.get("gen") else None
        d["readability"] = ReadabilityReport.from_dict(d["readability"]) if d.get("readability") else None
        return cls(**d).with_rank(rank)


def strip_reasoning(text: str, tags: tuple[str, str] | None) -> str:
    if not tags:
        return text
    open_tag, close_tag = (re.escape(t) for t in tags)
    text = re.sub(f"{open_tag}.*?{close_tag}", "", text, flags=re.DOTALL)
    # an unterminated block swallows the rest of the output
    text = re.sub(f"{open_tag}.*", "", text, flags=re.DOTALL)
    return text.strip()


class _Journal:
    def __init__(self, path: Path | None, header: dict, resume: bool):
        self.path = path
        self.header = header
        self.done: dict[str, Transcript] = {}
        self._fh = None
        self._lock = threading.Lock()
        if path is None:
            return
        if resume and path.exists():
            self._load()
        elif path.exists() and path.stat().st_size and not resume:
            raise JournalError(f"{path} exists; pass resume=True (--resume) or remove it")
        fresh = not path.exists() or path.stat().st_size == 0
        path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(path, "a", encoding="utf-8")
        if fresh:
            self._write(header)

    def _load(self) -> None:
        data = self.path.read_bytes()
        cut = data.rfind(b"\n") + 1
        if cut < len(data):
            log.warning("dropping a torn final journal line (%d bytes)", len(data) - cut)
            with open(self.path, "r+b") as fh:
                fh.truncate(cut)
            data = data[:cut]
        lines = data.decode("utf-8").splitlines()
        if not lines:
            return
        try:
            header = json.loads(lines[0])
            entries = [json.loads(line) for line in lines[1:]]
        except json.JSONDecodeError as exc:
            raise JournalError(f"{self.path}: corrupt journal line: {exc}") from None
        if header != self.header:
            raise JournalError(f"{self.path} was written by a different configuration or item set")
        for e in entries:
            e.pop("kind", None)
            t = Transcript.from_dict(e)
            self.done[t.item_id] = t

    def _write(self, obj: dict) -> None:
        self._fh.write(json.dumps(obj, sort_keys=True, ensure_ascii=False) + "\n")
        self._fh.flush()
        os.fsync(self._fh.fileno())

    def append(self, t: Transcript) -> None:
        if self._fh is None:
            return
        with self._lock:
            self._write({"kind": "item", **t.to_dict()})

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def _exchange_logger(path: Path | None, item_id: str, lock: threading.Lock) -> Callable[[dict], None] | None:
    if path is None:
        return None

    def write(entry: dict) -> None:
        with lock, open(path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps({"item_id": item_id, **entry}, sort_keys=True, ensure_ascii=False) + "\n")

    return write


def items_fingerprint(items: Sequence[QaTriplet]) -> str:
    h = hashlib.sha256()
    for it in items:
        h.update(json.dumps(it.to_dict(), sort_keys=True, ensure_ascii=False).encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


def run_eval(
    config: RunConfig,
    items: Sequence[QaTriplet],
    index: KbIndex | None = None,
    *,
    backend: ChatBackend,
    contexts: Mapping[str, str] | None = None,
    embedder: EmbeddingProvider | None = None,
    score_embedder: EmbeddingProvider | None = None,
    journal_path=None,
    exchange_log_path=None,
    resume: bool = False,
    clock: Callable[[], float] = time.monotonic,
    probes: Sequence[PowerProbe] | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> tuple[list[Transcript], ModelRow]:
    """Evaluate one model configuration over ``items``.

    ``embedder`` serves retrieval only (never touched in zero-shot mode);
    ``score_embedder`` feeds BERTScore and may be ``None`` (BERT columns
    become NaN). Per-item failures are recorded and excluded from means.
    """
    if not items:
        raise ValueError("no items to evaluate")
    ids = [it.id for it in items]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate item ids")
    intensity = config.require_intensity()
    if config.mode is not Mode.ZERO_SHOT:
        if index is None or embedder is None:
            raise ValueError(f"{config.mode.value} mode needs an index and an embedder")
        if contexts is None:
            raise ValueError(f"{config.mode.value} mode needs the context texts of the index")

    header = {
        "kind": "header",
        "journal_version": JOURNAL_VERSION,
        "config": config.fingerprint(),
        "items": items_fingerprint(items),
    }
    journal = _Journal(Path(journal_path) if journal_path else None, header, resume)
    exchange_path = Path(exchange_log_path) if exchange_log_path else None
    exchange_lock = threading.Lock()
    params = GenParams(config.backend_model, config.temperature, config.max_new_tokens, config.seed)
    if probes is None:
        probes = [ConstantProbe(config.power_watts, config.power_source)]
    background = not all(isinstance(p, ConstantProbe) for p in probes)
    ledger = Ledger(probes, clock=clock, background=background)

    def process(item: QaTriplet) -> Transcript:
        t = Transcript(item.id, config.mode.value, "")
        xlog = _exchange_logger(exchange_path, item.id, exchange_lock)
        with ledger.span(item.id, config.model_label) as span:
            try:
                _generate_item(t, item, config, params, backend, index, contexts, embedder, xlog, sleep)
            except Exception as exc:
                t.status = "failed"
                t.error = f"{type(exc).__name__}: {exc}"
                log.warning("item %s failed: %s", item.id, t.error)
        rec = span["record"]
        t.latency_s = rec.energy.duration_s
        t.energy_kwh = rec.exclusive_kwh
        t.energy_ref = f"{config.model_label}/{item.id}"
        t.peak_memory_gb = rec.energy.peak_memory_gb
        if t.ok:
            t.scores = score_pair(t.answer, item.answer, score_embedder, bleu_smoothing=config.bleu_smoothing).to_dict()
            report = score_text(t.answer)
            t.readability = report.to_dict() if report else None
        return t

    pending = [it for it in items if it.id not in journal.done]
    by_id = dict(journal.done)

    def finish(t: Transcript) -> None:
        journal.append(t)
        by_id[t.item_id] = t

    try:
        if config.max_in_flight == 1:
            for item in pending:
                finish(process(item))
        else:
            with ThreadPoolExecutor(max_workers=config.max_in_flight) as pool:
                # journaled in item order; a crash loses at most the in-flight work
                for fut in [pool.submit(process, item) for item in pending]:
                    finish(fut.result())
    finally:
        journal.close()
        ledger.close()

    transcripts = [by_id[i] for i in ids]
    refs = {it.id: it.answer for it in items}
    cbleu = corpus_bleu(
        ((normalize_tokenize(t.answer), normalize_tokenize(refs[t.item_id])) for t in transcripts if t.ok),
        smoothing=config.bleu_smoothing,
    )
    return transcripts, summarize(config.model_label, transcripts, intensity, config.region, corpus_bleu=cbleu)


def _generate_item(t, item, config, params, backend, index, contexts, embedder, xlog, sleep) -> None:
    gen_kw = dict(max_attempts=config.max_attempts, sleep=sleep, exchange_log=xlog)
    if config.mode is Mode.ZERO_SHOT:
        t.prompt = zero_shot_prompt(item.question, config.template_version)
        result = generate(backend, t.prompt, params, **gen_kw)
        t.raw_output, t.attempts, t.usage = result.content, result.attempts, result.usage
    elif config.mode is Mode.EKB:
        hits = retrieve(index, item.question, config.k, embedder)
        t.hits = [{"doc_id": h.doc_id, "score": h.score} for h in hits]
        t.prompt = assemble_ekb_prompt(item.question, hits, contexts, config.template_version)
        result = generate(backend, t.prompt, params, **gen_kw)
        t.raw_output, t.attempts, t.usage = result.content, result.attempts, result.usage
    else:
        attempts = 0
        usage: dict = {}

        def complete(messages, tools):
            nonlocal attempts
            r = generate(backend, messages, params, tools, **gen_kw)
            attempts += r.attempts
            for key, val in r.usage.items():
                if isinstance(val, (int, float)):
                    usage[key] = usage.get(key, 0) + val
            return r

        res = run_nkb_loop(
            item.question,
            index,
            contexts,
            complete,
            embedder,
            max_steps=config.nkb_max_steps,
            k=config.k,
            tool_name=config.tool_name,
            version=config.template_version,
        )
        t.prompt = json.dumps(res.messages[:2], ensure_ascii=False)
        t.raw_output = res.answer
        t.truncated = res.truncated
        t.hits = [{"doc_id": h.doc_id, "score": h.score, "step": s.step} for s in res.steps for h in s.hits]
        t.tool_calls = [{"step": s.step, **s.outcome.to_dict()} for s in res.steps]
        t.attempts, t.usage = attempts, usage
    t.answer = strip_reasoning(t.raw_output, config.reasoning_tags)


def summarize(
    model_label: str,
    transcripts: Sequence[Transcript],
    intensity: float,
    region: str = "",
    *,
    corpus_bleu: float | None = None,
) -> ModelRow:
    ok = [t for t in transcripts if t.ok]
    gen = mean_scores([GenScores.from_dict(t.scores) for t in ok])
    reports = [ReadabilityReport.from_dict(t.readability) for t in ok if t.readability is not None]
    energy = math.fsum(t.energy_kwh for t in transcripts)
    peaks = [t.peak_memory_gb for t in transcripts if t.peak_memory_gb is not None]
    calls = [c for t in transcripts for c in t.tool_calls if c["kind"] != "NoCall"]
    return ModelRow(
        model_label=model_label,
        gen=gen,
        readability=mean_reports(reports),
        n_items=len(transcripts),
        n_failed=len(transcripts) - len(ok),
        n_degenerate=len(ok) - len(reports),
        n_tool_calls=len(calls),
        n_malformed_calls=sum(1 for c in calls if c["kind"] == "Malformed"),
        time_h=math.fsum(t.latency_s for t in transcripts) / 3600.0,
        energy_kwh=energy,
        co2_kg=to_emissions(energy, intensity, region).kg_co2eq,
        vram_gb_peak=max(peaks) if peaks else None,
        intensity=intensity,
        region=region,
        corpus_bleu=corpus_bleu if ok else None,
    )
