"""Dense retrieval over ESG-QA contexts and the knowledge-base access modes.

* eKB: the question itself is the retrieval query and the hits are pasted
  into a fixed prompt template.
* nKB: the model drives retrieval through a tool (``search``) in a ReAct
  style loop; every tool call is classified and misspelled tool names are
  recorded, never silently corrected.
"""
from __future__ import annotations

import enum
import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import _kernels
from .embeddings import EmbeddingError, EmbeddingProvider
from .prompts import TEMPLATE_VERSION, load_template

log = logging.getLogger(__name__)

DEFAULT_K = 3
DEFAULT_TOOL_NAME = "search"
NEAR_MISS_DISTANCE = 2
NORM_TOLERANCE = 1e-6


class IndexError_(ValueError):
    """Invalid index contents or files."""


# --------------------------------------------------------------------------- index


@dataclass
class KbIndex:
    doc_ids: list[str]
    vectors: np.ndarray  # (docs, dim), unit rows, float32 values held as float64
    embedder_id: str

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.doc_ids):
            raise IndexError_(f"{len(self.doc_ids)} ids but vectors have shape {self.vectors.shape}")
        if len(set(self.doc_ids)) != len(self.doc_ids):
            raise IndexError_("duplicate document ids")
        if self.vectors.size and not np.allclose(np.linalg.norm(self.vectors, axis=1), 1.0, atol=NORM_TOLERANCE, rtol=0):
            raise IndexError_("index rows must be unit vectors")
        self._position = {d: i for i, d in enumerate(self.doc_ids)}

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.doc_ids)


@dataclass(frozen=True)
class RetrievalHit:
    doc_id: str
    score: float


def _unit_rows(vectors: np.ndarray) -> np.ndarray:
    vectors = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    if np.any(norms == 0) or not np.all(np.isfinite(norms)):
        raise EmbeddingError("embedder returned a zero or non-finite vector")
    # stored precision is float32; keep exactly those values
    return (vectors / norms).astype(np.float32).astype(np.float64)


def build_index(
    contexts: Sequence[tuple[str, str]], embedder: EmbeddingProvider, batch_size: int = 256
) -> KbIndex:
    if not contexts:
        raise IndexError_("cannot index an empty corpus")
    ids = [c[0] for c in contexts]
    if len(set(ids)) != len(ids):
        raise IndexError_("duplicate document ids")
    blocks = []
    dim = None
    for start in range(0, len(contexts), batch_size):
        texts = [c[1] for c in contexts[start : start + batch_size]]
        block = np.asarray(embedder.embed(texts), dtype=np.float64)
        if block.ndim != 2 or block.shape[0] != len(texts):
            raise EmbeddingError(f"embedder returned shape {block.shape} for {len(texts)} texts")
        if dim is None:
            dim = block.shape[1]
        elif block.shape[1] != dim:
            raise EmbeddingError(f"embedding dimension drifted from {dim} to {block.shape[1]}")
        blocks.append(_unit_rows(block))
    return KbIndex(ids, np.vstack(blocks), embedder.model_id)


def embed_query(query: str, embedder: EmbeddingProvider) -> np.ndarray:
    return _unit_rows(np.asarray(embedder.embed([query]), dtype=np.float64))[0]


def search_vector(index: KbIndex, query_vec: np.ndarray, k: int) -> list[RetrievalHit]:
    """Exact top-k by cosine; ties broken by ascending doc id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    # row-wise reduction (not BLAS gemv) so equal rows always get equal scores
    scores = (index.vectors * np.asarray(query_vec, dtype=np.float64)).sum(axis=1)
    n = len(scores)
    if k < n:
        # keep every doc tied with the k-th score so tie-breaking by id is exact
        kth = np.partition(scores, n - k)[n - k]
        candidates = np.flatnonzero(scores >= kth)
    else:
        candidates = np.arange(n)
    ranked = sorted(candidates.tolist(), key=lambda i: (-scores[i], index.doc_ids[i]))
    return [RetrievalHit(index.doc_ids[i], float(scores[i])) for i in ranked[:k]]


def retrieve(index: KbIndex, query: str, k: int, embedder: EmbeddingProvider) -> list[RetrievalHit]:
    if k < 1:
        raise ValueError("k must be >= 1")
    return search_vector(index, embed_query(query, embedder), k)


def save_index(index: KbIndex, out_dir, contexts: Mapping[str, str] | None = None) -> dict:
    """``vectors.f32`` (flat little-endian float32), ``ids.json`` and
    ``manifest.json``; with ``contexts``, also the passage texts
    (``contexts.jsonl``) so the index directory is self-contained."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if contexts is not None:
        with open(out_dir / "contexts.jsonl", "w", encoding="utf-8") as fh:
            for doc_id in index.doc_ids:
                fh.write(json.dumps({"id": doc_id, "text": contexts[doc_id]}, ensure_ascii=False) + "\n")
    raw = index.vectors.astype("<f4").tobytes()
    ids_raw = json.dumps(index.doc_ids, ensure_ascii=False).encode("utf-8")
    (out_dir / "vectors.f32").write_bytes(raw)
    (out_dir / "ids.json").write_bytes(ids_raw)
    manifest = {
        "dim": index.dim,
        "count": len(index),
        "embedder_id": index.embedder_id,
        "vectors_sha256": hashlib.sha256(raw).hexdigest(),
        "ids_sha256": hashlib.sha256(ids_raw).hexdigest(),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_index(path) -> KbIndex:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    raw = (path / "vectors.f32").read_bytes()
    ids_raw = (path / "ids.json").read_bytes()
    if hashlib.sha256(raw).hexdigest() != manifest["vectors_sha256"]:
        raise IndexError_("vectors.f32 does not match the manifest hash")
    if hashlib.sha256(ids_raw).hexdigest() != manifest["ids_sha256"]:
        raise IndexError_("ids.json does not match the manifest hash")
    ids = json.loads(ids_raw)
    vectors = np.frombuffer(raw, dtype="<f4")
    if vectors.size != manifest["count"] * manifest["dim"] or len(ids) != manifest["count"]:
        raise IndexError_("index files disagree with the manifest counts")
    return KbIndex(ids, vectors.reshape(manifest["count"], manifest["dim"]), manifest["embedder_id"])


def load_contexts(path) -> dict[str, str]:
    path = Path(path)
    if path.is_dir():
        path = path / "contexts.jsonl"
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                out[row["id"]] = row["text"]
    return out


def index_sha256(path) -> str:
    return json.loads((Path(path) / "manifest.json").read_text())["vectors_sha256"]


# --------------------------------------------------------------------------- eKB prompts

_PASSAGE_OPEN = "<<<PASSAGE {rank}>>>\n"
_PASSAGE_CLOSE = "\n<<<END PASSAGE>>>"
_PROMPT_TOKENS = re.compile(r"\\.|<<<PASSAGE (\d+)>>>\n|\n<<<END PASSAGE>>>", re.DOTALL)


def escape_passage(text: str) -> str:
    """Backslash-escape ``\\`` and ``<`` so no passage can fake a delimiter."""
    return text.replace("\\", "\\\\").replace("<", "\\<")


def unescape_passage(text: str) -> str:
    return re.sub(r"\\(.)", r"\1", text, flags=re.DOTALL)


def assemble_ekb_prompt(
    question: str,
    hits: Sequence[RetrievalHit],
    contexts: Mapping[str, str],
    version: str = TEMPLATE_VERSION,
) -> str:
    if not hits:
        raise ValueError("eKB prompt needs at least one retrieved passage")
    blocks = []
    for rank, hit in enumerate(hits, 1):
        if hit.doc_id not in contexts:
            raise KeyError(f"no context text for retrieved id {hit.doc_id!r}")
        blocks.append(_PASSAGE_OPEN.format(rank=rank) + escape_passage(contexts[hit.doc_id]) + _PASSAGE_CLOSE)
    return load_template("ekb", version).format(passages="\n\n".join(blocks), question=escape_passage(question))


def parse_ekb_prompt(prompt: str) -> list[str]:
    """Recover the passages (unescaped, in rank order) from an eKB prompt."""
    passages = []
    open_at = None
    for m in _PROMPT_TOKENS.finditer(prompt):
        tok = m.group()
        if tok.startswith("\\"):
            continue
        if m.group(1) is not None:
            open_at = m.end()
        elif open_at is not None:
            passages.append(unescape_passage(prompt[open_at : m.start()]))
            open_at = None
    return passages


# --------------------------------------------------------------------------- tool calls


class CallKind(str, enum.Enum):
    VALID = "Valid"
    MALFORMED = "Malformed"
    NO_CALL = "NoCall"


@dataclass(frozen=True)
class ToolCallOutcome:
    kind: CallKind
    requested_name: str = ""
    nearest_registered: str = ""
    edit_distance: int = 0
    arguments: str = ""

    @property
    def near_miss(self) -> bool:
        return self.kind is CallKind.MALFORMED and 0 < self.edit_distance <= NEAR_MISS_DISTANCE

    def parsed_arguments(self) -> dict:
        return _parse_arguments(self.arguments)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "requested_name": self.requested_name,
            "nearest_registered": self.nearest_registered,
            "edit_distance": self.edit_distance,
            "arguments": self.arguments,
        }

    @classmethod
    def from_dict(cls, d) -> "ToolCallOutcome":
        return cls(CallKind(d["kind"]), d["requested_name"], d["nearest_registered"], d["edit_distance"], d["arguments"])


class ToolDispatchError(RuntimeError):
    pass


_FENCE = re.compile(r"```[\w-]*[ \t]*\n?(.*?)```", re.DOTALL)
_TAGGED = re.compile(r"<tool_call>(.*?)</tool_call>", re.DOTALL)


def _parse_arguments(raw) -> dict:
    if isinstance(raw, dict):
        return raw
    value = json.loads(raw) if isinstance(raw, str) and raw.strip() else {}
    if not isinstance(value, dict):
        raise ValueError("tool arguments must be a JSON object")
    return value


def _candidate_calls(text: str) -> list[tuple[str, object]]:
    spans = [(m.start(), m.group(1)) for m in _FENCE.finditer(text)]
    spans += [(m.start(), m.group(1)) for m in _TAGGED.finditer(text)]
    calls = []
    for _, body in sorted(spans, key=lambda s: s[0]):
        try:
            obj = json.loads(body.strip())
        except (json.JSONDecodeError, ValueError):
            continue
        if isinstance(obj, dict) and isinstance(obj.get("name"), str):
            calls.append((obj["name"], obj.get("arguments", obj.get("parameters", {}))))
    return calls


def _nearest(name: str, registered: Sequence[str]) -> tuple[str, int]:
    best = ("", 10**9)
    for cand in registered:
        d = _kernels.levenshtein(name, cand)
        if d < best[1]:
            best = (cand, d)
    return best


def parse_tool_call(
    model_output: str | None,
    registered: Sequence[str],
    tool_calls: Sequence[Mapping] | None = None,
) -> ToolCallOutcome:
    """Classify the first tool call in a model response.

    A structured ``tool_calls`` response field wins over calls written in the
    text (a JSON object ``{"name", "arguments"}`` in a fenced block or a
    ``<tool_call>`` tag).
    """
    name = None
    args: object = {}
    if tool_calls:
        fn = tool_calls[0].get("function", tool_calls[0]) if isinstance(tool_calls[0], Mapping) else {}
        if isinstance(fn, Mapping):
            name = fn.get("name")
            args = fn.get("arguments", {})
        if not isinstance(name, str):
            name = ""
    if name is None:
        calls = _candidate_calls(model_output or "")
        if not calls:
            return ToolCallOutcome(CallKind.NO_CALL)
        name, args = calls[0]
    raw_args = args if isinstance(args, str) else json.dumps(args, sort_keys=True, ensure_ascii=False)
    nearest, distance = _nearest(name, registered)
    try:
        _parse_arguments(raw_args)
        args_ok = True
    except ValueError:
        args_ok = False
    kind = CallKind.VALID if (name in registered and args_ok) else CallKind.MALFORMED
    return ToolCallOutcome(kind, name, nearest, distance, raw_args)


def dispatch(outcome: ToolCallOutcome, tools: Mapping[str, Callable[..., object]]):
    """Run the requested tool; only ``Valid`` outcomes are ever dispatched."""
    if outcome.kind is not CallKind.VALID:
        raise ToolDispatchError(f"refusing to dispatch a {outcome.kind.value} tool call ({outcome.requested_name!r})")
    return tools[outcome.requested_name](**outcome.parsed_arguments())


def tool_schema(tool_name: str = DEFAULT_TOOL_NAME) -> dict:
    return {
        "type": "function",
        "function": {
            "name": tool_name,
            "description": "Search the ESG knowledge base and return the most relevant passages.",
            "parameters": {
                "type": "object",
                "properties": {"query": {"type": "string", "description": "Search query"}},
                "required": ["query"],
            },
        },
    }


# --------------------------------------------------------------------------- nKB loop


@dataclass
class NkbStep:
    step: int
    outcome: ToolCallOutcome
    hits: list[RetrievalHit] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "outcome": self.outcome.to_dict(),
            "hits": [{"doc_id": h.doc_id, "score": h.score} for h in self.hits],
        }


@dataclass
class NkbResult:
    answer: str
    steps: list[NkbStep]
    truncated: bool
    messages: list[dict]

    @property
    def hits(self) -> list[RetrievalHit]:
        return [h for s in self.steps for h in s.hits]

    @property
    def outcomes(self) -> list[ToolCallOutcome]:
        return [s.outcome for s in self.steps]


def format_tool_result(hits: Sequence[RetrievalHit], contexts: Mapping[str, str]) -> str:
    return "\n\n".join(f"[{rank}] {contexts[h.doc_id]}" for rank, h in enumerate(hits, 1))


def run_nkb_loop(
    question: str,
    index: KbIndex,
    contexts: Mapping[str, str],
    complete: Callable[[list[dict], list[dict]], object],
    embedder: EmbeddingProvider,
    *,
    max_steps: int = 8,
    k: int = DEFAULT_K,
    tool_name: str = DEFAULT_TOOL_NAME,
    version: str = TEMPLATE_VERSION,
) -> NkbResult:
    """Agentic KB access: the model decides when to call ``tool_name``.

    ``complete(messages, tools)`` returns an object with ``content`` and
    ``tool_calls`` attributes. Malformed calls are answered with an error
    message and logged; the loop stops at the first response without a
    call or after ``max_steps`` responses (then the last text is the answer
    and the result is marked truncated).
    """
    tools = [tool_schema(tool_name)]
    messages: list[dict] = [
        {"role": "system", "content": load_template("nkb", version).format(tool_name=tool_name)},
        {"role": "user", "content": question},
    ]
    steps: list[NkbStep] = []
    last_text = ""
    for step in range(1, max_steps + 1):
        reply = complete(messages, tools)
        content = getattr(reply, "content", "") or ""
        calls = getattr(reply, "tool_calls", None)
        last_text = content
        outcome = parse_tool_call(content, [tool_name], calls)
        record = NkbStep(step, outcome)
        steps.append(record)
        if outcome.kind is CallKind.NO_CALL:
            return NkbResult(content, steps, False, messages)
        assistant: dict = {"role": "assistant", "content": content}
        if calls:
            assistant["tool_calls"] = list(calls)
        messages.append(assistant)
        if outcome.kind is CallKind.VALID:
            def search(query: str = question, **_ignored) -> list[RetrievalHit]:
                return retrieve(index, str(query), k, embedder)

            record.hits = dispatch(outcome, {tool_name: search})
            result = format_tool_result(record.hits, contexts)
        else:
            log.warning(
                "malformed tool call %r (nearest %r, distance %d)",
                outcome.requested_name,
                outcome.nearest_registered,
                outcome.edit_distance,
            )
            result = f"Error: unknown tool or invalid arguments for {outcome.requested_name!r}. Available tools: {tool_name}."
        messages.append({"role": "tool", "name": outcome.requested_name, "content": result})
    return NkbResult(last_text, steps, True, messages)
