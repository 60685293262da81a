"""``esg-forge`` command line.

Exit codes: 0 success, 1 usage error, 2 partial failures present, 3 fatal.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_PARTIAL, EXIT_FATAL = 0, 1, 2, 3

log = logging.getLogger("esg_forge")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with 2, which means "partial" here
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _fractions(text: str) -> tuple[float, float, float]:
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected three comma-separated fractions")
    return tuple(parts)


def _make_embedder(spec: str | None):
    from .embeddings import CachedEmbedder, HashingEmbedder, HttpEmbeddingProvider

    if not spec:
        return None
    if spec == "hashing" or spec.startswith("hashing:"):
        dim = int(spec.split(":", 1)[1]) if ":" in spec else 256
        return CachedEmbedder(HashingEmbedder(dim=dim))
    if spec.startswith(("http://", "https://")):
        return CachedEmbedder(HttpEmbeddingProvider(spec))
    raise UsageError(f"unknown embedder {spec!r} (use 'hashing' or an http(s) URL)")


def _make_backend(spec: str, items):
    from .harness import backend as b

    if spec.startswith(("http://", "https://")):
        return b.HttpChatBackend(spec, api_key=os.environ.get("ESG_FORGE_API_KEY"))
    answers = {it.question: it.answer for it in items}
    table = {
        "echo": b.EchoBackend,
        "empty": b.EmptyBackend,
        "reference-echo": lambda: b.ReferenceEchoBackend(answers),
        "corrupting": lambda: b.CorruptingBackend(b.ReferenceEchoBackend(answers)),
    }
    if spec not in table:
        raise UsageError(f"unknown backend {spec!r}")
    return table[spec]()


# --------------------------------------------------------------------------- commands


def cmd_merge_lora(args) -> int:
    from .arithmetic import merge_lora_file

    merge_lora_file(args.base, args.adapter, args.out, alpha=args.alpha)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_irm_extract(args) -> int:
    from .arithmetic import irm_extract_file

    irm_extract_file(args.inst, args.base, args.out, ignore_missing=args.ignore_missing, compensated=not args.plain)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_irm_apply(args) -> int:
    from .arithmetic import irm_apply_file
    from .checkpoint import DType

    out_dtype = DType.parse(args.dtype) if args.dtype else None
    irm_apply_file(
        args.base,
        args.residual,
        args.out,
        out_dtype=out_dtype,
        ignore_missing=args.ignore_missing,
        strict_finite=args.strict_finite,
    )
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_ckpt_diff(args) -> int:
    from .checkpoint import load_checkpoint, validate_alignment

    a, b = load_checkpoint(args.a), load_checkpoint(args.b)
    report = validate_alignment(a, b)
    out = report.to_dict()
    if args.values:
        shape_bad = {n for n, _, _ in report.shape_mismatch}
        diffs = {}
        for name in a:
            if name in b and name not in shape_bad:
                diffs[name] = float(np.max(np.abs(a.to_f32(name) - b.to_f32(name)), initial=0.0))
        out["max_abs_diff"] = diffs
    if args.json:
        print(json.dumps(out, indent=2, sort_keys=True))
    else:
        print(report)
        for name, d in out.get("max_abs_diff", {}).items():
            print(f"max |a-b| {name}: {d:.6g}")
    if args.check and not report.empty:
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_split_data(args) -> int:
    from .dataset import SplitSpec, load_triplets, stratified_split, write_splits

    items = load_triplets(args.input)
    spec = SplitSpec(fractions=args.fractions, seed=args.seed)
    manifest = write_splits(stratified_split(items, spec), args.out, spec, source=str(args.input))
    print(json.dumps(manifest["counts"], sort_keys=True))
    return EXIT_OK


def _load_contexts_for_index(path: Path) -> list[tuple[str, str]]:
    """Contexts from a triplet file (deduplicated by text) or id/text rows."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rows.append(json.loads(line))
    out: list[tuple[str, str]] = []
    seen: dict[str, str] = {}
    for i, row in enumerate(rows):
        if "text" in row:
            out.append((str(row.get("id", i)), row["text"]))
        elif "context" in row:
            text = row["context"]
            if text not in seen:
                seen[text] = f"ctx-{len(seen):06d}"
                out.append((seen[text], text))
        else:
            raise UsageError(f"{path}:{i + 1}: need a 'text' or 'context' field")
    return out


def cmd_build_index(args) -> int:
    from .retrieval import build_index, save_index

    contexts = _load_contexts_for_index(Path(args.input))
    embedder = _make_embedder(args.embedder)
    index = build_index(contexts, embedder)
    manifest = save_index(index, args.out, contexts=dict(contexts))
    print(json.dumps(manifest, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .dataset import load_triplets
    from .harness.config import RunConfig, load_config
    from .harness.reports import emit_reports
    from .harness.runner import run_eval
    from .retrieval import load_contexts, load_index

    overrides = {
        "mode": args.mode,
        "k": args.k,
        "seed": args.seed,
        "intensity": args.intensity,
        "model_label": args.model_label,
        "index_path": args.index,
        "backend": args.backend,
    }
    if args.config:
        config = load_config(args.config, **overrides)
    else:
        config = RunConfig.from_dict({k: v for k, v in overrides.items() if v is not None})
    config.require_intensity()
    items = load_triplets(args.items)
    if args.limit:
        items = items[: args.limit]
    index = contexts = embedder = None
    if config.index_path:
        index = load_index(config.index_path)
        contexts = load_contexts(config.index_path)
        embedder = _make_embedder(config.embedder)
        if embedder is not None and embedder.model_id != index.embedder_id:
            raise UsageError(f"index was built with {index.embedder_id!r}, config embedder is {embedder.model_id!r}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    transcripts, row = run_eval(
        config,
        items,
        index,
        backend=_make_backend(config.backend, items),
        contexts=contexts,
        embedder=embedder,
        score_embedder=_make_embedder(config.score_embedder),
        journal_path=out / "journal.jsonl",
        exchange_log_path=out / "exchanges.jsonl",
        resume=args.resume,
    )
    (out / "row.json").write_text(json.dumps(row.to_dict(), indent=2, sort_keys=True) + "\n")
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    extra = {"embedder_id": index.embedder_id if index else None}
    if config.index_path:
        from .retrieval import index_sha256

        extra["index_sha256"] = index_sha256(config.index_path)
    emit_reports([row], out / "reports", configs=[config.to_dict()], manifest_extra=extra)
    print(f"{row.model_label}: {row.n_items} items, {row.n_failed} failed -> {out}")
    return EXIT_PARTIAL if row.n_failed else EXIT_OK


def cmd_rank(args) -> int:
    from .harness.reports import rank_csv, read_metric_csv
    from .harness.ranking import rank_table
    from .metrics import GEN_COLUMNS

    columns = tuple(args.columns.split(",")) if args.columns else GEN_COLUMNS
    table = read_metric_csv(args.input, columns)
    text = rank_csv(table, columns)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_PARTIAL if rank_table(table, columns).excluded else EXIT_OK


def cmd_report(args) -> int:
    from .harness.reports import emit_reports
    from .harness.runner import ModelRow

    rows, configs = [], []
    for run in args.runs:
        run = Path(run)
        rows.append(ModelRow.from_dict(json.loads((run / "row.json").read_text())))
        cfg = run / "config.json"
        configs.append(json.loads(cfg.read_text()) if cfg.exists() else {"run": str(run)})
    emit_reports(rows, args.out, configs=configs)
    print(f"wrote reports for {len(rows)} models to {args.out}")
    return EXIT_PARTIAL if any(r.n_failed for r in rows) else EXIT_OK


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="esg-forge", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("merge-lora", help="merge a LoRA adapter into base weights")
    s.add_argument("base")
    s.add_argument("adapter")
    s.add_argument("-o", "--out", required=True)
    s.add_argument("--alpha", type=float, help="override the adapter's alpha (default: from metadata, else r)")
    s.set_defaults(func=cmd_merge_lora)

    s = sub.add_parser("irm-extract", help="instruction residual = inst - base")
    s.add_argument("inst")
    s.add_argument("base")
    s.add_argument("-o", "--out", required=True)
    s.add_argument("--ignore-missing", action="store_true")
    s.add_argument("--plain", action="store_true", help="store a single F32 delta without the compensation term")
    s.set_defaults(func=cmd_irm_extract)

    s = sub.add_parser("irm-apply", help="adapted base + instruction residual")
    s.add_argument("base")
    s.add_argument("residual")
    s.add_argument("-o", "--out", required=True)
    s.add_argument("--dtype", choices=["F32", "F16", "BF16"])
    s.add_argument("--ignore-missing", action="store_true")
    s.add_argument("--strict-finite", action="store_true")
    s.set_defaults(func=cmd_irm_apply)

    s = sub.add_parser("ckpt-diff", help="compare the tensor layout of two checkpoints")
    s.add_argument("a")
    s.add_argument("b")
    s.add_argument("--values", action="store_true", help="also report max |a-b| per tensor")
    s.add_argument("--json", action="store_true")
    s.add_argument("--check", action="store_true", help="exit 2 when the layouts differ")
    s.set_defaults(func=cmd_ckpt_diff)

    s = sub.add_parser("split-data", help="stratified train/val/test split")
    s.add_argument("input")
    s.add_argument("-o", "--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--fractions", type=_fractions, default=(0.7, 0.1, 0.2))
    s.set_defaults(func=cmd_split_data)

    s = sub.add_parser("build-index", help="embed contexts into a retrieval index")
    s.add_argument("input", help="JSONL with id/text rows or QA triplets")
    s.add_argument("-o", "--out", required=True)
    s.add_argument("--embedder", default="hashing")
    s.set_defaults(func=cmd_build_index)

    s = sub.add_parser("eval", help="run one model configuration over a QA split")
    s.add_argument("--config")
    s.add_argument("--items", required=True)
    s.add_argument("-o", "--out", required=True)
    s.add_argument("--mode", choices=["zero-shot", "ekb", "nkb"])
    s.add_argument("--k", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--intensity", type=float, help="kg CO2eq per kWh")
    s.add_argument("--model-label")
    s.add_argument("--index")
    s.add_argument("--backend")
    s.add_argument("--limit", type=int)
    s.add_argument("--resume", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("rank", help="rank models from a metrics CSV")
    s.add_argument("input")
    s.add_argument("--columns", help="comma-separated metric keys (default: all generative columns)")
    s.add_argument("-o", "--out")
    s.set_defaults(func=cmd_rank)

    s = sub.add_parser("report", help="combine eval run directories into ranked tables")
    s.add_argument("runs", nargs="+")
    s.add_argument("-o", "--out", required=True)
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help or a usage error
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    from .harness.config import ConfigError

    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"esg-forge: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"esg-forge: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        log.debug("fatal", exc_info=True)
        print(f"esg-forge: fatal: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
