"""Evaluation harness: backends, run configuration, runs, ranks and reports."""
from __future__ import annotations

from .backend import (
    AttemptsExhaustedError,
    BackendError,
    ChatResult,
    CorruptingBackend,
    EchoBackend,
    EmptyBackend,
    GenParams,
    HttpChatBackend,
    MalformedResponseError,
    PermanentBackendError,
    ReferenceEchoBackend,
    ScriptedBackend,
    TransientBackendError,
    generate,
)
from .config import ConfigError, Mode, RunConfig, load_config
from .ranking import aggregate_rank, competition_ranks, kendall_tau, rank_table
from .reports import emit_reports
from .runner import ModelRow, Transcript, run_eval, summarize

__all__ = [
    "AttemptsExhaustedError",
    "BackendError",
    "ChatResult",
    "ConfigError",
    "CorruptingBackend",
    "EchoBackend",
    "EmptyBackend",
    "GenParams",
    "HttpChatBackend",
    "MalformedResponseError",
    "Mode",
    "ModelRow",
    "PermanentBackendError",
    "ReferenceEchoBackend",
    "RunConfig",
    "ScriptedBackend",
    "Transcript",
    "TransientBackendError",
    "aggregate_rank",
    "competition_ranks",
    "emit_reports",
    "generate",
    "kendall_tau",
    "load_config",
    "rank_table",
    "run_eval",
    "summarize",
]
