"""Run configuration (TOML or JSON) for an evaluation."""
from __future__ import annotations

import enum
import hashlib
import json
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from ..prompts import TEMPLATE_VERSION


class ConfigError(ValueError):
    pass


class Mode(str, enum.Enum):
    ZERO_SHOT = "zero-shot"
    EKB = "ekb"
    NKB = "nkb"

    @classmethod
    def parse(cls, value) -> "Mode":
        if isinstance(value, Mode):
            return value
        norm = str(value).strip().lower().replace("_", "-")
        aliases = {"zeroshot": "zero-shot", "zero": "zero-shot"}
        try:
            return cls(aliases.get(norm, norm))
        except ValueError:
            raise ConfigError(f"unknown mode {value!r} (expected zero-shot, ekb or nkb)") from None


@dataclass(frozen=True)
class RunConfig:
    """``backend`` is an http(s) URL or one of the bundled scripted backends
    (``echo``, ``reference-echo``, ``corrupting``, ``empty``). ``embedder``
    is an http(s) URL or ``hashing`` for the offline hashing embedder."""

    model_label: str
    mode: Mode = Mode.ZERO_SHOT
    backend: str = "echo"
    backend_model: str = "default"
    index_path: str | None = None
    k: int = 3
    max_new_tokens: int = 512
    temperature: float = 0.0
    seed: int = 0
    intensity: float | None = None
    region: str = ""
    embedder: str = "hashing"
    score_embedder: str | None = "hashing"
    template_version: str = TEMPLATE_VERSION
    max_in_flight: int = 1
    max_attempts: int = 4
    nkb_max_steps: int = 8
    tool_name: str = "search"
    reasoning_tags: tuple[str, str] | None = None
    bleu_smoothing: bool = True
    power_watts: float = 0.0
    power_source: str = "GPU"

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode.parse(self.mode))
        if self.reasoning_tags is not None:
            tags = tuple(self.reasoning_tags)
            if len(tags) != 2 or not all(tags):
                raise ConfigError("reasoning_tags must be a pair of non-empty strings")
            object.__setattr__(self, "reasoning_tags", tags)
        self.validate()

    def validate(self) -> None:
        if not self.model_label:
            raise ConfigError("model_label is required")
        if self.mode is Mode.ZERO_SHOT and self.index_path:
            raise ConfigError("zero-shot runs must not name an index")
        if self.mode is not Mode.ZERO_SHOT and not self.index_path:
            raise ConfigError(f"{self.mode.value} runs need index_path")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.max_in_flight < 1 or self.max_attempts < 1 or self.nkb_max_steps < 1:
            raise ConfigError("max_in_flight, max_attempts and nkb_max_steps must be >= 1")
        if self.intensity is not None and self.intensity < 0:
            raise ConfigError("intensity must be >= 0")
        if self.power_watts < 0:
            raise ConfigError("power_watts must be >= 0")

    def require_intensity(self) -> float:
        if self.intensity is None:
            raise ConfigError("carbon intensity (kg CO2eq/kWh) is required; set intensity or pass --intensity")
        return self.intensity

    def with_overrides(self, **kw) -> "RunConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        d["reasoning_tags"] = list(self.reasoning_tags) if self.reasoning_tags else None
        return d

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, d) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def load_config_dict(path) -> dict:
    path = Path(path)
    raw = path.read_bytes()
    try:
        if path.suffix.lower() == ".json":
            data = json.loads(raw)
        else:
            data = tomllib.loads(raw.decode("utf-8"))
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a table/object")
    # allow everything under a [run] table
    return dict(data.get("run", data))


def load_config(path, **overrides) -> RunConfig:
    data = load_config_dict(path)
    data.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig.from_dict(data)
