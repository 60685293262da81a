"""Energy and CO2-equivalent accounting for tracked operations.

Power is sampled per source (CPU, GPU, RAM, Other) and integrated with the
trapezoid rule; kWh times a configured carbon intensity gives kg CO2eq.
Spans may nest: every span reports the energy of its whole interval, and
``exclusive_kwh`` attributes to the innermost span only.
"""
from __future__ import annotations

import csv
import enum
import io
import logging
import math
import threading
import time
from bisect import bisect_left, bisect_right
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Protocol, Sequence, runtime_checkable

log = logging.getLogger(__name__)

WS_PER_KWH = 3.6e6
PER_SOURCE_TOLERANCE = 1e-9


class Source(str, enum.Enum):
    CPU = "CPU"
    GPU = "GPU"
    RAM = "RAM"
    OTHER = "Other"

    @classmethod
    def parse(cls, label) -> "Source":
        if isinstance(label, Source):
            return label
        for s in cls:
            if str(label).strip().lower() == s.value.lower():
                return s
        raise ValueError(f"unknown power source {label!r}")


class ProbeError(RuntimeError):
    pass


@dataclass(frozen=True)
class PowerSample:
    t: float
    watts: float
    source: Source

    def __post_init__(self):
        if not (self.watts >= 0 and math.isfinite(self.watts)):
            raise ValueError(f"power must be a non-negative finite number, got {self.watts}")


@runtime_checkable
class PowerProbe(Protocol):
    source: Source

    def read(self, t: float) -> float:
        """Instantaneous (or since-last-read average) draw in watts."""
        ...


class ConstantProbe:
    """Fixed draw, e.g. a configured TDP when no hardware counter exists."""

    def __init__(self, watts: float, source: Source | str = Source.OTHER, *, memory_gb: float | None = None):
        if watts < 0:
            raise ValueError("watts must be >= 0")
        self.watts = float(watts)
        self.source = Source.parse(source)
        self.memory_gb = memory_gb

    def read(self, t: float) -> float:
        return self.watts


class ReplayProbe:
    """Replays a recorded power trace, linearly interpolated between samples.

    Outside the recorded range the probe raises, which marks its source as
    partial for the span being tracked.
    """

    def __init__(self, samples: Sequence[PowerSample]):
        if not samples:
            raise ValueError("replay trace is empty")
        sources = {s.source for s in samples}
        if len(sources) != 1:
            raise ValueError("a replay probe carries one source; use replay_probes() for mixed files")
        check_stream(samples)
        self.source = samples[0].source
        self.samples = list(samples)
        self._t = [s.t for s in samples]

    def read(self, t: float) -> float:
        ts = self._t
        if t < ts[0] or t > ts[-1]:
            raise ProbeError(f"t={t} outside replay range [{ts[0]}, {ts[-1]}]")
        i = bisect_left(ts, t)
        if ts[i] == t:
            return self.samples[i].watts
        a, b = self.samples[i - 1], self.samples[i]
        return a.watts + (b.watts - a.watts) * (t - a.t) / (b.t - a.t)


class RaplProbe:
    """CPU package power from the Linux powercap energy counter (microjoules).

    Reports the average draw since the previous read; the first read
    returns 0 W because no interval exists yet.
    """

    def __init__(self, path: str = "/sys/class/powercap/intel-rapl:0/energy_uj", source: Source | str = Source.CPU):
        self.path = Path(path)
        self.source = Source.parse(source)
        wrap = self.path.with_name("max_energy_range_uj")
        self._wrap = int(wrap.read_text()) if wrap.exists() else None
        self._last: tuple[float, int] | None = None

    @staticmethod
    def available(path: str = "/sys/class/powercap/intel-rapl:0/energy_uj") -> bool:
        try:
            int(Path(path).read_text())
            return True
        except (OSError, ValueError):
            return False

    def read(self, t: float) -> float:
        try:
            uj = int(self.path.read_text())
        except (OSError, ValueError) as exc:
            raise ProbeError(f"cannot read {self.path}: {exc}") from None
        last, self._last = self._last, (t, uj)
        if last is None or t <= last[0]:
            return 0.0
        delta = uj - last[1]
        if delta < 0 and self._wrap:
            delta += self._wrap
        return max(0.0, delta / 1e6 / (t - last[0]))


def check_stream(samples: Sequence[PowerSample]) -> None:
    for a, b in zip(samples, samples[1:]):
        if not b.t > a.t:
            raise ValueError(f"timestamps must strictly increase within a stream ({a.t} then {b.t})")


def read_replay_file(path) -> list[PowerSample]:
    """CSV with header ``t_seconds,watts,source``."""
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"t_seconds", "watts", "source"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            out.append(PowerSample(float(row["t_seconds"]), float(row["watts"]), Source.parse(row["source"])))
    return out


def replay_probes(samples: Iterable[PowerSample]) -> list[ReplayProbe]:
    by_source: dict[Source, list[PowerSample]] = {}
    for s in samples:
        by_source.setdefault(s.source, []).append(s)
    return [ReplayProbe(v) for _, v in sorted(by_source.items(), key=lambda kv: kv[0].value)]


def energy_from_samples(samples: Sequence[PowerSample]) -> float:
    """Trapezoid integral of one source's samples, in kWh."""
    check_stream(samples)
    ws = math.fsum((a.watts + b.watts) / 2 * (b.t - a.t) for a, b in zip(samples, samples[1:]))
    return ws / WS_PER_KWH


# --------------------------------------------------------------------------- records


@dataclass(frozen=True)
class EnergyRecord:
    kwh: float
    duration_s: float
    per_source: dict[str, float] = field(default_factory=dict)
    partial: frozenset = frozenset()
    peak_memory_gb: float | None = None

    def __post_init__(self):
        if self.kwh < 0 or self.duration_s < 0:
            raise ValueError("energy and duration must be non-negative")
        if abs(self.kwh - math.fsum(self.per_source.values())) > PER_SOURCE_TOLERANCE:
            raise ValueError("kwh must equal the sum of per-source energy")

    @classmethod
    def from_sources(cls, per_source: dict[str, float], duration_s: float, **kw) -> "EnergyRecord":
        return cls(math.fsum(per_source.values()), duration_s, dict(per_source), **kw)

    def to_dict(self) -> dict:
        return {
            "kwh": self.kwh,
            "duration_s": self.duration_s,
            "per_source": dict(sorted(self.per_source.items())),
            "partial": sorted(self.partial),
            "peak_memory_gb": self.peak_memory_gb,
        }

    @classmethod
    def from_dict(cls, d) -> "EnergyRecord":
        return cls(d["kwh"], d["duration_s"], dict(d["per_source"]), frozenset(d["partial"]), d.get("peak_memory_gb"))


@dataclass(frozen=True)
class EmissionRecord:
    kg_co2eq: float
    intensity: float
    region_label: str
    kwh: float = 0.0


def to_emissions(energy: EnergyRecord | float, intensity: float, region_label: str = "") -> EmissionRecord:
    if not intensity >= 0:
        raise ValueError("carbon intensity must be >= 0")
    kwh = energy.kwh if isinstance(energy, EnergyRecord) else float(energy)
    return EmissionRecord(kwh * intensity, intensity, region_label, kwh)


def implied_intensity(pairs: Iterable[tuple[float, float]]) -> float:
    """Mean kg/kWh ratio over ``(kwh, kg)`` pairs from a published table."""
    ratios = [kg / kwh for kwh, kg in pairs]
    return math.fsum(ratios) / len(ratios)


# --------------------------------------------------------------------------- sampling


class _Streams:
    """Per-source sample streams; appends are serialized by one lock."""

    def __init__(self, probes: Sequence[PowerProbe]):
        self.probes = list(probes)
        self.samples: list[list[tuple[float, float]]] = [[] for _ in self.probes]
        self.failed_at: list[float | None] = [None] * len(self.probes)
        self.peak_memory_gb: float | None = None
        self.lock = threading.Lock()

    def sample(self, t: float) -> None:
        with self.lock:
            for i, probe in enumerate(self.probes):
                if self.failed_at[i] is not None:
                    continue
                try:
                    w = float(probe.read(t))
                except Exception as exc:  # one bad probe must not sink the others
                    log.warning("power probe %s failed at t=%s: %s", probe.source.value, t, exc)
                    self.failed_at[i] = t
                    continue
                w = max(0.0, w - float(getattr(probe, "overhead_watts", 0.0)))
                stream = self.samples[i]
                if stream and t <= stream[-1][0]:
                    continue
                stream.append((t, w))
                mem = getattr(probe, "memory_gb", None)
                if callable(mem):
                    mem = mem()
                if mem is not None and (self.peak_memory_gb is None or mem > self.peak_memory_gb):
                    self.peak_memory_gb = float(mem)

    def integrate(self, t0: float, t1: float) -> tuple[dict[str, float], set[str]]:
        per: dict[str, float] = {}
        partial: set[str] = set()
        with self.lock:
            for i, probe in enumerate(self.probes):
                key = probe.source.value
                ws = _integrate_clipped(self.samples[i], t0, t1)
                per[key] = per.get(key, 0.0) + ws / WS_PER_KWH
                failed = self.failed_at[i]
                if failed is not None and failed <= t1:
                    partial.add(key)
        return per, partial


def _interp(stream, t: float) -> float:
    ts = [s[0] for s in stream]
    i = bisect_left(ts, t)
    if i < len(ts) and ts[i] == t:
        return stream[i][1]
    (ta, wa), (tb, wb) = stream[i - 1], stream[i]
    return wa + (wb - wa) * (t - ta) / (tb - ta)


def _integrate_clipped(stream: list[tuple[float, float]], t0: float, t1: float) -> float:
    """Trapezoid watt-seconds of ``stream`` restricted to [t0, t1].

    Clipping interpolates linearly, so integrals over a partition of a span
    add up to the integral over the span.
    """
    if len(stream) < 2 or t1 <= t0:
        return 0.0
    lo, hi = max(t0, stream[0][0]), min(t1, stream[-1][0])
    if hi <= lo:
        return 0.0
    ts = [s[0] for s in stream]
    inner = stream[bisect_right(ts, lo) : bisect_left(ts, hi)]
    pts = [(lo, _interp(stream, lo)), *inner, (hi, _interp(stream, hi))]
    return math.fsum((a[1] + b[1]) / 2 * (b[0] - a[0]) for a, b in zip(pts, pts[1:]))


class _Sampler(threading.Thread):
    def __init__(self, streams: _Streams, interval_s: float, clock: Callable[[], float]):
        super().__init__(daemon=True, name="eco-sampler")
        self.streams, self.interval_s, self.clock = streams, interval_s, clock
        self.stop_event = threading.Event()

    def run(self) -> None:
        while not self.stop_event.wait(self.interval_s):
            self.streams.sample(self.clock())


@dataclass
class SpanRecord:
    label: str
    model: str
    start: float
    end: float
    energy: EnergyRecord
    exclusive_kwh: float
    parent: int | None
    depth: int


class Ledger:
    """Samples the probes for the lifetime of the ledger and records spans.

    Probes are always read at every span boundary; with ``background=True``
    a sampler thread also reads them every ``interval_s`` in between. The
    sampling cost itself is inside the measured span unless a probe reports
    its own draw via an ``overhead_watts`` attribute, which is subtracted.
    """

    def __init__(
        self,
        probes: Sequence[PowerProbe],
        interval_s: float = 1.0,
        *,
        clock: Callable[[], float] = time.monotonic,
        background: bool = True,
    ):
        if not probes:
            raise ValueError("at least one power probe is required")
        if not interval_s > 0:
            raise ValueError("interval_s must be > 0")
        self.interval_s = interval_s
        self.clock = clock
        self.background = background
        self._streams = _Streams(probes)
        self._sampler: _Sampler | None = None
        self._lock = threading.Lock()
        self._local = threading.local()
        self.records: list[SpanRecord] = []
        self._children: dict[int, list[int]] = {}

    def _ensure_sampler(self) -> None:
        if self.background and self._sampler is None:
            self._sampler = _Sampler(self._streams, self.interval_s, self.clock)
            self._sampler.start()

    def close(self) -> None:
        if self._sampler is not None:
            self._sampler.stop_event.set()
            self._sampler.join()
            self._sampler = None

    def __enter__(self) -> "Ledger":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    @contextmanager
    def span(self, label: str, model: str = "") -> Iterator[dict]:
        """Track a block; the yielded dict receives ``record`` on exit."""
        stack = getattr(self._local, "stack", None)
        if stack is None:
            stack = self._local.stack = []
        self._ensure_sampler()
        parent = stack[-1] if stack else None
        with self._lock:
            idx = len(self.records)
            self.records.append(None)  # placeholder keeps indices stable
        stack.append(idx)
        handle: dict = {}
        t0 = self.clock()
        self._streams.sample(t0)
        try:
            yield handle
        finally:
            t1 = self.clock()
            self._streams.sample(t1)
            stack.pop()
            per, partial = self._streams.integrate(t0, t1)
            energy = EnergyRecord.from_sources(
                per, max(0.0, t1 - t0), partial=frozenset(partial), peak_memory_gb=self._streams.peak_memory_gb
            )
            with self._lock:
                children = self._children.get(idx, [])
                child_kwh = math.fsum(self.records[c].energy.kwh for c in children)
                rec = SpanRecord(label, model, t0, t1, energy, max(0.0, energy.kwh - child_kwh), parent, len(stack))
                self.records[idx] = rec
                if parent is not None:
                    self._children.setdefault(parent, []).append(idx)
            handle["record"] = rec

    def completed(self) -> list[SpanRecord]:
        return [r for r in self.records if r is not None]


def track(
    span: Callable[[], object],
    probes: Sequence[PowerProbe],
    interval_s: float = 1.0,
    *,
    clock: Callable[[], float] = time.monotonic,
    background: bool = True,
) -> EnergyRecord:
    """Run ``span()`` and return the energy drawn while it ran."""
    with Ledger(probes, interval_s, clock=clock, background=background) as ledger:
        with ledger.span("track") as h:
            span()
    return h["record"].energy


# --------------------------------------------------------------------------- reporting

CONSUMPTION_COLUMNS = ("model", "time_h", "energy_kwh", "co2_kg", "vram_gb_peak", "region_label", "intensity")


@dataclass(frozen=True)
class ConsumptionRecord:
    model: str
    energy: EnergyRecord
    intensity: float
    region_label: str = ""


@dataclass(frozen=True)
class ConsumptionRow:
    model: str
    time_h: float
    energy_kwh: float
    co2_kg: float
    vram_gb_peak: float | None
    region_label: str
    intensity: float

    def cells(self) -> list[str]:
        vram = "" if self.vram_gb_peak is None else f"{self.vram_gb_peak:.3f}"
        return [
            self.model,
            f"{self.time_h:.3f}",
            f"{self.energy_kwh:.3f}",
            f"{self.co2_kg:.3f}",
            vram,
            self.region_label,
            f"{self.intensity:.4f}",
        ]


def ledger_report(records: Sequence[ConsumptionRecord], empty_label: str = "total") -> list[ConsumptionRow]:
    """Per-model totals, in first-seen order. An empty ledger gives one zero row."""
    if not records:
        return [ConsumptionRow(empty_label, 0.0, 0.0, 0.0, None, "", 0.0)]
    groups: dict[str, list[ConsumptionRecord]] = {}
    for r in records:
        groups.setdefault(r.model, []).append(r)
    rows = []
    for model, recs in groups.items():
        kwh = math.fsum(r.energy.kwh for r in recs)
        co2 = math.fsum(to_emissions(r.energy, r.intensity).kg_co2eq for r in recs)
        peaks = [r.energy.peak_memory_gb for r in recs if r.energy.peak_memory_gb is not None]
        regions = sorted({r.region_label for r in recs})
        intensities = {r.intensity for r in recs}
        rows.append(
            ConsumptionRow(
                model,
                math.fsum(r.energy.duration_s for r in recs) / 3600.0,
                kwh,
                co2,
                max(peaks) if peaks else None,
                "+".join(regions),
                intensities.pop() if len(intensities) == 1 else (co2 / kwh if kwh else 0.0),
            )
        )
    return rows


def consumption_csv(rows: Sequence[ConsumptionRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CONSUMPTION_COLUMNS)
    for row in rows:
        w.writerow(row.cells())
    return buf.getvalue()
