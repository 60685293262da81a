from __future__ import annotations

import math

import pytest

from esg_forge.eco import (
    ConstantProbe,
    ConsumptionRecord,
    EnergyRecord,
    Ledger,
    PowerSample,
    ReplayProbe,
    Source,
    consumption_csv,
    energy_from_samples,
    implied_intensity,
    ledger_report,
    read_replay_file,
    replay_probes,
    to_emissions,
    track,
)

CONSUMPTION_ROWS = {
    "Inst-ESG": (3.761, 0.425),
    "Inst-ESG+eKB": (1.471, 0.166),
    "Inst-ESG+nKB": (11.923, 1.348),
    "IRM": (1.392, 0.157),
    "IRM+eKB": (1.667, 0.189),
    "IRM+nKB": (19.599, 2.216),
}


class ManualClock:
    def __init__(self, t=0.0):
        self.t = t

    def __call__(self):
        return self.t


def test_constant_draw_one_hour():
    clock = ManualClock()
    rec = track(lambda: setattr(clock, "t", 3600.0), [ConstantProbe(100.0, "GPU")], clock=clock, background=False)
    assert rec.kwh == pytest.approx(0.1, abs=1e-12)
    assert rec.duration_s == 3600.0 and rec.per_source == {"GPU": pytest.approx(0.1)}
    assert to_emissions(rec, 0.113).kg_co2eq == pytest.approx(0.0113)


def test_zero_duration_zero_energy():
    clock = ManualClock(5.0)
    rec = track(lambda: None, [ConstantProbe(300.0, "CPU")], clock=clock, background=False)
    assert rec.kwh == 0.0 and rec.duration_s == 0.0


def test_trapezoid_example():
    s = [PowerSample(0, 100, Source.GPU), PowerSample(5, 100, Source.GPU), PowerSample(10, 200, Source.GPU)]
    assert energy_from_samples(s) == pytest.approx(1250 / 3.6e6)
    with pytest.raises(ValueError):
        energy_from_samples([PowerSample(1, 1, Source.GPU), PowerSample(1, 2, Source.GPU)])


def test_additive_over_partition(np_rng):
    ts = sorted(set(np_rng.uniform(0, 100, 40).round(3)))
    samples = [PowerSample(t, float(w), Source.GPU) for t, w in zip(ts, np_rng.uniform(50, 300, len(ts)))]
    lo, hi = ts[0], ts[-1]
    cuts = sorted({lo, hi, *np_rng.uniform(lo, hi, 7).round(3)})
    clock = ManualClock(lo)
    parts = []
    with Ledger(replay_probes(samples), clock=clock, background=False) as ledger:
        with ledger.span("whole") as whole:
            for a, b in zip(cuts, cuts[1:]):
                with ledger.span(str(a)) as h:
                    clock.t = b
                parts.append(h["record"].energy.kwh)
    total = whole["record"].energy.kwh
    assert total > 0
    assert math.fsum(parts) == pytest.approx(total, rel=1e-12)
    assert whole["record"].exclusive_kwh == pytest.approx(0.0, abs=1e-15)


def test_monotone_and_linear_in_power():
    clock = ManualClock()

    def run(watts, seconds):
        clock.t = 0.0
        return track(lambda: setattr(clock, "t", seconds), [ConstantProbe(watts, "GPU")], clock=clock, background=False).kwh

    assert run(100, 10) <= run(100, 20)
    assert run(250, 60) == pytest.approx(2.5 * run(100, 60))


def test_replay_file(tmp_path):
    path = tmp_path / "trace.csv"
    path.write_text("t_seconds,watts,source\n0,100,gpu\n10,100,gpu\n0,50,cpu\n10,50,cpu\n")
    probes = replay_probes(read_replay_file(path))
    assert {p.source for p in probes} == {Source.GPU, Source.CPU}
    clock = ManualClock()
    rec = track(lambda: setattr(clock, "t", 10.0), probes, clock=clock, background=False)
    assert rec.per_source["GPU"] == pytest.approx(1000 / 3.6e6)
    assert rec.per_source["CPU"] == pytest.approx(500 / 3.6e6)
    assert rec.kwh == pytest.approx(1500 / 3.6e6)
    (tmp_path / "bad.csv").write_text("time,watts\n0,1\n")
    with pytest.raises(ValueError, match="missing"):
        read_replay_file(tmp_path / "bad.csv")


def test_probe_failure_marks_source_partial():
    gpu = ReplayProbe([PowerSample(0, 100, Source.GPU), PowerSample(5, 100, Source.GPU)])  # ends early
    cpu = ConstantProbe(10.0, "CPU")
    clock = ManualClock()
    with Ledger([gpu, cpu], clock=clock, background=False) as ledger:
        with ledger.span("a") as h:
            clock.t = 10.0
    rec = h["record"].energy
    assert rec.partial == frozenset({"GPU"})
    assert rec.per_source["CPU"] == pytest.approx(100 / 3.6e6)


def test_nested_spans_inclusive_and_exclusive():
    clock = ManualClock()
    with Ledger([ConstantProbe(100.0, "GPU")], clock=clock, background=False) as ledger:
        with ledger.span("outer") as outer:
            clock.t = 1800.0
            with ledger.span("inner") as inner:
                clock.t = 3600.0
    o, i = outer["record"], inner["record"]
    assert o.energy.kwh == pytest.approx(0.1) and i.energy.kwh == pytest.approx(0.05)
    assert o.exclusive_kwh == pytest.approx(0.05) and i.exclusive_kwh == pytest.approx(0.05)
    assert i.parent == 0 and i.depth == 1 and o.depth == 0


def test_background_sampler_runs_and_stops():
    ledger = Ledger([ConstantProbe(5.0, "GPU")], interval_s=0.01)
    with ledger:
        with ledger.span("x"):
            pass
    assert ledger._sampler is None
    with pytest.raises(ValueError):
        Ledger([])


def test_energy_record_invariant():
    with pytest.raises(ValueError):
        EnergyRecord(1.0, 1.0, {"GPU": 0.5})
    with pytest.raises(ValueError):
        EnergyRecord(-1.0, 1.0, {"GPU": -1.0})
    rec = EnergyRecord.from_sources({"GPU": 0.25, "CPU": 0.5}, 10.0, peak_memory_gb=3.0)
    assert EnergyRecord.from_dict(rec.to_dict()) == rec
    with pytest.raises(ValueError):
        to_emissions(rec, -0.1)


def test_ledger_report_examples():
    (row,) = ledger_report([])
    assert (row.model, row.energy_kwh, row.co2_kg) == ("total", 0.0, 0.0)
    recs = [
        ConsumptionRecord("m", EnergyRecord.from_sources({"GPU": 0.2}, 1800.0, peak_memory_gb=4.0), 0.1, "r"),
        ConsumptionRecord("m", EnergyRecord.from_sources({"GPU": 0.3}, 3600.0, peak_memory_gb=6.0), 0.1, "r"),
        ConsumptionRecord("n", EnergyRecord.from_sources({"GPU": 1.0}, 36.0), 0.1, "r"),
    ]
    rows = ledger_report(recs)
    assert [r.model for r in rows] == ["m", "n"]
    assert rows[0].energy_kwh == pytest.approx(0.5) and rows[0].co2_kg == pytest.approx(0.05)
    assert rows[0].time_h == pytest.approx(1.5) and rows[0].vram_gb_peak == 6.0
    assert rows[1].cells()[1] == "0.010"  # 36 s shown to three decimals of an hour
    text = consumption_csv(rows)
    assert text.splitlines()[0] == "model,time_h,energy_kwh,co2_kg,vram_gb_peak,region_label,intensity"


def test_published_consumption_table_is_consistent():
    intensity = round(implied_intensity(CONSUMPTION_ROWS.values()), 4)
    assert intensity == 0.113
    for label, (kwh, kg) in CONSUMPTION_ROWS.items():
        got = to_emissions(kwh, intensity).kg_co2eq
        assert got == pytest.approx(kg, rel=0.02), label
