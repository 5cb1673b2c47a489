import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from overload_sim.metrics import (
    DoubleCount,
    EmptySet,
    Outcome,
    OutcomeLedger,
    ccdf,
    ccdf_grid,
    read_ccdf_csv,
    read_ledger_csv,
    summarize,
    throughput,
    write_ccdf_csv,
    write_ledger_csv,
)

CLASSES = {"Br-1": "browsing", "Br-2": "browsing", "Tr-1": "transaction"}


def ledger_with(completed=(), timed_out=0, dropped=0, label="Br-1"):
    led = OutcomeLedger(dict(CLASSES))
    aid = 0
    for t in completed:
        aid += 1
        led.issue(label)
        led.record(label, Outcome.COMPLETED, aid, response_time=t)
    for _ in range(timed_out):
        aid += 1
        led.issue(label)
        led.record(label, Outcome.TIMED_OUT, aid)
    for _ in range(dropped):
        aid += 1
        led.issue(label)
        led.record(label, Outcome.DROPPED, aid)
    return led


def test_all_timeouts_give_flat_ccdf():
    c = ccdf(ledger_with(timed_out=10))
    assert np.all(c(np.array([0.0, 1.0, 1e6])) == 1.0)
    assert c.quantile(0.5) == math.inf


def test_two_samples_median():
    c = ccdf(ledger_with(completed=[1.0, 3.0]))
    assert c(2.0) == 0.5


def test_empty_filter_raises():
    with pytest.raises(EmptySet):
        ccdf(ledger_with(completed=[1.0]), "Tr-1")


def test_double_resolution_rejected():
    led = OutcomeLedger(dict(CLASSES))
    led.issue("Br-1")
    led.record("Br-1", Outcome.TIMED_OUT, 7)
    with pytest.raises(DoubleCount):
        led.record("Br-1", Outcome.COMPLETED, 7, response_time=1.0)


def test_late_completion_counts_as_timeout():
    led = OutcomeLedger(dict(CLASSES))
    led.issue("Br-2")
    assert led.record_completion("Br-2", 1, 0.0, 21.0, 20.0) is Outcome.TIMED_OUT
    led.issue("Br-2")
    assert led.record_completion("Br-2", 2, 0.0, 5.0, 20.0) is Outcome.COMPLETED
    assert led.counts["Br-2"].completed == 1 and led.counts["Br-2"].timed_out == 1


def test_summarize_examples():
    assert summarize(ledger_with(completed=[0.5] * 4))[0] == {
        "group": "all", "completed": 100.0, "timed_out": 0.0, "dropped": 0.0, "not_generated": 0.0,
    }
    only_drops = summarize(ledger_with(dropped=3))[0]
    assert (only_drops["completed"], only_drops["dropped"]) == (0.0, 100.0)


def test_summarize_counts_not_generated():
    led = ledger_with(completed=[1.0], timed_out=1)
    led.record("Tr-1", Outcome.NOT_GENERATED, count=2)
    row = summarize(led)[0]
    assert row == {"group": "all", "completed": 25.0, "timed_out": 25.0, "dropped": 0.0, "not_generated": 50.0}
    assert {r["group"] for r in summarize(led)} == {"all", "browsing", "transaction"}


def test_throughput_examples():
    led = ledger_with(completed=[0.0] * 560)
    # all samples have issue time 0, so completions sit at t=0
    assert throughput(led, 100.0) == pytest.approx(5.6)
    assert throughput(ledger_with(), 100.0) == 0.0
    with pytest.raises(ValueError):
        throughput(led, 0.0)


def test_csv_round_trip(tmp_path):
    led = ledger_with(completed=[0.5, 1.5, 2.5], timed_out=2, dropped=1)
    led.record("Br-2", Outcome.NOT_GENERATED, count=4)
    write_ledger_csv(led, tmp_path / "l.csv")
    back = read_ledger_csv(tmp_path / "l.csv")
    assert back["Br-1"]["completed"] == 3
    assert back["all"]["not_generated"] == 4
    assert back["browsing"]["generated"] == 6
    assert back["Br-1"]["mean_response_s"] == pytest.approx(1.5)
    write_ccdf_csv(led, tmp_path / "c.csv", grid=ccdf_grid(3.0, 0.5))
    cc = read_ccdf_csv(tmp_path / "c.csv")
    t, v = cc["all"]
    assert list(t) == [0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0]
    assert v[0] == 1.0 and v[-1] == pytest.approx(0.5)
    assert "Tr-1" not in cc  # nothing resolved there


@settings(max_examples=200)
@given(
    st.lists(st.floats(0.0, 100.0), max_size=60),
    st.integers(0, 20),
    st.integers(0, 20),
)
def test_ccdf_properties(samples, timed_out, dropped):
    if not samples and not (timed_out + dropped):
        return
    c = ccdf(ledger_with(samples, timed_out, dropped))
    mass = (timed_out + dropped) / (len(samples) + timed_out + dropped)
    assert c.infinite_mass == mass
    grid = np.linspace(-1.0, 120.0, 400)
    vals = c(grid)
    assert np.all(np.diff(vals) <= 0)
    assert np.all(vals <= 1.0) and np.all(vals >= mass - 1e-15)
    assert c(1e9) == pytest.approx(mass)
    for p in (0.1, 0.5, 0.9):
        q = c.quantile(p)
        if math.isfinite(q):
            assert c.fraction_within(q) >= p - 1e-12


@settings(max_examples=100)
@given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
def test_summary_sums_to_hundred(a, b, c, d):
    led = ledger_with([1.0] * a, b, c)
    if d:
        led.record("Br-2", Outcome.NOT_GENERATED, count=d)
    if a + b + c + d == 0:
        return
    row = summarize(led)[0]
    assert abs(sum(v for k, v in row.items() if k != "group") - 100.0) <= 1e-9
