import math
import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from overload_sim.client import (
    NO_TIMEOUT,
    Request,
    RetryPolicy,
    SessionInstance,
    SessionStatus,
    TimeoutModel,
    on_request_resolved,
    on_timeout,
    poisson_arrival_times,
    sample_deadline,
    schedule_session_arrivals,
)
from overload_sim.workload import SessionTrace, generate_trace_pool


def test_fixed_timeout_is_flat():
    tm = TimeoutModel(40.0, 0.0, "fixed")
    assert sample_deadline(tm, 3.0, random.Random(0)) == 43.0


def test_no_timeout_is_infinite():
    assert sample_deadline(NO_TIMEOUT, 1.0, random.Random(0)) == math.inf


def test_deadline_moments():
    rng = random.Random(2024)
    tm = TimeoutModel()
    d = np.array([sample_deadline(tm, 0.0, rng) for _ in range(100_000)])
    assert d.mean() == pytest.approx(20.0, abs=0.15)
    assert d.min() >= 8.0
    # think component is exponential: sd equals its mean
    assert (d - 8.0).std() == pytest.approx(12.0, rel=0.02)


def _req(attempt=0):
    return Request(1, 0, None, 0.0, 20.0, attempt)


def test_retry_rate():
    rng = random.Random(99)
    pol = RetryPolicy(0.4, 5)
    n = 100_000
    hits = sum(on_timeout(_req(), pol, rng) is not None for _ in range(n))
    assert hits / n == pytest.approx(0.4, abs=0.005)


def test_retry_cap():
    class Always:
        def random(self):
            return 0.0

    assert on_timeout(_req(attempt=5), RetryPolicy(0.4, 5), Always()) is None
    nxt = on_timeout(_req(attempt=4), RetryPolicy(0.4, 5), Always(), TimeoutModel(20, 0, "fixed"))
    assert nxt.attempt == 5
    assert nxt.issue_time == 20.0 and nxt.deadline == 40.0


def test_retry_probability_zero_abandons():
    class Never:
        def random(self):
            return 0.0

    assert on_timeout(_req(), RetryPolicy(0.0, 5), Never()) is None


@settings(max_examples=100)
@given(st.floats(0.0, 1.0), st.integers(0, 8), st.integers(0, 10))
def test_attempt_chain_length_is_bounded(p, m, seed):
    rng = random.Random(seed)
    pol = RetryPolicy(p, m)
    r = _req()
    attempts = 1
    while (r := on_timeout(r, pol, rng)) is not None:
        attempts += 1
    assert attempts <= m + 1


def _session(labels, chain):
    trace = SessionTrace(0, tuple(chain.type_by_label(x) for x in labels))
    return SessionInstance(0, trace, 0.0)


def test_success_advances_cursor(chain):
    s = _session(["Br-1", "Br-4", "Tr-1"], chain)
    assert on_request_resolved(s, True, 1.0).label == "Br-4"
    assert on_request_resolved(s, True, 2.0).label == "Tr-1"
    assert on_request_resolved(s, True, 3.0) is None
    assert s.status is SessionStatus.COMPLETED and s.end_time == 3.0


def test_failure_aborts_and_counts_remainder(chain):
    s = _session(["Br-1", "Br-2", "Br-3", "Br-4"], chain)
    on_request_resolved(s, True)
    assert on_request_resolved(s, False) is None
    assert s.status is SessionStatus.ABORTED
    assert s.not_generated == 2
    with pytest.raises(RuntimeError):
        on_request_resolved(s, True)


def test_poisson_counts():
    rng = np.random.default_rng(5)
    rate, horizon = 2.0, 1000.0
    counts = [len(poisson_arrival_times(rate, horizon, rng)) for _ in range(200)]
    assert np.mean(counts) == pytest.approx(rate * horizon, rel=0.01)
    assert np.var(counts, ddof=1) == pytest.approx(rate * horizon, rel=0.3)


def test_arrivals_inside_horizon_and_sorted():
    t = poisson_arrival_times(50.0, 10.0, np.random.default_rng(1))
    assert np.all(np.diff(t) > 0) and t[0] >= 0 and t[-1] <= 10.0


def test_pool_cycling(chain):
    pool = generate_trace_pool(chain, 3, seed=1)
    arr = schedule_session_arrivals(5.0, 10.0, pool, np.random.default_rng(0))
    assert [tr for _, tr in arr[:6]] == pool + pool


def test_single_trace_pool(chain):
    pool = generate_trace_pool(chain, 1, seed=1)
    arr = schedule_session_arrivals(5.0, 10.0, pool, np.random.default_rng(0))
    assert all(tr is pool[0] for _, tr in arr)
