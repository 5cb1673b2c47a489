import math
import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from overload_sim.workload import (
    ExitNotAbsorbing,
    ExitUnreachable,
    NegativeEntry,
    PriorityInversion,
    RowNotStochastic,
    SessionTrace,
    _Walker,
    compute_reach_probability,
    derive_utilities,
    dump_model,
    expected_visits,
    generate_trace_pool,
    load_model,
    mean_requests_per_session,
    model_from_dict,
    model_to_dict,
    single_type_model,
    traces_contain,
    validate_model,
)

from conftest import make_chain

LABELS = ["Br-1", "Br-2", "Br-3", "Br-4", "Tr-1", "Tr-2", "Tr-3", "Tr-4"]


def q_by_label(model):
    return {t.label: v for t, v in compute_reach_probability(model).items()}


def value_iteration(model, sweeps=5000):
    """Independent oracle: iterate q <- P q with q(target)=1, q(Exit)=0."""
    p = np.asarray(model.transitions)
    n = model.n_types
    tgt = model.target_type.index
    q = np.zeros(n + 1)
    q[tgt] = 1.0
    for _ in range(sweeps):
        nxt = p @ q
        nxt[tgt] = 1.0
        nxt[n] = 0.0
        if np.max(np.abs(nxt - q)) < 1e-15:
            break
        q = nxt
    return {t.label: q[t.index] for t in model.types}


# -- validation ---------------------------------------------------------------


def test_default_chain_is_valid(chain):
    validate_model(chain)
    assert [t.label for t in chain.types] == LABELS
    assert chain.start_type.label == "Br-1"
    assert chain.target_type.label == "Tr-4"


def test_row_not_stochastic(chain):
    p = chain.transitions.copy()
    p[1, 0] += 0.05
    with pytest.raises(RowNotStochastic):
        validate_model(type(chain)(chain.types, p, chain.start))


def test_negative_entry(chain):
    p = chain.transitions.copy()
    p[0, 1] -= 0.4
    p[0, 2] += 0.4
    with pytest.raises(NegativeEntry):
        validate_model(type(chain)(chain.types, p, chain.start))


def test_exit_not_absorbing(chain):
    p = chain.transitions.copy()
    p[-1, -1] = 0.5
    p[-1, 0] = 0.5
    with pytest.raises(ExitNotAbsorbing):
        validate_model(type(chain)(chain.types, p, chain.start))


def test_exit_unreachable():
    m = make_chain(
        {"A": {"B": 1.0}, "B": {"A": 1.0}, "T": {"Exit": 1.0}},
        {"A": "browsing", "B": "browsing", "T": "transaction"},
        "A",
    )
    with pytest.raises(ExitUnreachable):
        validate_model(m)


# -- absorption probabilities --------------------------------------------------


def test_reach_probability_matches_table(chain):
    q = q_by_label(chain)
    expected = [0.027, 0.022, 0.036, 0.073, 0.73, 0.81, 0.90, 1.0]
    for lab, e in zip(LABELS, expected):
        assert q[lab] == pytest.approx(e, abs=1e-3), lab


def test_reach_probability_against_value_iteration(chain):
    q, vi = q_by_label(chain), value_iteration(chain)
    for lab in LABELS:
        assert q[lab] == pytest.approx(vi[lab], abs=1e-12)


def test_transaction_funnel_closed_form(chain):
    # Tr-k -> Tr-(k+1) with 0.9, else Exit: q = 0.9^(4-k)
    q = q_by_label(chain)
    for k, lab in enumerate(["Tr-1", "Tr-2", "Tr-3"], start=1):
        assert q[lab] == pytest.approx(0.9 ** (4 - k), rel=1e-12)


def test_reach_probability_monte_carlo(chain):
    # frequency with which a walk started at each type hits Tr-4, 1e5 walks
    rng = random.Random(7)
    walker = _Walker(chain)
    q = q_by_label(chain)
    n = 100_000
    for t in chain.types:
        hits = 0
        for _ in range(n):
            state = t.index
            while state not in (chain.exit_index, chain.target_type.index):
                k = np.searchsorted(walker.cum[state], rng.random(), side="right")
                state = walker.dst[state][min(k, len(walker.dst[state]) - 1)]
            hits += state == chain.target_type.index
        se = math.sqrt(max(q[t.label] * (1 - q[t.label]), 1e-12) / n)
        assert abs(hits / n - q[t.label]) <= 3 * se + 1e-12, t.label


def test_pool_fraction_containing_confirm(chain):
    pool = generate_trace_pool(chain, 100_000, seed=3)
    frac = traces_contain(pool, chain.type_by_label("Tr-4"))
    assert frac == pytest.approx(0.027, abs=0.003)


def test_self_absorbing_target_has_probability_one():
    m = single_type_model(0.29)
    (q,) = compute_reach_probability(m).values()
    assert q == 1.0


# -- utilities -----------------------------------------------------------------


def test_utilities_reproduce_table(chain):
    u = derive_utilities(compute_reach_probability(chain))
    expected = [27, 22, 36, 73, 3650, 4050, 4500, 5000]
    assert [u[lab] for lab in LABELS] == expected


def test_unrounded_utilities_keep_probabilities(chain):
    q = compute_reach_probability(chain)
    u = derive_utilities(q, significant_digits=None)
    for t, v in q.items():
        scale = 5000 if t.is_transaction else 1000
        assert u[t] == pytest.approx(v * scale, abs=1e-8)


def test_priority_inversion(chain):
    q = compute_reach_probability(chain)
    with pytest.raises(PriorityInversion):
        derive_utilities(q, browsing_scale=100_000, transaction_scale=10)


# -- traces --------------------------------------------------------------------


def test_pool_is_deterministic(chain):
    a = generate_trace_pool(chain, 500, seed=11)
    b = generate_trace_pool(chain, 500, seed=11)
    assert a == b
    assert a != generate_trace_pool(chain, 500, seed=12)


def test_traces_start_at_start_type(chain):
    pool = generate_trace_pool(chain, 2000, seed=1)
    assert all(tr.requests[0] is chain.start_type for tr in pool)
    assert all(isinstance(tr, SessionTrace) and len(tr) >= 1 for tr in pool)


def test_trace_steps_have_positive_probability(chain):
    pool = generate_trace_pool(chain, 2000, seed=2)
    for tr in pool:
        for a, b in zip(tr.requests, tr.requests[1:]):
            assert chain.probability(a, b) > 0
        assert chain.probability(tr.requests[-1], "Exit") > 0


def test_mean_session_length(chain):
    visits = expected_visits(chain)
    assert mean_requests_per_session(chain) == pytest.approx(sum(visits.values()))
    pool = generate_trace_pool(chain, 100_000, seed=5)
    lengths = np.array([len(t) for t in pool])
    se = lengths.std() / math.sqrt(len(lengths))
    assert abs(lengths.mean() - mean_requests_per_session(chain)) < 4 * se


# -- serialization -------------------------------------------------------------


def test_yaml_round_trip(chain, tmp_path):
    path = tmp_path / "chain.yaml"
    dump_model(chain, path)
    assert load_model(path) == chain
    assert model_from_dict(model_to_dict(chain)) == chain


# -- properties ------------------------------------------------------------------


@st.composite
def random_chains(draw):
    n_br = draw(st.integers(1, 4))
    n_tx = draw(st.integers(1, 3))
    labels = [f"B{i}" for i in range(n_br)] + [f"T{i}" for i in range(n_tx)]
    classes = {lab: "browsing" if lab[0] == "B" else "transaction" for lab in labels}
    rows = {}
    for lab in labels:
        w = [draw(st.floats(0.0, 1.0)) for _ in labels]
        exit_w = draw(st.floats(0.05, 1.0))
        tot = sum(w) + exit_w
        rows[lab] = {d: x / tot for d, x in zip(labels, w)}
        rows[lab]["Exit"] = 1.0 - sum(rows[lab].values())
    return make_chain(rows, classes, labels[0])


@settings(max_examples=60, deadline=None)
@given(random_chains())
def test_reach_probability_properties(m):
    validate_model(m, tol=1e-9)
    q = q_by_label(m)
    vi = value_iteration(m, sweeps=20000)
    assert q[m.target_type.label] == 1.0
    for lab, v in q.items():
        assert 0.0 <= v <= 1.0
        assert v == pytest.approx(vi[lab], abs=1e-6)


@settings(max_examples=40, deadline=None)
@given(random_chains(), st.integers(0, 2**31 - 1))
def test_trace_invariants_hold_for_random_chains(m, seed):
    for tr in generate_trace_pool(m, 50, seed):
        assert tr.requests[0] is m.start_type
        for a, b in zip(tr.requests, tr.requests[1:]):
            assert m.probability(a, b) > 0
