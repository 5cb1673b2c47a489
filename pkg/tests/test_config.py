import pytest
import yaml

from overload_sim.client import TimeoutModel
from overload_sim.config import (
    SCHEMES,
    ConfigInvalid,
    ScenarioKind,
    bundled_scenario,
    load_scenario,
    scenario_from_dict,
)
from overload_sim.server import CPU_BOUND, PhaseProfile

BASE = {"kind": "E2-ecommerce", "schemes": ["SQ"], "rho": [1.0], "seeds": [1]}


def test_bundled_scenarios_load():
    e1 = load_scenario(bundled_scenario("e1"))
    assert e1.kind is ScenarioKind.E1
    assert [s.name for s in e1.schemes] == ["Always-FIFO", "Always-LIFO", "LIFO-at-overload"]
    assert e1.server.sq_capacity == 50 and e1.server.profile == CPU_BOUND
    assert e1.client.retry.max_retries == 0
    assert [v.timeouts for v in e1.variants] == [TimeoutModel(40, 0, "fixed"), TimeoutModel(20, 0, "fixed")]
    e2 = load_scenario(bundled_scenario("e2"))
    assert e2.kind is ScenarioKind.E2
    assert e2.server.sq_capacity == 100
    assert (e2.server.browsing_capacity, e2.server.transaction_capacity) == (50, 25)
    assert e2.client.timeouts.mean == 20.0
    assert e2.server.profile == PhaseProfile()
    assert 0.85 in e2.rhos and 1.4 in e2.rhos


def test_empty_rho_list():
    with pytest.raises(ConfigInvalid):
        scenario_from_dict({**BASE, "rho": []})


def test_nonpositive_rho():
    with pytest.raises(ConfigInvalid):
        scenario_from_dict({**BASE, "rho": [1.0, 0.0]})


def test_scheme_kind_mismatch():
    with pytest.raises(ConfigInvalid):
        scenario_from_dict({**BASE, "schemes": ["Always-LIFO"]})


def test_unknown_scheme():
    with pytest.raises(ConfigInvalid):
        scenario_from_dict({**BASE, "schemes": ["8Q-XYZ"]})


def test_bad_kind():
    with pytest.raises(ConfigInvalid):
        scenario_from_dict({**BASE, "kind": "E3"})


def test_inline_and_file_models(tmp_path, chain):
    from overload_sim.workload import dump_model

    dump_model(chain, tmp_path / "m.yaml")
    doc = {**BASE, "workload": {"model": "m.yaml"}}
    (tmp_path / "s.scenario").write_text(yaml.safe_dump(doc))
    assert load_scenario(tmp_path / "s.scenario").model == chain


def test_unreadable_file(tmp_path):
    with pytest.raises(ConfigInvalid):
        load_scenario(tmp_path / "missing.scenario")
    (tmp_path / "bad.scenario").write_text("kind: [unclosed")
    with pytest.raises(ConfigInvalid):
        load_scenario(tmp_path / "bad.scenario")


def test_restrict_and_run_config():
    scen = scenario_from_dict({**BASE, "schemes": ["SQ", "8Q-AF"], "rho": [0.5, 1.0]})
    r = scen.restrict(rhos=[1.4], seeds=[7], schemes=["8Q-AF"])
    assert r.rhos == (1.4,) and r.seeds == (7,) and r.schemes == (SCHEMES["8Q-AF"],)
    cfg = r.run_config(r.schemes[0], 1.4, 7, capacity=10.0)
    assert cfg.session_rate * r.requests_per_session == pytest.approx(14.0)
    assert cfg.horizon == pytest.approx(60000 / (1.4 * 10.0))
    with pytest.raises(ConfigInvalid):
        scen.restrict(rhos=[])
