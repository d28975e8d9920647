import copy
import json

import numpy as np
import pytest

from racesim import cli, sweep
from racesim.scenario import (ConfigError, apply_override, mirror_doc, read_scenario_doc,
                              scenario_from_dict)
from racesim.sim import first_detection_distance, run_scenario

from conftest import ROOT, SCENARIOS

OBSTACLE = SCENARIOS / "static_obstacle.json"


@pytest.fixture
def doc():
    return read_scenario_doc(OBSTACLE)


def load(doc):
    return scenario_from_dict(doc, SCENARIOS)


def test_override_paths(doc):
    apply_override(doc, "perception.detection_range_m=120")
    apply_override(doc, "agents.1.n_m=-2.5")
    apply_override(doc, "planner.w_n=1e-3")
    assert doc["perception"]["detection_range_m"] == 120
    assert doc["agents"][1]["n_m"] == -2.5
    sc = load(doc)
    assert sc.perception.detection_range == 120 and sc.planner.w_n == 1e-3
    with pytest.raises(ConfigError):
        apply_override(doc, "agents.7.n_m=1")
    with pytest.raises(ConfigError):
        apply_override(doc, "no_equals_sign")


@pytest.mark.parametrize("mutate", [
    lambda d: d["planner"].update(bogus=1),
    lambda d: d["agents"][1].update(n_m=7.2),
    lambda d: d["agents"].extend(copy.deepcopy(d["agents"][1:]) * 8),
    lambda d: d["agents"][1].update(id="ego"),
    lambda d: d["perception"].update(processing_delay_s=0.0123),
    lambda d: d["agents"][0].update(policy="teleport"),
    lambda d: d.pop("track"),
])
def test_config_errors(doc, mutate):
    mutate(doc)
    with pytest.raises(ConfigError):
        load(doc)


def test_config_hash_tracks_content(doc):
    a = load(doc).config_hash
    doc["seed"] = 99
    assert load(doc).config_hash != a


def test_detection_event(doc):
    apply_override(doc, "stop.max_time_s=4")
    log = run_scenario(load(doc))
    d = first_detection_distance(log, "ego", "parked")
    assert d is not None
    # first seen within one perception period of the detection range
    assert 150.0 - 83.33 * 0.05 - 1e-6 <= d <= 150.0 + 1e-6


def test_collision_verdict(doc):
    doc["agents"][0] = {"id": "blind", "policy": "scripted", "s_m": 300.0, "n_m": 0.0,
                        "v_mps": 30.0, "speed_mps": 30.0, "offset_m": 0.0}
    doc["stop"] = {"max_time_s": 10.0}
    log = run_scenario(load(doc))
    assert log.verdict == "collision" and not log.clean


def test_mirror_doc(doc):
    doc["agents"][1]["n_m"] = 1.5
    m = mirror_doc(doc)
    assert m["agents"][1]["n_m"] == -1.5 and doc["agents"][1]["n_m"] == 1.5


def test_trial_geometry(doc):
    spec = sweep.SweepSpec((50.0,), (120.0, 60.0))
    t = sweep.trial_doc(doc, 50.0, 80.0, spec)
    ego = t["agents"][0]
    assert ego["s_m"] == pytest.approx(450.0 - 80.0 - 70.0)
    assert t["perception"]["detection_range_m"] == 80.0
    assert t["perception"]["processing_delay_s"] == 0.0
    assert t["stop"]["distance_m"] == pytest.approx(450.0 - ego["s_m"] + 500.0)


def test_sweep_spec_validation():
    with pytest.raises(ConfigError):
        sweep.SweepSpec((50.0,), (60.0, 120.0))
    with pytest.raises(ConfigError):
        sweep.SweepSpec((), (60.0,))


@pytest.mark.parametrize("threshold", [10.0, 37.0, 123.0, 300.0, 301.0])
def test_bisection_finds_threshold(monkeypatch, threshold):
    def fake(doc, base, speed, r, spec):
        return sweep.Trial(speed, r, r >= threshold, "ok" if r >= threshold else "collision")
    monkeypatch.setattr(sweep, "run_trial", fake)
    spec = sweep.SweepSpec((50.0,), sweep.default_ranges())
    res = sweep.search_speed({}, ROOT, 50.0, spec, 0.2)
    if threshold > 300.0:
        assert res.min_detection is None
    else:
        assert res.min_detection == threshold
        assert res.delay_adjusted == pytest.approx(threshold + 10.0)
        assert len(res.trials) <= 16


# -- cli --------------------------------------------------------------------


def test_cli_validate(capsys):
    assert cli.main(["validate-config", str(OBSTACLE)]) == 0
    assert "static_obstacle: ok" in capsys.readouterr().out
    assert cli.main(["validate-config", str(ROOT / "missing.json")]) == 1
    assert cli.main(["validate-config", str(OBSTACLE), "--set", "planner.nope=1"]) == 1


def test_cli_run_and_plot(tmp_path):
    rc = cli.main(["run", str(OBSTACLE), "--out-dir", str(tmp_path), "--set", "stop.max_time_s=2"])
    assert rc == 0
    log_csv = tmp_path / "static_obstacle_log.csv"
    meta = json.loads((tmp_path / "static_obstacle_meta.json").read_text())
    assert meta["verdict"] == "ok" and meta["track_file"].endswith("ims_oval.json")
    out = []
    for _ in range(2):
        assert cli.main(["plot", str(log_csv), "--out-dir", str(tmp_path)]) == 0
        out.append((tmp_path / "static_obstacle_log.svg").read_bytes())
    assert out[0] == out[1] and b"<svg" in out[0]


def test_cli_collision_exit_code(tmp_path):
    rc = cli.main(["run", str(OBSTACLE), "--out-dir", str(tmp_path),
                   "--set", 'agents.0={"id": "blind", "policy": "scripted", "s_m": 300, '
                            '"v_mps": 30, "speed_mps": 30}',
                   "--set", "stop.max_time_s=10"])
    assert rc == 2


def test_cli_plot_sweep(tmp_path):
    res = sweep.SweepResult([sweep.SpeedResult(s, m, sweep.braking_distance(s, 14.0), m + 0.2 * s)
                             for s, m in ((27.8, 60.0), (55.6, 90.0), (83.3, 131.0))], 0.2)
    res.write_csv(tmp_path / "sweep.csv")
    assert cli.main(["plot", str(tmp_path / "sweep.csv"), "--out-dir", str(tmp_path)]) == 0
    assert (tmp_path / "sweep.svg").stat().st_size > 0
    (tmp_path / "empty.csv").write_text("speed_mps,min_detection_m\n")
    assert cli.main(["plot", str(tmp_path / "empty.csv"), "--out-dir", str(tmp_path)]) == 1


def test_log_columns_are_finite(runs):
    _, log = runs.get("two_ahead_fight")
    for agent in ("ego", "slow_a", "slow_b"):
        d = log.agent_series(agent)
        for k, v in d.items():
            if isinstance(v, np.ndarray):
                assert np.all(np.isfinite(v)), k
