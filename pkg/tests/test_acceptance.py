"""Numbered acceptance checks.

Each test records one line through the ``criterion`` fixture; the summary is
printed at the end of the pytest run.  Tolerances are pinned here.
"""
import math
import time

import numpy as np

from racesim import sweep
from racesim.dynamics import (DualTrackModel, TireParams, VehicleState, braking_distance,
                              combined_slip_forces, delay_distance, kph, magic_formula)
from racesim.lattice import (PlannerConfig, PlanningError, build_lattice, count_paths,
                             enumerate_paths, search_optimal)
from racesim.prediction import PredictedTrajectory
from racesim.dynamics import PointMassLimits
from racesim.scenario import (load_scenario, mirror_doc, read_scenario_doc, scenario_from_dict,
                              track_is_symmetric)
from racesim.sim import cycle_latency_report, run_scenario
from racesim.track import FrenetPose, build_track

from conftest import SCENARIOS, SHIPPED

BRAKING_TABLE = {100: 27.6, 200: 110.2, 300: 248.0}
BRAKING_TOL = 0.1
DELAY_REFERENCE_M = 17.0
DELAY_TOL = 0.5
PLATEAU_RATIO = 1.2
N_LATTICES = 200
MAX_PATHS = 100_000
FRICTION_TOL = 1e-9
STIFFNESS_RTOL = 1e-3
MIN_ORDER = 3.5
CYCLE_P99_S = 0.100
REACTION_P99_S = 0.5
GRID_WALL_S = 60.0
GRID_SIM_S = 60.0
MIRROR_TOL = 1e-9
BUDGET_MIN = 0.8


def test_criterion_01_braking_table(criterion):
    got = {k: braking_distance(kph(k), 14.0) for k in BRAKING_TABLE}
    worst = max(abs(got[k] - v) for k, v in BRAKING_TABLE.items())
    criterion(1, worst <= BRAKING_TOL,
              "braking " + ", ".join(f"{k} kph {got[k]:.3f} m" for k in got)
              + f"; worst error {worst:.3f} m (tol {BRAKING_TOL})")


def test_criterion_02_delay_penalty(criterion):
    d = delay_distance(kph(300), 0.2)
    criterion(2, abs(d - DELAY_REFERENCE_M) <= DELAY_TOL and round(d, 1) == 16.7,
              f"300 kph x 0.2 s = {d:.3f} m vs {DELAY_REFERENCE_M} m (tol {DELAY_TOL})")


def test_criterion_03_evasion_sweep(criterion, tmp_path):
    doc = read_scenario_doc(SCENARIOS / "static_obstacle.json")
    spec = sweep.SweepSpec(sweep.default_speeds(), sweep.default_ranges())
    t0 = time.perf_counter()
    res = sweep.run_sweep(doc, SCENARIOS, spec)
    wall = time.perf_counter() - t0
    res.write_csv(tmp_path / "evasion_sweep.csv")
    by_kph = {round(r.speed * 3.6): r.min_detection for r in res.rows}
    up_to_200 = [by_kph[k] for k in sorted(by_kph) if k <= 200]
    found = all(v is not None for v in by_kph.values())
    a = found and all(b >= a_ for a_, b in zip(up_to_200, up_to_200[1:]))
    ratio = by_kph[300] / by_kph[200] if found else math.inf
    b = ratio <= PLATEAU_RATIO
    c = found and by_kph[300] < braking_distance(kph(300), 14.0)
    table = " ".join(f"{k}:{v}" for k, v in sorted(by_kph.items()))
    criterion(3, a and b and c,
              f"(a) non-decreasing {a}; (b) 300/200 ratio {ratio:.3f} <= {PLATEAU_RATIO} {b}; "
              f"(c) {by_kph[300]} m < 248.0 m {c}; min detection [kph:m] {table}; "
              f"wall {wall:.0f} s")


def _random_prediction(rng, i):
    t = np.arange(0.0, 5.0 + 1e-9, 0.1)
    s0, v = rng.uniform(20.0, 160.0), rng.choice([0.0, rng.uniform(5.0, 40.0)])
    n0, dn = rng.uniform(-4.0, 4.0), rng.uniform(-1.0, 1.0) * (v > 0)
    s, n = s0 + v * t, np.clip(n0 + dn * t, -5.0, 5.0)
    return PredictedTrajectory(f"o{i}", t, s, n, np.full_like(t, v), np.column_stack([s, n]), 5.0,
                               inflation_growth=rng.choice([0.0, 0.5]))


def test_criterion_04_global_optimality(criterion):
    x = np.arange(0.0, 1000.0 + 1e-9, 5.0)
    track = build_track(np.column_stack([x, np.zeros_like(x)]), (7.5, 7.5), closed=False)
    limits = PointMassLimits(14.0, 6.0, 83.33)
    rng = np.random.default_rng(2024)
    tested = mismatches = inexact = moving = infeasible = 0
    t0 = time.perf_counter()
    while tested < N_LATTICES:
        layers, n_off, n_v = int(rng.integers(2, 7)), int(rng.integers(2, 5)), int(rng.integers(1, 4))
        offs = np.sort(rng.choice(np.arange(-4.5, 4.6, 1.5), n_off, replace=False))
        speeds = np.sort(rng.uniform(10.0, 45.0, n_v))
        ego = FrenetPose(0.0, float(rng.choice(offs)), 0.0, rng.uniform(15.0, 40.0))
        preds = [_random_prediction(rng, i) for i in range(int(rng.integers(0, 3)))]
        g = build_lattice(track, ego, None, preds, limits, PlannerConfig(), n_layers=layers,
                          lateral_offsets=offs, speeds=speeds,
                          spacing=float(rng.choice([20.0, 30.0, 40.0])))
        if count_paths(g) > MAX_PATHS:
            continue
        costs = [c for c, _ in enumerate_paths(g)]
        try:
            p = search_optimal(g)
            dp, exact = p.cost, p.exact
        except PlanningError:
            dp, exact = None, True
        truth = min(costs) if costs else None
        tested += 1
        moving += any(np.ptp(q.s) > 0 for q in preds)
        infeasible += truth is None
        mismatches += dp != truth
        inexact += not exact
    wall = time.perf_counter() - t0
    criterion(4, mismatches == 0 and inexact == 0,
              f"{tested} lattices ({moving} with moving obstacles, {infeasible} infeasible): "
              f"{mismatches} cost mismatches, {inexact} label-capped; {wall:.1f} s")


def test_criterion_05_friction_circle(criterion, runs):
    worst, where, n = 0.0, "", 0
    for name in SHIPPED:
        _, log = runs.get(name)
        for p in log.plans:
            n += 1
            if p.friction_max > worst:
                worst, where = p.friction_max, f"{name}/{p.agent} t={p.t:.2f}"
    criterion(5, n > 0 and worst <= 1 + FRICTION_TOL,
              f"max friction ratio {worst:.12f} over {n} plans ({where})")


def test_criterion_06_tire(criterion):
    tire, fz = TireParams(), 3000.0
    zero = magic_formula(0.0, tire.B, tire.C, tire.D, tire.E, fz)
    slip = np.linspace(-1.0, 1.0, 200_001)
    pure = np.abs(magic_formula(slip, tire.B, tire.C, tire.D, tire.E, fz)).max()
    grid = np.linspace(-0.5, 0.5, 101)
    comb = max(math.hypot(*combined_slip_forces(k, a, tire, fz)) for k in grid for a in grid)
    h = 1e-6
    fd = (magic_formula(h, tire.B, tire.C, tire.D, tire.E, fz)
          - magic_formula(-h, tire.B, tire.C, tire.D, tire.E, fz)) / (2 * h)
    analytic = tire.B * tire.C * tire.D * fz
    rel = abs(fd - analytic) / analytic
    ok = zero == 0.0 and pure <= tire.D * fz and comb <= tire.D * fz * (1 + 1e-12) and rel <= STIFFNESS_RTOL
    criterion(6, ok, f"F(0)={zero}; max|F| pure {pure:.3f}, combined {comb:.3f} <= {tire.D * fz:.1f} N; "
                     f"stiffness rel err {rel:.2e} (tol {STIFFNESS_RTOL})")


def test_criterion_07_rk4_order(criterion):
    model = DualTrackModel()

    def run(dt):
        s = VehicleState(vx=40.0).as_array()
        for _ in range(int(round(1.0 / dt))):
            s = model.step(s, 0.05, 2.0, dt)
        return s

    coarse, mid, fine = run(0.01), run(0.005), run(0.0025)
    order = math.log2(np.linalg.norm(coarse - mid) / np.linalg.norm(mid - fine))
    criterion(7, order >= MIN_ORDER, f"observed order {order:.2f} (dt 0.01/0.005/0.0025, >= {MIN_ORDER})")


def test_criterion_08_latency(criterion, runs):
    _, log = runs.get("two_ahead_fight", timing=True)
    rep = cycle_latency_report(log)["stages"]
    cyc, e2e = rep["cycle"], rep["end-to-end"]
    ok = cyc["count"] > 0 and cyc["p99"] <= CYCLE_P99_S and e2e["p99"] <= REACTION_P99_S
    criterion(8, ok, f"per-cycle compute p99 {cyc['p99'] * 1e3:.1f} ms (<= {CYCLE_P99_S * 1e3:.0f}), "
                     f"planning p99 {rep['planning']['p99'] * 1e3:.1f} ms, "
                     f"end-to-end p99 {e2e['p99']:.3f} s (<= {REACTION_P99_S}) over {cyc['count']} cycles")


def test_criterion_09_eight_agents(criterion, runs):
    sc, log = runs.get("grid_of_eight")
    ok = len(sc.agents) == 8 and log.clean and log.t_end >= GRID_SIM_S - 1e-9 and log.wall_time <= GRID_WALL_S
    criterion(9, ok, f"{len(sc.agents)} agents, {log.t_end:.1f} s simulated in {log.wall_time:.1f} s wall "
                     f"(<= {GRID_WALL_S}), verdict {log.verdict}")


def test_criterion_10_determinism(criterion, runs, tmp_path):
    identical = []
    for name in SHIPPED:
        _, first = runs.get(name)
        again = run_scenario(load_scenario(SCENARIOS / f"{name}.json"))
        first.write_csv(tmp_path / "a.csv")
        again.write_csv(tmp_path / "b.csv")
        identical.append((tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes())

    doc = read_scenario_doc(SCENARIOS / "straight_offset_obstacle.json")
    sc = scenario_from_dict(doc, SCENARIOS)
    base = run_scenario(sc)
    mirrored = run_scenario(scenario_from_dict(mirror_doc(doc), SCENARIOS))
    dev = 0.0
    for agent in ("ego", "lane_car"):
        a, b = base.agent_series(agent), mirrored.agent_series(agent)
        dev = max(dev, np.abs(a["s_m"] - b["s_m"]).max(), np.abs(a["n_m"] + b["n_m"]).max())
    ok = all(identical) and track_is_symmetric(sc.track) and dev <= MIRROR_TOL
    criterion(10, ok, f"{sum(identical)}/{len(identical)} scenarios byte-identical on rerun; "
                      f"mirror deviation {dev:.2e} m (tol {MIRROR_TOL})")


def test_criterion_11_regression(criterion, runs):
    sc, lap = runs.get("clear_lap")
    fu = sc.agents[0].friction_usage or sc.planner.friction_usage
    used = fu * max(p.friction_max for p in lap.plans if p.agent == "ego")
    lap_ok = lap.clean and lap.laps.get("ego", 0.0) >= 1.0 and used >= BUDGET_MIN
    _, fight = runs.get("two_ahead_fight")
    tags = sorted(fight.homotopies("ego"))
    fight_ok = fight.clean and any(h != "follow" for h in tags)
    criterion(11, lap_ok and fight_ok,
              f"clear lap {lap.verdict}, {lap.laps.get('ego', 0.0):.3f} laps, budget used {used:.3f} "
              f"(>= {BUDGET_MIN}); fight {fight.verdict}, ego homotopies {tags}")
