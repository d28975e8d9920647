import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from racesim.dynamics import PointMassLimits
from racesim.lattice import (PlannerConfig, PlanningError, build_lattice, count_paths,
                             enumerate_paths, search_optimal)
from racesim.planning import fallback_plan, plan_collides, reconstruct, replan
from racesim.prediction import PredictedTrajectory
from racesim.profile import velocity_profile
from racesim.track import FrenetPose

LIMITS = PointMassLimits(14.0, 6.0, 83.33)
CFG = PlannerConfig()


def parked(s, n, track=None, horizon=5.0):
    t = np.arange(0.0, horizon + 1e-9, 0.1)
    ss, nn = np.full_like(t, s), np.full_like(t, n)
    return PredictedTrajectory("p", t, ss, nn, np.zeros_like(t), np.column_stack([ss, nn]),
                               horizon, inflation_growth=0.0)


def mover(s0, n, v, horizon=5.0):
    t = np.arange(0.0, horizon + 1e-9, 0.1)
    ss, nn = s0 + v * t, np.full_like(t, n)
    return PredictedTrajectory("m", t, ss, nn, np.full_like(t, v), np.column_stack([ss, nn]),
                               horizon, inflation_growth=0.0)


# -- velocity profile -------------------------------------------------------


def test_profile_straight_at_vmax():
    v = velocity_profile(np.zeros(500), 1.0, LIMITS, LIMITS.v_max)
    assert np.allclose(v, LIMITS.v_max, atol=1e-12)


def test_profile_constant_curvature():
    v = velocity_profile(np.full(2000, 0.01), 1.0, PointMassLimits(14.0, 6.0, 200.0), 10.0)
    assert v[1000] == pytest.approx(math.sqrt(14.0 / 0.01), abs=1e-6)


def test_profile_stop_at_end():
    ds, n = 0.5, 1201
    v = velocity_profile(np.zeros(n), ds, LIMITS, 60.0, v_end_cap=0.0)
    assert v[-1] == 0.0
    # closed-form oracle on a straight: traction-limited acceleration from the
    # start, v_max ceiling, braking v^2 = 2 a (L - s) into the end
    s = np.arange(n) * ds
    oracle = np.minimum.reduce([np.sqrt(60.0 ** 2 + 2.0 * LIMITS.a_lon_drive_max * s),
                                np.full(n, LIMITS.v_max),
                                np.sqrt(2.0 * LIMITS.a_max * (s[-1] - s))])
    assert np.abs(v - oracle).max() < 1e-6
    decel = (v[:-1] ** 2 - v[1:] ** 2) / (2 * ds)
    assert decel.max() <= LIMITS.a_max * (1 + 1e-9)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10_000), v0=st.floats(0.0, 83.0))
def test_profile_properties(seed, v0):
    rng = np.random.default_rng(seed)
    kappa = np.convolve(rng.normal(0.0, 0.01, 400), np.ones(25) / 25, mode="same")
    ds = 2.0
    v = velocity_profile(kappa, ds, LIMITS, v0)
    cap = np.minimum(LIMITS.v_max, np.sqrt(LIMITS.a_max / np.maximum(np.abs(kappa), 1e-12)))
    assert np.all(v <= cap * (1 + 1e-12))
    again = velocity_profile(kappa, ds, LIMITS, v0, v_cap=v)
    assert np.abs(again - v).max() <= 1e-9
    a_lon = (v[1:] ** 2 - v[:-1] ** 2) / (2 * ds)
    a_lat = v[:-1] ** 2 * np.abs(kappa[:-1])
    assert np.all(a_lon <= LIMITS.a_lon_drive_max + 1e-9)
    assert np.all(a_lat <= LIMITS.a_max * (1 + 1e-9))


# -- lattice ----------------------------------------------------------------


def test_lattice_counts(straight):
    offs, speeds = [-1.5, 0.0, 1.5], [30.0]
    g = build_lattice(straight, FrenetPose(0.0, 0.0, 0.0, 30.0), None, None, LIMITS, CFG,
                      n_layers=4, lateral_offsets=offs, speeds=speeds, spacing=40.0)
    layer = len(offs) * len(speeds)
    assert g.n_layers == 5
    assert g.n_nodes == 1 + 4 * layer
    assert g.n_edges == layer + 3 * layer * layer
    assert count_paths(g) == layer ** 4


def test_lattice_nodes_in_corridor(oval):
    g = build_lattice(oval, FrenetPose(800.0, 0.0, 0.0, 60.0), None, None, LIMITS, CFG)
    for k in range(1, g.n_layers):
        lo, hi = g.corridor[k]
        nodes = slice(g.layer_ptr[k], g.layer_ptr[k + 1])
        assert np.all(g.node_n[nodes] >= lo - 1e-9) and np.all(g.node_n[nodes] <= hi + 1e-9)
    src = np.repeat(np.arange(g.n_nodes), np.diff(g.edge_ptr))
    assert all(g.layer_of(int(w)) == g.layer_of(int(u)) + 1
               for u, w in zip(src[::97], g.edge_dst[::97]))


def test_start_outside_corridor(straight):
    with pytest.raises(PlanningError):
        build_lattice(straight, FrenetPose(10.0, 6.5, 0.0, 30.0), None, None, LIMITS, CFG)


def test_static_blocking(straight):
    g = build_lattice(straight, FrenetPose(0.0, 0.0, 0.0, 30.0), None, [parked(200.0, 0.0)],
                      LIMITS, CFG, n_layers=8, lateral_offsets=np.arange(-4.5, 4.6, 1.5),
                      speeds=[30.0], spacing=25.0)
    blocked = set(np.nonzero((g.node_sig == 200.0) & (np.abs(g.node_n) <= 1.5))[0])
    assert blocked
    assert not any(int(w) in blocked for w in g.edge_dst)


def test_moving_blocking_depends_on_entry_time(straight):
    # opponent at 20 m/s passes s = 200 m around t = 3 s; ego edge 175 -> 200 m at 30 m/s
    g = build_lattice(straight, FrenetPose(0.0, 0.0, 0.0, 30.0), None,
                      [mover(140.0, 0.0, 20.0)], LIMITS, CFG, n_layers=8,
                      lateral_offsets=[0.0], speeds=[30.0], spacing=25.0)
    u = int(np.nonzero(g.node_sig == 175.0)[0][0])
    w = int(np.nonzero(g.node_sig == 200.0)[0][0])
    reach = 2 * 2.5 + 3.0 + CFG.lattice_margin
    tau = np.linspace(0.0, 25.0 / 30.0, 2001)

    def overlaps(t_entry):
        gap = (175.0 + 30.0 * tau) - (140.0 + 20.0 * (t_entry + tau))
        return bool(np.any(np.abs(gap) < reach))

    # blocked interval is roughly (1.34, 2.58) s; stay clear of its ends
    for t_entry in (0.0, 0.5, 1.2, 1.5, 2.0, 2.4, 2.8, 3.5, 6.0):
        assert g.edge_collides(u, w, t_entry) == overlaps(t_entry), t_entry


def test_empty_straight_optimum(straight):
    cfg = PlannerConfig(horizon=400.0)
    g = build_lattice(straight, FrenetPose(0.0, 0.0, 0.0, LIMITS.v_max), None, None, LIMITS, cfg,
                      spacing=20.0)
    p = search_optimal(g)
    assert p.cost == pytest.approx(400.0 / LIMITS.v_max, rel=1e-12)
    assert np.all(g.node_n[p.nodes] == 0.0)


def small_lattice(track, obstacle_n):
    return build_lattice(track, FrenetPose(0.0, 0.0, 0.0, 30.0), None,
                         [parked(100.0, obstacle_n)], LIMITS, CFG, n_layers=5,
                         lateral_offsets=np.arange(-4.5, 4.6, 1.5), speeds=[30.0], spacing=40.0)


def test_centered_obstacle_tie_goes_left(straight):
    g = small_lattice(straight, 0.0)
    p = search_optimal(g)
    assert p.cost == min(c for c, _ in enumerate_paths(g))
    assert g.node_n[p.nodes].max() > 0 and g.node_n[p.nodes].min() >= 0


def test_left_obstacle_passes_right(straight):
    g = small_lattice(straight, 1.0)
    p = search_optimal(g)
    assert p.cost == min(c for c, _ in enumerate_paths(g))
    assert g.node_n[p.nodes].min() < 0 and g.node_n[p.nodes].max() <= 0


def test_blocked_everywhere(straight):
    walls = [parked(100.0, n) for n in np.arange(-6.0, 6.1, 2.0)]
    g = build_lattice(straight, FrenetPose(0.0, 0.0, 0.0, 30.0), None, walls, LIMITS, CFG,
                      n_layers=4, lateral_offsets=np.arange(-4.5, 4.6, 1.5), speeds=[30.0],
                      spacing=40.0)
    with pytest.raises(PlanningError):
        search_optimal(g)


# -- replanning -------------------------------------------------------------


def test_clear_track_replan(oval):
    plan = replan(oval, FrenetPose(100.0, 0.0, 0.0, 60.0), [], 0.0, LIMITS.scaled(0.9))
    assert plan.status == "ok" and plan.homotopy == "clear-track"
    assert plan.friction_ratio().max() <= 1 + 1e-9
    assert np.all(np.diff(plan.t) > 0)


def test_replan_is_stable(oval):
    lim = LIMITS.scaled(0.9)
    ego = FrenetPose(100.0, 0.0, 0.0, 60.0)
    a = replan(oval, ego, [parked(400.0, 0.0)], 0.0, lim)
    b = replan(oval, ego, [parked(400.0, 0.0)], 0.0, lim, previous=a)
    n_b = np.interp(a.path_s, b.path_s, b.path_n)
    overlap = a.path_s <= b.path_s[-1]
    assert np.abs(n_b[overlap] - a.path_n[overlap]).max() <= CFG.lateral_step


def test_wall_triggers_fallback(straight):
    lim = LIMITS.scaled(0.9)
    walls = [parked(120.0, n) for n in np.arange(-6.0, 6.1, 2.0)]
    plan = replan(straight, FrenetPose(10.0, 0.0, 0.0, 40.0), walls, 0.0, lim)
    assert plan.is_fallback and plan.reason
    assert plan.a_lon.min() == pytest.approx(-lim.a_max, rel=1e-6)
    assert plan.v[-1] == 0.0


def test_fallback_follows_previous_path(oval):
    lim = LIMITS.scaled(0.9)
    prev = replan(oval, FrenetPose(100.0, 0.0, 0.0, 60.0), [parked(300.0, 0.0)], 0.0, lim)
    fb = fallback_plan(oval, FrenetPose(100.0, 0.0, 0.0, 60.0), lim, CFG, prev)
    assert fb.v[-1] == 0.0 and fb.friction_ratio().max() <= 1 + 1e-9


def test_plan_collision_free_dense(oval):
    lim = LIMITS.scaled(0.9)
    preds = [parked(350.0, 0.0), mover(250.0, 3.0, 40.0)]
    plan = replan(oval, FrenetPose(100.0, 0.0, 0.0, 60.0), preds, 0.0, lim)
    assert plan.status == "ok"
    assert not plan_collides(oval, plan, preds, CFG.half_length, CFG.half_width)
    lo, hi = -7.5 + CFG.corridor_margin, 7.5 - CFG.corridor_margin
    assert plan.n.min() >= lo - 1e-6 and plan.n.max() <= hi + 1e-6


def test_reconstruct_respects_friction(oval):
    g = build_lattice(oval, FrenetPose(700.0, 0.0, 0.0, 70.0), None, None, LIMITS.scaled(0.9), CFG)
    plan = reconstruct(oval, g, search_optimal(g))
    assert plan.friction_ratio().max() <= 1 + 1e-9
