"""Trajectory planning: lattice search, reconstruction, fallback and replanning."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import PointMassLimits
from .lattice import (LatticeGraph, LatticePath, ObstacleSet, PlannerConfig, PlanningError,
                      build_lattice, count_paths, enumerate_paths, search_optimal)
from .prediction import PredictedTrajectory
from .profile import segment_accelerations, travel_times, velocity_profile
from .track import FrenetPose, TrackModel, corridor_at, frenet_to_cart_array

__all__ = [
    "FallbackReason", "LatticeGraph", "LatticePath", "ObstacleSet", "PlannedTrajectory",
    "Planner", "PlannerConfig", "PlanningError", "build_lattice", "classify_homotopy",
    "count_paths", "enumerate_paths", "fallback_plan", "path_plan", "plan_collides", "reconstruct",
    "replan", "search_optimal", "velocity_profile",
]

HOMOTOPY_TAGS = ("clear-track", "follow", "pass-left", "pass-right")


class FallbackReason:
    INFEASIBLE = "infeasible"
    COLLISION = "collision-check"
    CORRIDOR = "corridor"


@dataclass(eq=False)
class PlannedTrajectory:
    """Time-sampled plan plus its dense station-indexed path.

    ``t`` is relative to ``t0`` (absolute simulation time the plan starts);
    ``s`` is unwrapped from the start station.
    """

    t: np.ndarray
    s: np.ndarray
    n: np.ndarray
    v: np.ndarray
    kappa: np.ndarray
    a_lon: np.ndarray
    xy: np.ndarray
    psi: np.ndarray
    t0: float
    # dense path on a uniform station grid
    path_s: np.ndarray
    path_n: np.ndarray
    path_mu: np.ndarray
    path_kappa: np.ndarray
    path_v: np.ndarray
    path_a: np.ndarray
    homotopy: str = "clear-track"
    status: str = "ok"
    reason: str = ""
    cost: float = math.nan
    limits: PointMassLimits = field(default_factory=PointMassLimits)

    @property
    def a_lat(self) -> np.ndarray:
        return self.v ** 2 * self.kappa

    @property
    def duration(self) -> float:
        return float(self.t[-1])

    @property
    def valid_until(self) -> float:
        return self.t0 + self.duration

    @property
    def is_fallback(self) -> bool:
        return self.status == "fallback"

    def friction_ratio(self) -> np.ndarray:
        return np.hypot(self.a_lon, self.a_lat) / self.limits.a_max

    def reference_at_station(self, s: float) -> dict:
        """Interpolated reference at unwrapped station ``s`` on the dense path."""
        ps = self.path_s
        s = min(max(s, ps[0]), ps[-1])
        i = int(min(max(np.searchsorted(ps, s) - 1, 0), len(ps) - 2))
        f = (s - ps[i]) / (ps[i + 1] - ps[i])
        lerp = lambda a: float(a[i] + f * (a[i + 1] - a[i]))  # noqa: E731
        v2 = self.path_v[i] ** 2 + f * (self.path_v[i + 1] ** 2 - self.path_v[i] ** 2)
        return dict(s=s, n=lerp(self.path_n), mu=lerp(self.path_mu), kappa=lerp(self.path_kappa),
                    v=math.sqrt(max(v2, 0.0)), a_lon=float(self.path_a[i]))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t_s", "s_m", "n_m", "v_mps", "kappa_1pm", "a_lon_mps2", "a_lat_mps2",
                        "x_m", "y_m", "psi_rad", "homotopy"])
            a_lat = self.a_lat
            for i in range(len(self.t)):
                w.writerow([f"{self.t0 + self.t[i]:.4f}", f"{self.s[i]:.4f}", f"{self.n[i]:.4f}",
                            f"{self.v[i]:.4f}", f"{self.kappa[i]:.6g}", f"{self.a_lon[i]:.5f}",
                            f"{a_lat[i]:.5f}", f"{self.xy[i, 0]:.4f}", f"{self.xy[i, 1]:.4f}",
                            f"{self.psi[i]:.6f}", self.homotopy])


# -- reconstruction ----------------------------------------------------------


def _path_curvature(track: TrackModel, s_abs, n, dn, ddn):
    """Curvature of the Cartesian curve described by n(s) in the track frame."""
    kr = track.curvature_at(s_abs)
    h = 0.5
    dkr = (track.curvature_at(s_abs + h) - track.curvature_at(s_abs - h)) / (2 * h)
    q = 1.0 - n * kr
    dth = np.arctan2(dn, q)
    c = np.cos(dth)
    return ((ddn + (dkr * n + kr * dn) * np.tan(dth)) * c * c / q + kr) * c / q, dth


def _dense_path(track: TrackModel, s0: float, knots_sig, knots_n, step: float):
    """Hermite lateral shape with zero slope at every knot, sampled every ``step``."""
    sig = np.arange(0.0, knots_sig[-1] + 1e-9, step)
    if knots_sig[-1] - sig[-1] > 1e-6:
        sig = np.append(sig, sig[-1] + step)
    j = np.clip(np.searchsorted(knots_sig, sig, side="right") - 1, 0, len(knots_sig) - 2)
    L = knots_sig[j + 1] - knots_sig[j]
    u = np.clip((sig - knots_sig[j]) / L, 0.0, 1.0)
    dn_k = knots_n[j + 1] - knots_n[j]
    n = knots_n[j] + dn_k * u * u * (3 - 2 * u)
    dn = dn_k * 6 * u * (1 - u) / L
    ddn = dn_k * (6 - 12 * u) / (L * L)
    kappa, mu = _path_curvature(track, s0 + sig, n, dn, ddn)
    return sig, n, mu, kappa


def _time_sample(sig, v, acc, tt, dt, hold: float = 1.0):
    """Sample a station profile at a fixed period; constant acceleration per segment."""
    finite = np.isfinite(tt)
    last = int(np.nonzero(finite)[0][-1])
    t_end = tt[last]
    stopped = last < len(tt) - 1 or v[last] == 0.0
    t = np.arange(0.0, t_end + 1e-9, dt)
    if stopped:
        t = np.append(t, t[-1] + dt * np.arange(1, int(round(hold / dt)) + 1))
    i = np.clip(np.searchsorted(tt[: last + 1], t, side="right") - 1, 0, max(last - 1, 0))
    tau = t - tt[i]
    a = acc[i]
    vv = np.maximum(v[i] + a * tau, 0.0)
    ss = sig[i] + v[i] * tau + 0.5 * a * tau * tau
    if stopped:
        past = t >= t_end
        ss[past] = sig[last]
        vv[past] = 0.0
        a = np.where(past, 0.0, a)
    ss = np.minimum(ss, sig[last])
    return t, ss, vv, a


def _assemble(track: TrackModel, s0: float, sig, n, mu, kappa, v, t0: float, dt: float,
              limits: PointMassLimits, **meta) -> PlannedTrajectory:
    ds = float(sig[1] - sig[0])
    acc = segment_accelerations(v, ds)
    tt = travel_times(v, ds)
    t, ss, vv, a = _time_sample(sig, v, acc, tt, dt)
    nn = np.interp(ss, sig, n)
    kk = np.interp(ss, sig, kappa)
    mm = np.interp(ss, sig, mu)
    xy = frenet_to_cart_array(track, s0 + ss, nn)
    psi = track.heading_at(s0 + ss) + mm
    return PlannedTrajectory(t=t, s=s0 + ss, n=nn, v=vv, kappa=kk, a_lon=a, xy=xy, psi=psi, t0=t0,
                             path_s=s0 + sig, path_n=n, path_mu=mu, path_kappa=kappa, path_v=v,
                             path_a=acc, limits=limits, **meta)


def reconstruct(track: TrackModel, graph: LatticeGraph, path: LatticePath, t0: float = 0.0,
                dt: float | None = None) -> PlannedTrajectory:
    """Continuous plan from a lattice path.

    The lattice speeds become a ceiling for a fresh friction-limited profile
    on the exact path curvature, so the sampled plan satisfies the friction
    circle pointwise.
    """
    cfg = graph.config
    nodes = np.asarray(path.nodes)
    ks, kn, kv = graph.node_sig[nodes], graph.node_n[nodes], graph.node_v[nodes]
    sig, n, mu, kappa = _dense_path(track, graph.s0, ks, kn, cfg.dense_step)
    cap = np.sqrt(np.interp(sig, ks, kv ** 2))
    v = velocity_profile(kappa, cfg.dense_step, graph.limits, float(kv[0]), v_cap=cap)
    return _assemble(track, graph.s0, sig, n, mu, kappa, v, t0, dt or cfg.sample_dt, graph.limits,
                     cost=path.cost)


def path_plan(track: TrackModel, s0: float, sig: np.ndarray, n: np.ndarray, v_start: float,
              limits: PointMassLimits, config: PlannerConfig = PlannerConfig(), t0: float = 0.0,
              v_cap=None, v_end_cap: float | None = None, **meta) -> PlannedTrajectory:
    """Friction-limited plan along an arbitrary offset curve ``n(sig)`` on a uniform grid."""
    step = float(sig[1] - sig[0])
    dn = np.gradient(n, step)
    ddn = np.gradient(dn, step)
    kappa, mu = _path_curvature(track, s0 + sig, n, dn, ddn)
    v = velocity_profile(kappa, step, limits, max(v_start, 0.0), v_end_cap=v_end_cap, v_cap=v_cap)
    return _assemble(track, s0, sig, n, mu, kappa, v, t0, config.sample_dt, limits, **meta)


def fallback_plan(track: TrackModel, ego: FrenetPose, limits: PointMassLimits,
                  config: PlannerConfig = PlannerConfig(), previous: PlannedTrajectory | None = None,
                  t0: float = 0.0, reason: str = "") -> PlannedTrajectory:
    """Brake to standstill along the previous path (or the current offset)."""
    v0 = max(float(ego.v), 0.0)
    length = v0 * v0 / (2.0 * limits.a_max) + 20.0
    step = config.dense_step
    sig = np.arange(0.0, length + step, step)
    n = np.full(len(sig), float(ego.n))
    if previous is not None:
        rel = previous.path_s - ego.s
        if track.closed:
            L = track.total_length
            rel = rel - L * np.round(rel[0] / L)
        n_prev = np.interp(sig, rel, previous.path_n, left=ego.n, right=previous.path_n[-1])
        # blend from the current offset to avoid a step
        w = np.clip(sig / 30.0, 0.0, 1.0)
        n = (1 - w) * ego.n + w * n_prev
    cap = np.sqrt(np.maximum(v0 * v0 - 2.0 * limits.a_max * sig, 0.0))
    return path_plan(track, float(ego.s), sig, n, v0, limits, config, t0, v_cap=cap, v_end_cap=0.0,
                     status="fallback", reason=reason,
                     homotopy=previous.homotopy if previous is not None else "clear-track")


# -- checks -----------------------------------------------------------------


def _opp_state(p: PredictedTrajectory, t: np.ndarray):
    """Opponent station/offset at prediction times ``t``; constant-speed tail."""
    s = np.interp(t, p.t, p.s)
    n = np.interp(t, p.t, p.n)
    tail = t > p.t[-1]
    s[tail] = p.s[-1] + p.v[-1] * (t[tail] - p.t[-1])
    return s, n


def _relative(track: TrackModel, s_opp: np.ndarray, s_ego: np.ndarray) -> np.ndarray:
    d = s_opp - s_ego
    if track.closed:
        L = track.total_length
        d = (d + 0.5 * L) % L - 0.5 * L
    return d


def plan_collides(track: TrackModel, plan: PlannedTrajectory, predictions: list[PredictedTrajectory],
                  half_length: float, half_width: float, resolution: int = 10) -> bool:
    """Dense re-check of the sampled plan against inflated predictions."""
    if not predictions:
        return False
    t = np.linspace(0.0, plan.t[-1], (len(plan.t) - 1) * resolution + 1)
    s = np.interp(t, plan.t, plan.s)
    n = np.interp(t, plan.t, plan.n)
    for p in predictions:
        tp = plan.t0 + t - p.t0
        so, no = _opp_state(p, tp)
        g = p.inflation_growth * np.clip(tp, 0.0, p.horizon)
        hit = ((np.abs(_relative(track, so, s)) < half_length + p.half_length + p.inflation_lon + g)
               & (np.abs(n - no) < half_width + p.half_width + p.inflation_lat + g))
        if hit.any():
            return True
    return False


def classify_homotopy(track: TrackModel, plan: PlannedTrajectory,
                      predictions: list[PredictedTrajectory], half_length: float = 2.5,
                      look_ahead: float | None = None) -> str:
    """Tag the plan relative to the opponents it interacts with.

    An opponent ahead that the plan ends up in front of is passed on the
    side where the plan is when the gap closes; one that stays ahead within
    the plan's reach is followed.
    """
    if len(plan.t) < 2:
        return "clear-track"
    reach = look_ahead if look_ahead is not None else float(plan.s[-1] - plan.s[0])
    tags = []
    for p in predictions:
        tp = plan.t0 + plan.t - p.t0
        so, no = _opp_state(p, tp)
        d = _relative(track, so, plan.s)
        if d[0] <= 0 or d[0] > reach:
            continue
        cross = np.nonzero(d <= 0)[0]
        if len(cross):
            i = int(cross[0])
            tags.append((plan.t[i], "pass-left" if plan.n[i] > no[i] else "pass-right"))
        else:
            tags.append((math.inf, "follow"))
    if not tags:
        return "clear-track"
    return min(tags)[1]


# -- replanning -------------------------------------------------------------


def relevant_predictions(track: TrackModel, ego: FrenetPose, predictions, t0: float,
                         half_length: float) -> list[PredictedTrajectory]:
    """Drop opponents entirely behind the ego; the car behind yields."""
    keep = []
    for p in predictions:
        so, _ = _opp_state(p, np.array([t0 - p.t0]))
        if _relative(track, so, np.array([ego.s]))[0] >= -(half_length + p.half_length):
            keep.append(p)
    return keep


def _anchor(track: TrackModel, start: FrenetPose, previous: PlannedTrajectory | None,
            config: PlannerConfig) -> FrenetPose:
    """Start from the previous plan while the car tracks it closely.

    Re-anchoring on the measured state every cycle would hide tracking
    errors from the controller; a large deviation resets to the measurement.
    """
    if previous is None or previous.is_fallback:
        return start
    s = start.s
    if track.closed:
        L = track.total_length
        s0 = previous.path_s[0]
        s = s0 + (s - s0 + 0.5 * L) % L - 0.5 * L
    if not previous.path_s[0] <= s <= previous.path_s[-1]:
        return start
    ref = previous.reference_at_station(s)
    if abs(ref["n"] - start.n) > config.anchor_n or abs(ref["v"] - start.v) > config.anchor_v:
        return start
    return FrenetPose(start.s, ref["n"], ref["mu"], ref["v"])


def replan(track: TrackModel, ego: FrenetPose, predictions: list[PredictedTrajectory], t_now: float,
           limits: PointMassLimits, config: PlannerConfig = PlannerConfig(),
           previous: PlannedTrajectory | None = None) -> PlannedTrajectory:
    """One planning cycle.

    The start state is projected forward by the configured computation delay
    and the returned plan starts at that time. Any failure to find or verify
    a collision-free plan yields the braking fallback.
    """
    d = config.computation_delay
    v = max(float(ego.v), 0.0)
    start = FrenetPose(track.wrap_s(ego.s + v * math.cos(ego.mu) * d),
                       ego.n + v * math.sin(ego.mu) * d, ego.mu, v)
    t0 = t_now + d
    start = _anchor(track, start, previous, config)
    predictions = relevant_predictions(track, start, predictions, t0, config.half_length)
    try:
        lo, hi = corridor_at(track, start.s, config.corridor_margin)
        if not lo - 1e-9 <= start.n <= hi + 1e-9:
            start = FrenetPose(start.s, min(max(start.n, lo), hi), start.mu, start.v)
        t_offset = t0 - predictions[0].t0 if predictions else 0.0
        obs = ObstacleSet.from_predictions(predictions, start.s, track, t_offset,
                                           config.lattice_margin)
        graph = build_lattice(track, start, None, obs, limits, config)
        path = search_optimal(graph)
    except PlanningError as exc:
        return fallback_plan(track, start, limits, config, previous, t0,
                             f"{FallbackReason.INFEASIBLE}: {exc}")
    plan = reconstruct(track, graph, path, t0)
    if plan_collides(track, plan, predictions, config.half_length, config.half_width):
        return fallback_plan(track, start, limits, config, previous, t0, FallbackReason.COLLISION)
    plan.homotopy = classify_homotopy(track, plan, predictions, config.half_length)
    return plan


class Planner:
    """Stateful wrapper that remembers the last plan for the fallback path."""

    def __init__(self, track: TrackModel, limits: PointMassLimits,
                 config: PlannerConfig = PlannerConfig()):
        self.track = track
        self.limits = limits
        self.config = config
        self.last: PlannedTrajectory | None = None

    def __call__(self, ego: FrenetPose, predictions: list[PredictedTrajectory],
                 t_now: float) -> PlannedTrajectory:
        self.last = replan(self.track, ego, predictions, t_now, self.limits, self.config, self.last)
        return self.last
