"""Single-mode opponent prediction.

Short horizon: constant turn rate and speed rollout of the measured state.
Long horizon: the opponent keeps its lateral offset and follows the track at
a friction-limited speed that never exceeds its current speed (plus an
optional modest acceleration). This rail model is a stand-in for a learned
long-horizon predictor; anything with the same signature can replace it.
The two are blended in Frenet space into exactly one trajectory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .dynamics import PointMassLimits, VehicleState
from .profile import travel_times, velocity_profile
from .track import TrackModel, corridor_at, frenet_to_cart_array, project_points


@dataclass(frozen=True)
class PredictionConfig:
    dt: float = 0.1
    physics_horizon: float = 2.0
    rail_horizon: float = 5.0
    blend_start: float = 1.0
    blend_end: float = 2.0
    rail_accel: float = 0.0
    inflation_lat: float = 1.0
    inflation_lon: float = 3.0
    inflation_growth: float = 0.5  # m per s of horizon, both directions


@dataclass(eq=False)
class PredictedTrajectory:
    opponent_id: str
    t: np.ndarray
    s: np.ndarray  # unwrapped: continuous across the lap line
    n: np.ndarray
    v: np.ndarray
    xy: np.ndarray
    horizon: float
    inflation_lat: float = 1.0
    inflation_lon: float = 3.0
    inflation_growth: float = 0.5
    half_length: float = 2.5
    half_width: float = 1.0
    t0: float = 0.0  # absolute time of the first sample
    clamped: bool = False

    def __post_init__(self):
        if len(self.t) and self.t[0] != 0.0:
            raise ValueError("prediction time must start at 0")
        if np.any(np.diff(self.t) <= 0):
            raise ValueError("prediction time must be strictly increasing")

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0]) if len(self.t) > 1 else 0.0

    def margins_at(self, t) -> tuple[np.ndarray, np.ndarray]:
        g = self.inflation_growth * np.asarray(t)
        return self.inflation_lon + g, self.inflation_lat + g


STANDSTILL = 0.1  # m/s


def _opponent_speed(state: VehicleState) -> float:
    return math.hypot(state.vx, state.vy)


def predict_physics(opponent_state: VehicleState, track: TrackModel | None, horizon: float = 2.0,
                    dt: float = 0.1, opponent_id: str = "", **kw) -> PredictedTrajectory:
    """Constant turn rate and speed rollout; Frenet samples when ``track`` is given."""
    if horizon > 2.0 + 1e-9:
        raise ValueError("physics prediction horizon is limited to 2 s")
    st = opponent_state
    t = np.round(np.arange(0.0, horizon + 1e-9, dt) / dt) * dt
    v = _opponent_speed(st)
    if v <= STANDSTILL:
        v = 0.0
    course = st.psi + math.atan2(st.vy, st.vx) if v > 0 else st.psi
    r = st.r
    if abs(r) < 1e-9:
        x = st.x + v * t * math.cos(course)
        y = st.y + v * t * math.sin(course)
    else:
        x = st.x + v / r * (np.sin(course + r * t) - math.sin(course))
        y = st.y - v / r * (np.cos(course + r * t) - math.cos(course))
    xy = np.column_stack([x, y])
    vv = np.full(len(t), v)
    if track is None:
        s = v * t
        n = np.zeros(len(t))
    else:
        s, n = project_points(track, xy)
        s = _unwrap(s, track)
    return PredictedTrajectory(opponent_id, t, s, n, vv, xy, float(t[-1]), **kw)


def _unwrap(s: np.ndarray, track: TrackModel) -> np.ndarray:
    if not track.closed or len(s) < 2:
        return np.asarray(s, dtype=float)
    L = track.total_length
    d = np.diff(s)
    d = (d + 0.5 * L) % L - 0.5 * L
    return np.concatenate([[s[0]], s[0] + np.cumsum(d)])


def predict_rail(opponent_state: VehicleState, track: TrackModel, horizon: float = 5.0,
                 dt: float = 0.1, limits: PointMassLimits | None = None, start=None,
                 rail_accel: float = 0.0, corridor_margin: float = 0.0,
                 opponent_id: str = "", **kw) -> PredictedTrajectory:
    """Rail-following rollout at constant lateral offset.

    ``start`` may pass a precomputed ``(s, n)`` projection of the opponent.
    Opponents outside the corridor are clamped to its edge and flagged.
    """
    limits = limits or PointMassLimits()
    v0 = _opponent_speed(opponent_state)
    if start is None:
        s_arr, n_arr = project_points(track, [[opponent_state.x, opponent_state.y]])
        s0, n0 = float(s_arr[0]), float(n_arr[0])
    else:
        s0, n0 = start
    clamped = False
    n_min, n_max = corridor_at(track, s0, corridor_margin)
    if not n_min <= n0 <= n_max:
        n0 = min(max(n0, n_min), n_max)
        clamped = True
    t = np.round(np.arange(0.0, horizon + 1e-9, dt) / dt) * dt
    if v0 <= STANDSTILL and rail_accel <= 0.0:
        s = np.full(len(t), s0)
        v = np.zeros(len(t))
    else:
        ds = 2.0
        dist = (v0 + rail_accel * horizon) * horizon + 2 * ds
        st = s0 + np.arange(0.0, dist + ds, ds)
        kr = track.curvature_at(st)
        kappa = kr / np.maximum(1.0 - n0 * kr, 0.1)
        cap = np.sqrt(v0 * v0 + 2.0 * rail_accel * (st - s0)) if rail_accel > 0 else v0
        prof = velocity_profile(kappa, ds, limits, v0, v_cap=np.minimum(cap, limits.v_max))
        tt = travel_times(prof, ds)
        finite = np.isfinite(tt)
        s = np.interp(t, tt[finite], st[finite])
        v = np.interp(t, tt[finite], prof[finite])
    n = np.full(len(t), n0)
    xy = frenet_to_cart_array(track, s, n)
    return PredictedTrajectory(opponent_id, t, s, n, v, xy, float(t[-1]), clamped=clamped, **kw)


def fuse_most_likely(physics_pred: PredictedTrajectory, rail_pred: PredictedTrajectory,
                     track: TrackModel | None = None, blend_start: float = 1.0,
                     blend_end: float = 2.0) -> PredictedTrajectory:
    """Physics samples up to ``blend_start``, linear Frenet blend, then rail."""
    tp, tr_ = physics_pred.t, rail_pred.t
    dt = rail_pred.dt
    if abs(physics_pred.dt - dt) > 1e-9:
        raise ValueError("physics and rail predictions must share the sample period")
    t = tr_.copy()
    n_phys = len(tp)
    s_r, n_r, v_r = rail_pred.s.copy(), rail_pred.n.copy(), rail_pred.v.copy()
    s_p = np.full(len(t), np.nan)
    n_p = np.full(len(t), np.nan)
    v_p = np.full(len(t), np.nan)
    m = min(n_phys, len(t))
    s_p[:m], n_p[:m], v_p[:m] = physics_pred.s[:m], physics_pred.n[:m], physics_pred.v[:m]
    if track is not None and track.closed:
        L = track.total_length
        s_p[:m] = s_p[:m] - L * np.round((s_p[0] - s_r[0]) / L)
    w = np.clip((t - blend_start) / (blend_end - blend_start), 0.0, 1.0)
    w[n_phys:] = 1.0
    use_p = w < 1.0
    s = np.where(use_p, (1.0 - w) * np.nan_to_num(s_p) + w * s_r, s_r)
    n = np.where(use_p, (1.0 - w) * np.nan_to_num(n_p) + w * n_r, n_r)
    v = np.where(use_p, (1.0 - w) * np.nan_to_num(v_p) + w * v_r, v_r)
    # exact physics samples before the blend window
    pure = w == 0.0
    s[pure], n[pure], v[pure] = s_p[pure], n_p[pure], v_p[pure]
    xy = frenet_to_cart_array(track, s, n) if track is not None else rail_pred.xy.copy()
    idx = np.nonzero(pure)[0]
    xy[idx] = physics_pred.xy[idx]
    return replace(rail_pred, t=t, s=s, n=n, v=v, xy=xy, clamped=rail_pred.clamped)


def predict_opponent(opponent_state: VehicleState, track: TrackModel, limits: PointMassLimits,
                     cfg: PredictionConfig = PredictionConfig(), opponent_id: str = "",
                     half_length: float = 2.5, half_width: float = 1.0, t0: float = 0.0,
                     long_horizon_predictor=None) -> PredictedTrajectory:
    """Most likely trajectory: physics rollout fused with the long-horizon predictor."""
    # a car at standstill has no motion uncertainty to grow over the horizon
    growth = cfg.inflation_growth if _opponent_speed(opponent_state) > STANDSTILL else 0.0
    kw = dict(inflation_lat=cfg.inflation_lat, inflation_lon=cfg.inflation_lon,
              inflation_growth=growth, half_length=half_length,
              half_width=half_width, t0=t0)
    phys = predict_physics(opponent_state, track, cfg.physics_horizon, cfg.dt, opponent_id, **kw)
    long_pred = long_horizon_predictor or predict_rail
    rail = long_pred(opponent_state, track, cfg.rail_horizon, cfg.dt, limits,
                     start=(float(phys.s[0]), float(phys.n[0])), rail_accel=cfg.rail_accel,
                     opponent_id=opponent_id, **kw)
    return fuse_most_likely(phys, rail, track, cfg.blend_start, cfg.blend_end)
