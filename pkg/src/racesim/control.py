"""Trajectory tracking: feedforward from the plan plus scheduled LQ feedback."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.optimize import least_squares

from .dynamics import G, DualTrackModel, VehicleSpec
from .planning import PlannedTrajectory
from .track import FrenetPose, wrap_angle


@dataclass(frozen=True)
class ControlCommand:
    delta_cmd: float
    ax_cmd: float
    timestamp: float = 0.0
    expired: bool = False


@dataclass(frozen=True)
class TrackingError:
    e_n: float
    e_mu: float
    e_v: float

    def __post_init__(self):
        if not all(math.isfinite(x) for x in (self.e_n, self.e_mu, self.e_v)):
            raise ValueError("tracking error must be finite")


@dataclass(frozen=True)
class ControlConfig:
    # weights on lateral error, lateral velocity and lateral acceleration,
    # which keeps the closed-loop response similar across speeds
    q_n: float = 40.0
    q_vlat: float = 4.0
    r_alat: float = 1.0
    horizon_steps: int = 300
    dt: float = 0.01
    speed_grid_step: float = 10.0
    speed_grid_max: float = 100.0
    k_v: float = 1.0
    tightening: float = 0.10
    expiry_ramp: float = 0.5
    understeer: bool = True
    # feedforward is taken this far ahead to cover steering and yaw lag
    preview: float = 0.2


@dataclass(frozen=True)
class GainSchedule:
    speeds: np.ndarray     # grid, m/s
    gains: np.ndarray      # (len(speeds), 2) feedback on (e_n, e_mu)
    k_v: float

    def at(self, v: float) -> np.ndarray:
        v = min(max(v, self.speeds[0]), self.speeds[-1])
        return np.array([np.interp(v, self.speeds, self.gains[:, 0]),
                         np.interp(v, self.speeds, self.gains[:, 1])])


def lateral_error_model(v: float, wheelbase: float, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Exact discretisation of e_n' = v e_mu, e_mu' = v delta / L (zero-order hold)."""
    A = np.array([[1.0, v * dt], [0.0, 1.0]])
    B = np.array([[0.5 * v * v * dt * dt / wheelbase], [v * dt / wheelbase]])
    return A, B


def riccati_gain(A, B, Q, R, steps: int) -> np.ndarray:
    """First-stage gain of the finite-horizon discrete LQ problem (terminal cost Q)."""
    P = Q.copy()
    K = np.zeros((B.shape[1], A.shape[0]))
    for _ in range(steps):
        S = R + B.T @ P @ B
        K = np.linalg.solve(S, B.T @ P @ A)
        P = Q + A.T @ P @ (A - B @ K)
        P = 0.5 * (P + P.T)
    return K


def compute_gains(spec: VehicleSpec, cfg: ControlConfig = ControlConfig()) -> GainSchedule:
    # gains are held below the first grid speed; in lateral-acceleration
    # terms they would grow without bound towards standstill
    speeds = np.arange(cfg.speed_grid_step, cfg.speed_grid_max + 1e-9, cfg.speed_grid_step)
    L = spec.params.wheelbase
    gains = []
    for v in speeds:
        Q = np.diag([cfg.q_n, cfg.q_vlat * v * v])
        R = np.array([[cfg.r_alat * (v * v / L) ** 2]])
        gains.append(riccati_gain(*lateral_error_model(v, L, cfg.dt), Q, R, cfg.horizon_steps)[0])
    gains = np.array(gains)
    return GainSchedule(speeds, gains, cfg.k_v)


def understeer_gradient(spec: VehicleSpec) -> float:
    """Linear understeer gradient (rad per m/s^2) from static axle cornering stiffnesses."""
    p = spec.params
    L = p.wheelbase
    fz_f = p.mass * G * p.lr / L
    fz_r = p.mass * G * p.lf / L
    tf, tr = spec.tire_front, spec.tire_rear
    c_f = tf.B * tf.C * tf.D * fz_f
    c_r = tr.B * tr.C * tr.D * fz_r
    return p.mass / L * (p.lr / c_f - p.lf / c_r)


@dataclass(frozen=True)
class SteeringMap:
    """Steady-state steering of the dual-track model beyond the kinematic angle.

    ``excess[i, j]`` is the extra steering needed at speed ``speeds[i]`` and
    lateral acceleration ``a_lat[j]``; beyond the last solvable point the
    value is held.
    """

    speeds: np.ndarray
    a_lat: np.ndarray
    excess: np.ndarray
    wheelbase: float

    def delta(self, v: float, kappa: float) -> float:
        kin = math.atan(self.wheelbase * kappa)
        if v <= self.speeds[0]:
            f = max(v, 0.0) / self.speeds[0]
            v = self.speeds[0]
        else:
            f = 1.0
        ay = v * v * kappa
        j = min(abs(ay), self.a_lat[-1])
        col = np.array([np.interp(j, self.a_lat, row) for row in self.excess])
        return kin + math.copysign(f * float(np.interp(v, self.speeds, col)), kappa)


def _steady_state(model: DualTrackModel, v: float, ay: float, guess):
    p = model.spec.params
    r = ay / v

    def residual(x):
        vy, d, ax = x
        dd = model.derivative(np.array([0.0, 0.0, 0.0, v, vy, r, d, ax]), d, ax)
        return dd[3:6]

    lo = [-v, -p.delta_max, -p.a_brake_max]
    hi = [v, p.delta_max, p.ax_drive_max]
    guess = np.clip(guess, lo, hi)
    sol = least_squares(residual, guess, bounds=(lo, hi), x_scale=[1.0, 0.01, 1.0],
                        xtol=1e-12, ftol=1e-12)
    return sol.x, float(np.abs(sol.fun).max())


@lru_cache(maxsize=8)
def steering_map(spec: VehicleSpec, v_step: float = 10.0, a_step: float = 1.0,
                 a_top: float = 30.0) -> SteeringMap:
    model = DualTrackModel(spec)
    p = spec.params
    L = p.wheelbase
    speeds = np.arange(v_step, max(p.v_max, v_step) + v_step, v_step)
    a_lat = np.arange(0.0, a_top + 1e-9, a_step)
    excess = np.zeros((len(speeds), len(a_lat)))
    for i, v in enumerate(speeds):
        x = np.array([0.0, 0.0, 0.0])
        held = 0.0
        for j, ay in enumerate(a_lat):
            kin = math.atan(L * ay / (v * v))
            if held == 0.0 and j > 0:
                x[1] = min(max(x[1], kin), p.delta_max)
                x, res = _steady_state(model, v, ay, x)
                if res > 1e-6 or x[1] >= p.delta_max - 1e-6:
                    held = excess[i, j - 1]
                else:
                    excess[i, j] = x[1] - kin
                    continue
            excess[i, j] = held
    return SteeringMap(speeds, a_lat, excess, L)


def compute_feedforward(sample: dict, wheelbase: float, k_us: float = 0.0,
                        steer: SteeringMap | None = None) -> tuple[float, float]:
    """Steering from path curvature plus understeer; acceleration from the plan."""
    kappa = float(sample["kappa"])
    if steer is not None:
        return steer.delta(float(sample["v"]), kappa), float(sample["a_lon"])
    a_lat = float(sample.get("a_lat", sample.get("v", 0.0) ** 2 * kappa))
    delta = math.atan(wheelbase * kappa) + k_us * a_lat
    return delta, float(sample["a_lon"])


def compute_feedback(error: TrackingError, v: float, gains: GainSchedule) -> tuple[float, float]:
    K = gains.at(v)
    delta = -(K[0] * error.e_n + K[1] * error.e_mu)
    return float(delta) + 0.0, float(-gains.k_v * error.e_v) + 0.0


class TrackingController:
    """Per-agent controller state: last command and expiry bookkeeping."""

    def __init__(self, spec: VehicleSpec, cfg: ControlConfig = ControlConfig(),
                 gains: GainSchedule | None = None):
        self.spec = spec
        self.cfg = cfg
        self.gains = gains or compute_gains(spec, cfg)
        self.steer = steering_map(spec) if cfg.understeer else None
        p = spec.params
        m = 1.0 - cfg.tightening
        self.delta_lim = m * p.delta_max
        self.ax_lo = -m * p.a_brake_max
        self.ax_hi = m * p.ax_drive_max
        self.last = ControlCommand(0.0, 0.0)
        self._expired_at: float | None = None
        self._expired_ax = 0.0
        self.last_error = TrackingError(0.0, 0.0, 0.0)

    def saturate(self, delta: float, ax: float) -> tuple[float, float]:
        return (min(max(delta, -self.delta_lim), self.delta_lim),
                min(max(ax, self.ax_lo), self.ax_hi))

    def resistance(self, v: float) -> float:
        p = self.spec.params
        return (p.drag_coeff * v * v) / p.mass + p.rolling_coeff * G

    def step(self, pose: FrenetPose, plan: PlannedTrajectory | None, t: float) -> ControlCommand:
        """``pose`` is the ego pose in the track frame with ``s`` unwrapped to the plan."""
        if plan is None or t > plan.valid_until:
            return self._expired(t)
        self._expired_at = None
        ref = plan.reference_at_station(pose.s)
        err = TrackingError(pose.n - ref["n"], wrap_angle(pose.mu - ref["mu"]), pose.v - ref["v"])
        self.last_error = err
        ahead = plan.reference_at_station(pose.s + self.cfg.preview * max(pose.v, 0.0))
        d_ff, _ = compute_feedforward(ahead, self.spec.params.wheelbase, steer=self.steer)
        a_ff = float(ref["a_lon"])
        if ref["v"] > 0.0:
            a_ff += self.resistance(ref["v"])
        d_fb, a_fb = compute_feedback(err, max(pose.v, 1.0), self.gains)
        delta, ax = self.saturate(d_ff + d_fb, a_ff + a_fb)
        if ref["v"] == 0.0 and pose.v < 0.5:
            ax = self.ax_lo  # hold at standstill
        self.last = ControlCommand(delta, ax, t)
        return self.last

    def _expired(self, t: float) -> ControlCommand:
        if self._expired_at is None:
            self._expired_at = t
            self._expired_ax = self.last.ax_cmd
        f = min((t - self._expired_at) / self.cfg.expiry_ramp, 1.0)
        ax = self._expired_ax + f * (self.ax_lo - self._expired_ax)
        self.last = ControlCommand(self.last.delta_cmd, ax, t, expired=True)
        return self.last


def track_step(controller: TrackingController, pose: FrenetPose, plan: PlannedTrajectory | None,
               t: float) -> ControlCommand:
    return controller.step(pose, plan, t)
