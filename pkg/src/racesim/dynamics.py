"""Vehicle plant models.

The dual-track model resolves four contact patches with magic-formula tires,
friction-ellipse combined slip, steady-state load transfer, quadratic drag and
downforce, first-order steering/drive lag and external disturbance forces.
Longitudinal commands are acceleration requests; each wheel's slip ratio is
obtained by inverting the longitudinal tire curve for its share of the
requested force.

Numeric kernels are numba-compiled and work on flat float arrays; the
dataclasses below are the public face.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from numba import njit

G = 9.81

# state vector layout
X, Y, PSI, VX, VY, R, DELTA, AX = range(8)
STATE_FIELDS = ("x", "y", "psi", "vx", "vy", "r", "delta", "ax_cmd_filtered")

# parameter vector layout
(P_M, P_IZ, P_LF, P_LR, P_TWF, P_TWR, P_H, P_TS, P_TD, P_CD, P_CL, P_AEROF,
 P_CRR, P_DMAX, P_AXMAX, P_ABRK, P_VKIN) = range(17)
N_PARAMS = 17


class IntegrationError(RuntimeError):
    def __init__(self, message, state):
        super().__init__(message)
        self.state = state


@dataclass(frozen=True)
class VehicleState:
    x: float = 0.0
    y: float = 0.0
    psi: float = 0.0
    vx: float = 0.0
    vy: float = 0.0
    r: float = 0.0
    delta: float = 0.0
    ax_cmd_filtered: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.psi, self.vx, self.vy, self.r,
                         self.delta, self.ax_cmd_filtered])

    @classmethod
    def from_array(cls, a) -> "VehicleState":
        return cls(*(float(v) for v in a))

    @property
    def speed(self) -> float:
        return math.hypot(self.vx, self.vy)


@dataclass(frozen=True)
class VehicleParams:
    """Plausible Indy-Lights-class defaults; not manufacturer data."""

    mass: float = 750.0
    yaw_inertia: float = 1000.0
    lf: float = 1.65
    lr: float = 1.35
    track_front: float = 1.64
    track_rear: float = 1.56
    h_cog: float = 0.30
    half_width: float = 1.0
    half_length: float = 2.5
    tau_steer: float = 0.05
    tau_drive: float = 0.10
    v_max: float = 83.33
    a_brake_max: float = 14.0
    ax_drive_max: float = 10.0
    delta_max: float = 0.25
    drag_coeff: float = 0.48       # N/(m/s)^2, 0.5*rho*Cd*A
    downforce_coeff: float = 1.8   # N/(m/s)^2, 0.5*rho*Cl*A
    aero_front_share: float = 0.35
    rolling_coeff: float = 0.01
    v_kinematic: float = 0.1

    def __post_init__(self):
        for f in fields(self):
            if f.name in ("drag_coeff", "downforce_coeff", "rolling_coeff", "aero_front_share"):
                if getattr(self, f.name) < 0:
                    raise ValueError(f"{f.name} must be non-negative")
            elif getattr(self, f.name) <= 0:
                raise ValueError(f"{f.name} must be positive")

    @property
    def wheelbase(self) -> float:
        return self.lf + self.lr

    def as_array(self) -> np.ndarray:
        return np.array([self.mass, self.yaw_inertia, self.lf, self.lr, self.track_front,
                         self.track_rear, self.h_cog, self.tau_steer, self.tau_drive,
                         self.drag_coeff, self.downforce_coeff, self.aero_front_share,
                         self.rolling_coeff, self.delta_max, self.ax_drive_max,
                         self.a_brake_max, self.v_kinematic])


@dataclass(frozen=True)
class TireParams:
    B: float = 10.0
    C: float = 1.9
    D: float = 1.0
    E: float = 0.97

    def __post_init__(self):
        if not (self.B > 0 and 0 < self.C < 3 and 0 < self.D <= 2):
            raise ValueError(f"invalid tire coefficients {self}")
        if self.E > 1:
            raise ValueError("curvature factor E > 1 makes the force curve non-monotone")

    def as_array(self) -> np.ndarray:
        return np.array([self.B, self.C, self.D, self.E])


@dataclass(frozen=True)
class PointMassLimits:
    a_max: float = 14.0
    a_lon_drive_max: float = 6.0
    v_max: float = 83.33

    def __post_init__(self):
        if not (0 < self.a_lon_drive_max <= self.a_max and self.v_max > 0):
            raise ValueError(f"invalid point-mass limits {self}")

    def scaled(self, factor: float) -> "PointMassLimits":
        return PointMassLimits(self.a_max * factor,
                               min(self.a_lon_drive_max, self.a_max * factor), self.v_max)


@dataclass(frozen=True)
class DisturbanceModel:
    seed: int = 0
    wind_mean: float = 0.0      # N, head wind (opposes travel)
    wind_std: float = 0.0       # N
    lateral_std: float = 0.0    # N
    update_period: float = 0.1  # s

    def __post_init__(self):
        if self.wind_std < 0 or self.lateral_std < 0 or self.update_period <= 0:
            raise ValueError("disturbance stds must be >= 0 and period > 0")

    @property
    def enabled(self) -> bool:
        return self.wind_mean != 0 or self.wind_std > 0 or self.lateral_std > 0

    def sample(self, agent_id: int, t: float) -> tuple[float, float]:
        """Body-frame force ``(fx, fy)`` held constant over each update period.

        Counter-based: the draw for period ``k`` depends only on
        ``(seed, agent_id, k)``, never on query order.
        """
        if not self.enabled:
            return 0.0, 0.0
        k = int(math.floor(t / self.update_period + 1e-9))
        rng = np.random.default_rng([self.seed, agent_id, k])
        z = rng.standard_normal(2)
        return -(self.wind_mean + self.wind_std * float(z[0])), self.lateral_std * float(z[1])


@dataclass(frozen=True)
class VehicleSpec:
    """Vehicle and tire parameter bundle as stored in a vehicle file."""

    params: VehicleParams = field(default_factory=VehicleParams)
    tire_front: TireParams = field(default_factory=TireParams)
    tire_rear: TireParams = field(default_factory=TireParams)


_SI_SUFFIX = "_si"


def load_vehicle(path) -> VehicleSpec:
    """Read a vehicle JSON file; numeric keys carry an ``_si`` suffix."""
    with open(path) as f:
        doc = json.load(f)
    return vehicle_from_dict(doc)


def vehicle_from_dict(doc: dict) -> VehicleSpec:
    def strip(d):
        return {k[: -len(_SI_SUFFIX)] if k.endswith(_SI_SUFFIX) else k: v for k, v in d.items()}

    params = VehicleParams(**strip(doc.get("vehicle", {})))
    tires = doc.get("tires", {})
    shared = strip(tires.get("shared", {}))
    tf = TireParams(**{**shared, **strip(tires.get("front", {}))})
    tr = TireParams(**{**shared, **strip(tires.get("rear", {}))})
    return VehicleSpec(params, tf, tr)


def vehicle_to_dict(spec: VehicleSpec) -> dict:
    return {
        "vehicle": {k + _SI_SUFFIX: v for k, v in asdict(spec.params).items()},
        "tires": {"front": {k + _SI_SUFFIX: v for k, v in asdict(spec.tire_front).items()},
                  "rear": {k + _SI_SUFFIX: v for k, v in asdict(spec.tire_rear).items()}},
    }


# -- tire kernels ----------------------------------------------------------


@njit(cache=True)
def _mf(slip, B, C, D, E, Fz):
    bx = B * slip
    return Fz * D * math.sin(C * math.atan(bx - E * (bx - math.atan(bx))))


@njit(cache=True)
def _mf_inverse(force, B, C, D, E, Fz):
    """Slip on the rising branch that produces ``force``; saturates at the peak."""
    if Fz <= 0.0 or force == 0.0:
        return 0.0
    f = abs(force) / (D * Fz)
    if C > 1.0:
        y = math.asin(f) if f < 1.0 else 0.5 * math.pi
    else:
        # asymptotic peak: stay just below it
        f_cap = math.sin(0.5 * math.pi * C) * (1.0 - 1e-9)
        y = math.asin(min(f, f_cap))
    phi = math.tan(y / C)
    # solve (1 - E) x + E atan(x) = phi, monotone for E <= 1
    x = phi
    lo = 0.0
    hi = max(phi, 1.0)
    while (1.0 - E) * hi + E * math.atan(hi) < phi:
        hi *= 2.0
    for _ in range(60):
        g = (1.0 - E) * x + E * math.atan(x) - phi
        if abs(g) < 1e-14:
            break
        if g > 0:
            hi = x
        else:
            lo = x
        dg = (1.0 - E) + E / (1.0 + x * x)
        xn = x - g / dg
        if xn <= lo or xn >= hi:
            xn = 0.5 * (lo + hi)
        x = xn
    return math.copysign(x / B, force)


@njit(cache=True)
def _combined(kappa, alpha, Bx, Cx, Dx, Ex, By, Cy, Dy, Ey, Fz):
    fx0 = _mf(kappa, Bx, Cx, Dx, Ex, Fz)
    fy0 = _mf(alpha, By, Cy, Dy, Ey, Fz)
    if Fz <= 0.0:
        return 0.0, 0.0
    ux = fx0 / (Dx * Fz)
    uy = fy0 / (Dy * Fz)
    m2 = ux * ux + uy * uy
    if m2 > 1.0:
        sc = 1.0 / math.sqrt(m2)
        return fx0 * sc, fy0 * sc
    return fx0, fy0


def magic_formula(slip, B: float, C: float, D: float, E: float, Fz: float):
    """Pacejka force ``Fz*D*sin(C*atan(B*x - E*(B*x - atan(B*x))))``; vectorises over ``slip``."""
    if np.ndim(slip):
        bx = B * np.asarray(slip, dtype=float)
        return Fz * D * np.sin(C * np.arctan(bx - E * (bx - np.arctan(bx))))
    return _mf(float(slip), B, C, D, E, Fz)


def combined_slip_forces(kappa_slip: float, alpha_slip: float, tire: TireParams,
                         Fz: float, tire_lat: TireParams | None = None) -> tuple[float, float]:
    """Pure-slip forces scaled back onto the friction ellipse."""
    tl = tire if tire_lat is None else tire_lat
    return _combined(float(kappa_slip), float(alpha_slip), tire.B, tire.C, tire.D, tire.E,
                     tl.B, tl.C, tl.D, tl.E, float(Fz))


def slip_for_force(force: float, tire: TireParams, Fz: float) -> float:
    return _mf_inverse(float(force), tire.B, tire.C, tire.D, tire.E, float(Fz))


# -- dual-track kernel -----------------------------------------------------


@njit(cache=True)
def _wheel_loads(vx, r, ax, p):
    m, lf, lr, h = p[P_M], p[P_LF], p[P_LR], p[P_H]
    wb = lf + lr
    down = p[P_CL] * vx * vx
    ff = m * G * lr / wb + down * p[P_AEROF] - m * ax * h / wb
    fr = m * G * lf / wb + down * (1.0 - p[P_AEROF]) + m * ax * h / wb
    ay = vx * r
    dff = m * ay * h / p[P_TWF] * (lr / wb)
    dfr = m * ay * h / p[P_TWR] * (lf / wb)
    return (max(0.5 * ff - dff, 0.0), max(0.5 * ff + dff, 0.0),
            max(0.5 * fr - dfr, 0.0), max(0.5 * fr + dfr, 0.0))


@njit(cache=True)
def _derivative(s, delta_cmd, ax_cmd, p, tf, tr, fdx, fdy):
    out = np.empty(8)
    psi, vx, vy, r, delta, ax = s[PSI], s[VX], s[VY], s[R], s[DELTA], s[AX]
    m, iz, lf, lr = p[P_M], p[P_IZ], p[P_LF], p[P_LR]
    wb = lf + lr
    dmax = p[P_DMAX]
    dc = min(max(delta_cmd, -dmax), dmax)
    ac = min(max(ax_cmd, -p[P_ABRK]), p[P_AXMAX])
    out[DELTA] = (dc - delta) / p[P_TS]
    out[AX] = (ac - ax) / p[P_TD]
    c, sn = math.cos(psi), math.sin(psi)
    out[X] = vx * c - vy * sn
    out[Y] = vx * sn + vy * c
    out[PSI] = r

    if vx < p[P_VKIN]:
        # kinematic bicycle; never reverses
        acc = ax + fdx / m
        if vx <= 0.0 and acc < 0.0:
            acc = 0.0
        out[VX] = acc
        r_t = vx * math.tan(delta) / wb
        out[R] = (r_t - r) / 0.05
        out[VY] = (lr * r_t - vy) / 0.05
        return out

    fz_fl, fz_fr, fz_rl, fz_rr = _wheel_loads(vx, r, ax, p)
    freq = m * ax
    if freq >= 0.0:
        rsum = fz_rl + fz_rr
        t_fl = 0.0
        t_fr = 0.0
        t_rl = freq * fz_rl / rsum if rsum > 0 else 0.0
        t_rr = freq * fz_rr / rsum if rsum > 0 else 0.0
    else:
        tot = fz_fl + fz_fr + fz_rl + fz_rr
        t_fl = freq * fz_fl / tot
        t_fr = freq * fz_fr / tot
        t_rl = freq * fz_rl / tot
        t_rr = freq * fz_rr / tot

    hf = 0.5 * p[P_TWF]
    hr = 0.5 * p[P_TWR]
    cd, sd = math.cos(delta), math.sin(delta)
    fx_sum = 0.0
    fy_sum = 0.0
    mz = 0.0
    for w in range(4):
        if w == 0:
            xi, yi, fz, tgt, front = lf, hf, fz_fl, t_fl, True
        elif w == 1:
            xi, yi, fz, tgt, front = lf, -hf, fz_fr, t_fr, True
        elif w == 2:
            xi, yi, fz, tgt, front = -lr, hr, fz_rl, t_rl, False
        else:
            xi, yi, fz, tgt, front = -lr, -hr, fz_rr, t_rr, False
        tp = tf if front else tr
        wvx = vx - r * yi
        wvy = vy + r * xi
        alpha = -math.atan2(wvy, wvx)
        if front:
            alpha += delta
        kappa = _mf_inverse(tgt, tp[0], tp[1], tp[2], tp[3], fz)
        fxw, fyw = _combined(kappa, alpha, tp[0], tp[1], tp[2], tp[3],
                             tp[0], tp[1], tp[2], tp[3], fz)
        if front:
            fxb = fxw * cd - fyw * sd
            fyb = fxw * sd + fyw * cd
        else:
            fxb = fxw
            fyb = fyw
        fx_sum += fxb
        fy_sum += fyb
        mz += xi * fyb - yi * fxb

    resist = p[P_CD] * vx * vx + p[P_CRR] * m * G
    fx_sum += fdx - resist
    fy_sum += fdy
    out[VX] = fx_sum / m + vy * r
    out[VY] = fy_sum / m - vx * r
    out[R] = mz / iz
    return out


@njit(cache=True)
def _rk4(s, delta_cmd, ax_cmd, p, tf, tr, fdx, fdy, dt):
    k1 = _derivative(s, delta_cmd, ax_cmd, p, tf, tr, fdx, fdy)
    k2 = _derivative(s + 0.5 * dt * k1, delta_cmd, ax_cmd, p, tf, tr, fdx, fdy)
    k3 = _derivative(s + 0.5 * dt * k2, delta_cmd, ax_cmd, p, tf, tr, fdx, fdy)
    k4 = _derivative(s + dt * k3, delta_cmd, ax_cmd, p, tf, tr, fdx, fdy)
    nxt = s + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if nxt[VX] < 0.0:
        nxt[VX] = 0.0
    return nxt


class DualTrackModel:
    """Caches the flat parameter arrays for one vehicle."""

    def __init__(self, spec: VehicleSpec | None = None):
        self.spec = spec or VehicleSpec()
        self.p = self.spec.params.as_array()
        self.tf = self.spec.tire_front.as_array()
        self.tr = self.spec.tire_rear.as_array()

    @property
    def params(self) -> VehicleParams:
        return self.spec.params

    def derivative(self, state, delta_cmd, ax_cmd, disturbance=(0.0, 0.0)) -> np.ndarray:
        s = state.as_array() if isinstance(state, VehicleState) else np.asarray(state, dtype=float)
        return _derivative(s, float(delta_cmd), float(ax_cmd), self.p, self.tf, self.tr,
                           float(disturbance[0]), float(disturbance[1]))

    def wheel_loads(self, state) -> tuple[float, float, float, float]:
        s = state.as_array() if isinstance(state, VehicleState) else np.asarray(state, dtype=float)
        return _wheel_loads(s[VX], s[R], s[AX], self.p)

    def step(self, state: np.ndarray, delta_cmd, ax_cmd, dt, disturbance=(0.0, 0.0)) -> np.ndarray:
        if not 0.0 < dt <= 0.02:
            raise ValueError(f"dt must lie in (0, 0.02] s, got {dt}")
        nxt = _rk4(state, float(delta_cmd), float(ax_cmd), self.p, self.tf, self.tr,
                   float(disturbance[0]), float(disturbance[1]), float(dt))
        if not np.all(np.isfinite(nxt)):
            raise IntegrationError("non-finite state after RK4 step", VehicleState.from_array(state))
        return nxt


def dual_track_derivative(state: VehicleState, controls, spec: VehicleSpec | None = None,
                          disturbance=(0.0, 0.0)) -> VehicleState:
    """Time derivative of ``state`` under ``controls = (delta_cmd, ax_cmd)``."""
    d = DualTrackModel(spec).derivative(state, controls[0], controls[1], disturbance)
    return VehicleState.from_array(d)


def step_rk4(state: VehicleState, controls, spec: VehicleSpec | None = None, dt: float = 0.005,
             disturbance=(0.0, 0.0)) -> VehicleState:
    nxt = DualTrackModel(spec).step(state.as_array(), controls[0], controls[1], dt, disturbance)
    return VehicleState.from_array(nxt)


def rk4_step(f, y, t: float, dt: float):
    """Classical RK4 for ``y' = f(t, y)`` on numpy arrays."""
    k1 = f(t, y)
    k2 = f(t + 0.5 * dt, y + 0.5 * dt * k1)
    k3 = f(t + 0.5 * dt, y + 0.5 * dt * k2)
    k4 = f(t + dt, y + dt * k3)
    return y + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def braking_distance(v: float, a: float) -> float:
    if v < 0 or a <= 0:
        raise ValueError("need v >= 0 and a > 0")
    return v * v / (2.0 * a)


def delay_distance(v: float, t_proc: float) -> float:
    if v < 0 or t_proc < 0:
        raise ValueError("need v >= 0 and t_proc >= 0")
    return v * t_proc


def kph(v_kph: float) -> float:
    return v_kph / 3.6
