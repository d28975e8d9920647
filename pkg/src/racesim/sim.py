"""Deterministic lock-step multi-agent simulation with idealized perception."""

from __future__ import annotations

import csv
import json
import math
import time
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .control import TrackingController
from .dynamics import (AX, DELTA, PSI, VX, VY, IntegrationError, PointMassLimits, R, X, Y,
                       DualTrackModel, VehicleState)
from .planning import PlannedTrajectory, Planner, path_plan
from .prediction import predict_opponent
from .scenario import AgentConfig, ScenarioConfig
from .track import FrenetPose, Projector, TrackModel, corridor_at, frenet_to_cart, wrap_angle

COLUMNS = ["t_s", "agent", "x_m", "y_m", "psi_rad", "vx_mps", "vy_mps", "r_radps", "delta_rad",
           "ax_mps2", "s_m", "n_m", "mu_rad", "delta_cmd_rad", "ax_cmd_mps2", "e_n_m",
           "plan_status", "homotopy"]

STAGES = ("prediction", "planning", "control")


@dataclass
class DetectionEvent:
    observer: str
    opponent: str
    t: float             # snapshot time
    t_valid: float       # world time the snapshot shows
    range_m: float       # range at the validity time
    range_at_plan_m: float | None = None  # range when a plan first used it


@dataclass
class PlanRecord:
    t: float
    agent: str
    status: str
    homotopy: str
    friction_max: float
    reason: str = ""


@dataclass
class SimLog:
    scenario: str
    seed: int
    config_hash: str
    rows: list = field(default_factory=list)
    verdict: str = "ok"
    verdict_detail: str = ""
    t_end: float = 0.0
    laps: dict = field(default_factory=dict)
    detections: list[DetectionEvent] = field(default_factory=list)
    plans: list[PlanRecord] = field(default_factory=list)
    timing: bool = False
    timings: dict = field(default_factory=lambda: {k: [] for k in STAGES + ("cycle", "end-to-end")})
    stage_calls: dict = field(default_factory=lambda: {k: 0 for k in STAGES})
    wall_time: float = 0.0
    track_file: str = ""

    @property
    def columns(self) -> list[str]:
        return COLUMNS

    @property
    def clean(self) -> bool:
        return self.verdict == "ok"

    def agent_series(self, agent: str) -> dict[str, np.ndarray]:
        rows = [r for r in self.rows if r[1] == agent]
        out = {}
        for j, c in enumerate(COLUMNS):
            if c in ("agent", "plan_status", "homotopy"):
                out[c] = [r[j] for r in rows]
            else:
                out[c] = np.array([r[j] for r in rows], dtype=float)
        return out

    def homotopies(self, agent: str) -> set[str]:
        return {p.homotopy for p in self.plans if p.agent == agent and p.status == "ok"}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(COLUMNS)
            for r in self.rows:
                w.writerow([repr(x) if isinstance(x, float) else x for x in r])

    def metadata(self) -> dict:
        return {
            "scenario": self.scenario, "seed": self.seed, "config_hash": self.config_hash,
            "code_version": __version__, "columns": COLUMNS, "track_file": self.track_file,
            "verdict": self.verdict,
            "verdict_detail": self.verdict_detail, "t_end_s": self.t_end, "laps": self.laps,
            "detections": [vars(d) for d in self.detections],
            "plans": len(self.plans),
            "fallback_plans": sum(p.status == "fallback" for p in self.plans),
            "friction_max": max((p.friction_max for p in self.plans), default=0.0),
        }

    def write_metadata(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.metadata(), fh, indent=2, sort_keys=True)


# -- geometry ---------------------------------------------------------------


def obb_overlap(a, b) -> bool:
    """Separating-axis test for two boxes ``(x, y, psi, half_length, half_width)``."""
    ax_, ay, apsi, al, aw = a
    bx, by, bpsi, bl, bw = b
    dx, dy = bx - ax_, by - ay
    if dx * dx + dy * dy > (math.hypot(al, aw) + math.hypot(bl, bw)) ** 2:
        return False
    ca, sa, cb, sb = math.cos(apsi), math.sin(apsi), math.cos(bpsi), math.sin(bpsi)
    for ux, uy in ((ca, sa), (-sa, ca), (cb, sb), (-sb, cb)):
        ra = al * abs(ca * ux + sa * uy) + aw * abs(-sa * ux + ca * uy)
        rb = bl * abs(cb * ux + sb * uy) + bw * abs(-sb * ux + cb * uy)
        if abs(dx * ux + dy * uy) > ra + rb:
            return False
    return True


# -- scripted policy --------------------------------------------------------


def _eval_schedule(sched: tuple, t: np.ndarray, smooth: bool) -> np.ndarray:
    ts = np.array([p[0] for p in sched])
    xs = np.array([p[1] for p in sched])
    if len(ts) == 1:
        return np.full(np.shape(t), xs[0])
    if not smooth:
        return np.interp(t, ts, xs)
    j = np.clip(np.searchsorted(ts, t, side="right") - 1, 0, len(ts) - 2)
    u = np.clip((t - ts[j]) / (ts[j + 1] - ts[j]), 0.0, 1.0)
    return xs[j] + (xs[j + 1] - xs[j]) * u * u * (3 - 2 * u)


def scripted_plan(track: TrackModel, pose: FrenetPose, t: float, agent: AgentConfig,
                  limits: PointMassLimits, planner_cfg, horizon: float = 300.0) -> PlannedTrajectory:
    """Rail plan following the agent's offset and speed schedules."""
    step = planner_cfg.dense_step
    sig = np.arange(0.0, horizon + step, step)
    v_ref = max(pose.v, 5.0)
    tt = t + sig / v_ref
    if agent.offset_schedule:
        n = _eval_schedule(agent.offset_schedule, tt, smooth=True)
    else:
        n = np.full(len(sig), agent.n)
    lo, hi = corridor_at(track, pose.s, agent.vehicle.params.half_width)
    n = np.clip(n, lo, hi)
    cap = _eval_schedule(agent.speed_schedule, tt, smooth=False) if agent.speed_schedule else None
    return path_plan(track, pose.s, sig, n, pose.v, limits, planner_cfg, t, v_cap=cap,
                     homotopy="clear-track")


# -- runtime ----------------------------------------------------------------


class _Agent:
    def __init__(self, idx: int, cfg: AgentConfig, sc: ScenarioConfig):
        self.idx = idx
        self.cfg = cfg
        self.id = cfg.id
        self.model = DualTrackModel(cfg.vehicle)
        p = cfg.vehicle.params
        self.half_length, self.half_width = p.half_length, p.half_width
        track = sc.track
        xy, heading = frenet_to_cart(track, FrenetPose(cfg.s, cfg.n))
        self.state = VehicleState(x=float(xy[0]), y=float(xy[1]), psi=float(heading),
                                  vx=float(cfg.v)).as_array()
        self.projector = Projector(track)
        self.pose = self.projector(self.state[X], self.state[Y], self.state[PSI], cfg.v)
        self.s_unwrapped = 0.0
        self.s_prev = self.pose.s
        fu = cfg.friction_usage if cfg.friction_usage is not None else sc.planner.friction_usage
        self.limits = PointMassLimits(a_max=p.a_brake_max * fu,
                                      a_lon_drive_max=min(p.ax_drive_max, sc.planner.a_drive) * fu,
                                      v_max=cfg.v_max if cfg.v_max is not None else p.v_max)
        self.planner_cfg = replace(sc.planner, half_length=p.half_length, half_width=p.half_width)
        self.controller = TrackingController(cfg.vehicle, sc.control)
        self.planner = (Planner(track, self.limits, self.planner_cfg)
                        if cfg.policy == "full-stack" else None)
        self.plan: PlannedTrajectory | None = None
        self.delta_cmd = 0.0
        self.ax_cmd = 0.0
        self.snapshot: tuple[float, float, list] | None = None  # (t, t_valid, [(idx, state)])
        self.seen: set[int] = set()
        self.pending: list[DetectionEvent] = []

    @property
    def active(self) -> bool:
        return self.cfg.policy != "static"

    def update_pose(self, track: TrackModel) -> None:
        s = self.state
        self.pose = self.projector(s[X], s[Y], s[PSI], math.hypot(s[VX], s[VY]))
        ds = self.pose.s - self.s_prev
        if track.closed:
            L = track.total_length
            ds = (ds + 0.5 * L) % L - 0.5 * L
        self.s_unwrapped += ds
        self.s_prev = self.pose.s

    def course_pose(self) -> FrenetPose:
        """Track-frame pose with the heading replaced by the direction of travel."""
        s = self.state
        beta = math.atan2(s[VY], s[VX]) if s[VX] > 0.5 else 0.0
        p = self.pose
        return FrenetPose(p.s, p.n, wrap_angle(p.mu + beta), p.v)

    def box(self):
        return (self.state[X], self.state[Y], self.state[PSI], self.half_length, self.half_width)

    def plan_pose(self, track: TrackModel) -> FrenetPose:
        """Pose with the station unwrapped next to the current plan's start."""
        pose = self.course_pose()
        s = pose.s
        if self.plan is not None and track.closed:
            L = track.total_length
            s0 = self.plan.path_s[0]
            s = s0 + (s - s0 + 0.5 * L) % L - 0.5 * L
        return FrenetPose(s, pose.n, pose.mu, pose.v)


def _off_track(track: TrackModel, a: _Agent) -> bool:
    wl, wr = track.widths_at(a.pose.s)
    return a.pose.n + a.half_width > float(wl) or a.pose.n - a.half_width < -float(wr)


def run_scenario(sc: ScenarioConfig, timing: bool | None = None, record_plans: list | None = None) -> SimLog:
    """Run until a stop condition; collisions and off-track end the run with a verdict."""
    track = sc.track
    per = sc.periods
    dt = per.physics_dt
    k_perc, k_plan = per.steps(per.perception), per.steps(per.planning)
    k_ctrl, k_log = per.steps(per.control), per.steps(per.log)
    delay_steps = int(round(sc.perception.processing_delay / dt))
    det_range = sc.perception.detection_range
    n_steps = int(math.floor(sc.stop.max_time / dt + 1e-9))
    timing = sc.timing if timing is None else timing

    agents = [_Agent(i, a, sc) for i, a in enumerate(sc.agents)]
    ego = agents[0]
    log = SimLog(sc.name, sc.seed, sc.config_hash, timing=timing)
    if "track" in sc.doc:
        log.track_file = str((sc.base_dir / sc.doc["track"]).resolve())
    history: deque = deque(maxlen=delay_steps + 1)
    history.append(np.array([a.state for a in agents]))
    perf = time.perf_counter
    wall0 = perf()

    def verdict(kind: str, detail: str) -> None:
        if log.verdict == "ok":
            log.verdict, log.verdict_detail = kind, detail

    for k in range(n_steps + 1):
        t = k * dt

        # -- perception ----------------------------------------------------
        if k % k_perc == 0:
            past = history[0]
            t_valid = max(t - delay_steps * dt, 0.0)
            for a in agents:
                if a.planner is None:
                    continue
                ex, ey = past[a.idx, X], past[a.idx, Y]
                visible = []
                for b in agents:
                    if b is a:
                        continue
                    rng = math.hypot(past[b.idx, X] - ex, past[b.idx, Y] - ey)
                    if rng <= det_range:
                        visible.append((b.idx, past[b.idx].copy()))
                        if b.idx not in a.seen:
                            a.seen.add(b.idx)
                            ev = DetectionEvent(a.id, b.id, t, t_valid, rng)
                            log.detections.append(ev)
                            a.pending.append(ev)
                a.snapshot = (t, t_valid, visible)

        # -- planning ------------------------------------------------------
        if k % k_plan == 0:
            for a in agents:
                if not a.active:
                    continue
                if a.planner is not None:
                    t_snap, t_valid, visible = a.snapshot
                    c0 = perf()
                    preds = []
                    for idx, st in visible:
                        b = agents[idx]
                        preds.append(predict_opponent(
                            VehicleState.from_array(st), track, a.limits, sc.prediction, b.id,
                            b.half_length, b.half_width, t_valid))
                    c1 = perf()
                    a.plan = a.planner(a.course_pose(), preds, t)
                    c2 = perf()
                    for ev in a.pending:
                        b = agents[sc.agent_index(ev.opponent)]
                        ev.range_at_plan_m = math.hypot(b.state[X] - a.state[X], b.state[Y] - a.state[Y])
                    a.pending.clear()
                    if timing:
                        log.timings["prediction"].append(c1 - c0)
                        log.timings["planning"].append(c2 - c1)
                        a._cycle = (t - t_valid, c2 - c0)
                    log.stage_calls["prediction"] += 1
                    log.stage_calls["planning"] += 1
                else:
                    a.plan = scripted_plan(track, a.pose, t, a.cfg, a.limits, a.planner_cfg)
                log.plans.append(PlanRecord(t, a.id, a.plan.status, a.plan.homotopy,
                                            float(a.plan.friction_ratio().max()), a.plan.reason))
                if record_plans is not None:
                    record_plans.append((a.id, a.plan))

        # -- control -------------------------------------------------------
        if k % k_ctrl == 0:
            for a in agents:
                if not a.active:
                    continue
                c0 = perf()
                cmd = a.controller.step(a.plan_pose(track), a.plan, t)
                c1 = perf()
                a.delta_cmd, a.ax_cmd = cmd.delta_cmd, cmd.ax_cmd
                if a.planner is not None:
                    log.stage_calls["control"] += 1
                    if timing:
                        log.timings["control"].append(c1 - c0)
                        cyc = getattr(a, "_cycle", None)
                        if cyc is not None:
                            log.timings["cycle"].append(cyc[1] + (c1 - c0))
                            log.timings["end-to-end"].append(cyc[0] + cyc[1] + (c1 - c0))
                            a._cycle = None

        # -- logging -------------------------------------------------------
        if k % k_log == 0:
            for a in agents:
                st, p = a.state, a.pose
                plan = a.plan
                log.rows.append((round(t, 9), a.id, float(st[X]), float(st[Y]), float(st[PSI]),
                                 float(st[VX]), float(st[VY]), float(st[R]), float(st[DELTA]),
                                 float(st[AX]), p.s, p.n, p.mu, float(a.delta_cmd),
                                 float(a.ax_cmd), float(a.controller.last_error.e_n),
                                 plan.status if plan else "none",
                                 plan.homotopy if plan else "none"))

        if k == n_steps:
            break

        # -- physics -------------------------------------------------------
        for a in agents:
            if not a.active:
                continue
            try:
                a.state = a.model.step(a.state, a.delta_cmd, a.ax_cmd, dt,
                                       sc.disturbance.sample(a.idx, t))
            except IntegrationError as exc:
                verdict("integration-error", f"{a.id}: {exc}")
            a.state[PSI] = wrap_angle(a.state[PSI])
            a.update_pose(track)
        history.append(np.array([a.state for a in agents]))

        t_next = (k + 1) * dt
        for a in agents:
            if a.active and _off_track(track, a):
                verdict("off-track", f"{a.id} at t={t_next:.3f} s, s={a.pose.s:.1f} m")
        for i in range(len(agents)):
            for j in range(i + 1, len(agents)):
                if obb_overlap(agents[i].box(), agents[j].box()):
                    verdict("collision", f"{agents[i].id}/{agents[j].id} at t={t_next:.3f} s")
        if log.verdict != "ok" and sc.stop.on_collision:
            log.t_end = t_next
            break
        if sc.stop.laps is not None and track.closed:
            if ego.s_unwrapped >= sc.stop.laps * track.total_length:
                log.t_end = t_next
                break
        if sc.stop.distance is not None and ego.s_unwrapped >= sc.stop.distance:
            log.t_end = t_next
            break
    if log.t_end == 0.0:
        log.t_end = k * dt
    log.laps = {a.id: (a.s_unwrapped / track.total_length if track.closed else 0.0) for a in agents}
    log.wall_time = perf() - wall0
    return log


# -- analysis ---------------------------------------------------------------


def first_detection_distance(log: SimLog, ego: str, opponent: str) -> float | None:
    for ev in log.detections:
        if ev.observer == ego and ev.opponent == opponent:
            return ev.range_m
    return None


def cycle_latency_report(log: SimLog) -> dict:
    """Per-stage wall-time statistics in seconds; empty when timing was off."""
    if not log.timing:
        return {"enabled": False, "stages": {}}
    stages = {}
    for name in STAGES + ("cycle", "end-to-end"):
        v = np.asarray(log.timings[name])
        if len(v) == 0:
            continue
        stages[name] = {"count": int(len(v)), "mean": float(v.mean()),
                        "p50": float(np.percentile(v, 50)), "p99": float(np.percentile(v, 99)),
                        "max": float(v.max())}
    return {"enabled": True, "stages": stages, "calls": dict(log.stage_calls)}


def write_latency_csv(report: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stage", "count", "mean_s", "p50_s", "p99_s", "max_s"])
        for name, st in report["stages"].items():
            w.writerow([name, st["count"], f"{st['mean']:.6f}", f"{st['p50']:.6f}",
                        f"{st['p99']:.6f}", f"{st['max']:.6f}"])


def output_paths(out_dir, name: str) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out / f"{name}_log.csv", out / f"{name}_meta.json"
