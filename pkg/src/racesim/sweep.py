"""Evasion sweep: minimum detection range that still allows passing a parked car."""

from __future__ import annotations

import copy
import csv
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import braking_distance, delay_distance
from .scenario import ConfigError, scenario_from_dict
from .sim import run_scenario

BRAKE_DECEL = 14.0


@dataclass(frozen=True)
class SweepSpec:
    speeds: tuple[float, ...]              # m/s
    ranges: tuple[float, ...]              # m, descending
    resolution: float = 1.0
    with_delay: bool = False
    lead_time: float = 1.0                 # ego starts this long (plus 20 m) outside the range
    run_out: float = 500.0                 # distance past the obstacle to check the return
    return_band: float = 2.0

    def __post_init__(self):
        if not self.speeds or not self.ranges:
            raise ConfigError("sweep needs at least one speed and one range")
        if any(b >= a for a, b in zip(self.ranges, self.ranges[1:])):
            raise ConfigError("sweep ranges must be strictly descending")
        if min(self.speeds) <= 0 or min(self.ranges) <= 0:
            raise ConfigError("speeds and ranges must be positive")


@dataclass(frozen=True)
class Trial:
    speed: float
    range_m: float
    success: bool
    verdict: str
    detail: str = ""


@dataclass
class SpeedResult:
    speed: float
    min_detection: float | None
    brake_distance: float
    delay_adjusted: float | None
    trials: list[Trial] = field(default_factory=list)


@dataclass
class SweepResult:
    rows: list[SpeedResult]
    t_proc: float

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["speed_mps", "min_detection_m", "brake_distance_m", "delay_adjusted_m"])
            for r in self.rows:
                w.writerow([repr(r.speed), "" if r.min_detection is None else repr(r.min_detection),
                            repr(r.brake_distance),
                            "" if r.delay_adjusted is None else repr(r.delay_adjusted)])

    def write_trials_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["speed_mps", "range_m", "success", "verdict", "detail"])
            for r in self.rows:
                for t in r.trials:
                    w.writerow([repr(t.speed), repr(t.range_m), int(t.success), t.verdict, t.detail])

    def minimum(self, speed: float) -> float | None:
        for r in self.rows:
            if abs(r.speed - speed) < 1e-9:
                return r.min_detection
        raise KeyError(speed)


def _obstacle(doc: dict) -> tuple[int, dict]:
    for i, a in enumerate(doc["agents"]):
        if a.get("policy") == "static":
            return i, a
    raise ConfigError("evasion scenario needs a static agent")


def trial_doc(doc: dict, speed: float, range_m: float, spec: SweepSpec) -> dict:
    """Scenario document for one trial: ego placed so it detects the obstacle at ``range_m``."""
    out = copy.deepcopy(doc)
    _, obs = _obstacle(out)
    s_obs = float(obs["s_m"])
    ego = out["agents"][0]
    start = s_obs - range_m - (speed * spec.lead_time + 20.0)
    ego.update(s_m=start, v_mps=speed, v_max_mps=speed)
    out.setdefault("perception", {})["detection_range_m"] = range_m
    if not spec.with_delay:
        out["perception"]["processing_delay_s"] = 0.0
    run = s_obs - start + spec.run_out
    out["stop"] = {"distance_m": run, "max_time_s": run / speed + 30.0, "on_collision": True}
    return out


def run_trial(doc: dict, base_dir, speed: float, range_m: float, spec: SweepSpec) -> Trial:
    sc = scenario_from_dict(trial_doc(doc, speed, range_m, spec), base_dir)
    n0 = sc.agents[0].n
    log = run_scenario(sc, timing=False)
    if log.verdict != "ok":
        return Trial(speed, range_m, False, log.verdict, log.verdict_detail)
    d = log.agent_series(sc.agents[0].id)
    if d["t_s"].size == 0 or log.laps[sc.agents[0].id] * sc.track.total_length + 1e-6 < sc.stop.distance:
        return Trial(speed, range_m, False, "incomplete", "did not reach the run-out point")
    if abs(d["n_m"][-1] - n0) > spec.return_band:
        return Trial(speed, range_m, False, "no-return", f"n={d['n_m'][-1]:.2f} m at run-out")
    return Trial(speed, range_m, True, "ok")


def search_speed(doc: dict, base_dir, speed: float, spec: SweepSpec, t_proc: float) -> SpeedResult:
    """Bisection over the descending range grid, then refinement to ``spec.resolution``.

    Success is assumed monotone in range; every range above the reported
    minimum that was tried succeeded.
    """
    trials: list[Trial] = []

    def test(r: float) -> bool:
        t = run_trial(doc, base_dir, speed, r, spec)
        trials.append(t)
        return t.success

    ranges = spec.ranges
    result = SpeedResult(speed, None, braking_distance(speed, BRAKE_DECEL), None, trials)
    if not test(ranges[0]):
        return result
    if test(ranges[-1]):
        best = ranges[-1]
    else:
        ok, bad = 0, len(ranges) - 1
        while bad - ok > 1:
            mid = (ok + bad) // 2
            if test(ranges[mid]):
                ok = mid
            else:
                bad = mid
        hi, lo = ranges[ok], ranges[bad]
        while hi - lo > spec.resolution + 1e-9:
            mid = lo + spec.resolution * math.floor((hi - lo) / (2 * spec.resolution))
            mid = max(mid, lo + spec.resolution)
            if test(mid):
                hi = mid
            else:
                lo = mid
        best = hi
    result.min_detection = float(best)
    result.delay_adjusted = float(best) + delay_distance(speed, t_proc)
    return result


def run_sweep(doc: dict, base_dir, spec: SweepSpec, jobs: int | None = None) -> SweepResult:
    t_proc = float(doc.get("perception", {}).get("processing_delay_s", 0.2))
    base_dir = Path(base_dir)
    jobs = max(1, min(jobs or len(os.sched_getaffinity(0)), len(spec.speeds)))
    if jobs == 1:
        rows = [search_speed(doc, base_dir, v, spec, t_proc) for v in spec.speeds]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futs = [pool.submit(search_speed, doc, base_dir, v, spec, t_proc) for v in spec.speeds]
            rows = [f.result() for f in futs]
    return SweepResult(rows, t_proc)


def default_speeds() -> tuple[float, ...]:
    return tuple(float(k) / 3.6 for k in np.arange(100.0, 300.0 + 1e-9, 25.0))


def default_ranges() -> tuple[float, ...]:
    return tuple(float(r) for r in np.arange(300.0, 10.0 - 1e-9, -5.0))
