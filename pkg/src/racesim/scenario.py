"""Scenario files: loading, dotted-key overrides, validation and mirroring."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .control import ControlConfig
from .dynamics import DisturbanceModel, VehicleSpec, load_vehicle
from .lattice import PlannerConfig
from .prediction import PredictionConfig
from .track import TrackModel, load_track

POLICIES = ("full-stack", "scripted", "static")
MAX_AGENTS = 8


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Periods:
    physics_dt: float = 0.005
    perception: float = 0.05
    planning: float = 0.1
    control: float = 0.01
    log: float = 0.05

    def steps(self, period: float) -> int:
        k = round(period / self.physics_dt)
        if k < 1 or abs(k * self.physics_dt - period) > 1e-9:
            raise ConfigError(f"period {period} s is not a positive multiple of {self.physics_dt} s")
        return k


@dataclass(frozen=True)
class PerceptionConfig:
    detection_range: float = 300.0
    processing_delay: float = 0.2


@dataclass(frozen=True)
class StopConfig:
    max_time: float = 60.0
    laps: int | None = None
    on_collision: bool = True
    # stop once the ego station passes this point (unwrapped distance from its start)
    distance: float | None = None


@dataclass(frozen=True)
class AgentConfig:
    id: str
    vehicle: VehicleSpec
    policy: str
    s: float
    n: float
    v: float
    v_max: float | None = None
    friction_usage: float | None = None
    # scripted policies: constant or [[t, value], ...] schedules
    speed_schedule: tuple = ()
    offset_schedule: tuple = ()


@dataclass
class ScenarioConfig:
    name: str
    track: TrackModel
    agents: list[AgentConfig]
    periods: Periods = field(default_factory=Periods)
    perception: PerceptionConfig = field(default_factory=PerceptionConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    prediction: PredictionConfig = field(default_factory=PredictionConfig)
    control: ControlConfig = field(default_factory=ControlConfig)
    disturbance: DisturbanceModel = field(default_factory=DisturbanceModel)
    stop: StopConfig = field(default_factory=StopConfig)
    seed: int = 0
    timing: bool = False
    doc: dict = field(default_factory=dict)
    base_dir: Path = field(default_factory=Path)

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.doc, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def agent_index(self, agent_id: str) -> int:
        for i, a in enumerate(self.agents):
            if a.id == agent_id:
                return i
        raise KeyError(agent_id)


# -- overrides --------------------------------------------------------------


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(doc: dict, assignment: str) -> None:
    """Set ``a.b.0.c=value`` in a nested dict/list; the value is parsed as JSON if possible."""
    if "=" not in assignment:
        raise ConfigError(f"override needs key=value: {assignment!r}")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = doc
    for i, part in enumerate(parts):
        last = i == len(parts) - 1
        if isinstance(node, list):
            try:
                idx = int(part)
                node[idx]
            except (ValueError, IndexError):
                raise ConfigError(f"bad list index {part!r} in {key!r}") from None
            if last:
                node[idx] = _parse_value(raw)
            else:
                node = node[idx]
        else:
            if last:
                node[part] = _parse_value(raw)
            else:
                node = node.setdefault(part, {})
                if not isinstance(node, (dict, list)):
                    raise ConfigError(f"{part!r} in {key!r} is not a section")


# -- parsing ----------------------------------------------------------------


def _take(section: dict, cls, rename: dict[str, str], where: str):
    """Build a dataclass from a section whose keys may carry unit suffixes."""
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for k, v in section.items():
        name = rename.get(k, k)
        if name not in known:
            raise ConfigError(f"unknown key {where}.{k}")
        kwargs[name] = v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _schedule(value, where: str) -> tuple:
    if value is None:
        return ()
    if isinstance(value, (int, float)):
        return ((0.0, float(value)),)
    try:
        pts = tuple((float(t), float(x)) for t, x in value)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: schedule must be a number or [[t, value], ...]") from None
    if any(b[0] <= a[0] for a, b in zip(pts, pts[1:])):
        raise ConfigError(f"{where}: schedule times must increase")
    return pts


def _resolve(base: Path, ref: str) -> Path:
    p = Path(ref)
    return p if p.is_absolute() else base / p


def scenario_from_dict(doc: dict, base_dir: Path | str = ".") -> ScenarioConfig:
    base = Path(base_dir)
    doc = copy.deepcopy(doc)
    try:
        track = load_track(_resolve(base, doc["track"]))
    except KeyError:
        raise ConfigError("scenario needs a 'track' file") from None
    except (OSError, ValueError) as exc:
        raise ConfigError(f"track: {exc}") from None

    periods = _take(doc.get("periods", {}), Periods, {
        "physics_dt_s": "physics_dt", "perception_s": "perception", "planning_s": "planning",
        "control_s": "control", "log_s": "log"}, "periods")
    for name in ("perception", "planning", "control", "log"):
        periods.steps(getattr(periods, name))

    perception = _take(doc.get("perception", {}), PerceptionConfig, {
        "detection_range_m": "detection_range", "processing_delay_s": "processing_delay"},
        "perception")
    if perception.detection_range <= 0:
        raise ConfigError("perception.detection_range_m must be positive")
    if perception.processing_delay < 0:
        raise ConfigError("perception.processing_delay_s must be non-negative")
    k = perception.processing_delay / periods.physics_dt
    if abs(k - round(k)) > 1e-9:
        raise ConfigError("processing delay must be a multiple of the physics step")

    planner = _take(doc.get("planner", {}), PlannerConfig, {}, "planner")
    prediction = _take(doc.get("prediction", {}), PredictionConfig, {}, "prediction")
    control = _take(doc.get("control", {}), ControlConfig, {}, "control")
    if abs(control.dt - periods.control) > 1e-12:
        control = replace(control, dt=periods.control)
    seed = int(doc.get("seed", 0))
    dist = doc.get("disturbance", {})
    disturbance = _take({**dist, "seed": seed} if "seed" not in dist else dist, DisturbanceModel, {
        "wind_mean_n": "wind_mean", "wind_std_n": "wind_std", "lateral_std_n": "lateral_std",
        "update_period_s": "update_period"}, "disturbance")
    stop = _take(doc.get("stop", {}), StopConfig, {
        "max_time_s": "max_time", "distance_m": "distance"}, "stop")

    raw_agents = doc.get("agents", [])
    if not 1 <= len(raw_agents) <= MAX_AGENTS:
        raise ConfigError(f"need 1..{MAX_AGENTS} agents, got {len(raw_agents)}")
    vehicles: dict[str, VehicleSpec] = {}
    agents = []
    for i, a in enumerate(raw_agents):
        where = f"agents.{i}"
        policy = a.get("policy", "full-stack")
        if policy not in POLICIES:
            raise ConfigError(f"{where}.policy must be one of {POLICIES}")
        vref = a.get("vehicle", doc.get("vehicle"))
        if vref is None:
            vehicle = VehicleSpec()
        else:
            if vref not in vehicles:
                try:
                    vehicles[vref] = load_vehicle(_resolve(base, vref))
                except (OSError, ValueError, TypeError) as exc:
                    raise ConfigError(f"{where}.vehicle: {exc}") from None
            vehicle = vehicles[vref]
        known = {"id", "vehicle", "policy", "s_m", "n_m", "v_mps", "v_max_mps", "friction_usage",
                 "speed_mps", "offset_m"}
        extra = set(a) - known
        if extra:
            raise ConfigError(f"unknown key(s) {sorted(extra)} in {where}")
        v = float(a.get("v_mps", 0.0))
        agents.append(AgentConfig(
            id=str(a.get("id", f"car{i}")), vehicle=vehicle, policy=policy,
            s=float(a.get("s_m", 0.0)) % track.total_length if track.closed else float(a.get("s_m", 0.0)),
            n=float(a.get("n_m", 0.0)), v=v,
            v_max=a.get("v_max_mps"), friction_usage=a.get("friction_usage"),
            speed_schedule=_schedule(a.get("speed_mps", v if policy == "scripted" else None),
                                     f"{where}.speed_mps"),
            offset_schedule=_schedule(a.get("offset_m"), f"{where}.offset_m")))
        wl, wr = track.widths_at(agents[-1].s)
        hw = vehicle.params.half_width
        if not -float(wr) + hw <= agents[-1].n <= float(wl) - hw:
            raise ConfigError(f"{where} starts outside the track")
    ids = [a.id for a in agents]
    if len(set(ids)) != len(ids):
        raise ConfigError("agent ids must be unique")

    return ScenarioConfig(name=str(doc.get("name", "scenario")), track=track, agents=agents,
                          periods=periods, perception=perception, planner=planner,
                          prediction=prediction, control=control, disturbance=disturbance,
                          stop=stop, seed=seed, timing=bool(doc.get("timing", False)), doc=doc,
                          base_dir=base)


def read_scenario_doc(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None


def load_scenario(path, overrides=(), seed: int | None = None) -> ScenarioConfig:
    doc = read_scenario_doc(path)
    for o in overrides:
        apply_override(doc, o)
    if seed is not None:
        doc["seed"] = int(seed)
    return scenario_from_dict(doc, Path(path).resolve().parent)


def mirror_doc(doc: dict) -> dict:
    """Mirror a scenario across the track centreline (n -> -n).

    Only meaningful on tracks symmetric about their centreline, which the
    caller checks with :func:`track_is_symmetric`.
    """
    out = copy.deepcopy(doc)
    for a in out.get("agents", []):
        if "n_m" in a:
            a["n_m"] = -float(a["n_m"])
        off = a.get("offset_m")
        if isinstance(off, (int, float)):
            a["offset_m"] = -float(off)
        elif off is not None:
            a["offset_m"] = [[t, -float(x)] for t, x in off]
    if float(out.get("disturbance", {}).get("lateral_std_n", 0.0)) != 0.0:
        raise ConfigError("random lateral disturbances cannot be mirrored")
    return out


def track_is_symmetric(track: TrackModel) -> bool:
    return (bool((track.curvature == 0).all())
            and bool((track.width_left == track.width_right).all()))
