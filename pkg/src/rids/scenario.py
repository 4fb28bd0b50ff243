"""Scenario files: parse, validate, canonicalize and run.

A scenario is one YAML mapping. Units are SI except wheel speeds, which
are in the robot's control units (see ``model.speed_ratio``). Matrices may
be written as a nested list or as ``{diag: [...]}``.
"""

from __future__ import annotations

import copy
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .detector import RidsConfig
from .errors import ModeInadmissible, NoAdmissibleMode, ScenarioError
from .models import (
    DEFAULT_Q,
    DEFAULT_R_ENCODER,
    DEFAULT_R_IPS,
    DEFAULT_R_LIDAR,
    DEFAULT_UAV_Q,
    DEFAULT_WALLS,
    GRAVITY,
    DiffDriveParams,
    RobotModel,
    diffdrive_model,
    uav_hover_control,
    uav_model,
)
from .nuise import build_mode_set, check_admissible
from .sim import ACTUATOR, AttackEvent, AttackSchedule, MissionSpec, PidGains, SimResult, simulate

SCHEMA_VERSION = 1
DIFFDRIVE_SENSORS = ("ips", "encoder", "lidar")
UAV_SENSORS = ("gps", "imu")

_RIDS_FIELDS = {f.name for f in dataclasses.fields(RidsConfig)}


@dataclass
class ScenarioConfig:
    name: str
    description: str
    model_kind: str
    dt: float
    diffdrive: DiffDriveParams | None
    sensors: tuple[str, ...]
    process_cov: np.ndarray
    meas_cov: dict[str, np.ndarray]
    steps_per_meter: float
    mission: MissionSpec | None
    feedback: str
    open_loop_control: np.ndarray | None
    initial_state: np.ndarray | None
    duration: float | None
    schedule: AttackSchedule
    rids: RidsConfig
    seeds: tuple[int, ...]
    expected: dict[str, str] = field(default_factory=dict)

    def build_model(self) -> RobotModel:
        if self.model_kind == "diffdrive":
            return diffdrive_model(
                self.diffdrive,
                process_cov=self.process_cov,
                r_ips=self.meas_cov.get("ips", DEFAULT_R_IPS),
                r_encoder=self.meas_cov.get("encoder", DEFAULT_R_ENCODER),
                r_lidar=self.meas_cov.get("lidar", DEFAULT_R_LIDAR),
                sensors=self.sensors,
            )
        return uav_model(self.process_cov, self.meas_cov["gps"], self.meas_cov["imu"])

    def initial_state_vector(self) -> np.ndarray:
        if self.mission is not None:
            return self.mission.initial_pose()
        return np.asarray(self.initial_state, dtype=float).copy()

    def with_overrides(self, **changes) -> "ScenarioConfig":
        """Copy with top-level fields replaced; ``rids_*`` keys patch the RIDS config."""
        out = copy.copy(self)
        rids_changes = {k[5:]: v for k, v in changes.items() if k.startswith("rids_")}
        for k, v in changes.items():
            if not k.startswith("rids_"):
                if not hasattr(out, k):
                    raise ScenarioError(k, "unknown scenario field")
                setattr(out, k, v)
        if rids_changes:
            try:
                out.rids = dataclasses.replace(out.rids, **rids_changes)
            except (TypeError, ValueError) as exc:
                raise ScenarioError("rids", str(exc)) from exc
        return out


# --------------------------------------------------------------------------
# parsing helpers


def _get(d: dict, key: str, path: str, default=..., kind=None):
    if key not in d:
        if default is ...:
            raise ScenarioError(f"{path}.{key}".lstrip("."), "missing required field")
        return default
    val = d[key]
    if kind is not None and val is not None:
        try:
            val = kind(val)
        except (TypeError, ValueError) as exc:
            raise ScenarioError(f"{path}.{key}".lstrip("."), f"expected {kind.__name__}: {exc}")
    return val


def _mapping(val, path: str) -> dict:
    if val is None:
        return {}
    if not isinstance(val, dict):
        raise ScenarioError(path, "expected a mapping")
    return val


def _check_keys(d: dict, allowed: set[str], path: str) -> None:
    extra = set(d) - allowed
    if extra:
        first = sorted(extra)[0]
        raise ScenarioError(f"{path}.{first}".lstrip("."), "unknown field")


def _finite_float(v, path: str) -> float:
    try:
        out = float(v)
    except (TypeError, ValueError):
        raise ScenarioError(path, f"expected a number, got {v!r}") from None
    if not math.isfinite(out):
        raise ScenarioError(path, "must be finite")
    return out


def _vector(val, path: str, dim: int | None = None) -> np.ndarray:
    if not isinstance(val, (list, tuple)):
        raise ScenarioError(path, "expected a list of numbers")
    out = np.array([_finite_float(v, f"{path}[{i}]") for i, v in enumerate(val)])
    if dim is not None and out.shape != (dim,):
        raise ScenarioError(path, f"expected {dim} entries, got {out.size}")
    return out


def _tuple(vec: np.ndarray) -> tuple[float, ...]:
    return tuple(float(v) for v in vec)


def _matrix(val, path: str, dim: int, definite: bool) -> np.ndarray:
    if isinstance(val, dict):
        _check_keys(val, {"diag"}, path)
        m = np.diag(_vector(val.get("diag"), f"{path}.diag", dim))
    else:
        if not isinstance(val, (list, tuple)) or len(val) != dim:
            raise ScenarioError(path, f"expected a {dim}x{dim} matrix")
        m = np.array([_vector(row, f"{path}[{i}]", dim) for i, row in enumerate(val)])
    if not np.allclose(m, m.T, rtol=0.0, atol=1e-12 * max(1.0, float(np.abs(m).max()))):
        raise ScenarioError(path, "matrix is not symmetric")
    eig = np.linalg.eigvalsh(m)
    if definite and eig.min() <= 0:
        raise ScenarioError(path, "matrix must be positive definite")
    if not definite and eig.min() < -1e-12 * max(1.0, float(np.abs(eig).max())):
        raise ScenarioError(path, "matrix must be positive semi-definite")
    return m


def _matrix_out(m: np.ndarray):
    m = np.asarray(m, dtype=float)
    if np.count_nonzero(m - np.diag(np.diag(m))) == 0:
        return {"diag": [float(v) for v in np.diag(m)]}
    return [[float(v) for v in row] for row in m]


# --------------------------------------------------------------------------
# load / dump


def parse_scenario(data: Any, source: str = "<scenario>") -> ScenarioConfig:
    """Validate a decoded YAML document and build a :class:`ScenarioConfig`."""
    if not isinstance(data, dict):
        raise ScenarioError("<root>", "scenario must be a mapping")
    _check_keys(data, {"schema_version", "name", "description", "model", "noise", "mission",
                       "open_loop", "attacks", "rids", "seeds", "expected"}, "")
    version = data.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ScenarioError("schema_version", f"unsupported version {version!r}")
    name = str(_get(data, "name", "", default=Path(source).stem))
    description = str(_get(data, "description", "", default=""))

    m = _mapping(data.get("model"), "model")
    _check_keys(m, {"kind", "dt", "wheel_base", "speed_ratio", "heading_divisor",
                    "lidar_offset", "walls", "sensors", "encoder_steps_per_meter"}, "model")
    kind = str(_get(m, "kind", "model", default="diffdrive"))
    if kind not in ("diffdrive", "uav"):
        raise ScenarioError("model.kind", f"expected 'diffdrive' or 'uav', got {kind!r}")
    dt = _finite_float(m.get("dt", 0.1), "model.dt")
    if dt <= 0:
        raise ScenarioError("model.dt", "must be positive")

    if kind == "diffdrive":
        walls = m.get("walls")
        if walls is None:
            wall_table = DEFAULT_WALLS
        else:
            if not isinstance(walls, list) or not walls:
                raise ScenarioError("model.walls", "expected a non-empty list of [r, phi]")
            wall_table = tuple(_tuple(_vector(w, f"model.walls[{i}]", 2)) for i, w in enumerate(walls))
        try:
            params = DiffDriveParams(
                wheel_base=_finite_float(m.get("wheel_base", 0.09), "model.wheel_base"),
                speed_ratio=_finite_float(m.get("speed_ratio", 144010.0), "model.speed_ratio"),
                lidar_offset=_tuple(_vector(m.get("lidar_offset", [0.0, 0.0]), "model.lidar_offset", 2)),
                walls=tuple((float(r), float(p)) for r, p in wall_table),
                heading_divisor=str(m.get("heading_divisor", "half_base")),
            )
        except ValueError as exc:
            raise ScenarioError("model", str(exc)) from exc
        allowed, default_sensors = DIFFDRIVE_SENSORS, DIFFDRIVE_SENSORS
        state_dim, control_dim = 3, 2
    else:
        params = None
        allowed, default_sensors = UAV_SENSORS, UAV_SENSORS
        state_dim, control_dim = 9, 6
    sensors = tuple(m.get("sensors", default_sensors))
    for i, s in enumerate(sensors):
        if s not in allowed:
            raise ScenarioError(f"model.sensors[{i}]", f"unknown sensor {s!r} for {kind}")
    if kind == "uav" and sensors != UAV_SENSORS:
        raise ScenarioError("model.sensors", "the UAV model always carries gps and imu")
    if len(set(sensors)) != len(sensors) or not sensors:
        raise ScenarioError("model.sensors", "need a non-empty list without duplicates")
    steps_per_meter = _finite_float(m.get("encoder_steps_per_meter", 10000.0),
                                    "model.encoder_steps_per_meter")
    if steps_per_meter <= 0:
        raise ScenarioError("model.encoder_steps_per_meter", "must be positive")

    noise = _mapping(data.get("noise"), "noise")
    _check_keys(noise, {"Q", "R"}, "noise")
    default_q = DEFAULT_Q if kind == "diffdrive" else DEFAULT_UAV_Q
    Q = _matrix(noise["Q"], "noise.Q", state_dim, False) if "Q" in noise else default_q.copy()
    r_in = _mapping(noise.get("R"), "noise.R")
    _check_keys(r_in, set(sensors), "noise.R")
    probe = diffdrive_model(params, sensors=sensors) if kind == "diffdrive" else uav_model()
    meas_cov = {}
    for s in probe.sensors:
        if s.name in r_in:
            meas_cov[s.name] = _matrix(r_in[s.name], f"noise.R.{s.name}", s.reading_dim, True)
        else:
            meas_cov[s.name] = s.meas_cov.copy()

    mission = None
    feedback = "estimate"
    control = x0 = duration = None
    if kind == "diffdrive":
        ms = _mapping(data.get("mission"), "mission")
        _check_keys(ms, {"start", "start_heading", "waypoints", "cruise", "pid", "goal_tolerance",
                         "waypoint_tolerance", "max_duration", "feedback", "arena"}, "mission")
        wps = ms.get("waypoints")
        if not isinstance(wps, list) or not wps:
            raise ScenarioError("mission.waypoints", "expected a non-empty list of [x, y]")
        pid = _mapping(ms.get("pid"), "mission.pid")
        _check_keys(pid, {"p", "i", "d"}, "mission.pid")
        heading = ms.get("start_heading")
        try:
            mission = MissionSpec(
                waypoints=tuple(_tuple(_vector(w, f"mission.waypoints[{i}]", 2)) for i, w in enumerate(wps)),
                start=_tuple(_vector(ms.get("start", [0.0, -1.2]), "mission.start", 2)),
                start_heading=None if heading is None else _finite_float(heading, "mission.start_heading"),
                cruise=_finite_float(ms.get("cruise", 7000.0), "mission.cruise"),
                gains=PidGains(
                    _finite_float(pid.get("p", 0.8), "mission.pid.p"),
                    _finite_float(pid.get("i", 0.0), "mission.pid.i"),
                    _finite_float(pid.get("d", 0.001), "mission.pid.d"),
                ),
                goal_tolerance=_finite_float(ms.get("goal_tolerance", 0.05), "mission.goal_tolerance"),
                waypoint_tolerance=_finite_float(ms.get("waypoint_tolerance", 0.08),
                                                 "mission.waypoint_tolerance"),
                max_duration=_finite_float(ms.get("max_duration", 60.0), "mission.max_duration"),
                arena=_tuple(_vector(ms.get("arena", [3.0, 4.0]), "mission.arena", 2)),
            )
        except ValueError as exc:
            if isinstance(exc, ScenarioError):
                raise
            raise ScenarioError("mission", str(exc)) from exc
        feedback = str(ms.get("feedback", "estimate"))
        if feedback not in ("estimate", "ips_raw"):
            raise ScenarioError("mission.feedback", "expected 'estimate' or 'ips_raw'")
        if feedback == "ips_raw" and "ips" not in sensors:
            raise ScenarioError("mission.feedback", "ips_raw feedback needs the ips sensor")
        if "open_loop" in data:
            raise ScenarioError("open_loop", "only the uav model runs open loop")
    else:
        ol = _mapping(data.get("open_loop"), "open_loop")
        _check_keys(ol, {"control", "initial_state", "duration"}, "open_loop")
        control = (_vector(ol["control"], "open_loop.control", control_dim)
                   if "control" in ol else uav_hover_control(GRAVITY))
        x0 = (_vector(ol["initial_state"], "open_loop.initial_state", state_dim)
              if "initial_state" in ol else np.zeros(state_dim))
        if abs(x0[7]) >= 0.5 * math.pi - 1e-3:
            raise ScenarioError("open_loop.initial_state", "pitch too close to +-pi/2")
        duration = _finite_float(ol.get("duration", 20.0), "open_loop.duration")
        if duration <= 0:
            raise ScenarioError("open_loop.duration", "must be positive")
        if "mission" in data:
            raise ScenarioError("mission", "the uav model runs open loop; use open_loop")

    dims = {s.name: s.reading_dim for s in probe.sensors}
    events = []
    attacks = data.get("attacks") or []
    if not isinstance(attacks, list):
        raise ScenarioError("attacks", "expected a list")
    for i, a in enumerate(attacks):
        path = f"attacks[{i}]"
        a = _mapping(a, path)
        _check_keys(a, {"target", "onset", "offset", "kind", "vector", "wheels"}, path)
        target = str(_get(a, "target", path))
        if target != ACTUATOR and target not in dims:
            raise ScenarioError(f"{path}.target", f"unknown target {target!r}")
        akind = str(a.get("kind", "additive"))
        vec = a.get("vector")
        if vec is not None:
            want = control_dim if target == ACTUATOR else (2 if akind == "encoder_steps" else dims[target])
            vec = tuple(float(v) for v in _vector(vec, f"{path}.vector", want))
        if akind == "encoder_steps" and (target != "encoder" or kind != "diffdrive"):
            raise ScenarioError(f"{path}.kind", "encoder_steps applies to the diffdrive encoder")
        wheels = a.get("wheels", [])
        if not isinstance(wheels, list) or any(
            not isinstance(w, int) or not 0 <= w < control_dim for w in wheels
        ):
            raise ScenarioError(f"{path}.wheels", f"expected indices in [0, {control_dim})")
        offset = a.get("offset")
        try:
            events.append(AttackEvent(
                target=target,
                onset=_finite_float(_get(a, "onset", path), f"{path}.onset"),
                offset=None if offset is None else _finite_float(offset, f"{path}.offset"),
                kind=akind,
                vector=vec,
                wheels=tuple(wheels),
            ))
        except ValueError as exc:
            if isinstance(exc, ScenarioError):
                raise
            raise ScenarioError(path, str(exc)) from exc
    try:
        schedule = AttackSchedule(tuple(events))
    except ValueError as exc:
        raise ScenarioError("attacks", str(exc)) from exc

    r = _mapping(data.get("rids"), "rids")
    _check_keys(r, _RIDS_FIELDS, "rids")
    r = dict(r)
    if "groups" in r:
        r["groups"] = tuple(tuple(g) for g in r["groups"])
    try:
        rids = RidsConfig(**r)
    except (TypeError, ValueError) as exc:
        raise ScenarioError("rids", str(exc)) from exc

    seeds = data.get("seeds", [0])
    if isinstance(seeds, int) or not isinstance(seeds, list) or not seeds or any(
        not isinstance(s, int) or isinstance(s, bool) or s < 0 for s in seeds
    ):
        raise ScenarioError("seeds", "expected a non-empty list of non-negative integers")
    expected = _mapping(data.get("expected"), "expected")
    _check_keys(expected, {"sensor_transition", "actuator_transition"}, "expected")

    cfg = ScenarioConfig(
        name=name, description=description, model_kind=kind, dt=dt, diffdrive=params,
        sensors=sensors, process_cov=Q, meas_cov=meas_cov, steps_per_meter=steps_per_meter,
        mission=mission, feedback=feedback, open_loop_control=control, initial_state=x0,
        duration=duration, schedule=schedule, rids=rids, seeds=tuple(seeds),
        expected={k: str(v) for k, v in expected.items()},
    )
    validate_modes(cfg)
    return cfg


def validate_modes(cfg: ScenarioConfig) -> None:
    """Build the mode set and check admissibility at the initial state."""
    model = cfg.build_model()
    try:
        modes = build_mode_set(model, cfg.rids.mode_policy, cfg.rids.groups)
    except (ValueError, KeyError, NoAdmissibleMode) as exc:
        raise ScenarioError("rids.mode_policy", str(exc)) from exc
    if cfg.mission is not None:
        x0, u0 = cfg.mission.initial_pose(), np.full(2, cfg.mission.cruise)
    else:
        x0, u0 = cfg.initial_state, cfg.open_loop_control
    try:
        check_admissible(model, modes, x0, cfg.dt, u0)
    except ModeInadmissible as exc:
        raise ScenarioError("rids.mode_policy", str(exc)) from exc


def load_scenario(path: str | Path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError("<file>", f"cannot read {path}: {exc.strerror}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ScenarioError("<yaml>", str(exc).replace("\n", " ")) from exc
    return parse_scenario(data, str(path))


def scenario_to_dict(cfg: ScenarioConfig) -> dict:
    """Canonical form: every field explicit, in a fixed order."""
    out: dict[str, Any] = {
        "schema_version": SCHEMA_VERSION,
        "name": cfg.name,
        "description": cfg.description,
    }
    model: dict[str, Any] = {"kind": cfg.model_kind, "dt": cfg.dt}
    if cfg.model_kind == "diffdrive":
        p = cfg.diffdrive
        model.update({
            "wheel_base": p.wheel_base,
            "speed_ratio": p.speed_ratio,
            "heading_divisor": p.heading_divisor,
            "lidar_offset": list(p.lidar_offset),
            "walls": [list(w) for w in p.walls],
        })
    model["sensors"] = list(cfg.sensors)
    model["encoder_steps_per_meter"] = cfg.steps_per_meter
    out["model"] = model
    out["noise"] = {
        "Q": _matrix_out(cfg.process_cov),
        "R": {name: _matrix_out(cfg.meas_cov[name]) for name in cfg.sensors},
    }
    if cfg.mission is not None:
        ms = cfg.mission
        out["mission"] = {
            "start": list(ms.start),
            "start_heading": ms.start_heading,
            "waypoints": [list(w) for w in ms.waypoints],
            "cruise": ms.cruise,
            "pid": {"p": ms.gains.p, "i": ms.gains.i, "d": ms.gains.d},
            "goal_tolerance": ms.goal_tolerance,
            "waypoint_tolerance": ms.waypoint_tolerance,
            "max_duration": ms.max_duration,
            "feedback": cfg.feedback,
            "arena": list(ms.arena),
        }
    else:
        out["open_loop"] = {
            "control": [float(v) for v in cfg.open_loop_control],
            "initial_state": [float(v) for v in cfg.initial_state],
            "duration": cfg.duration,
        }
    attacks = []
    for e in cfg.schedule.events:
        a: dict[str, Any] = {"target": e.target, "onset": e.onset, "offset": e.offset, "kind": e.kind}
        if e.vector is not None:
            a["vector"] = list(e.vector)
        if e.wheels:
            a["wheels"] = list(e.wheels)
        attacks.append(a)
    out["attacks"] = attacks
    rids = dataclasses.asdict(cfg.rids)
    rids["groups"] = [list(g) for g in cfg.rids.groups]
    out["rids"] = rids
    out["seeds"] = list(cfg.seeds)
    if cfg.expected:
        out["expected"] = dict(cfg.expected)
    return out


def dump_scenario(cfg: ScenarioConfig) -> str:
    return yaml.safe_dump(scenario_to_dict(cfg), sort_keys=False, default_flow_style=None)


def run_scenario(cfg: ScenarioConfig, seed: int | None = None) -> SimResult:
    model = cfg.build_model()
    seed = cfg.seeds[0] if seed is None else seed
    if cfg.model_kind == "diffdrive":
        return simulate(
            model, cfg.mission, cfg.schedule, cfg.rids, seed, dt=cfg.dt, params=cfg.diffdrive,
            feedback=cfg.feedback, steps_per_meter=cfg.steps_per_meter,
        )
    control = np.asarray(cfg.open_loop_control, dtype=float)
    return simulate(
        model, None, cfg.schedule, cfg.rids, seed, dt=cfg.dt,
        x0=cfg.initial_state, control=lambda _x, _k: control,
        max_iterations=int(round(cfg.duration / cfg.dt)),
    )
