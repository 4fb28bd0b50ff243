"""Closed-loop simulator with scheduled attacks, plus run metrics.

Timeline of iteration ``k`` (time ``t_k = k * dt``):

1. the controller plans ``u_{k-1}`` from the detector's estimate (or the raw
   IPS reading) at ``k-1``;
2. the actuator attack active at ``t_{k-1}`` is added, giving the executed
   control;
3. the true state advances with process noise;
4. every sensor reports ``h_i(x_k) + d^s_i + noise`` using the sensor attacks
   active at ``t_k``;
5. the detector consumes ``(u_{k-1}, z_k)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .detector import (
    Detection,
    RidsConfig,
    actuator_mode_label,
    rids_init,
    rids_step,
    sensor_mode_label,
)
from .errors import Diverged, ScenarioError
from .models import DiffDriveParams, RobotModel, encoder_convert
from .numerics import mvn_sample

ACTUATOR = "actuator"
ATTACK_KINDS = ("additive", "jam", "constant", "encoder_steps")


@dataclass(frozen=True)
class AttackEvent:
    """One scheduled corruption.

    ``kind``:

    * ``additive``: ``vector`` is added to the command (control units) or the
      reading (sensor units);
    * ``jam``: actuator override; the wheels listed in ``wheels`` execute 0;
    * ``constant``: sensor override; the reading is forced to ``vector``
      (zeros if omitted), before measurement noise;
    * ``encoder_steps``: ``vector = (left, right)`` extra encoder steps,
      converted to metres by the encoder workflow.
    """

    target: str
    onset: float
    offset: float | None = None
    kind: str = "additive"
    vector: tuple[float, ...] | None = None
    wheels: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.offset is not None and self.offset <= self.onset:
            raise ValueError("attack offset must be later than its onset")
        if self.kind == "additive" and self.vector is None:
            raise ValueError("additive attacks need a vector")
        if self.kind == "jam" and self.target != ACTUATOR:
            raise ValueError("jam attacks target the actuator")
        if self.kind in ("constant", "encoder_steps") and self.target == ACTUATOR:
            raise ValueError(f"{self.kind} attacks target a sensor")

    def active(self, t: float) -> bool:
        return t >= self.onset - 1e-9 and (self.offset is None or t < self.offset - 1e-9)


@dataclass(frozen=True)
class AttackSchedule:
    events: tuple[AttackEvent, ...] = ()

    def __post_init__(self):
        by_target: dict[str, list[AttackEvent]] = {}
        for e in self.events:
            by_target.setdefault(e.target, []).append(e)
        for target, evs in by_target.items():
            evs = sorted(evs, key=lambda e: e.onset)
            for a, b in zip(evs, evs[1:]):
                if a.offset is None or a.offset > b.onset + 1e-9:
                    raise ValueError(f"attacks on {target} overlap in time")

    def active(self, target: str, t: float) -> AttackEvent | None:
        for e in self.events:
            if e.target == target and e.active(t):
                return e
        return None

    @property
    def change_times(self) -> list[tuple[float, str]]:
        out = []
        for e in self.events:
            out.append((e.onset, e.target))
            if e.offset is not None:
                out.append((e.offset, e.target))
        return sorted(out)


@dataclass(frozen=True)
class PidGains:
    p: float = 0.8
    i: float = 0.0
    d: float = 0.001


@dataclass(frozen=True)
class MissionSpec:
    """Waypoint mission for the ground robot.

    ``start`` is the initial pose; with ``start_heading=None`` the robot faces
    the first waypoint.
    """

    waypoints: tuple[tuple[float, float], ...]
    start: tuple[float, float] = (0.0, -1.2)
    start_heading: float | None = None
    cruise: float = 7000.0
    gains: PidGains = PidGains()
    goal_tolerance: float = 0.05
    waypoint_tolerance: float = 0.08
    max_duration: float = 60.0
    arena: tuple[float, float] = (3.0, 4.0)

    def __post_init__(self):
        if self.cruise <= 0:
            raise ValueError("cruise speed must be positive")
        if not self.waypoints:
            raise ValueError("mission needs at least one waypoint")
        hx, hy = 0.5 * self.arena[0], 0.5 * self.arena[1]
        for wx, wy in (self.start, *self.waypoints):
            if abs(wx) > hx or abs(wy) > hy:
                raise ValueError(f"point ({wx}, {wy}) lies outside the arena")

    def initial_pose(self) -> np.ndarray:
        sx, sy = self.start
        if self.start_heading is None:
            wx, wy = self.waypoints[0]
            heading = math.atan2(wy - sy, wx - sx)
        else:
            heading = self.start_heading
        return np.array([sx, sy, heading])


def wrap_angle(a: float) -> float:
    return (a + math.pi) % (2.0 * math.pi) - math.pi


@dataclass
class PidState:
    integral: float = 0.0
    prev_error: float | None = None


def pid_track(
    x_hat: np.ndarray,
    waypoint: Sequence[float],
    gains: PidGains,
    cruise: float,
    dt: float,
    state: PidState | None = None,
) -> np.ndarray:
    """Heading-error PID around a constant cruise speed.

    Returns ``(v_L, v_R)`` in control units, each clamped to ``+-2 cruise``.
    ``state`` carries the integral and previous error; it is updated in place.
    """
    state = PidState() if state is None else state
    want = math.atan2(waypoint[1] - x_hat[1], waypoint[0] - x_hat[0])
    err = wrap_angle(want - float(x_hat[2]))
    state.integral += err * dt
    deriv = 0.0 if state.prev_error is None or dt <= 0 else (err - state.prev_error) / dt
    state.prev_error = err
    omega = cruise * (gains.p * err + gains.i * state.integral + gains.d * deriv)
    lim = 2.0 * cruise
    return np.clip(np.array([cruise - omega, cruise + omega]), -lim, lim)


@dataclass
class IterationTrace:
    k: int
    t: float
    x_true: np.ndarray
    u_planned: np.ndarray
    u_executed: np.ndarray
    d_a_true: np.ndarray
    z_true: list[np.ndarray]
    z_delivered: list[np.ndarray]
    d_s_true: list[np.ndarray]
    noise: list[np.ndarray]
    detection: Detection
    sensor_truth: tuple[str, ...]
    actuator_truth: bool


@dataclass
class ChannelMetrics:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def fpr(self) -> float | None:
        n = self.fp + self.tn
        return self.fp / n if n else None

    @property
    def fnr(self) -> float | None:
        n = self.fn + self.tp
        return self.fn / n if n else None

    @property
    def tpr(self) -> float | None:
        n = self.fn + self.tp
        return self.tp / n if n else None

    def as_dict(self) -> dict:
        return {
            "tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn,
            "fpr": self.fpr, "fnr": self.fnr,
        }


@dataclass
class RunMetrics:
    sensor: ChannelMetrics
    actuator: ChannelMetrics
    delays: list[dict]
    quantification: list[dict]
    mode_accuracy: float | None
    sensor_transitions: list[str]
    actuator_transitions: list[str]
    out_of_threat_model: bool
    iterations: int
    reached_goal: bool

    def as_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "reached_goal": self.reached_goal,
            "out_of_threat_model": self.out_of_threat_model,
            "sensor": self.sensor.as_dict(),
            "actuator": self.actuator.as_dict(),
            "delays": self.delays,
            "quantification": self.quantification,
            "mode_accuracy": self.mode_accuracy,
            "sensor_mode_transition": "->".join(self.sensor_transitions),
            "actuator_mode_transition": "->".join(self.actuator_transitions),
        }


@dataclass
class SimResult:
    traces: list[IterationTrace]
    metrics: RunMetrics
    sensor_names: list[str]


def _sensor_attack(
    event: AttackEvent | None,
    sensor_index: int,
    model: RobotModel,
    h_true: np.ndarray,
    prev_estimate: np.ndarray,
    executed: np.ndarray,
    dt: float,
    params: DiffDriveParams | None,
    steps_per_meter: float,
) -> np.ndarray:
    dim = model.sensors[sensor_index].reading_dim
    if event is None:
        return np.zeros(dim)
    if event.kind == "additive":
        vec = np.asarray(event.vector, dtype=float)
        if vec.shape != (dim,):
            raise ScenarioError("attacks.vector", f"{event.target} attack needs {dim} entries")
        return vec
    if event.kind == "constant":
        value = np.zeros(dim) if event.vector is None else np.asarray(event.vector, dtype=float)
        return value - h_true
    # encoder_steps: extra wheel travel pushed through the dead-reckoning conversion
    if params is None:
        raise ScenarioError("attacks.kind", "encoder_steps needs the differential-drive model")
    steps = np.zeros(2) if event.vector is None else np.asarray(event.vector, dtype=float)
    travel = dt * executed / params.speed_ratio
    extra = steps / steps_per_meter
    clean = encoder_convert(prev_estimate, travel[0], travel[1], params)
    dirty = encoder_convert(prev_estimate, travel[0] + extra[0], travel[1] + extra[1], params)
    return dirty - clean


def _actuator_attack(event: AttackEvent | None, u: np.ndarray) -> np.ndarray:
    if event is None:
        return np.zeros_like(u)
    if event.kind == "jam":
        d = np.zeros_like(u)
        for w in event.wheels:
            d[w] = -u[w]
        return d
    vec = np.asarray(event.vector, dtype=float)
    if vec.shape != u.shape:
        raise ScenarioError("attacks.vector", f"actuator attack needs {u.size} entries")
    return vec


def default_initial_cov(model: RobotModel) -> np.ndarray:
    """Initial estimate covariance: the diagonal of the process noise."""
    return np.diag(np.diag(model.process_cov))


def simulate(
    model: RobotModel,
    mission: MissionSpec | None,
    schedule: AttackSchedule,
    config: RidsConfig,
    seed: int,
    dt: float = 0.1,
    params: DiffDriveParams | None = None,
    feedback: str = "estimate",
    steps_per_meter: float = 10000.0,
    initial_cov: np.ndarray | None = None,
    x0: np.ndarray | None = None,
    control: Callable[[np.ndarray, int], np.ndarray] | None = None,
    max_iterations: int | None = None,
    min_dwell: int = 3,
) -> SimResult:
    """Run one closed-loop mission and score it.

    With ``mission=None`` the run is open loop: ``control(x_hat, k)`` supplies
    the command and ``max_iterations`` bounds the run (used for the UAV).

    Raises
    ------
    Diverged
        If the true position leaves the arena by more than ten diagonals.
    """
    if feedback not in ("estimate", "ips_raw"):
        raise ValueError("feedback must be 'estimate' or 'ips_raw'")
    if dt <= 0:
        raise ValueError("dt must be positive")
    rng = np.random.default_rng(seed)
    n = model.state_dim
    if mission is not None:
        x = mission.initial_pose() if x0 is None else np.asarray(x0, float)
        arena = mission.arena
        limit = int(round(mission.max_duration / dt))
    else:
        if control is None or x0 is None or max_iterations is None:
            raise ValueError("open-loop runs need control, x0 and max_iterations")
        x = np.asarray(x0, float)
        arena = None
        limit = max_iterations
    if max_iterations is not None:
        limit = min(limit, max_iterations)
    P0 = default_initial_cov(model) if initial_cov is None else np.asarray(initial_cov)
    det_state = rids_init(model, config, x.copy(), P0, dt)
    names = model.sensor_names
    ips_idx = names.index("ips") if "ips" in names else None
    if feedback == "ips_raw" and ips_idx is None:
        raise ValueError("ips_raw feedback needs an IPS sensor")

    traces: list[IterationTrace] = []
    pid = PidState()
    wp_index = 0
    feedback_pose = x.copy()
    reached = False
    diag = math.hypot(*arena) if arena is not None else None

    for k in range(1, limit + 1):
        t_prev, t_now = (k - 1) * dt, k * dt
        if mission is not None:
            wp = mission.waypoints[wp_index]
            u = pid_track(feedback_pose, wp, mission.gains, mission.cruise, dt, pid)
        else:
            u = np.asarray(control(det_state.belief.x, k - 1), dtype=float)
        d_a = _actuator_attack(schedule.active(ACTUATOR, t_prev), u)
        executed = u + d_a
        prev_estimate = det_state.belief.x.copy()

        x = model.kinematic(x, executed, dt) + mvn_sample(np.zeros(n), model.process_cov, rng)
        if diag is not None and (abs(x[0]) > 0.5 * arena[0] + 10 * diag
                                 or abs(x[1]) > 0.5 * arena[1] + 10 * diag):
            raise Diverged(f"true state left the arena at iteration {k}: {x[:2]}")

        z_true, z_del, ds_true, noises = [], [], [], []
        truth_sensors = []
        for i, s in enumerate(model.sensors):
            h = s.measure(x)
            event = schedule.active(s.name, t_now)
            ds = _sensor_attack(event, i, model, h, prev_estimate, executed, dt, params,
                                steps_per_meter)
            noise = mvn_sample(np.zeros(s.reading_dim), s.meas_cov, rng)
            z_true.append(h)
            ds_true.append(ds)
            noises.append(noise)
            z_del.append(h + ds + noise)
            if event is not None:
                truth_sensors.append(s.name)

        det = rids_step(det_state, u, z_del)
        traces.append(IterationTrace(
            k=k, t=t_now, x_true=x.copy(), u_planned=u, u_executed=executed, d_a_true=d_a,
            z_true=z_true, z_delivered=z_del, d_s_true=ds_true, noise=noises, detection=det,
            sensor_truth=tuple(truth_sensors),
            actuator_truth=schedule.active(ACTUATOR, t_prev) is not None,
        ))

        if mission is not None:
            feedback_pose = det.x if feedback == "estimate" else z_del[ips_idx]
            wx, wy = mission.waypoints[wp_index]
            dist = math.hypot(wx - feedback_pose[0], wy - feedback_pose[1])
            last = wp_index == len(mission.waypoints) - 1
            if last and dist <= mission.goal_tolerance:
                reached = True
                break
            if not last and dist <= mission.waypoint_tolerance:
                wp_index += 1

    metrics = compute_metrics(traces, schedule, names, dt, warmup=config.warmup_iterations,
                              min_dwell=min_dwell)
    metrics.reached_goal = reached
    return SimResult(traces, metrics, names)


def _dwell_sequence(labels: Sequence[str], min_dwell: int) -> list[str]:
    """Collapse ``labels`` to the runs lasting at least ``min_dwell`` iterations."""
    seq: list[str] = []
    i = 0
    while i < len(labels):
        j = i
        while j < len(labels) and labels[j] == labels[i]:
            j += 1
        if j - i >= min_dwell and (not seq or seq[-1] != labels[i]):
            seq.append(labels[i])
        i = j
    return seq


def compute_metrics(
    traces: Sequence[IterationTrace],
    schedule: AttackSchedule,
    sensor_names: Sequence[str],
    dt: float,
    warmup: int | None = None,
    min_dwell: int = 3,
) -> RunMetrics:
    """Score a run iteration by iteration.

    A positive is an iteration with an alarm. It is a true positive only if
    the confirmed target matches the scheduled one (the attacked sensor set,
    or simply "under attack" for the actuator channel). Delays run from each
    onset or revocation to the first iteration whose detected condition
    matches the new truth. Transition sequences skip the first ``warmup``
    iterations, whose tests are forced negative.
    """
    sensor = ChannelMetrics()
    actuator = ChannelMetrics()
    detected_s, detected_a, truth_s, truth_a = [], [], [], []
    for tr in traces:
        det = tr.detection
        d_s = frozenset(det.confirmed_sensors) if det.sensor_alarm else frozenset()
        t_s = frozenset(tr.sensor_truth)
        detected_s.append(d_s)
        truth_s.append(t_s)
        _score(sensor, det.sensor_alarm, bool(t_s), d_s == t_s)
        detected_a.append(det.actuator_alarm)
        truth_a.append(tr.actuator_truth)
        _score(actuator, det.actuator_alarm, tr.actuator_truth, True)

    delays = []
    for t_change, target in schedule.change_times:
        if target == ACTUATOR:
            det_seq, truth_seq, lag = detected_a, truth_a, dt
        else:
            det_seq, truth_seq, lag = detected_s, truth_s, 0.0
        # the actuator truth at iteration k refers to t_{k-1}
        start = next((i for i, tr in enumerate(traces) if tr.t - lag >= t_change - 1e-9), None)
        if start is None:
            continue
        want = truth_seq[start]
        hit = next((i for i in range(start, len(traces)) if det_seq[i] == want), None)
        delays.append({
            "target": target,
            "time": t_change,
            "delay_s": None if hit is None else round(traces[hit].t - lag - t_change, 10),
            "delay_iterations": None if hit is None else hit - start,
        })

    quant = _quantification(traces, schedule, sensor_names, dt)

    correct = total = 0
    for tr in traces:
        if not tr.sensor_truth:
            continue
        total += 1
        ref = tr.detection.selected_mode.split("+")
        correct += int(not set(ref) & set(tr.sensor_truth))
    out_of_model = any(len(tr.sensor_truth) == len(sensor_names) for tr in traces)

    w = warmup if warmup is not None else 0
    s_labels = [sensor_mode_label(d) for d in detected_s[w:]]
    a_labels = [actuator_mode_label(d) for d in detected_a[w:]]
    return RunMetrics(
        sensor=sensor,
        actuator=actuator,
        delays=delays,
        quantification=quant,
        mode_accuracy=correct / total if total else None,
        sensor_transitions=_dwell_sequence(s_labels, min_dwell),
        actuator_transitions=_dwell_sequence(a_labels, min_dwell),
        out_of_threat_model=out_of_model,
        iterations=len(traces),
        reached_goal=False,
    )


def _score(ch: ChannelMetrics, alarm: bool, attacked: bool, target_ok: bool) -> None:
    if alarm:
        if attacked and target_ok:
            ch.tp += 1
        else:
            ch.fp += 1
    elif attacked:
        ch.fn += 1
    else:
        ch.tn += 1


def _quantification(traces, schedule: AttackSchedule, sensor_names, dt: float) -> list[dict]:
    out = []
    for e in schedule.events:
        est, true = [], []
        for tr in traces:
            det = tr.detection
            if e.target == ACTUATOR:
                if not e.active(tr.t - dt) or not det.actuator_alarm:
                    continue
                est.append(det.d_a_window_mean)
                true.append(tr.d_a_true)
            else:
                if not e.active(tr.t) or e.target not in det.confirmed_sensors:
                    continue
                est.append(det.sensor_estimates[e.target][0])
                true.append(tr.d_s_true[sensor_names.index(e.target)])
        if not est:
            out.append({"target": e.target, "onset": e.onset, "samples": 0,
                        "relative_error": None})
            continue
        m_est = np.mean(est, axis=0)
        m_true = np.mean(true, axis=0)
        denom = float(np.linalg.norm(m_true))
        err = float(np.linalg.norm(m_est - m_true) / denom) if denom > 0 else None
        out.append({
            "target": e.target,
            "onset": e.onset,
            "samples": len(est),
            "estimate": [float(v) for v in m_est],
            "truth": [float(v) for v in m_true],
            "relative_error": err,
        })
    return out
