"""Multi-mode detection loop: beliefs, mode selection and windowed Chi-square decisions."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import AllModesFailed, DimensionMismatch, ModeInadmissible, SingularInnovationCov
from .models import RobotModel
from .nuise import Mode, NuiseOutput, StateBelief, build_mode_set, nuise_step
from .numerics import chi2_quantile, log_normalize, quadratic_form

# Sensor-mode labels for the three-sensor ground robot, keyed by the set of
# attacked sensors.
SENSOR_MODE_LABELS = {
    frozenset(): "S0",
    frozenset({"ips"}): "S1",
    frozenset({"encoder"}): "S2",
    frozenset({"lidar"}): "S3",
    frozenset({"encoder", "lidar"}): "S4",
    frozenset({"ips", "lidar"}): "S5",
    frozenset({"ips", "encoder"}): "S6",
}


def sensor_mode_label(attacked: Sequence[str]) -> str:
    """Label for an attacked-sensor set; unknown sets render as ``S{a+b}``."""
    key = frozenset(attacked)
    if key in SENSOR_MODE_LABELS:
        return SENSOR_MODE_LABELS[key]
    return "S{" + "+".join(sorted(key)) + "}"


def actuator_mode_label(alarm: bool) -> str:
    return "A1" if alarm else "A0"


@dataclass(frozen=True)
class RidsConfig:
    """Decision parameters.

    ``warmup`` is the number of leading iterations whose tests are forced
    negative; ``None`` means ``max(w_s, w_a)``.
    """

    w_s: int = 2
    c_s: int = 2
    w_a: int = 6
    c_a: int = 3
    alpha_s: float = 0.005
    alpha_a: float = 0.05
    epsilon: float = 1e-6
    mode_policy: str = "default"
    groups: tuple[tuple[str, ...], ...] = ()
    warmup: int | None = None
    c1_at: str = "prediction"
    nuise_form: str = "derived"

    def __post_init__(self):
        from .errors import InvalidAlpha

        for name, c, w in (("s", self.c_s, self.w_s), ("a", self.c_a, self.w_a)):
            if int(w) != w or w < 1:
                raise ValueError(f"w_{name} must be a positive integer")
            if int(c) != c or not 1 <= c <= w:
                raise ValueError(f"c_{name} must satisfy 1 <= c_{name} <= w_{name}")
        for name in ("alpha_s", "alpha_a"):
            a = getattr(self, name)
            if not 0.0 < a < 1.0:
                raise InvalidAlpha(f"{name} must lie in (0, 1), got {a!r}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.warmup is not None and self.warmup < 0:
            raise ValueError("warmup must be non-negative")

    @property
    def warmup_iterations(self) -> int:
        return max(self.w_s, self.w_a) if self.warmup is None else int(self.warmup)


@dataclass
class DecisionState:
    """Sliding windows of the decision maker."""

    bs_window: deque
    ba_window: deque
    residual_window: deque
    da_window: deque
    k: int = 0

    @classmethod
    def empty(cls, config: "RidsConfig") -> "DecisionState":
        return cls(
            bs_window=deque(maxlen=config.w_s),
            ba_window=deque(maxlen=config.w_a),
            residual_window=deque(maxlen=config.w_s),
            da_window=deque(maxlen=config.w_a),
        )


@dataclass
class RidsState:
    model: RobotModel
    config: RidsConfig
    modes: list[Mode]
    dt: float
    log_belief: np.ndarray
    belief: StateBelief
    decision: DecisionState
    k: int = 0

    @property
    def mu(self) -> np.ndarray:
        return np.exp(self.log_belief)


@dataclass
class Estimate:
    """Selected-mode outputs of one iteration, before any decision.

    None of these depend on the decision parameters, so a stream of
    estimates can be re-decided under another configuration.
    """

    k: int
    selected_mode: str
    testing: tuple[str, ...]
    mu: np.ndarray
    x: np.ndarray
    P: np.ndarray
    d_s: np.ndarray
    P_s: np.ndarray
    d_a: np.ndarray
    P_a: np.ndarray
    residuals: dict[str, np.ndarray]
    blocks: dict[str, tuple[np.ndarray, np.ndarray]]


@dataclass
class Detection:
    """Outcome of one detector iteration.

    ``sensor_estimates`` maps each testing sensor of the selected mode to its
    windowed-mean attack estimate and marginal covariance; it is filled only
    when the sensor alarm is raised. ``residuals`` holds the raw per-iteration
    ``z_t - h_t(x)`` for every sensor (the attack estimate for testing
    sensors).
    """

    k: int
    selected_mode: str
    mu: np.ndarray
    x: np.ndarray
    P: np.ndarray
    sensor_stat: float
    sensor_threshold: float
    actuator_stat: float
    actuator_threshold: float
    b_s: bool
    b_a: bool
    sensor_alarm: bool
    actuator_alarm: bool
    confirmed_sensors: tuple[str, ...]
    sensor_estimates: dict[str, tuple[np.ndarray, np.ndarray]]
    d_a: np.ndarray
    d_a_window_mean: np.ndarray | None
    residuals: dict[str, np.ndarray]
    estimate: Estimate = field(repr=False, default=None)

    @property
    def sensor_mode(self) -> str:
        return sensor_mode_label(self.confirmed_sensors)

    @property
    def actuator_mode(self) -> str:
        return actuator_mode_label(self.actuator_alarm)


def window_positive_count(buffer: Sequence[bool], w: int) -> int:
    """Number of true entries among the last ``w`` (fewer if the buffer is short)."""
    if w <= 0:
        return 0
    items = list(buffer)[-w:]
    return int(sum(bool(b) for b in items))


def split_sensor_attack(
    d_s: np.ndarray, P_s: np.ndarray, mode: Mode, model: RobotModel
) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Split the stacked attack vector of ``mode`` into per-sensor pieces.

    Cross-sensor covariance blocks are dropped.
    """
    d_s = np.asarray(d_s, dtype=float)
    P_s = np.asarray(P_s, dtype=float)
    dims = [model.sensors[i].reading_dim for i in mode.testing]
    total = sum(dims)
    if d_s.shape != (total,) or P_s.shape != (total, total):
        raise DimensionMismatch(
            f"mode {mode.id} expects a {total}-vector and {total}x{total} covariance, "
            f"got {d_s.shape} and {P_s.shape}"
        )
    out = {}
    start = 0
    for i, dim in zip(mode.testing, dims):
        sl = slice(start, start + dim)
        out[model.sensors[i].name] = (d_s[sl].copy(), P_s[sl, sl].copy())
        start += dim
    return out


def rids_init(
    model: RobotModel,
    config: RidsConfig,
    x0: np.ndarray,
    P0: np.ndarray,
    dt: float,
    modes: Sequence[Mode] | None = None,
) -> RidsState:
    if modes is None:
        modes = build_mode_set(model, config.mode_policy, config.groups)
    modes = list(modes)
    x0 = np.asarray(x0, dtype=float)
    P0 = np.asarray(P0, dtype=float)
    if x0.shape != (model.state_dim,) or P0.shape != (model.state_dim, model.state_dim):
        raise DimensionMismatch("initial state or covariance has the wrong shape")
    n_modes = len(modes)
    return RidsState(
        model=model,
        config=config,
        modes=modes,
        dt=float(dt),
        log_belief=np.full(n_modes, -math.log(n_modes)),
        belief=StateBelief(x0, P0),
        decision=DecisionState.empty(config),
    )


def _run_modes(state: RidsState, u, z) -> list[NuiseOutput | None]:
    outs: list[NuiseOutput | None] = []
    for mode in state.modes:
        try:
            outs.append(
                nuise_step(state.model, mode, state.belief, u, z, state.dt,
                           state.config.c1_at, state.config.nuise_form)
            )
        except (ModeInadmissible, SingularInnovationCov):
            outs.append(None)
    return outs


def rids_step(state: RidsState, u: np.ndarray, z: Sequence[np.ndarray]) -> Detection:
    """Advance the detector by one control iteration.

    ``u`` is the planned control of the previous iteration and ``z`` holds one
    reading per sensor for the current iteration. Mutates ``state``.
    """
    cfg = state.config
    model = state.model
    if len(z) != len(model.sensors):
        raise DimensionMismatch(f"expected {len(model.sensors)} readings, got {len(z)}")

    outs = _run_modes(state, u, z)
    if all(o is None for o in outs):
        raise AllModesFailed(f"every mode failed at iteration {state.k + 1}")

    log_eps = math.log(cfg.epsilon)
    logw = np.empty(len(outs))
    for j, o in enumerate(outs):
        ll = o.loglik if o is not None else -math.inf
        logw[j] = max(ll + state.log_belief[j], log_eps)
    state.log_belief = log_normalize(logw)
    # failed modes may tie with floored ones; never select them
    ranked = np.where([o is None for o in outs], -math.inf, state.log_belief)
    J = int(np.argmax(ranked))
    mode = state.modes[J]
    best = outs[J]
    state.belief = best.belief
    state.k += 1

    residuals = {
        s.name: np.asarray(z[i], dtype=float) - s.measure(best.x)
        for i, s in enumerate(model.sensors)
    }
    est = Estimate(
        k=state.k,
        selected_mode=mode.id,
        testing=tuple(model.sensors[i].name for i in mode.testing),
        mu=state.mu,
        x=best.x.copy(),
        P=best.P.copy(),
        d_s=best.d_s.copy(),
        P_s=best.P_s.copy(),
        d_a=best.d_a.copy(),
        P_a=best.P_a.copy(),
        residuals=residuals,
        blocks=split_sensor_attack(best.d_s, best.P_s, mode, model),
    )
    return decide(state.decision, est, cfg)


def decide(dstate: DecisionState, est: Estimate, cfg: RidsConfig) -> Detection:
    """Chi-square tests and sliding-window confirmation for one estimate.

    Mutates the windows in ``dstate``.
    """
    dstate.k += 1
    dstate.residual_window.append(est.residuals)
    dstate.da_window.append(est.d_a)

    if est.d_s.size:
        s_stat = quadratic_form(est.d_s, est.P_s)
        s_thr = chi2_quantile(est.d_s.size, cfg.alpha_s)
    else:
        s_stat, s_thr = 0.0, math.inf
    a_stat = quadratic_form(est.d_a, est.P_a)
    a_thr = chi2_quantile(est.d_a.size, cfg.alpha_a)

    warm = dstate.k <= cfg.warmup_iterations
    b_s = (not warm) and s_stat > s_thr
    b_a = (not warm) and a_stat > a_thr
    dstate.bs_window.append(b_s)
    dstate.ba_window.append(b_a)

    sensor_alarm = b_s and window_positive_count(dstate.bs_window, cfg.w_s) >= cfg.c_s
    confirmed: list[str] = []
    estimates: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    if sensor_alarm:
        for name, (_, block) in est.blocks.items():
            mean = np.mean([r[name] for r in dstate.residual_window], axis=0)
            estimates[name] = (mean, block)
            if quadratic_form(mean, block) >= chi2_quantile(mean.size, cfg.alpha_s):
                confirmed.append(name)

    actuator_alarm = b_a and window_positive_count(dstate.ba_window, cfg.w_a) >= cfg.c_a
    da_mean = np.mean(np.array(dstate.da_window), axis=0) if actuator_alarm else None

    return Detection(
        k=est.k,
        selected_mode=est.selected_mode,
        mu=est.mu,
        x=est.x,
        P=est.P,
        sensor_stat=s_stat,
        sensor_threshold=s_thr,
        actuator_stat=a_stat,
        actuator_threshold=a_thr,
        b_s=bool(b_s),
        b_a=bool(b_a),
        sensor_alarm=bool(sensor_alarm),
        actuator_alarm=bool(actuator_alarm),
        confirmed_sensors=tuple(confirmed),
        sensor_estimates=estimates,
        d_a=est.d_a,
        d_a_window_mean=da_mean,
        residuals=est.residuals,
        estimate=est,
    )


def redecide(estimates: Sequence[Estimate], config: RidsConfig) -> list[Detection]:
    """Replay only the decision stage over recorded estimates."""
    dstate = DecisionState.empty(config)
    return [decide(dstate, est, config) for est in estimates]
