"""Kinematic and measurement models.

Two robots are provided:

* a differential-drive ground robot (Khepera class) with an indoor
  positioning system (IPS), a wheel encoder and a LiDAR reduced to
  perpendicular wall distances plus heading;
* a 9-state UAV with GPS and IMU.

Wheel speeds enter the differential-drive model in the robot's native
control units and are divided by ``speed_ratio`` (units per m/s) before
integration. All kinematics are single forward-Euler steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionMismatch, GimbalSingularity

Vector = np.ndarray
Matrix = np.ndarray

GRAVITY = 9.81
PITCH_MARGIN = 1e-3

# 3 m x 4 m arena centred on the origin: (r, phi) of each wall's normal.
DEFAULT_WALLS: tuple[tuple[float, float], ...] = (
    (1.5, 0.0),
    (2.0, 0.5 * math.pi),
    (1.5, math.pi),
    (2.0, 1.5 * math.pi),
)

DEFAULT_Q = np.diag([1e-6, 1e-6, 1e-5])
DEFAULT_R_IPS = np.diag([1e-6, 1e-6, 1e-4])
DEFAULT_R_ENCODER = np.diag([4e-6, 4e-6, 4e-4])
DEFAULT_R_LIDAR = np.diag([4e-4, 4e-4, 4e-4, 4e-4, 1e-3])

DEFAULT_UAV_Q = np.diag([1e-6] * 3 + [1e-5] * 3 + [1e-6] * 3)
DEFAULT_R_GPS = np.diag([1e-4] * 3)
DEFAULT_R_IMU = np.diag([1e-4] * 6 + [1e-5] * 3)


def finite_diff_jacobian(fn: Callable[[Vector], Vector], x: Vector, eps: float = 1e-6) -> Matrix:
    """Central-difference Jacobian of ``fn`` at ``x``, one column per input."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.asarray(x, dtype=float)
    f0 = np.atleast_1d(np.asarray(fn(x), dtype=float))
    jac = np.empty((f0.shape[0], x.shape[0]))
    for i in range(x.shape[0]):
        step = eps * max(1.0, abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += step
        xm[i] -= step
        jac[:, i] = (np.atleast_1d(fn(xp)) - np.atleast_1d(fn(xm))) / (2.0 * step)
    return jac


@dataclass(frozen=True)
class SensorModel:
    """One sensing workflow: ``z = measure(x) + noise`` with ``noise ~ N(0, meas_cov)``."""

    name: str
    reading_dim: int
    measure: Callable[[Vector], Vector]
    meas_cov: Matrix
    jacobian: Callable[[Vector], Matrix]
    reconstructs_full_state: bool = True


@dataclass(frozen=True)
class RobotModel:
    """Kinematic model ``x_k = kinematic(x_{k-1}, u_{k-1}, dt) + zeta`` plus its sensors.

    ``jacobians(x, u, dt)`` returns ``(A, B, G)`` = derivatives of the
    kinematic function with respect to state, control, and the additive
    actuator attack.
    """

    name: str
    state_dim: int
    control_dim: int
    kinematic: Callable[[Vector, Vector, float], Vector]
    jacobians: Callable[[Vector, Vector, float], tuple[Matrix, Matrix, Matrix]]
    process_cov: Matrix
    sensors: tuple[SensorModel, ...]

    def sensor_index(self, name: str) -> int:
        for i, s in enumerate(self.sensors):
            if s.name == name:
                return i
        raise KeyError(f"unknown sensor {name!r}; have {[s.name for s in self.sensors]}")

    @property
    def sensor_names(self) -> list[str]:
        return [s.name for s in self.sensors]


# --------------------------------------------------------------------------
# differential drive


@dataclass(frozen=True)
class DiffDriveParams:
    """Geometry and unit conversion for the differential-drive robot.

    ``heading_divisor`` selects the denominator of the heading update:
    ``"half_base"`` divides the wheel-speed difference by ``D/2``,
    ``"full_base"`` by ``D`` (the usual textbook form).
    """

    wheel_base: float = 0.09
    speed_ratio: float = 144010.0
    lidar_offset: tuple[float, float] = (0.0, 0.0)
    walls: tuple[tuple[float, float], ...] = DEFAULT_WALLS
    heading_divisor: str = "half_base"

    def __post_init__(self):
        if self.wheel_base <= 0:
            raise ValueError("wheel_base must be positive")
        if self.speed_ratio <= 0:
            raise ValueError("speed_ratio must be positive")
        if self.heading_divisor not in ("half_base", "full_base"):
            raise ValueError("heading_divisor must be 'half_base' or 'full_base'")

    @property
    def turn_divisor(self) -> float:
        return self.wheel_base / 2.0 if self.heading_divisor == "half_base" else self.wheel_base


def _check_finite(*arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValueError("non-finite input")


def diffdrive_step(
    x: Vector,
    u: Vector,
    d_a: Vector | None,
    dt: float,
    params: DiffDriveParams = DiffDriveParams(),
) -> Vector:
    """Noiseless mean propagation of the differential-drive kinematics.

    ``u`` and ``d_a`` are (left, right) wheel speeds in control units.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    d = np.zeros(2) if d_a is None else np.asarray(d_a, dtype=float)
    _check_finite(x, u, d)
    if dt < 0:
        raise ValueError("dt must be non-negative")
    v_l, v_r = (u + d) / params.speed_ratio
    theta = x[2]
    mean_speed = 0.5 * (v_l + v_r)
    return np.array([
        x[0] + dt * math.cos(theta) * mean_speed,
        x[1] + dt * math.sin(theta) * mean_speed,
        theta + dt * (v_r - v_l) / params.turn_divisor,
    ])


def diffdrive_jacobians(
    x: Vector, u_eff: Vector, dt: float, params: DiffDriveParams = DiffDriveParams()
) -> tuple[Matrix, Matrix, Matrix]:
    """Analytic ``(A, B, G)`` at state ``x`` and effective control ``u + d_a`` (units).

    The attack enters additively with the command, so ``G == B``.
    """
    theta = float(x[2])
    c, s = math.cos(theta), math.sin(theta)
    ratio = params.speed_ratio
    mean_speed = 0.5 * (u_eff[0] + u_eff[1]) / ratio
    a = np.array([
        [1.0, 0.0, -dt * s * mean_speed],
        [0.0, 1.0, dt * c * mean_speed],
        [0.0, 0.0, 1.0],
    ])
    k = dt / ratio
    turn = k / params.turn_divisor
    b = np.array([
        [0.5 * k * c, 0.5 * k * c],
        [0.5 * k * s, 0.5 * k * s],
        [-turn, turn],
    ])
    return a, b, b.copy()


def ips_measure(x: Vector) -> Vector:
    return np.array(x, dtype=float)


def encoder_measure(x: Vector) -> Vector:
    return np.array(x, dtype=float)


def identity_jacobian(x: Vector) -> Matrix:
    return np.eye(len(x))


def encoder_convert(
    prev_state: Vector, l_left: float, l_right: float, params: DiffDriveParams = DiffDriveParams()
) -> Vector:
    """Turn wheel travel distances (m) into a pose, dead-reckoned from ``prev_state``.

    The heading update divides by the same turn divisor as the kinematic
    model so that an unattacked encoder agrees with the robot's motion; the
    position update uses the new heading.
    """
    x0, y0, th0 = (float(v) for v in prev_state)
    theta = th0 + (l_right - l_left) / params.turn_divisor
    half = 0.5 * (l_left + l_right)
    return np.array([x0 + half * math.cos(theta), y0 + half * math.sin(theta), theta])


def lidar_measure(x: Vector, params: DiffDriveParams = DiffDriveParams()) -> Vector:
    """Perpendicular distance to each wall followed by the heading."""
    px, py, theta = (float(v) for v in x)
    ox, oy = params.lidar_offset
    st, ct = math.sin(theta), math.cos(theta)
    mx = px + ox * st + oy * ct
    my = py - ox * ct + oy * st
    out = [r - mx * math.cos(phi) - my * math.sin(phi) for r, phi in params.walls]
    out.append(theta)
    return np.array(out)


def lidar_jacobian(x: Vector, params: DiffDriveParams = DiffDriveParams()) -> Matrix:
    theta = float(x[2])
    ox, oy = params.lidar_offset
    st, ct = math.sin(theta), math.cos(theta)
    dmx = ox * ct - oy * st
    dmy = ox * st + oy * ct
    rows = []
    for _, phi in params.walls:
        cp, sp = math.cos(phi), math.sin(phi)
        rows.append([-cp, -sp, -dmx * cp - dmy * sp])
    rows.append([0.0, 0.0, 1.0])
    return np.array(rows)


def diffdrive_model(
    params: DiffDriveParams = DiffDriveParams(),
    process_cov: Matrix = DEFAULT_Q,
    r_ips: Matrix = DEFAULT_R_IPS,
    r_encoder: Matrix = DEFAULT_R_ENCODER,
    r_lidar: Matrix = DEFAULT_R_LIDAR,
    sensors: Sequence[str] = ("ips", "encoder", "lidar"),
) -> RobotModel:
    """Khepera-style robot with any subset of the IPS, encoder and LiDAR workflows."""
    if "lidar" in sensors and not params.walls:
        raise ValueError("LiDAR requires a non-empty wall table")
    catalogue = {
        "ips": SensorModel("ips", 3, ips_measure, np.asarray(r_ips, float), identity_jacobian),
        "encoder": SensorModel(
            "encoder", 3, encoder_measure, np.asarray(r_encoder, float), identity_jacobian
        ),
        "lidar": SensorModel(
            "lidar",
            len(params.walls) + 1,
            lambda x: lidar_measure(x, params),
            np.asarray(r_lidar, float),
            lambda x: lidar_jacobian(x, params),
        ),
    }
    chosen = []
    for name in sensors:
        if name not in catalogue:
            raise KeyError(f"unknown differential-drive sensor {name!r}")
        s = catalogue[name]
        if s.meas_cov.shape != (s.reading_dim, s.reading_dim):
            raise DimensionMismatch(
                f"{name} covariance must be {s.reading_dim}x{s.reading_dim}, got {s.meas_cov.shape}"
            )
        chosen.append(s)
    return RobotModel(
        name="diffdrive",
        state_dim=3,
        control_dim=2,
        kinematic=lambda x, u, dt: diffdrive_step(x, u, None, dt, params),
        jacobians=lambda x, u, dt: diffdrive_jacobians(x, u, dt, params),
        process_cov=np.asarray(process_cov, float),
        sensors=tuple(chosen),
    )


# --------------------------------------------------------------------------
# UAV


@dataclass(frozen=True)
class UavState:
    """Named view of the 9-vector (x, y, z, vx, vy, vz, roll, pitch, yaw)."""

    position: tuple[float, float, float] = (0.0, 0.0, 0.0)
    velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)
    angles: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if abs(self.angles[1]) >= 0.5 * math.pi - PITCH_MARGIN:
            raise GimbalSingularity(f"pitch {self.angles[1]!r} too close to +-pi/2")

    def as_vector(self) -> Vector:
        return np.array([*self.position, *self.velocity, *self.angles], dtype=float)

    @classmethod
    def from_vector(cls, v: Vector) -> "UavState":
        v = [float(a) for a in v]
        return cls(tuple(v[0:3]), tuple(v[3:6]), tuple(v[6:9]))


def uav_rotation(phi: float, theta: float, psi: float) -> Matrix:
    """World-to-body rotation ``R_roll R_pitch R_yaw``."""
    (roll, pitch, yaw), _ = _rotation_factors(phi, theta, psi)
    return roll @ pitch @ yaw


def uav_step(x: Vector | UavState, u: Vector, dt: float, gravity: float = GRAVITY) -> Vector:
    """Forward-Euler step of the UAV kinematics.

    ``u = (p, q, r, ax, ay, az)``: body rotation rates and accelerations.
    """
    if isinstance(x, UavState):
        x = x.as_vector()
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    _check_finite(x, u)
    if x.shape != (9,) or u.shape != (6,):
        raise DimensionMismatch("UAV expects a 9-state and a 6-control vector")
    phi, theta, psi = x[6:9]
    if abs(theta) >= 0.5 * math.pi - PITCH_MARGIN:
        raise GimbalSingularity(f"pitch {theta!r} too close to +-pi/2")
    p, q, r, ax, ay, az = u
    vx, vy, vz = x[3:6]
    cf, sf = math.cos(phi), math.sin(phi)
    ct, st = math.cos(theta), math.sin(theta)
    rot = uav_rotation(phi, theta, psi)
    dpos = rot.T @ x[3:6]
    dvel = np.array([
        ax + vy * r - vz * q + gravity * st,
        ay - vx * r + vz * p - gravity * ct * sf,
        az + vx * q - vy * p - gravity * ct * cf,
    ])
    tt, sec = math.tan(theta), 1.0 / ct
    rates = np.array([
        [1.0, sf * tt, cf * tt],
        [0.0, cf, -sf],
        [0.0, sf * sec, cf * sec],
    ])
    dang = rates @ np.array([p, q, r])
    return np.concatenate([x[0:3] + dt * dpos, x[3:6] + dt * dvel, x[6:9] + dt * dang])


def uav_hover_control(gravity: float = GRAVITY) -> Vector:
    return np.array([0.0, 0.0, 0.0, 0.0, 0.0, gravity])


def _rotation_factors(phi: float, theta: float, psi: float):
    cf, sf = math.cos(phi), math.sin(phi)
    ct, st = math.cos(theta), math.sin(theta)
    cp, sp = math.cos(psi), math.sin(psi)
    roll = np.array([[1.0, 0.0, 0.0], [0.0, cf, sf], [0.0, -sf, cf]])
    pitch = np.array([[ct, 0.0, -st], [0.0, 1.0, 0.0], [st, 0.0, ct]])
    yaw = np.array([[cp, sp, 0.0], [-sp, cp, 0.0], [0.0, 0.0, 1.0]])
    d_roll = np.array([[0.0, 0.0, 0.0], [0.0, -sf, cf], [0.0, -cf, -sf]])
    d_pitch = np.array([[-st, 0.0, -ct], [0.0, 0.0, 0.0], [ct, 0.0, -st]])
    d_yaw = np.array([[-sp, cp, 0.0], [-cp, -sp, 0.0], [0.0, 0.0, 0.0]])
    return (roll, pitch, yaw), (d_roll, d_pitch, d_yaw)


def uav_jacobians(
    x: Vector, u: Vector, dt: float, gravity: float = GRAVITY
) -> tuple[Matrix, Matrix, Matrix]:
    """Analytic ``(A, B, G)`` of :func:`uav_step`; the attack enters with ``u``."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    phi, theta, psi = x[6:9]
    if abs(theta) >= 0.5 * math.pi - PITCH_MARGIN:
        raise GimbalSingularity(f"pitch {theta!r} too close to +-pi/2")
    p, q, r = u[0:3]
    vel = x[3:6]
    vx, vy, vz = vel
    cf, sf = math.cos(phi), math.sin(phi)
    ct, st = math.cos(theta), math.sin(theta)
    tt, sec = math.tan(theta), 1.0 / ct
    g = gravity
    (ro, pi_, ya), (dro, dpi, dya) = _rotation_factors(phi, theta, psi)

    jx = np.zeros((9, 9))
    jx[0:3, 3:6] = (ro @ pi_ @ ya).T
    jx[0:3, 6] = (dro @ pi_ @ ya).T @ vel
    jx[0:3, 7] = (ro @ dpi @ ya).T @ vel
    jx[0:3, 8] = (ro @ pi_ @ dya).T @ vel
    jx[3:6, 3:6] = np.array([[0.0, r, -q], [-r, 0.0, p], [q, -p, 0.0]])
    jx[3:6, 6] = [0.0, -g * ct * cf, g * ct * sf]
    jx[3:6, 7] = [g * ct, g * st * sf, g * st * cf]
    w = np.array([p, q, r])
    jx[6:9, 6] = np.array([[0.0, cf * tt, -sf * tt], [0.0, -sf, -cf], [0.0, cf * sec, -sf * sec]]) @ w
    jx[6:9, 7] = np.array([[0.0, sf * sec**2, cf * sec**2], [0.0, 0.0, 0.0],
                           [0.0, sf * sec * tt, cf * sec * tt]]) @ w

    ju = np.zeros((9, 6))
    ju[3:6, 0:3] = np.array([[0.0, -vz, vy], [vz, 0.0, -vx], [-vy, vx, 0.0]])
    ju[3:6, 3:6] = np.eye(3)
    ju[6:9, 0:3] = np.array([[1.0, sf * tt, cf * tt], [0.0, cf, -sf], [0.0, sf * sec, cf * sec]])

    a = np.eye(9) + dt * jx
    b = dt * ju
    return a, b, b.copy()


def gps_measure(x: Vector) -> Vector:
    return np.asarray(x, dtype=float)[0:3].copy()


def gps_jacobian(x: Vector) -> Matrix:
    c = np.zeros((3, 9))
    c[:, 0:3] = np.eye(3)
    return c


def uav_model(
    process_cov: Matrix | None = None,
    r_gps: Matrix | None = None,
    r_imu: Matrix | None = None,
) -> RobotModel:
    """UAV with a GPS (position only) and an IMU (full state)."""
    q = DEFAULT_UAV_Q if process_cov is None else process_cov
    rg = DEFAULT_R_GPS if r_gps is None else r_gps
    ri = DEFAULT_R_IMU if r_imu is None else r_imu
    sensors = (
        SensorModel("gps", 3, gps_measure, np.asarray(rg, float), gps_jacobian,
                    reconstructs_full_state=False),
        SensorModel("imu", 9, ips_measure, np.asarray(ri, float), identity_jacobian),
    )
    return RobotModel(
        name="uav",
        state_dim=9,
        control_dim=6,
        kinematic=lambda x, u, dt: uav_step(x, u, dt),
        jacobians=uav_jacobians,
        process_cov=np.asarray(q, float),
        sensors=sensors,
    )
