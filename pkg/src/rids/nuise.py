"""Nonlinear unknown input and state estimation (NUISE), one step per mode.

A *mode* trusts its reference sensors (readings ``z2``) and treats the rest
as testing sensors (readings ``z1``) that may carry an additive attack. Each
step estimates, in order:

1. the actuator attack ``d_a`` from the reference-sensor discrepancy, using
   the minimum-variance unbiased (Gauss-Markov) gain ``M2`` with
   ``M2 C2 G = I``;
2. the state prediction compensated with ``u + d_a``;
3. the state estimate corrected by ``z2``;
4. the testing-sensor attack ``d_s = z1 - h1(x)``;

and finally the log-likelihood of the mode from the reference innovation.

Jacobians for step 1 are taken at ``(x_prev, u)`` with ``C2`` at the
uncompensated prediction, because the attack estimate is not known yet.
They are then re-evaluated at ``(x_prev, u + d_a)`` and at the compensated
prediction for steps 2-4, and ``M2`` is recomputed there.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg

from .errors import DimensionMismatch, ModeInadmissible, NoAdmissibleMode, SingularInnovationCov
from .models import RobotModel
from .numerics import gaussian_loglik, pinv_pdet, symmetrize

COND_LIMIT = 1e12


@dataclass(frozen=True)
class Mode:
    """Partition of the sensors into reference and testing sets.

    Indices refer to ``RobotModel.sensors``. ``testing`` keeps model order,
    which is also the stacking order of the sensor attack vector.
    """

    id: str
    reference: tuple[int, ...]
    testing: tuple[int, ...]

    def __post_init__(self):
        if not self.reference:
            raise ValueError("a mode needs at least one reference sensor")
        if set(self.reference) & set(self.testing):
            raise ValueError("reference and testing sensors overlap")


@dataclass
class StateBelief:
    x: np.ndarray
    P: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float).copy()
        self.P = symmetrize(self.P)


@dataclass
class NuiseOutput:
    x: np.ndarray
    P: np.ndarray
    d_s: np.ndarray
    P_s: np.ndarray
    d_a: np.ndarray
    P_a: np.ndarray
    loglik: float
    innovation: np.ndarray
    innovation_cov: np.ndarray
    # gain intermediates, kept for diagnostics and invariant checks
    M2: np.ndarray = field(repr=False, default=None)
    C2: np.ndarray = field(repr=False, default=None)
    G: np.ndarray = field(repr=False, default=None)

    @property
    def belief(self) -> StateBelief:
        return StateBelief(self.x, self.P)


def _stack(model: RobotModel, idx: Sequence[int], x: np.ndarray):
    if not idx:
        n = model.state_dim
        return np.zeros(0), np.zeros((0, n)), np.zeros((0, 0))
    sens = [model.sensors[i] for i in idx]
    h = np.concatenate([s.measure(x) for s in sens])
    c = np.vstack([s.jacobian(x) for s in sens])
    r = scipy.linalg.block_diag(*[s.meas_cov for s in sens])
    return h, c, r


def stack_readings(model: RobotModel, idx: Sequence[int], z: Sequence[np.ndarray]) -> np.ndarray:
    if not idx:
        return np.zeros(0)
    out = []
    for i in idx:
        zi = np.asarray(z[i], dtype=float)
        if zi.shape != (model.sensors[i].reading_dim,):
            raise DimensionMismatch(
                f"sensor {model.sensors[i].name} reading has shape {zi.shape}, "
                f"expected ({model.sensors[i].reading_dim},)"
            )
        out.append(zi)
    return np.concatenate(out)


def _solve_sym(a: np.ndarray, b: np.ndarray, exc: type, what: str) -> np.ndarray:
    """``a^{-1} b`` for symmetric ``a``; raises ``exc`` when ``a`` is singular."""
    a = symmetrize(a)
    if not np.all(np.isfinite(a)) or np.linalg.cond(a) > COND_LIMIT:
        raise exc(f"{what} is singular (cond={np.linalg.cond(a):.3e})")
    try:
        factor = scipy.linalg.cho_factor(a)
        return scipy.linalg.cho_solve(factor, b)
    except np.linalg.LinAlgError:
        return np.linalg.solve(a, b)


def _gauss_markov_gain(C2, G, R_star):
    """``M2 = (G' C2' R*^-1 C2 G)^-1 G' C2' R*^-1``."""
    F = C2 @ G
    rinv_f = _solve_sym(R_star, F, ModeInadmissible, "reference innovation covariance")
    info = F.T @ rinv_f
    M2 = _solve_sym(info, rinv_f.T, ModeInadmissible, "actuator-attack information matrix")
    return M2


def nuise_step(
    model: RobotModel,
    mode: Mode,
    prior: StateBelief,
    u: np.ndarray,
    z: Sequence[np.ndarray],
    dt: float,
    c1_at: str = "prediction",
    form: str = "derived",
) -> NuiseOutput:
    """Run one NUISE iteration for ``mode``.

    Parameters
    ----------
    model : RobotModel
    mode : Mode
    prior : StateBelief
        ``x_{k-1|k-1}`` and ``P^x_{k-1}``.
    u : array
        Planned control ``u_{k-1}``.
    z : sequence of arrays
        One reading per sensor of ``model`` at iteration ``k``.
    dt : float
    c1_at : {"prediction", "estimate"}
        Linearization point for the testing-sensor Jacobian ``C1``.
    form : {"derived", "printed"}
        Sign of the cross-covariance between the compensated prediction error
        and the reference noise in the state gain and its covariance.
        ``"derived"`` uses ``cov(x_pred_err, v2) = -G M2 R2``, which follows
        from the error recursion; ``"printed"`` flips it (and requires the
        full-rank gain innovation covariance). The likelihood always uses the
        derived sign.

    Raises
    ------
    ModeInadmissible
        When ``G' C2' R*^-1 C2 G`` is singular.
    SingularInnovationCov
        When the state-gain innovation covariance is singular.
    """
    x_prev = prior.x
    P_prev = prior.P
    u = np.asarray(u, dtype=float)
    n = model.state_dim
    Q = model.process_cov
    eye = np.eye(n)

    z2 = stack_readings(model, mode.reference, z)
    z1 = stack_readings(model, mode.testing, z)

    # step 1: actuator attack from the uncompensated prediction
    x_star = model.kinematic(x_prev, u, dt)
    A, _, G = model.jacobians(x_prev, u, dt)
    h2_star, C2, R2 = _stack(model, mode.reference, x_star)
    P_tilde = A @ P_prev @ A.T + Q
    R_star = C2 @ P_tilde @ C2.T + R2
    M2 = _gauss_markov_gain(C2, G, R_star)
    d_a = M2 @ (z2 - h2_star)

    # step 2: compensated prediction, Jacobians re-evaluated at u + d_a
    u_eff = u + d_a
    x_pred = model.kinematic(x_prev, u_eff, dt)
    A, _, G = model.jacobians(x_prev, u_eff, dt)
    h2_pred, C2, R2 = _stack(model, mode.reference, x_pred)
    P_tilde = A @ P_prev @ A.T + Q
    R_star = C2 @ P_tilde @ C2.T + R2
    M2 = _gauss_markov_gain(C2, G, R_star)
    P_a = symmetrize(M2 @ R_star @ M2.T)

    GM2 = G @ M2
    proj = eye - GM2 @ C2
    A_bar = proj @ A
    Q_bar = proj @ Q @ proj.T + GM2 @ R2 @ GM2.T
    P_pred = symmetrize(A_bar @ P_prev @ A_bar.T + Q_bar)

    # step 3: state estimate
    cross = C2 @ GM2 @ R2  # C2 G M2 R2
    P_bar = symmetrize(C2 @ P_pred @ C2.T + R2 - cross - cross.T)
    nu = z2 - h2_pred
    GMR = GM2 @ R2
    if form == "printed":
        R_tilde = C2 @ P_pred @ C2.T + R2 + cross + cross.T
        S = C2 @ P_pred + R2 @ GM2.T
        L = _solve_sym(R_tilde, S, SingularInnovationCov, "state-gain innovation covariance").T
        sign = -1.0
    elif form == "derived":
        # the innovation lives in a subspace of dimension p - m, so the gain
        # uses the pseudoinverse of its (rank-deficient) covariance
        pinv, _, rank = pinv_pdet(P_bar)
        if not np.all(np.isfinite(P_bar)) or rank < len(nu) - len(d_a):
            raise SingularInnovationCov(
                f"innovation covariance rank {rank} below {len(nu) - len(d_a)}"
            )
        L = (P_pred @ C2.T - GMR) @ pinv
        sign = 1.0
    else:
        raise ValueError("form must be 'derived' or 'printed'")
    x_post = x_pred + L @ nu
    ILC = eye - L @ C2
    P_post = (
        ILC @ P_pred @ ILC.T
        + L @ R2 @ L.T
        + sign * ILC @ GMR @ L.T
        + sign * L @ GMR.T @ ILC.T
    )
    P_post = symmetrize(P_post)

    # step 4: testing-sensor attack
    h1_post, C1_post, R1 = _stack(model, mode.testing, x_post)
    if c1_at == "prediction":
        C1 = _stack(model, mode.testing, x_pred)[1]
    elif c1_at == "estimate":
        C1 = C1_post
    else:
        raise ValueError("c1_at must be 'prediction' or 'estimate'")
    d_s = z1 - h1_post
    P_s = symmetrize(C1 @ P_post @ C1.T + R1)

    # mode likelihood from the reference innovation
    loglik = gaussian_loglik(nu, P_bar)

    return NuiseOutput(
        x=x_post, P=P_post, d_s=d_s, P_s=P_s, d_a=d_a, P_a=P_a,
        loglik=loglik, innovation=nu, innovation_cov=P_bar,
        M2=M2, C2=C2, G=G,
    )


def _can_reconstruct(model: RobotModel, group: Sequence[int]) -> bool:
    if any(model.sensors[i].reconstructs_full_state for i in group):
        return True
    return False


def build_mode_set(
    model: RobotModel,
    policy: str = "default",
    groups: Sequence[Sequence[str]] | None = None,
) -> list[Mode]:
    """Enumerate the modes for ``model``.

    Policies
    --------
    ``default``
        One mode per sensor that reconstructs the full state on its own, with
        that sensor as the only reference.
    ``all_reference``
        ``default`` plus the mode trusting every sensor.
    ``complete``
        Every non-empty reference subset able to reconstruct the state
        (``2**m - 1`` modes when every sensor qualifies).

    Sensors that cannot reconstruct the state never serve alone; under
    ``default`` they are paired through ``groups`` (lists of sensor names that
    act jointly as one reference).
    """
    names = model.sensor_names
    m = len(names)
    refs: list[tuple[int, ...]] = []
    if policy in ("default", "all_reference"):
        for i in range(m):
            if model.sensors[i].reconstructs_full_state:
                refs.append((i,))
        for g in groups or ():
            idx = tuple(sorted(model.sensor_index(nm) for nm in g))
            if not _can_reconstruct(model, idx):
                raise NoAdmissibleMode(f"group {list(g)} cannot reconstruct the state")
            if idx not in refs:
                refs.append(idx)
        if policy == "all_reference":
            full = tuple(range(m))
            if full not in refs:
                refs.append(full)
    elif policy == "complete":
        for size in range(1, m + 1):
            for combo in itertools.combinations(range(m), size):
                if _can_reconstruct(model, combo):
                    refs.append(combo)
    else:
        raise ValueError(f"unknown mode policy {policy!r}")
    if not refs:
        raise NoAdmissibleMode("no sensor or sensor group can reconstruct the robot state")
    modes = []
    for ref in refs:
        testing = tuple(i for i in range(m) if i not in ref)
        mode_id = "+".join(names[i] for i in ref)
        modes.append(Mode(mode_id, ref, testing))
    return modes


def check_admissible(
    model: RobotModel,
    modes: Sequence[Mode],
    x0: np.ndarray,
    dt: float,
    u0: np.ndarray | None = None,
) -> None:
    """Raise :class:`ModeInadmissible` if any mode cannot identify ``d_a`` at ``(x0, u0)``.

    ``u0`` defaults to zero control.
    """
    x0 = np.asarray(x0, dtype=float)
    u0 = np.zeros(model.control_dim) if u0 is None else np.asarray(u0, dtype=float)
    _, _, G = model.jacobians(x0, u0, dt)
    x1 = model.kinematic(x0, u0, dt)
    for mode in modes:
        _, C2, R2 = _stack(model, mode.reference, x1)
        try:
            _gauss_markov_gain(C2, G, C2 @ model.process_cov @ C2.T + R2)
        except ModeInadmissible as exc:
            raise ModeInadmissible(f"mode {mode.id}: {exc}") from exc
