"""Shared fixtures: a linear toy system and cached runs of the shipped scenarios."""

from __future__ import annotations

from importlib import resources
from pathlib import Path

import numpy as np
import pytest

from rids.models import RobotModel, SensorModel
from rids.scenario import load_scenario, run_scenario


def linear_model(q: float = 1e-4, r: float = 1e-4, dt_scale: float = 1.0) -> RobotModel:
    """Two-state, one-input linear system with two full-state sensors.

    ``x' = A x + B (u + d_a)``; the first sensor reads ``x`` and the second
    reads ``(x0 + x1, x1)``.
    """
    A = np.array([[1.0, 0.1], [0.0, 1.0]])
    B = np.array([[0.005], [0.1 * dt_scale]])
    C_b = np.array([[1.0, 1.0], [0.0, 1.0]])
    sensors = (
        SensorModel("a", 2, lambda x: np.array(x, dtype=float), r * np.eye(2), lambda x: np.eye(2)),
        SensorModel("b", 2, lambda x: C_b @ x, r * np.eye(2), lambda x: C_b.copy()),
    )
    return RobotModel(
        name="linear",
        state_dim=2,
        control_dim=1,
        kinematic=lambda x, u, dt: A @ x + B @ np.atleast_1d(u),
        jacobians=lambda x, u, dt: (A.copy(), B.copy(), B.copy()),
        process_cov=q * np.eye(2),
        sensors=sensors,
    )


@pytest.fixture
def toy():
    return linear_model()


SCENARIO_DIR = Path(str(resources.files("rids") / "scenarios"))


def shipped_paths() -> list[Path]:
    return sorted(SCENARIO_DIR.glob("*.yaml"))


def _row_key(p: Path) -> tuple:
    stem = p.stem
    if stem.startswith("table2_row"):
        return (0, int(stem.removeprefix("table2_row")))
    return (1, stem)


def table2_paths() -> list[Path]:
    return sorted(SCENARIO_DIR.glob("table2_row*.yaml"), key=_row_key)


def noattack_paths() -> list[Path]:
    return sorted(SCENARIO_DIR.glob("noattack_*.yaml"))


_CACHE: dict[str, tuple] = {}


def shipped_run(name: str):
    """``(cfg, SimResult)`` for a shipped scenario at its first seed, memoized."""
    if name not in _CACHE:
        cfg = load_scenario(SCENARIO_DIR / f"{name}.yaml")
        _CACHE[name] = (cfg, run_scenario(cfg))
    return _CACHE[name]
