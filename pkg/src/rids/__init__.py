"""Robotic intrusion detection: multi-mode attack estimation and decisions."""

from .detector import Detection, RidsConfig, redecide, rids_init, rids_step
from .errors import RidsError
from .models import diffdrive_model, uav_model
from .nuise import Mode, StateBelief, build_mode_set, nuise_step
from .numerics import chi2_quantile
from .scenario import ScenarioConfig, load_scenario, parse_scenario, run_scenario
from .sim import AttackEvent, AttackSchedule, MissionSpec, simulate

__version__ = "0.1.0"

__all__ = [
    "AttackEvent", "AttackSchedule", "Detection", "MissionSpec", "Mode", "RidsConfig",
    "RidsError", "ScenarioConfig", "StateBelief", "build_mode_set", "chi2_quantile",
    "diffdrive_model", "load_scenario", "nuise_step", "parse_scenario", "redecide",
    "rids_init", "rids_step", "run_scenario", "simulate", "uav_model",
]
