import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import noattack_paths, shipped_run, table2_paths
from rids.detector import RidsConfig
from rids.errors import Diverged
from rids.models import DiffDriveParams, diffdrive_model
from rids.sim import (
    ACTUATOR,
    AttackEvent,
    AttackSchedule,
    MissionSpec,
    PidGains,
    PidState,
    _actuator_attack,
    _dwell_sequence,
    _sensor_attack,
    compute_metrics,
    pid_track,
    simulate,
    wrap_angle,
)

MISSION = MissionSpec(waypoints=((0.3, -0.4), (0.3, 0.4), (0.0, 1.0)))


# -- attack schedule ---------------------------------------------------------


@pytest.mark.parametrize("kwargs", [
    dict(target="ips", onset=1.0, kind="bogus", vector=(0, 0, 0)),
    dict(target="ips", onset=2.0, offset=1.0, vector=(0, 0, 0)),
    dict(target="ips", onset=1.0),
    dict(target="ips", onset=1.0, kind="jam"),
    dict(target=ACTUATOR, onset=1.0, kind="constant"),
])
def test_attack_event_validation(kwargs):
    with pytest.raises(ValueError):
        AttackEvent(**kwargs)


def test_attack_window_half_open():
    e = AttackEvent("ips", 1.0, 2.0, vector=(0.1, 0, 0))
    assert not e.active(0.9)
    assert e.active(1.0)
    assert e.active(1.9)
    assert not e.active(2.0)


def test_schedule_overlap_rejected():
    a = AttackEvent("ips", 1.0, 3.0, vector=(0.1, 0, 0))
    with pytest.raises(ValueError):
        AttackSchedule((a, AttackEvent("ips", 2.0, vector=(0.1, 0, 0))))
    with pytest.raises(ValueError):
        AttackSchedule((AttackEvent("ips", 0.0, vector=(0.1, 0, 0)), AttackEvent("ips", 5.0, vector=(0, 0, 0))))
    # back to back and other targets are fine
    sched = AttackSchedule((a, AttackEvent("ips", 3.0, vector=(0, 0.1, 0)),
                            AttackEvent("lidar", 2.0, kind="constant")))
    assert sched.change_times == [(1.0, "ips"), (2.0, "lidar"), (3.0, "ips"), (3.0, "ips")]
    assert sched.active("ips", 3.5).vector == (0, 0.1, 0)
    assert sched.active("encoder", 3.5) is None


def test_jam_zeroes_listed_wheels():
    d = _actuator_attack(AttackEvent(ACTUATOR, 0.0, kind="jam", wheels=(1,)), np.array([7000.0, 6500.0]))
    np.testing.assert_array_equal(d, [0.0, -6500.0])


def test_constant_sensor_override():
    m = diffdrive_model()
    h = np.array([1.0, 2.0, 1.0, 2.0, 0.3])
    d = _sensor_attack(AttackEvent("lidar", 0.0, kind="constant"), 2, m, h, None, None, 0.1, None, 1e4)
    np.testing.assert_array_equal(h + d, np.zeros(5))


def test_encoder_steps_oracle():
    # 100 left-wheel steps = 1 cm extra travel; heading drops by 0.01 / (D/2)
    m = diffdrive_model()
    p = DiffDriveParams()
    ev = AttackEvent("encoder", 0.0, kind="encoder_steps", vector=(100, 0))
    d = _sensor_attack(ev, 1, m, None, np.array([0.0, 0.0, 0.0]), np.array([7000.0, 7000.0]), 0.1, p, 1e4)
    assert d[2] == pytest.approx(-0.01 / 0.045, rel=1e-12)
    assert abs(d[0]) < 0.01 and abs(d[1]) < 0.01


def test_additive_dimension_checked():
    from rids.errors import ScenarioError

    m = diffdrive_model()
    with pytest.raises(ScenarioError):
        _sensor_attack(AttackEvent("ips", 0.0, vector=(1.0,)), 0, m, np.zeros(3), None, None, 0.1, None, 1e4)


# -- controller and mission --------------------------------------------------


@given(st.floats(-50, 50))
def test_wrap_angle_range(a):
    w = wrap_angle(a)
    assert -math.pi <= w < math.pi
    assert math.isclose(math.cos(w), math.cos(a), abs_tol=1e-9)


def test_pid_straight_ahead():
    u = pid_track(np.array([0.0, 0.0, 0.0]), (1.0, 0.0), PidGains(), 7000.0, 0.1)
    np.testing.assert_allclose(u, [7000.0, 7000.0])


def test_pid_turns_toward_waypoint_and_clamps():
    u = pid_track(np.array([0.0, 0.0, 0.0]), (0.0, 1.0), PidGains(), 7000.0, 0.1)
    assert u[1] > u[0]
    big = pid_track(np.array([0.0, 0.0, 0.0]), (-1.0, 0.01), PidGains(p=100.0), 7000.0, 0.1)
    assert np.all(np.abs(big) <= 14000.0)


def test_pid_derivative_uses_state():
    s = PidState()
    pid_track(np.array([0.0, 0.0, 0.0]), (0.0, 1.0), PidGains(p=0.0, d=1.0), 7000.0, 0.1, s)
    # same error twice: derivative vanishes
    u = pid_track(np.array([0.0, 0.0, 0.0]), (0.0, 1.0), PidGains(p=0.0, d=1.0), 7000.0, 0.1, s)
    np.testing.assert_allclose(u, [7000.0, 7000.0])


def test_mission_validation_and_heading():
    with pytest.raises(ValueError):
        MissionSpec(waypoints=((5.0, 0.0),))
    with pytest.raises(ValueError):
        MissionSpec(waypoints=())
    with pytest.raises(ValueError):
        MissionSpec(waypoints=((0.0, 0.0),), cruise=0.0)
    assert MISSION.initial_pose()[2] == pytest.approx(math.atan2(0.8, 0.3))


# -- simulation --------------------------------------------------------------


def _short(seed, schedule=AttackSchedule(), n=30, **kw):
    return simulate(diffdrive_model(), MISSION, schedule, RidsConfig(), seed, max_iterations=n, **kw)


def test_determinism():
    a, b, c = _short(1), _short(1), _short(2)
    for ta, tb in zip(a.traces, b.traces):
        np.testing.assert_array_equal(ta.x_true, tb.x_true)
        np.testing.assert_array_equal(ta.detection.x, tb.detection.x)
        assert ta.detection.actuator_stat == tb.detection.actuator_stat
    assert not np.array_equal(a.traces[-1].x_true, c.traces[-1].x_true)


def test_attack_timeline():
    sched = AttackSchedule((AttackEvent(ACTUATOR, 1.0, vector=(-500, 500)),
                            AttackEvent("ips", 1.0, vector=(0.05, 0, 0))))
    res = _short(3, sched, n=15)
    first_act = next(tr.k for tr in res.traces if tr.actuator_truth)
    first_ips = next(tr.k for tr in res.traces if tr.sensor_truth)
    # actuator truth refers to the control applied over [t_{k-1}, t_k)
    assert first_act == 11
    assert first_ips == 10
    np.testing.assert_array_equal(res.traces[10].d_a_true, [-500, 500])
    np.testing.assert_allclose(res.traces[9].u_executed, res.traces[9].u_planned)
    np.testing.assert_allclose(res.traces[9].d_s_true[0], [0.05, 0, 0])


def test_diverged():
    mission = MissionSpec(waypoints=((0.01, 0.01),), start=(0.0, 0.0), arena=(0.1, 0.1))
    sched = AttackSchedule((AttackEvent(ACTUATOR, 0.0, vector=(1e6, 1e6)),))
    with pytest.raises(Diverged):
        simulate(diffdrive_model(), mission, sched, RidsConfig(), 0, max_iterations=100)


def test_feedback_validation():
    with pytest.raises(ValueError):
        _short(0, feedback="gps")
    with pytest.raises(ValueError):
        _short(0, dt=0.0)


def test_ips_raw_feedback_runs():
    res = _short(4, feedback="ips_raw", n=20)
    assert len(res.traces) == 20


# -- scoring -----------------------------------------------------------------


def _tr(k, alarm_s=False, confirmed=(), alarm_a=False, truth_s=(), truth_a=False, mode="ips"):
    det = SimpleNamespace(sensor_alarm=alarm_s, confirmed_sensors=tuple(confirmed), actuator_alarm=alarm_a,
                          selected_mode=mode, d_a_window_mean=None,
                          sensor_estimates={c: (np.zeros(3), np.eye(3)) for c in confirmed})
    return SimpleNamespace(k=k, t=0.1 * k, detection=det, sensor_truth=tuple(truth_s), actuator_truth=truth_a,
                           d_a_true=np.zeros(2), d_s_true=[np.zeros(3)] * 3)


def test_compute_metrics_counts():
    traces = [
        _tr(1),                                                     # tn
        _tr(2, alarm_s=True, confirmed=("ips",)),                   # fp
        _tr(3, truth_s=("lidar",), mode="ips"),                     # fn
        _tr(4, alarm_s=True, confirmed=("ips",), truth_s=("lidar",)),  # wrong target: fp
        _tr(5, alarm_s=True, confirmed=("lidar",), truth_s=("lidar",), mode="lidar"),  # tp
        _tr(6, alarm_a=True, truth_a=True, truth_s=("lidar",), alarm_s=True, confirmed=("lidar",)),
    ]
    sched = AttackSchedule((AttackEvent("lidar", 0.3, kind="constant"),))
    m = compute_metrics(traces, sched, ["ips", "encoder", "lidar"], 0.1)
    assert (m.sensor.tp, m.sensor.fp, m.sensor.fn, m.sensor.tn) == (2, 2, 1, 1)
    assert (m.actuator.tp, m.actuator.fp, m.actuator.fn, m.actuator.tn) == (1, 0, 0, 5)
    assert m.sensor.fpr == pytest.approx(2 / 3)
    assert m.actuator.fnr == 0.0
    assert m.mode_accuracy == pytest.approx(3 / 4)
    assert m.delays == [{"target": "lidar", "time": 0.3, "delay_s": 0.2, "delay_iterations": 2}]
    # no label lasts three iterations
    assert m.sensor_transitions == []
    assert not m.out_of_threat_model


def test_rates_none_when_undefined():
    m = compute_metrics([_tr(1)], AttackSchedule(), ["ips"], 0.1)
    assert m.sensor.fnr is None and m.sensor.tpr is None
    assert m.as_dict()["actuator"]["fnr"] is None
    assert m.mode_accuracy is None


@pytest.mark.parametrize("labels,dwell,expected", [
    (["S0"] * 5, 3, ["S0"]),
    (["S0"] * 5 + ["S1"] * 2 + ["S0"] * 4, 3, ["S0"]),
    (["S0"] * 5 + ["S1"] * 3, 3, ["S0", "S1"]),
    (["S0", "S1", "S1", "S1", "S2", "S2", "S2"], 3, ["S1", "S2"]),
    (["A0", "A1", "A0"], 1, ["A0", "A1", "A0"]),
    ([], 3, []),
])
def test_dwell_sequence(labels, dwell, expected):
    assert _dwell_sequence(labels, dwell) == expected


def test_transitions_skip_warmup():
    traces = [_tr(k, alarm_s=True, confirmed=("lidar",), truth_s=("lidar",)) for k in range(1, 11)]
    for tr in traces[:6]:
        tr.detection.sensor_alarm = False
    m = compute_metrics(traces, AttackSchedule((AttackEvent("lidar", 0.0, kind="constant"),)),
                        ["ips", "encoder", "lidar"], 0.1, warmup=6)
    assert m.sensor_transitions == ["S3"]


# -- shipped no-attack missions ----------------------------------------------


@pytest.fixture(scope="module")
def noattack_runs():
    return [shipped_run(p.stem) for p in noattack_paths()]


def test_noattack_reaches_goal(noattack_runs):
    assert all(res.metrics.reached_goal for _, res in noattack_runs)


def test_noattack_zero_alarm_events_in_eight_of_nine(noattack_runs):
    clean = [
        not any(tr.detection.sensor_alarm or tr.detection.actuator_alarm for tr in res.traces)
        for _, res in noattack_runs
    ]
    assert sum(clean) >= 8, f"runs without any alarm: {sum(clean)} of {len(clean)}"


def test_noattack_sensor_channel_silent(noattack_runs):
    assert all(res.metrics.sensor.fp == 0 for _, res in noattack_runs)


@pytest.mark.parametrize("name", [p.stem for p in table2_paths()] + [p.stem for p in noattack_paths()])
def test_metric_invariants(name):
    _, res = shipped_run(name)
    for ch in (res.metrics.sensor, res.metrics.actuator):
        if ch.fpr is not None:
            assert ch.fpr + ch.tn / (ch.fp + ch.tn) == pytest.approx(1.0)
        assert ch.tp + ch.fp + ch.fn + ch.tn == res.metrics.iterations
    for d in res.metrics.delays:
        assert d["delay_iterations"] is None or d["delay_iterations"] >= 0
