import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import linear_model
from rids.detector import (
    DecisionState,
    Estimate,
    RidsConfig,
    actuator_mode_label,
    decide,
    redecide,
    rids_init,
    rids_step,
    sensor_mode_label,
    split_sensor_attack,
    window_positive_count,
)
from rids.errors import AllModesFailed, DimensionMismatch, InvalidAlpha
from rids.models import RobotModel, SensorModel, diffdrive_model
from rids.nuise import Mode, build_mode_set
from rids.numerics import chi2_quantile, mvn_sample


@given(st.lists(st.booleans(), max_size=20), st.integers(0, 25))
def test_window_count_is_sum_of_tail(buf, w):
    expected = sum(buf[-w:]) if w > 0 else 0
    assert window_positive_count(buf, w) == expected


def test_window_count_short_buffer():
    assert window_positive_count([True, False], 6) == 1


@pytest.mark.parametrize("kwargs,exc", [
    ({"c_a": 7}, ValueError),
    ({"c_s": 0}, ValueError),
    ({"w_s": 0, "c_s": 0}, ValueError),
    ({"alpha_s": 0.0}, InvalidAlpha),
    ({"alpha_a": 1.0}, InvalidAlpha),
    ({"epsilon": 0.0}, ValueError),
    ({"warmup": -1}, ValueError),
])
def test_config_validation(kwargs, exc):
    with pytest.raises(exc):
        RidsConfig(**kwargs)


def test_config_defaults():
    cfg = RidsConfig()
    assert (cfg.w_s, cfg.c_s, cfg.w_a, cfg.c_a) == (2, 2, 6, 3)
    assert (cfg.alpha_s, cfg.alpha_a) == (0.005, 0.05)
    assert cfg.warmup_iterations == 6
    assert RidsConfig(warmup=0).warmup_iterations == 0


def test_labels():
    assert sensor_mode_label(()) == "S0"
    assert sensor_mode_label(("ips",)) == "S1"
    assert sensor_mode_label(("lidar", "encoder")) == "S4"
    assert sensor_mode_label(("gps",)) == "S{gps}"
    assert actuator_mode_label(True) == "A1"
    assert actuator_mode_label(False) == "A0"


# -- decision stage on synthetic estimates --------------------------------


def _estimate(k, d_a, d_s=(0.0,), name="t"):
    d_a = np.atleast_1d(np.asarray(d_a, float))
    d_s = np.atleast_1d(np.asarray(d_s, float))
    return Estimate(
        k=k, selected_mode="r", testing=(name,), mu=np.ones(1), x=np.zeros(1), P=np.eye(1),
        d_s=d_s, P_s=np.eye(d_s.size), d_a=d_a, P_a=np.eye(d_a.size),
        residuals={name: d_s, "r": np.zeros(1)}, blocks={name: (d_s, np.eye(d_s.size))},
    )


def test_actuator_three_of_six():
    big = 10.0  # well above chi2(1, 0.05) = 3.84
    pattern = [0, 1, 0, 1, 0, 1, 1, 0, 0, 0, 0, 0, 1]
    cfg = RidsConfig(warmup=0)
    dets = redecide([_estimate(k, big if b else 0.0) for k, b in enumerate(pattern, 1)], cfg)
    assert [int(d.b_a) for d in dets] == pattern
    # alarm only when positive now and >= 3 positives among the last 6
    assert [int(d.actuator_alarm) for d in dets] == [0, 0, 0, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0]


def test_sensor_two_of_two_and_confirmation():
    big = 20.0  # > chi2(1, 0.005) = 7.88 for a unit block
    pattern = [1, 0, 1, 1, 1, 0]
    cfg = RidsConfig(warmup=0)
    dets = redecide([_estimate(k, 0.0, big if b else 0.0) for k, b in enumerate(pattern, 1)], cfg)
    assert [int(d.sensor_alarm) for d in dets] == [0, 0, 0, 1, 1, 0]
    assert dets[3].confirmed_sensors == ("t",)
    np.testing.assert_allclose(dets[3].sensor_estimates["t"][0], [big])
    assert dets[5].confirmed_sensors == ()


def test_confirmation_uses_windowed_mean():
    # both samples trip the stacked test but their mean is zero
    cfg = RidsConfig(warmup=0)
    dets = redecide([_estimate(1, 0.0, 20.0), _estimate(2, 0.0, -20.0)], cfg)
    assert dets[1].sensor_alarm
    assert dets[1].confirmed_sensors == ()
    assert dets[1].sensor_mode == "S0"


def test_warmup_forces_negative():
    cfg = RidsConfig(warmup=4, c_a=1, w_a=1)
    dets = redecide([_estimate(k, 100.0) for k in range(1, 7)], cfg)
    assert [d.b_a for d in dets] == [False] * 4 + [True] * 2


def test_thresholds_reported():
    d = redecide([_estimate(1, [0.0, 0.0], [0.0, 0.0, 0.0])], RidsConfig())[0]
    assert d.actuator_threshold == pytest.approx(chi2_quantile(2, 0.05))
    assert d.sensor_threshold == pytest.approx(chi2_quantile(3, 0.005))


def test_actuator_window_mean():
    cfg = RidsConfig(warmup=0, w_a=3, c_a=3)
    dets = redecide([_estimate(k, v) for k, v in enumerate([6.0, 9.0, 12.0], 1)], cfg)
    assert dets[-1].actuator_alarm
    np.testing.assert_allclose(dets[-1].d_a_window_mean, [9.0])
    assert dets[0].d_a_window_mean is None


def test_decide_counts_iterations():
    ds = DecisionState.empty(RidsConfig())
    decide(ds, _estimate(1, 0.0), RidsConfig())
    decide(ds, _estimate(2, 0.0), RidsConfig())
    assert ds.k == 2


def test_split_sensor_attack():
    m = diffdrive_model()
    mode = build_mode_set(m)[0]  # ips reference; encoder and lidar testing
    d = np.arange(8.0)
    P = np.arange(64.0).reshape(8, 8)
    parts = split_sensor_attack(d, P, mode, m)
    assert list(parts) == ["encoder", "lidar"]
    np.testing.assert_array_equal(parts["encoder"][0], [0, 1, 2])
    np.testing.assert_array_equal(parts["lidar"][1], P[3:, 3:])
    with pytest.raises(DimensionMismatch):
        split_sensor_attack(d[:5], P[:5, :5], mode, m)


# -- full loop on the linear toy system -----------------------------------


def _run_toy(n_iter, seed, cfg=RidsConfig(), d_a=0.0, d_s=None, onset=0):
    m = linear_model()
    rng = np.random.default_rng(seed)
    x = np.zeros(2)
    P0 = 1e-4 * np.eye(2)
    state = rids_init(m, cfg, x + mvn_sample(np.zeros(2), P0, rng), P0, 0.1)
    u = np.array([0.5])
    dets = []
    for k in range(1, n_iter + 1):
        on = k > onset
        x = m.kinematic(x, u + (d_a if on else 0.0), 0.1) + mvn_sample(np.zeros(2), m.process_cov, rng)
        z = [s.measure(x) + mvn_sample(np.zeros(2), s.meas_cov, rng) for s in m.sensors]
        if d_s is not None and on:
            z[1] = z[1] + d_s
        dets.append(rids_step(state, u, z))
    return state, dets


@pytest.fixture(scope="module")
def toy_noattack():
    return _run_toy(10000, seed=11)


def test_per_iteration_rates_match_alpha(toy_noattack):
    _, dets = toy_noattack
    n = len(dets) - 6
    bs = sum(d.b_s for d in dets[6:])
    ba = sum(d.b_a for d in dets[6:])
    # binomial 4-sigma bands around alpha
    assert abs(bs - 0.005 * n) < 4 * math.sqrt(0.005 * n)
    assert abs(ba - 0.05 * n) < 4 * math.sqrt(0.05 * 0.95 * n)


def test_two_of_two_alarm_rate(toy_noattack):
    _, dets = toy_noattack
    # independent tests give alpha_s^2 = 2.5e-5 per iteration
    assert sum(d.sensor_alarm for d in dets) <= 3


def test_belief_normalized(toy_noattack):
    state, dets = toy_noattack
    assert state.mu.sum() == pytest.approx(1.0)
    assert all(d.mu.min() >= 0 for d in dets[-10:])


def test_sensor_attack_detected_and_quantified():
    _, dets = _run_toy(60, seed=3, d_s=np.array([0.2, 0.0]), onset=20)
    post = dets[22:]
    assert all(d.sensor_alarm and d.confirmed_sensors == ("b",) for d in post)
    assert all(d.selected_mode == "a" for d in post)
    np.testing.assert_allclose(post[-1].sensor_estimates["b"][0], [0.2, 0.0], atol=0.03)
    assert not any(d.sensor_alarm for d in dets[:20])


def test_actuator_attack_detected():
    _, dets = _run_toy(60, seed=4, d_a=np.array([1.0]), onset=20)
    assert sum(d.actuator_alarm for d in dets[22:]) >= 36
    np.testing.assert_allclose(dets[-1].d_a_window_mean, [1.0], rtol=0.1)


def test_redecide_reproduces_stream(toy_noattack):
    _, dets = toy_noattack
    again = redecide([d.estimate for d in dets[:500]], RidsConfig())
    for a, b in zip(dets[:500], again):
        assert (a.b_s, a.b_a, a.sensor_alarm, a.actuator_alarm) == (b.b_s, b.b_a, b.sensor_alarm, b.actuator_alarm)
        assert a.sensor_stat == b.sensor_stat and a.actuator_stat == b.actuator_stat


def test_epsilon_floor_keeps_modes_alive():
    # mode "b" reference is lied to; its belief is floored before normalization
    _, dets = _run_toy(80, seed=5, d_s=np.array([0.5, 0.0]), onset=10)
    for d in dets:
        assert d.mu.min() > 0.0
        assert abs(d.mu.sum() - 1.0) < 1e-12
    assert dets[-1].selected_mode == "a"


def _with_blind_mode():
    base = linear_model()
    C = np.array([[1.0, 0.0]])
    blind = SensorModel("blind", 1, lambda x: C @ x, np.eye(1) * 1e-4, lambda x: C.copy(),
                        reconstructs_full_state=True)
    return RobotModel("mixed", 2, 1, base.kinematic,
                      lambda x, u, dt: (base.jacobians(x, u, dt)[0], np.array([[0.0], [1.0]]),
                                        np.array([[0.0], [1.0]])),
                      base.process_cov, (base.sensors[0], blind))


def test_failed_mode_never_selected():
    m = _with_blind_mode()
    state = rids_init(m, RidsConfig(), np.zeros(2), 1e-4 * np.eye(2), 0.1)
    for _ in range(5):
        d = rids_step(state, np.array([0.0]), [np.zeros(2), np.zeros(1)])
        assert d.selected_mode == "a"


def test_all_modes_failed():
    m = _with_blind_mode()
    modes = [Mode("blind", (1,), (0,))]
    state = rids_init(m, RidsConfig(), np.zeros(2), 1e-4 * np.eye(2), 0.1, modes=modes)
    with pytest.raises(AllModesFailed):
        rids_step(state, np.array([0.0]), [np.zeros(2), np.zeros(1)])


def test_reading_count_checked():
    state = rids_init(linear_model(), RidsConfig(), np.zeros(2), np.eye(2), 0.1)
    with pytest.raises(DimensionMismatch):
        rids_step(state, np.array([0.0]), [np.zeros(2)])


def test_init_shape_checked():
    with pytest.raises(DimensionMismatch):
        rids_init(linear_model(), RidsConfig(), np.zeros(3), np.eye(2), 0.1)
