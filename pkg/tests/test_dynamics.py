import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from racesim.dynamics import (DisturbanceModel, DualTrackModel, IntegrationError, TireParams,
                              VehicleParams, VehicleSpec, VehicleState, braking_distance,
                              combined_slip_forces, delay_distance, dual_track_derivative, kph,
                              load_vehicle, magic_formula, rk4_step, slip_for_force, step_rk4,
                              vehicle_from_dict, vehicle_to_dict)

from conftest import ROOT

G = 9.81
TIRE = TireParams()


# -- tire ------------------------------------------------------------------


def test_zero_slip_zero_force():
    assert magic_formula(0.0, 10, 1.9, 1.0, 0.97, 3000.0) == 0.0


def test_small_slip_stiffness():
    h = 1e-6
    fd = (magic_formula(h, 10, 1.9, 1.0, 0.97, 3000.0)
          - magic_formula(-h, 10, 1.9, 1.0, 0.97, 3000.0)) / (2 * h)
    assert fd == pytest.approx(57000.0, rel=1e-3)


def test_force_bounded_and_odd():
    slip = np.linspace(-1.0, 1.0, 20001)
    f = magic_formula(slip, 10, 1.9, 1.0, 0.97, 3000.0)
    assert np.abs(f).max() <= 3000.0
    assert np.array_equal(magic_formula(-slip, 10, 1.9, 1.0, 0.97, 3000.0), -f)


@settings(max_examples=200, deadline=None)
@given(f=st.floats(-0.999, 0.999), fz=st.floats(500.0, 8000.0))
def test_slip_inverse(f, fz):
    force = f * TIRE.D * fz
    x = slip_for_force(force, TIRE, fz)
    assert magic_formula(x, TIRE.B, TIRE.C, TIRE.D, TIRE.E, fz) == pytest.approx(force, abs=1e-6 * fz)


def test_combined_reduces_to_pure():
    fx, fy = combined_slip_forces(0.05, 0.0, TIRE, 3000.0)
    assert fy == 0.0 and fx == magic_formula(0.05, 10, 1.9, 1.0, 0.97, 3000.0)
    fx, fy = combined_slip_forces(0.0, -0.04, TIRE, 3000.0)
    assert fx == 0.0 and fy == magic_formula(-0.04, 10, 1.9, 1.0, 0.97, 3000.0)


def test_combined_resultant_on_grid():
    worst = 0.0
    for k in np.linspace(-0.5, 0.5, 100):
        for a in np.linspace(-0.5, 0.5, 100):
            fx, fy = combined_slip_forces(k, a, TIRE, 3000.0)
            worst = max(worst, math.hypot(fx, fy))
    assert worst <= 3000.0 * (1 + 1e-9)


def test_tire_validation():
    with pytest.raises(ValueError):
        TireParams(E=1.2)
    with pytest.raises(ValueError):
        VehicleParams(mass=-1.0)


# -- vehicle model -----------------------------------------------------------


@pytest.fixture(scope="module")
def model():
    return DualTrackModel()


def test_straight_driving_symmetric(model):
    d = model.derivative(VehicleState(vx=50.0), 0.0, 0.0)
    assert d[4] == 0.0 and d[5] == 0.0


def linear_single_track_yaw_rate(p: VehicleParams, tire: TireParams, vx: float, delta: float):
    """Independent oracle: linear bicycle with axle cornering stiffness B*C*D*Fz."""
    down = p.downforce_coeff * vx * vx
    fz_f = p.mass * G * p.lr / p.wheelbase + down * p.aero_front_share
    fz_r = p.mass * G * p.lf / p.wheelbase + down * (1 - p.aero_front_share)
    c_f, c_r = tire.B * tire.C * tire.D * fz_f, tire.B * tire.C * tire.D * fz_r
    k_us = p.mass / p.wheelbase * (p.lr / c_f - p.lf / c_r)
    return vx * delta / (p.wheelbase + k_us * vx * vx)


def test_steady_circle_matches_linear_model(model):
    s = VehicleState(vx=20.0).as_array()
    for _ in range(3000):
        s = model.step(s, 0.01, 0.0, 0.005)
    r_lin = linear_single_track_yaw_rate(model.params, TIRE, s[3], 0.01)
    assert s[5] == pytest.approx(r_lin, rel=0.10)


def test_load_transfer_under_braking(model):
    p = model.params
    static_front = p.mass * G * p.lr / p.wheelbase
    loads = model.wheel_loads(VehicleState(vx=0.0, ax_cmd_filtered=-14.0))
    assert loads[0] + loads[1] > static_front
    assert sum(loads) == pytest.approx(p.mass * G, abs=1e-6)


@settings(max_examples=100, deadline=None)
@given(v=st.floats(0.0, 83.0), ax=st.floats(-14.0, 6.0), ay=st.floats(-14.0, 14.0))
def test_total_load(model, v, ax, ay):
    # all four wheels stay loaded within these limits, so no clipping
    p = model.params
    r = ay / v if v > 1.0 else 0.0
    loads = model.wheel_loads(VehicleState(vx=v, r=r, ax_cmd_filtered=ax))
    expected = p.mass * G + p.downforce_coeff * v * v
    assert sum(loads) == pytest.approx(expected, abs=1e-6)


def test_low_speed_fallback(model):
    s = VehicleState(vx=0.05, delta=0.1).as_array()
    for _ in range(200):
        s = model.step(s, 0.1, 1.0, 0.005)
    assert np.all(np.isfinite(s)) and s[3] > 0.05


def test_standstill_never_reverses(model):
    s = VehicleState().as_array()
    for _ in range(100):
        s = model.step(s, 0.0, -10.0, 0.005)
    assert s[3] == 0.0


def test_step_rejects_bad_dt(model):
    with pytest.raises(ValueError):
        model.step(VehicleState(vx=10).as_array(), 0, 0, 0.05)


def test_non_finite_state_raises(model):
    bad = VehicleState(vx=10.0, vy=float("nan")).as_array()
    with pytest.raises(IntegrationError) as exc:
        model.step(bad, 0.0, 0.0, 0.005)
    assert math.isnan(exc.value.state.vy)


def test_rk4_exact_on_constant_acceleration():
    def f(t, y):
        return np.array([y[1], 3.0])
    y = np.array([1.0, 2.0])
    dt = 0.01
    for k in range(100):
        y = rk4_step(f, y, k * dt, dt)
    assert y[0] == pytest.approx(1.0 + 2.0 + 1.5, abs=1e-9)
    assert y[1] == pytest.approx(5.0, abs=1e-9)


def test_coasting_energy_decreases(model):
    s = VehicleState(vx=50.0).as_array()
    e = []
    for _ in range(400):
        s = model.step(s, 0.0, 0.0, 0.005)
        e.append(0.5 * (s[3] ** 2 + s[4] ** 2))
    assert np.all(np.diff(e) < 0)


def test_step_is_deterministic():
    st_ = VehicleState(vx=45.0, vy=0.3, r=0.1, delta=0.02)
    a = step_rk4(st_, (0.03, -2.0), dt=0.005, disturbance=(-50.0, 20.0))
    b = step_rk4(st_, (0.03, -2.0), dt=0.005, disturbance=(-50.0, 20.0))
    assert a.as_array().tobytes() == b.as_array().tobytes()


def test_mirror_symmetry(model):
    s = VehicleState(vx=40.0).as_array()
    m = s.copy()
    for k in range(400):
        d = 0.03 * math.sin(0.02 * k)
        s = model.step(s, d, 1.0, 0.005, (-30.0, 80.0))
        m = model.step(m, -d, 1.0, 0.005, (-30.0, -80.0))
    for i in (1, 2, 4, 5, 6):
        assert s[i] == pytest.approx(-m[i], abs=1e-9)
    for i in (0, 3, 7):
        assert s[i] == pytest.approx(m[i], abs=1e-9)


def test_derivative_wrapper():
    d = dual_track_derivative(VehicleState(vx=30.0), (0.0, 2.0))
    assert d.x == pytest.approx(30.0) and d.ax_cmd_filtered > 0


def test_disturbance_counter_based():
    dm = DisturbanceModel(seed=4, wind_mean=10.0, wind_std=5.0, lateral_std=20.0)
    forward = [dm.sample(1, 0.1 * k) for k in range(50)]
    backward = [dm.sample(1, 0.1 * k) for k in reversed(range(50))][::-1]
    assert forward == backward
    assert dm.sample(1, 0.3) != dm.sample(2, 0.3)
    assert DisturbanceModel().sample(0, 1.0) == (0.0, 0.0)


def test_vehicle_file_round_trip():
    spec = load_vehicle(ROOT / "vehicles" / "av21_like.json")
    assert vehicle_from_dict(vehicle_to_dict(spec)) == spec
    assert isinstance(spec, VehicleSpec)


# -- closed forms ------------------------------------------------------------


@pytest.mark.parametrize("v_kph, expected", [(100, 27.557), (200, 110.229), (300, 248.016)])
def test_braking_distance(v_kph, expected):
    assert braking_distance(kph(v_kph), 14.0) == pytest.approx(expected, abs=1e-3)


def test_closed_form_edges():
    assert braking_distance(0.0, 14.0) == 0.0
    assert delay_distance(kph(300), 0.0) == 0.0
    assert delay_distance(kph(100), 0.2) == pytest.approx(5.556, abs=1e-3)
    with pytest.raises(ValueError):
        braking_distance(10.0, 0.0)
