"""
Simulator tests.

 Group 1: scenario validation and numerical kernels
 Group 2: equilibrium start and event handling
 Group 3: three-bus frequency response trends (slow)
 Group 4: Q-V initialization
 Group 5: integration accuracy and determinism
"""

from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest

from analysis import frequency_metrics, metrics_until
from conftest import gfm_infinite_bus, three_bus
from droop_e_control import LinearDroopParams, d_exp_unchecked
from simulator import (
    GenTrip,
    LoadStep,
    PowerSystemModel,
    SimulationError,
    Simulator,
    TimeSeries,
    numerical_jacobian,
    run,
    scenario_dispatch,
    trapezoidal_step,
)


# ═══════════════════════════════════════════════════════════════════════════════
# Group 1: scenario validation and numerical kernels
# ═══════════════════════════════════════════════════════════════════════════════


def test_scenario_validation_lists_every_problem(three_bus_scenario):
    bad = three_bus(events=[LoadStep(1.0, 9, 0.1), GenTrip(50.0, "nobody")])
    problems = bad.validate()
    assert any("unknown bus 9" in p for p in problems)
    assert any("nobody" in p for p in problems)
    assert any("outside" in p for p in problems)
    assert three_bus_scenario.validate() == []


def test_invalid_scenario_refused():
    with pytest.raises(SimulationError):
        PowerSystemModel(three_bus(events=[LoadStep(1.0, 9, 0.1)]))


def test_numerical_jacobian_linear_map():
    a = np.array([[-1.0, 2.0], [0.5, -3.0]])
    assert np.allclose(numerical_jacobian(lambda x: a @ x, np.array([0.3, -0.2])), a, atol=1e-9)


def test_trapezoidal_step_linear_decay():
    lam, dt = -2.0, 0.01
    fun = lambda x: lam * x
    solve = lambda g: g / (1 - 0.5 * dt * lam)
    x = np.array([1.0])
    for _ in range(100):
        x, _, iterations = trapezoidal_step(fun, x, fun(x), dt, solve)
    growth = (1 + 0.5 * dt * lam) / (1 - 0.5 * dt * lam)
    assert x[0] == pytest.approx(growth**100, rel=1e-10)
    assert x[0] == pytest.approx(math.exp(lam * 1.0), rel=1e-4)


def test_timeseries_select_renames_channels():
    series = TimeSeries(np.array([0.0, 0.1]), {"f_a_hz": np.array([60.0, 59.9]), "p_a_pu": np.array([0.1, 0.2])})
    picked = series.select({"freq": "f_a_hz"})
    assert list(picked.channels) == ["freq"]
    assert list(picked.to_frame().columns) == ["time_s", "freq"]
    with pytest.raises(SimulationError):
        series.select({"x": "missing"})


# ═══════════════════════════════════════════════════════════════════════════════
# Group 2: equilibrium start and event handling
# ═══════════════════════════════════════════════════════════════════════════════


def test_three_bus_initial_equilibrium(three_bus_scenario):
    model = PowerSystemModel(three_bus_scenario)
    x0 = model.initialize()
    assert model.equilibrium_residual(x0) < 1e-8
    assert len(model.labels) == 11
    power = model.device_power(x0)
    assert power["gfm"].real == pytest.approx(0.03, abs=1e-9)


def test_flat_run_without_events():
    series = run(three_bus(t_end=1.0))
    f = series["f_sg_hz"]
    assert np.ptp(f) < 1e-6
    assert series.meta["pre_event_flat"]
    assert series.meta["first_event_s"] is None
    assert np.allclose(series["f_weighted_hz"], 60.0, atol=1e-6)


def test_channels_and_time_grid(load_step):
    series = run(three_bus(events=[load_step], t_end=1.2))
    assert len(series.time) == 301
    assert series.time[-1] == pytest.approx(1.2)
    for name in ("f_sg_hz", "f_gfm_hz", "p_sg_pu", "p_gfm_pu", "omega_ps_gfm_pu", "p_filt_gfm_pu", "v_bus2_pu", "f_weighted_hz"):
        assert name in series, name
    assert series.meta["first_event_s"] == pytest.approx(1.0)


def test_load_step_is_applied_at_event_sample(load_step):
    series = run(three_bus(events=[load_step], t_end=1.2))
    k = int(round(1.0 / series.dt))
    # device outputs jump at the event sample, before any state has moved
    jump = series["p_sg_pu"][k] + series["p_gfm_pu"][k] - (series["p_sg_pu"][k - 1] + series["p_gfm_pu"][k - 1])
    assert jump == pytest.approx(0.15, abs=0.02)
    assert series["f_sg_hz"][k] == pytest.approx(60.0, abs=1e-6)


def test_generator_trip_removes_output():
    scenario = three_bus(events=[GenTrip(0.8, "gfm")], t_end=1.0)
    series = run(scenario)
    k = int(round(0.8 / series.dt))
    assert series["p_gfm_pu"][k - 1] == pytest.approx(0.03, abs=1e-6)
    assert series["p_gfm_pu"][k] == 0.0
    assert series["f_sg_hz"][-1] < 60.0


def test_off_grid_event_snaps(caplog, load_step):
    scenario = three_bus(events=[LoadStep(1.001, 2, 0.15, 0.05)], t_end=1.1)
    with caplog.at_level("WARNING"):
        series = run(scenario)
    assert "snapped" in caplog.text
    assert series.meta["first_event_s"] == pytest.approx(1.0)


def test_redispatch_copy_leaves_original(three_bus_scenario):
    moved = scenario_dispatch(three_bus_scenario, "gfm", 0.2)
    assert moved.dispatch["gfm"].p == 0.2
    assert three_bus_scenario.dispatch["gfm"].p == 0.03
    assert moved.events == []


def test_infinite_bus_holds_frequency():
    scenario = gfm_infinite_bus(t_end=0.5)
    series = Simulator(scenario).run()
    assert np.allclose(series["f_gfm_hz"], 60.0, atol=1e-6)


# ═══════════════════════════════════════════════════════════════════════════════
# Group 3: three-bus frequency response trends (slow)
# ═══════════════════════════════════════════════════════════════════════════════


@pytest.fixture(scope="module")
def trend_runs():
    step = [LoadStep(1.0, 2, 0.15, 0.05)]
    return {
        "A": run(three_bus(p_gfm=0.03, events=step, t_end=20.0)),
        "B": run(three_bus(p_gfm=0.40, events=step, t_end=20.0)),
        "A_linear": run(three_bus(p_gfm=0.03, events=step, t_end=20.0,
                                  controller=LinearDroopParams(omega_fil=1 / 0.0167), power_sharing=False)),
        "C": run(three_bus(p_gfm=0.03, events=[LoadStep(1.0, 2, -0.15, -0.05)], t_end=20.0)),
    }


def _pre_sharing(series, channel="f_sg_hz"):
    return frequency_metrics(series, channel=channel, until=metrics_until(series, "pre_sharing"))


def _engaged_index(series):
    engaged = series.meta["sharing_engaged_s"]
    return int(round(engaged / series.dt)) if engaged is not None else len(series.time)


@pytest.mark.slow
def test_nadir_ordering(trend_runs):
    nadir = {k: _pre_sharing(v).nadir_hz for k, v in trend_runs.items()}
    assert nadir["A"] > nadir["B"], nadir
    assert nadir["A"] > nadir["A_linear"], nadir


@pytest.mark.slow
def test_over_frequency_case(trend_runs):
    series = trend_runs["C"]
    assert series.meta["sharing_engaged_s"] is not None
    metrics = _pre_sharing(series)
    assert metrics.peak_hz > 60.0
    assert metrics.peak_hz < 60.3, f"peak before sharing {metrics.peak_hz:.5f} Hz"


@pytest.mark.slow
def test_sharing_settles_on_linear_droop_without_offset(trend_runs):
    # after sharing the over-frequency case sits on the 5% line through p_set, not above it
    series = trend_runs["C"]
    p_set = series["p_filt_gfm_pu"][0]
    p = series["p_filt_gfm_pu"][-1]
    deviation = series["f_gfm_hz"][-1] / 60.0 - 1.0
    assert deviation == pytest.approx(0.05 * (p_set - p), abs=1e-3)


@pytest.mark.slow
def test_inverter_picks_up_more_than_machine(trend_runs):
    series = trend_runs["A"]
    k = _engaged_index(series) - 1
    d_gfm = series["p_gfm_pu"][k] - series["p_gfm_pu"][0]
    d_sg = series["p_sg_pu"][k] - series["p_sg_pu"][0]
    assert abs(d_gfm) > abs(d_sg), f"dP_gfm={d_gfm:.4f}, dP_sg={d_sg:.4f}"


@pytest.mark.slow
def test_power_sharing_engages_after_load_step(trend_runs):
    series = trend_runs["A"]
    omega_ps = series["omega_ps_gfm_pu"]
    k = _engaged_index(series)
    assert 1.0 < series.meta["sharing_engaged_s"] < 20.0
    assert np.all(omega_ps[:k] == 0.0)
    assert omega_ps[-1] < 0.0


@pytest.mark.slow
def test_droop_tracks_curve_then_equitable_line(trend_runs, droop_params):
    series = trend_runs["A"]
    k = _engaged_index(series)
    p_set = series["p_filt_gfm_pu"][0]
    p_l = droop_params.p_l
    deviation = series["f_gfm_hz"] / 60.0 - 1.0
    p_filt = series["p_filt_gfm_pu"]

    # before sharing the inverter frequency is the Droop-e curve of its filtered power
    curve = np.array([d_exp_unchecked(p, droop_params, p_l) - d_exp_unchecked(p_set, droop_params, p_l) for p in p_filt[:k]])
    assert np.max(np.abs(deviation[:k] - curve)) < 2e-3

    # once sharing has settled it is the linear droop through the setpoint
    equitable = droop_params.m_d * (p_set - p_filt[-1])
    assert abs(deviation[-1] - equitable) < 1e-3, f"deviation={deviation[-1]:.5f}, m_d*dp={equitable:.5f}"
    assert abs(series["f_sg_hz"][-1] - series["f_gfm_hz"][-1]) < 1e-3


# ═══════════════════════════════════════════════════════════════════════════════
# Group 4: Q-V initialization
# ═══════════════════════════════════════════════════════════════════════════════


def _three_bus_with_reference(v_set, q_v_gain=0.05, load_q=0.25, bus_type="pv"):
    scenario = three_bus()
    gfm = scenario.device("gfm")
    gfm.params = replace(gfm.params, v_set=v_set, q_v_gain=q_v_gain)
    buses = scenario.network.buses
    buses[1] = replace(buses[1], load_q=load_q)
    buses[2] = replace(buses[2], type=bus_type)
    return scenario


def _initialized_gfm(scenario):
    model = PowerSystemModel(scenario)
    x0 = model.initialize()
    inverter = model.device("gfm")
    q_dev = model.power_flow.injections["gfm"].imag / inverter.s_ratio
    return model, x0, inverter, q_dev


def test_qv_reference_sets_emf():
    model, x0, inverter, q_dev = _initialized_gfm(_three_bus_with_reference(1.07))
    assert inverter.params.e_mag == pytest.approx(1.07 - 0.05 * q_dev, abs=1e-7)
    assert model.equilibrium_residual(x0) < 1e-8
    assert model.device_power(x0)["gfm"].real == pytest.approx(0.03, abs=1e-9)


def test_reactive_load_lowers_emf():
    _, _, light, q_light = _initialized_gfm(_three_bus_with_reference(1.07, load_q=0.25))
    _, _, heavy, q_heavy = _initialized_gfm(_three_bus_with_reference(1.07, load_q=0.45))
    assert q_heavy > q_light
    assert heavy.params.e_mag < light.params.e_mag
    assert light.params.e_mag - heavy.params.e_mag == pytest.approx(0.05 * (q_heavy - q_light), abs=1e-7)


def test_zero_gain_holds_emf_at_reference():
    _, _, inverter, _ = _initialized_gfm(_three_bus_with_reference(1.06, q_v_gain=0.0))
    assert inverter.params.e_mag == pytest.approx(1.06, abs=1e-7)


def test_reference_needs_regulated_bus():
    scenario = _three_bus_with_reference(1.07, bus_type="device")
    with pytest.raises(SimulationError, match="voltage-regulated"):
        PowerSystemModel(scenario).initialize()


# ═══════════════════════════════════════════════════════════════════════════════
# Group 5: integration accuracy and determinism
# ═══════════════════════════════════════════════════════════════════════════════


@pytest.mark.slow
def test_trapezoidal_convergence_order():
    def trajectory(dt):
        series = run(three_bus(events=[LoadStep(0.5, 2, 0.15, 0.05)], t_end=1.5, dt=dt, power_sharing=False))
        stride = int(round(0.004 / dt))
        return np.concatenate([series["f_sg_hz"][::stride], series["p_filt_gfm_pu"][::stride]])

    coarse, mid, fine = (trajectory(dt) for dt in (0.004, 0.002, 0.001))
    e_coarse = np.max(np.abs(coarse - mid))
    e_fine = np.max(np.abs(mid - fine))
    order = math.log2(e_coarse / e_fine)
    assert order >= 1.9, f"observed order {order:.3f} (errors {e_coarse:.3e}, {e_fine:.3e})"


def test_repeated_runs_are_bit_identical(load_step):
    first = run(three_bus(events=[load_step], t_end=1.5))
    second = run(three_bus(events=[load_step], t_end=1.5))
    assert np.array_equal(first.time, second.time)
    assert first.channels.keys() == second.channels.keys()
    for name in first.channels:
        assert np.array_equal(first[name], second[name]), name
