"""
Device model tests: equilibrium back-solve, current Jacobians and
parameter validation for the synchronous machine and the inverter.
"""

from __future__ import annotations

import cmath
import math

import numpy as np
import pytest

from device_models import (
    DeviceModelError,
    GfmParams,
    GridFormingInverter,
    SgParams,
    SgState,
    SynchronousMachine,
    device_injection,
    gfm_derivatives,
    saturation,
    sg_derivatives,
)
from droop_e_control import DroopEParams, LinearDroopParams, PowerSharingState

V_TERM = cmath.rect(1.02, 0.12)


def _current_jacobian_fd(device, x, v, eps=1e-7):
    jac = np.empty((2, 2))
    for j, dv in enumerate((eps, 1j * eps)):
        di = (device.current(x, v + dv) - device.current(x, v - dv)) / (2 * eps)
        jac[:, j] = [di.real, di.imag]
    return jac


# ── Synchronous machine ──────────────────────────────────────────────────────


def test_sg_initialization_is_equilibrium():
    machine = SynchronousMachine("sg", 1, SgParams(), s_base=100.0)
    s = complex(0.7, 0.2)
    x0 = machine.initialize(V_TERM, s)
    dx = machine.derivatives(x0, V_TERM)
    assert np.max(np.abs(dx)) < 1e-9, f"max |dx| = {np.max(np.abs(dx)):.2e}"
    s_out = V_TERM * np.conj(machine.current(x0, V_TERM))
    assert abs(s_out - s) < 1e-12
    assert x0[1] == machine.params.omega_s
    assert machine.frequency_pu(x0) == 1.0


def test_sg_initialization_on_machine_base():
    machine = SynchronousMachine("g", 30, SgParams(s_rating=1000.0), s_base=100.0)
    x0 = machine.initialize(V_TERM, complex(5.0, 1.0))
    assert machine.params.p_set == pytest.approx(0.5, abs=1e-3)
    assert np.max(np.abs(machine.derivatives(x0, V_TERM))) < 1e-9


def test_sg_current_jacobian_matches_finite_difference():
    machine = SynchronousMachine("sg", 1, SgParams(r_s=0.003), s_base=100.0)
    x0 = machine.initialize(V_TERM, complex(0.6, 0.1))
    analytic = machine.current_jacobian(x0, V_TERM)
    numeric = _current_jacobian_fd(machine, x0, V_TERM)
    assert np.allclose(analytic, numeric, rtol=1e-6, atol=1e-8)


def test_sg_swing_responds_to_torque_imbalance():
    machine = SynchronousMachine("sg", 1, SgParams(), s_base=100.0)
    x0 = machine.initialize(V_TERM, complex(0.7, 0.2))
    x = x0.copy()
    x[7] += 0.1  # extra mechanical power
    dx = sg_derivatives(x, V_TERM, machine.params)
    assert dx[1] > 0


def test_sg_rejects_non_finite_state():
    state = SgState(0.1, math.nan, 1.0, 0.0, 1.0, 1.0, 0.1, 0.5, 0.5)
    with pytest.raises(DeviceModelError):
        sg_derivatives(state, V_TERM, SgParams())


def test_sg_parameter_validation():
    with pytest.raises(DeviceModelError):
        SgParams(h=0.0)


def test_saturation_function():
    params = SgParams()
    assert saturation(0.0, params) == pytest.approx(params.sat_gamma)
    assert saturation(2.0, params) > saturation(1.0, params)


# ── Grid-forming inverter ────────────────────────────────────────────────────


@pytest.mark.parametrize("controller", [DroopEParams(), LinearDroopParams(omega_fil=1 / 0.0167)])
def test_gfm_initialization_is_equilibrium(controller):
    inverter = GridFormingInverter("gfm", 3, GfmParams(controller=controller), s_base=100.0, power_sharing=True)
    s = complex(0.2, 0.05)
    x0 = inverter.initialize(V_TERM, s)
    dx = inverter.derivatives(x0, V_TERM)
    assert np.max(np.abs(dx)) < 1e-10
    assert inverter.frequency_pu(x0) == pytest.approx(1.0, abs=1e-14)
    assert x0[1] == pytest.approx(0.4)  # device base
    assert abs(V_TERM * np.conj(inverter.current(x0, V_TERM)) - s) < 1e-12
    assert inverter.power_sharing is isinstance(controller, DroopEParams)


def test_gfm_emf_magnitude_behind_coupling_impedance():
    params = GfmParams(q_v_gain=0.05)
    inverter = GridFormingInverter("gfm", 3, params, s_base=100.0)
    s = complex(0.2, 0.05)
    inverter.initialize(V_TERM, s)
    expected = V_TERM + params.z_out * (s / 0.5 / V_TERM).conjugate()
    assert inverter.params.e_mag == pytest.approx(abs(expected), abs=1e-14)
    assert inverter.params.e_mag > abs(V_TERM)
    assert inverter.params.v_set is None
    assert inverter.qv_mismatch(V_TERM, s) == 0.0


def test_gfm_qv_mismatch_measures_distance_to_line():
    params = GfmParams(q_v_gain=0.05, v_set=1.1)
    inverter = GridFormingInverter("gfm", 3, params, s_base=100.0)
    s = complex(0.2, 0.05)
    emf, s_dev = inverter.operating_emf(V_TERM, s)
    assert s_dev == pytest.approx(complex(0.4, 0.1))
    assert inverter.qv_mismatch(V_TERM, s) == pytest.approx(abs(emf) - (1.1 - 0.05 * 0.1), abs=1e-14)


def test_gfm_current_jacobian_matches_finite_difference():
    inverter = GridFormingInverter("gfm", 3, GfmParams(), s_base=100.0)
    x0 = inverter.initialize(V_TERM, complex(0.2, 0.05))
    assert np.allclose(inverter.current_jacobian(x0, V_TERM), _current_jacobian_fd(inverter, x0, V_TERM), atol=1e-7)


def test_gfm_frequency_follows_power_sharing_offset():
    params = GfmParams()
    inverter = GridFormingInverter("gfm", 3, params, s_base=100.0, power_sharing=True)
    x0 = inverter.initialize(V_TERM, complex(0.2, 0.05))
    inverter.ps_state = PowerSharingState(omega_ps=-0.01, latched=True, last_p=0.4)
    dx = gfm_derivatives(x0, V_TERM, inverter.ps_state, inverter.params)
    assert dx[0] == pytest.approx(-0.01 * params.controller.omega_b)


def test_gfm_filter_tracks_measured_power():
    inverter = GridFormingInverter("gfm", 3, GfmParams(), s_base=100.0)
    x0 = inverter.initialize(V_TERM, complex(0.2, 0.05))
    x = x0.copy()
    x[1] -= 0.1
    assert inverter.derivatives(x, V_TERM)[1] == pytest.approx(0.1 / 0.0167)


def test_tripped_device_is_inert():
    inverter = GridFormingInverter("gfm", 3, GfmParams(), s_base=100.0)
    x0 = inverter.initialize(V_TERM, complex(0.2, 0.05))
    inverter.in_service = False
    assert inverter.current(x0, V_TERM) == 0j
    assert not np.any(inverter.derivatives(x0, V_TERM))


def test_gfm_parameter_validation():
    with pytest.raises(DeviceModelError):
        GfmParams(x_out=0.0)
    with pytest.raises(DeviceModelError):
        GfmParams(t_fil=0.0)
    with pytest.raises(DeviceModelError):
        GfmParams(q_v_gain=-0.01)
    with pytest.raises(DeviceModelError):
        GfmParams(v_set=0.0)


def test_device_injection_system_base():
    params = GfmParams(s_rating=50.0)
    state = np.array([0.2, 0.3])
    i_sys = device_injection(state, params, V_TERM, s_base=100.0)
    emf = cmath.rect(params.e_mag, 0.2)
    assert i_sys == pytest.approx((emf - V_TERM) / params.z_out * 0.5)
    with pytest.raises(DeviceModelError):
        device_injection(state, params, complex(math.inf, 0.0))
