"""
Network tests: admittance matrix, Newton power flow, load calibration and
the per-step algebraic solve.
"""

from __future__ import annotations

import math

import numpy as np
import pytest

from network import (
    Branch,
    Bus,
    Dispatch,
    Network,
    NetworkError,
    NetworkSolveError,
    PowerFlowError,
    build_ybus,
    calibrate_load_scale,
    emf_injections,
    load_currents,
    network_jacobian,
    network_residual,
    network_solve,
    power_flow_init,
)


def _three_bus(load=complex(0.75, 0.25)):
    return Network(
        buses=[Bus(1, "slack", 1.02), Bus(2, "pq", 1.0, load.real, load.imag), Bus(3, "pv", 1.02)],
        branches=[Branch(1, 2, 0.0, 0.05), Branch(2, 3, 0.0, 0.05)],
    )


DISPATCH = {"sg": Dispatch(bus=1, p=0.72), "gfm": Dispatch(bus=3, p=0.03)}


# ── Admittance matrix ────────────────────────────────────────────────────────


def test_ybus_two_bus_pi_model():
    net = Network([Bus(1, "slack"), Bus(2, "pq")], [Branch(1, 2, 0.01, 0.1, b=0.2)])
    y = 1 / complex(0.01, 0.1)
    expected = np.array([[y + 0.1j, -y], [-y, y + 0.1j]])
    assert np.allclose(build_ybus(net), expected, atol=1e-14)


def test_ybus_off_nominal_tap():
    net = Network([Bus(1, "slack"), Bus(2, "pq")], [Branch(1, 2, 0.0, 0.1, tap=1.05)])
    y = 1 / 0.1j
    ybus = build_ybus(net)
    assert ybus[0, 0] == pytest.approx(y / 1.05**2)
    assert ybus[1, 1] == pytest.approx(y)
    assert ybus[0, 1] == pytest.approx(-y / 1.05)
    assert ybus[1, 0] == ybus[0, 1]


def test_ybus_bus_shunt():
    net = Network([Bus(1, "slack"), Bus(2, "pq", b_shunt=0.3)], [Branch(1, 2, 0.0, 0.1)])
    assert build_ybus(net)[1, 1] == pytest.approx(1 / 0.1j + 0.3j)


# ── Validation ───────────────────────────────────────────────────────────────


def test_zero_reactance_rejected():
    with pytest.raises(NetworkError, match="zero reactance"):
        Network([Bus(1, "slack"), Bus(2, "pq")], [Branch(1, 2, 0.0, 0.0)]).validate()


def test_dangling_branch_rejected():
    with pytest.raises(NetworkError, match="unknown bus"):
        Network([Bus(1, "slack"), Bus(2, "pq")], [Branch(1, 7, 0.0, 0.1)]).validate()


def test_islanded_network_rejected():
    net = Network(
        [Bus(1, "slack"), Bus(2, "pq"), Bus(3, "pq"), Bus(4, "pq")],
        [Branch(1, 2, 0.0, 0.1), Branch(3, 4, 0.0, 0.1)],
    )
    with pytest.raises(NetworkError, match="not connected"):
        net.validate()


# ── Power flow ───────────────────────────────────────────────────────────────


def test_power_flow_three_bus():
    net = _three_bus()
    solution = power_flow_init(net, DISPATCH)
    assert solution.mismatch < 1e-10
    # lossless lines: slack covers load minus the inverter's share
    assert solution.injections["sg"].real == pytest.approx(0.72, abs=1e-9)
    assert solution.injections["gfm"].real == 0.03
    assert abs(solution.v[0]) == pytest.approx(1.02)
    assert abs(solution.v[2]) == pytest.approx(1.02)
    assert np.angle(solution.v[0]) == 0.0
    s_bus = solution.v * np.conj(build_ybus(net) @ solution.v)
    assert s_bus[1] == pytest.approx(-0.75 - 0.25j, abs=1e-10)


@pytest.mark.parametrize("p", [0.5, -0.5, 0.9])
def test_two_bus_angle_matches_closed_form(p):
    v1, v2, x = 1.0, 1.05, 0.2
    net = Network([Bus(1, "slack", v1), Bus(2, "pv", v2)], [Branch(1, 2, 0.0, x)])
    solution = power_flow_init(net, {"grid": Dispatch(bus=1), "gen": Dispatch(bus=2, p=p)})
    # a device exporting p leads the slack by asin(p*x / (v1*v2)); absorbing p lags by the same angle
    assert np.angle(solution.v[1]) == pytest.approx(math.asin(p * x / (v1 * v2)), abs=1e-10)
    assert solution.injections["grid"].real == pytest.approx(-p, abs=1e-10)


def _lossy_three_bus(s_base=100.0, scale=1.0):
    # scale multiplies impedances and divides powers, i.e. the same physical system on another base
    return Network(
        buses=[Bus(1, "slack", 1.02), Bus(2, "pq", 1.0, 0.75 / scale, 0.25 / scale), Bus(3, "pv", 1.02)],
        branches=[Branch(1, 2, 0.01 * scale, 0.05 * scale), Branch(2, 3, 0.02 * scale, 0.05 * scale)],
        s_base=s_base,
    )


def test_power_flow_is_base_invariant():
    first = power_flow_init(_lossy_three_bus(), {"sg": Dispatch(bus=1), "gfm": Dispatch(bus=3, p=0.03)})
    second = power_flow_init(
        _lossy_three_bus(s_base=200.0, scale=2.0), {"sg": Dispatch(bus=1), "gfm": Dispatch(bus=3, p=0.015)}
    )
    assert np.allclose(first.v, second.v, atol=1e-10)
    for name in ("sg", "gfm"):
        assert first.injections[name] * 100.0 == pytest.approx(second.injections[name] * 200.0, abs=1e-7)


def test_power_balance_with_losses():
    net = _lossy_three_bus()
    solution = power_flow_init(net, {"sg": Dispatch(bus=1), "gfm": Dispatch(bus=3, p=0.03)})
    v = solution.v
    idx = net.index()
    losses = 0.0
    for br in net.branches:
        current = (v[idx[br.from_bus]] - v[idx[br.to_bus]]) / complex(br.r, br.x)
        losses += abs(current) ** 2 * br.r
    s_bus = v * np.conj(build_ybus(net) @ v)
    assert float(np.sum(s_bus.real)) == pytest.approx(losses, abs=1e-8)
    generated = sum(s.real for s in solution.injections.values())
    assert generated == pytest.approx(net.total_load().real + losses, abs=1e-8)
    assert losses > 0.0


def test_power_flow_infeasible_load_raises():
    with pytest.raises(PowerFlowError):
        power_flow_init(_three_bus(load=complex(40.0, 10.0)), DISPATCH)


def test_power_flow_needs_reference_bus():
    net = Network([Bus(1, "pv", 1.0), Bus(2, "pq", 1.0, 0.1)], [Branch(1, 2, 0.0, 0.1)])
    with pytest.raises(PowerFlowError):
        power_flow_init(net, {"g": Dispatch(bus=1, p=0.1)})


def test_power_flow_unknown_device_bus():
    with pytest.raises(NetworkError):
        power_flow_init(_three_bus(), {"sg": Dispatch(bus=1), "x": Dispatch(bus=9)})


def test_load_calibration_hits_target():
    net, scale, solution = calibrate_load_scale(_three_bus(), DISPATCH, "sg", 0.80)
    assert abs(solution.injections["sg"].real - 0.80) <= 0.008
    assert scale > 1.0
    assert net.total_load().real == pytest.approx(0.75 * scale)


# ── Per-step network solve ───────────────────────────────────────────────────


def test_load_current_blocks_match_finite_difference():
    loads = np.array([0.5 + 0.2j])
    v = np.array([0.98 * np.exp(-0.1j)])
    _, blocks = load_currents(loads, v)
    eps = 1e-7
    for j, dv in enumerate((eps, 1j * eps)):
        di = (load_currents(loads, v + dv)[0] - load_currents(loads, v - dv)[0])[0] / (2 * eps)
        assert blocks[0, 0, j] == pytest.approx(di.real, abs=1e-7)
        assert blocks[0, 1, j] == pytest.approx(di.imag, abs=1e-7)


def test_network_solve_emf_oracle():
    net = _three_bus()
    ybus = build_ybus(net)
    loads = net.loads()
    injections = emf_injections([0, 2], [1.05 + 0.02j, 1.04 * np.exp(0.05j)], [0.2j, 0.15j], 3)
    v = network_solve(ybus, injections, loads, np.ones(3, dtype=complex))
    residual = network_residual(ybus, injections, loads, v)
    assert np.max(np.abs(residual)) < 1e-11
    s_load = v[1] * np.conj(-(ybus @ v)[1])
    assert s_load == pytest.approx(0.75 + 0.25j, abs=1e-10)


def test_network_jacobian_matches_finite_difference():
    net = _three_bus()
    ybus = build_ybus(net)
    loads = net.loads()
    injections = emf_injections([0, 2], [1.05, 1.04], [0.2j, 0.15j], 3)
    v = np.array([1.0, 0.97 - 0.05j, 1.01 + 0.02j])
    jac = network_jacobian(ybus, injections, loads, v)
    eps = 1e-7
    numeric = np.empty_like(jac)
    for j in range(6):
        dv = np.zeros(3, dtype=complex)
        dv[j % 3] = eps if j < 3 else 1j * eps
        dr = (network_residual(ybus, injections, loads, v + dv) - network_residual(ybus, injections, loads, v - dv)) / (2 * eps)
        numeric[:, j] = np.concatenate([dr.real, dr.imag])
    assert np.allclose(jac, numeric, atol=1e-6)


def test_network_solve_fixed_bus_is_held():
    net = _three_bus()
    ybus = build_ybus(net)
    fixed = np.array([True, False, False])
    injections = emf_injections([2], [1.04], [0.15j], 3)
    guess = np.array([1.02, 1.0, 1.0], dtype=complex)
    v = network_solve(ybus, injections, net.loads(), guess, fixed)
    assert v[0] == 1.02


def test_network_solve_collapse_raises_with_time():
    net = _three_bus(load=complex(60.0, 20.0))
    ybus = build_ybus(net)
    injections = emf_injections([0], [1.0], [0.3j], 3)
    with pytest.raises(NetworkSolveError) as excinfo:
        network_solve(ybus, injections, net.loads(), np.ones(3, dtype=complex), t=1.25)
    assert excinfo.value.t == 1.25
    assert "t=1.250000" in str(excinfo.value)
