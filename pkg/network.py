"""
Static network model: admittance matrix, Newton power flow and the per-step
algebraic solve of bus voltages with device current sources and
constant-power loads.

All quantities are per unit on the network's ``s_base``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

logger = logging.getLogger(__name__)

BUS_TYPES = ("slack", "pv", "pq", "device", "infinite")
REFERENCE_TYPES = ("slack", "infinite")

# (currents (n,), per-bus dI/dV blocks (n, 2, 2)) for a voltage vector
InjectionFn = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]


class NetworkError(ValueError):
    """Raised for malformed network data."""


class PowerFlowError(RuntimeError):
    """Raised when the power flow fails to converge."""

    def __init__(self, message: str, mismatch: float = float("nan")):
        super().__init__(message)
        self.mismatch = mismatch


class NetworkSolveError(RuntimeError):
    """Raised when the per-step network solve diverges."""

    def __init__(self, message: str, t: float | None = None):
        super().__init__(message if t is None else f"t={t:.6f} s: {message}")
        self.t = t


# ----------------------------------------------------------------------
# Data model
# ----------------------------------------------------------------------
@dataclass
class Bus:
    id: int
    type: str = "pq"
    v_setpoint: float = 1.0
    load_p: float = 0.0
    load_q: float = 0.0
    g_shunt: float = 0.0
    b_shunt: float = 0.0


@dataclass
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b: float = 0.0
    tap: float = 1.0


@dataclass
class Network:
    buses: list[Bus]
    branches: list[Branch]
    s_base: float = 100.0
    v_base: float = 18.0
    f_nom: float = 60.0

    def index(self) -> dict[int, int]:
        return {bus.id: i for i, bus in enumerate(self.buses)}

    def bus(self, bus_id: int) -> Bus:
        for bus in self.buses:
            if bus.id == bus_id:
                return bus
        raise NetworkError(f"unknown bus {bus_id}")

    def loads(self) -> np.ndarray:
        return np.array([complex(b.load_p, b.load_q) for b in self.buses])

    def total_load(self) -> complex:
        return complex(self.loads().sum())

    def with_load_scale(self, scale: float) -> "Network":
        buses = [replace(b, load_p=b.load_p * scale, load_q=b.load_q * scale) for b in self.buses]
        return replace(self, buses=buses)

    def validate(self) -> None:
        errors: list[str] = []
        ids = [b.id for b in self.buses]
        if not ids:
            errors.append("network has no buses")
        if len(set(ids)) != len(ids):
            errors.append("bus ids are not unique")
        for bus in self.buses:
            if bus.type not in BUS_TYPES:
                errors.append(f"bus {bus.id}: unknown type {bus.type!r}")
            if bus.v_setpoint <= 0:
                errors.append(f"bus {bus.id}: voltage setpoint must be positive")
        known = set(ids)
        for k, br in enumerate(self.branches):
            if br.from_bus not in known or br.to_bus not in known:
                errors.append(f"branch {k} ({br.from_bus}-{br.to_bus}) references an unknown bus")
            if br.x == 0:
                errors.append(f"branch {k} ({br.from_bus}-{br.to_bus}) has zero reactance")
            if br.tap <= 0:
                errors.append(f"branch {k} ({br.from_bus}-{br.to_bus}) has a non-positive tap ratio")
        if not errors and len(ids) > 1:
            idx = self.index()
            rows = [idx[br.from_bus] for br in self.branches]
            cols = [idx[br.to_bus] for br in self.branches]
            graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(ids), len(ids)))
            n_components, _ = connected_components(graph, directed=False)
            if n_components != 1:
                errors.append(f"network is not connected ({n_components} islands)")
        if errors:
            raise NetworkError("; ".join(errors))


@dataclass
class Dispatch:
    """Power-flow setpoints of one device, system base."""

    bus: int
    p: float = 0.0
    q: float = 0.0
    v: float | None = None


@dataclass
class PowerFlowSolution:
    v: np.ndarray
    injections: dict[str, complex] = field(default_factory=dict)
    mismatch: float = 0.0
    iterations: int = 0


# ----------------------------------------------------------------------
# Admittance matrix
# ----------------------------------------------------------------------
def build_ybus(network: Network) -> np.ndarray:
    """Dense bus admittance matrix with pi-model branches and off-nominal taps."""
    idx = network.index()
    n = len(network.buses)
    ybus = np.zeros((n, n), dtype=complex)
    for br in network.branches:
        z = complex(br.r, br.x)
        if z == 0:
            raise NetworkError(f"branch {br.from_bus}-{br.to_bus} has zero impedance")
        y = 1.0 / z
        i, j = idx[br.from_bus], idx[br.to_bus]
        half_b = 0.5j * br.b
        ybus[i, i] += (y + half_b) / (br.tap * br.tap)
        ybus[j, j] += y + half_b
        ybus[i, j] -= y / br.tap
        ybus[j, i] -= y / br.tap
    for k, bus in enumerate(network.buses):
        ybus[k, k] += complex(bus.g_shunt, bus.b_shunt)
    return ybus


# ----------------------------------------------------------------------
# Power flow
# ----------------------------------------------------------------------
def _dsbus_dv(ybus: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ibus = ybus @ v
    v_norm = v / np.abs(v)
    ds_dvm = v[:, None] * np.conj(ybus * v_norm[None, :]) + np.diag(np.conj(ibus) * v_norm)
    ds_dva = 1j * v[:, None] * np.conj(np.diag(ibus) - ybus * v[None, :])
    return ds_dva, ds_dvm


def power_flow_init(
    network: Network,
    dispatches: Mapping[str, Dispatch],
    tol: float = 1e-12,
    max_iter: int = 30,
) -> PowerFlowSolution:
    """Solve the steady-state operating point by Newton-Raphson in polar form.

    Reference buses (slack, infinite) hold their setpoint at angle zero; PV
    buses take active power from their devices; device buses take both P
    and Q.  The returned injections give each device's complex output so
    its dynamic states can be back-solved.
    """
    network.validate()
    idx = network.index()
    n = len(network.buses)
    types = [bus.type for bus in network.buses]
    vm = np.array([bus.v_setpoint for bus in network.buses], dtype=float)

    s_gen = np.zeros(n, dtype=complex)
    by_bus: dict[int, list[str]] = {}
    for name, d in dispatches.items():
        if d.bus not in idx:
            raise NetworkError(f"device {name!r} references unknown bus {d.bus}")
        k = idx[d.bus]
        by_bus.setdefault(k, []).append(name)
        if d.v is not None:
            vm[k] = d.v
        if types[k] in ("pv", "device", "pq"):
            s_gen[k] += complex(d.p, d.q if types[k] != "pv" else 0.0)

    ref = [k for k, t in enumerate(types) if t in REFERENCE_TYPES]
    pv = [k for k, t in enumerate(types) if t == "pv"]
    pq = [k for k, t in enumerate(types) if t in ("pq", "device")]
    if not ref:
        raise PowerFlowError("power flow needs a slack or infinite bus")
    for k in ref + pv:
        names = by_bus.get(k, [])
        if types[k] == "pv" and not names:
            raise NetworkError(f"pv bus {network.buses[k].id} has no device")
        if len(names) > 1:
            raise NetworkError(f"bus {network.buses[k].id} regulates voltage with more than one device")
    for k in ref:
        if types[k] == "slack" and not by_bus.get(k):
            raise NetworkError(f"slack bus {network.buses[k].id} has no device")

    ybus = build_ybus(network)
    s_spec = s_gen - network.loads()
    pq = np.array(pq, dtype=int)
    pvpq = np.concatenate([np.array(pv, dtype=int), pq])
    n_pvpq = len(pvpq)
    vm[pq] = 1.0
    va = np.zeros(n)

    v = vm * np.exp(1j * va)
    mismatch = np.inf
    iterations = 0
    for iterations in range(max_iter + 1):
        mis = v * np.conj(ybus @ v) - s_spec
        f = np.concatenate([mis[pvpq].real, mis[pq].imag])
        mismatch = float(np.max(np.abs(f))) if f.size else 0.0
        if mismatch < tol:
            break
        if iterations == max_iter:
            raise PowerFlowError(
                f"power flow did not converge in {max_iter} iterations (mismatch {mismatch:.3e} pu)",
                mismatch,
            )
        ds_dva, ds_dvm = _dsbus_dv(ybus, v)
        jac = np.block(
            [
                [ds_dva[np.ix_(pvpq, pvpq)].real, ds_dvm[np.ix_(pvpq, pq)].real],
                [ds_dva[np.ix_(pq, pvpq)].imag, ds_dvm[np.ix_(pq, pq)].imag],
            ]
        )
        try:
            dx = np.linalg.solve(jac, -f)
        except np.linalg.LinAlgError as e:
            raise PowerFlowError(f"singular power-flow Jacobian: {e}", mismatch) from e
        va[pvpq] += dx[:n_pvpq]
        vm[pq] += dx[n_pvpq:]
        if not np.all(np.isfinite(vm)) or np.any(vm <= 0):
            raise PowerFlowError("power flow diverged (non-physical voltage)", mismatch)
        v = vm * np.exp(1j * va)

    s_bus = v * np.conj(ybus @ v) + network.loads()
    injections: dict[str, complex] = {}
    for name, d in dispatches.items():
        k = idx[d.bus]
        if types[k] in REFERENCE_TYPES:
            injections[name] = complex(s_bus[k])
        elif types[k] == "pv":
            injections[name] = complex(d.p, s_bus[k].imag)
        else:
            injections[name] = complex(d.p, d.q)

    logger.info(f"Power flow converged in {iterations} iterations, mismatch {mismatch:.2e} pu")
    return PowerFlowSolution(v=v, injections=injections, mismatch=mismatch, iterations=iterations)


def calibrate_load_scale(
    network: Network,
    dispatches: Mapping[str, Dispatch],
    slack_device: str,
    target_p: float,
    rel_tol: float = 0.01,
    max_iter: int = 20,
) -> tuple[Network, float, PowerFlowSolution]:
    """Scale every load uniformly until the slack device produces ``target_p``."""
    base_load = network.total_load().real
    if base_load <= 0:
        raise NetworkError("load calibration needs a positive total load")
    scale = 1.0
    for _ in range(max_iter):
        scaled = network.with_load_scale(scale)
        solution = power_flow_init(scaled, dispatches)
        p_slack = solution.injections[slack_device].real
        if abs(p_slack - target_p) <= rel_tol * abs(target_p):
            logger.info(f"Load scale {scale:.6f} puts {slack_device} at {p_slack:.4f} pu (target {target_p:.4f})")
            return scaled, scale, solution
        scale += (target_p - p_slack) / base_load
    raise PowerFlowError(f"load calibration did not reach {target_p:.4f} pu for {slack_device}")


# ----------------------------------------------------------------------
# Per-step network solve
# ----------------------------------------------------------------------
def load_currents(loads: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Constant-power load currents and their d[I_re, I_im]/d[V_re, V_im] blocks."""
    current = np.conj(loads / v)
    c = -np.conj(loads) / np.conj(v) ** 2
    blocks = np.empty((len(v), 2, 2))
    blocks[:, 0, 0] = c.real
    blocks[:, 0, 1] = c.imag
    blocks[:, 1, 0] = c.imag
    blocks[:, 1, 1] = -c.real
    return current, blocks


def network_residual(ybus: np.ndarray, injections: InjectionFn, loads: np.ndarray, v: np.ndarray) -> np.ndarray:
    """KCL mismatch ``Y V - I_dev + I_load`` per bus."""
    i_dev, _ = injections(v)
    i_load, _ = load_currents(loads, v)
    return ybus @ v - i_dev + i_load


def network_jacobian(
    ybus: np.ndarray,
    injections: InjectionFn,
    loads: np.ndarray,
    v: np.ndarray,
    free: np.ndarray | None = None,
) -> np.ndarray:
    """Real Jacobian of the KCL residual w.r.t. ``[V_re; V_im]`` of the free buses."""
    if free is None:
        free = np.arange(len(v))
    _, dev_blocks = injections(v)
    _, load_blocks = load_currents(loads, v)
    return _assemble_jacobian(ybus, free, (load_blocks - dev_blocks)[free])


def _assemble_jacobian(ybus: np.ndarray, free: np.ndarray, blocks: np.ndarray) -> np.ndarray:
    y_ff = ybus[np.ix_(free, free)]
    g, b = y_ff.real, y_ff.imag
    jac = np.block([[g, -b], [b, g]])
    nf = len(free)
    diag = np.arange(nf)
    jac[diag, diag] += blocks[:, 0, 0]
    jac[diag, nf + diag] += blocks[:, 0, 1]
    jac[nf + diag, diag] += blocks[:, 1, 0]
    jac[nf + diag, nf + diag] += blocks[:, 1, 1]
    return jac


def network_solve(
    ybus: np.ndarray,
    injections: InjectionFn,
    loads: np.ndarray,
    v_guess: np.ndarray,
    fixed: np.ndarray | None = None,
    tol: float = 1e-11,
    max_iter: int = 25,
    t: float | None = None,
) -> np.ndarray:
    """Solve bus voltages for the given device current sources and constant-power loads.

    Args:
        ybus: Bus admittance matrix.
        injections: Callable returning device currents and their voltage Jacobian blocks.
        loads: Constant-power load per bus (complex, consumed).
        v_guess: Warm start, typically the previous step's voltages.
        fixed: Boolean mask of buses held at their ``v_guess`` value (infinite buses).
        tol: KCL residual tolerance.
        max_iter: Newton iteration limit.
        t: Simulation time, quoted in error messages.

    Returns:
        Complex bus voltages.
    """
    v = np.array(v_guess, dtype=complex)
    n = len(v)
    free = np.arange(n) if fixed is None else np.flatnonzero(~fixed)
    nf = len(free)
    if nf == 0:
        return v
    for _ in range(max_iter + 1):
        i_dev, dev_blocks = injections(v)
        i_load, load_blocks = load_currents(loads, v)
        residual = (ybus @ v - i_dev + i_load)[free]
        norm = float(np.max(np.abs(residual)))
        if not np.isfinite(norm):
            raise NetworkSolveError("non-finite network residual", t)
        if norm < tol:
            return v
        jac = _assemble_jacobian(ybus, free, (load_blocks - dev_blocks)[free])
        try:
            step = np.linalg.solve(jac, -np.concatenate([residual.real, residual.imag]))
        except np.linalg.LinAlgError as e:
            raise NetworkSolveError(f"singular algebraic Jacobian: {e}", t) from e
        v[free] += step[:nf] + 1j * step[nf:]
        if np.min(np.abs(v[free])) < 0.05:
            raise NetworkSolveError("voltage collapse during network solve", t)
    raise NetworkSolveError(f"network solve did not converge (residual {norm:.3e} pu)", t)


def emf_injections(buses: np.ndarray, emfs: np.ndarray, impedances: np.ndarray, n: int) -> InjectionFn:
    """Injection callback for ideal EMFs behind fixed impedances."""
    buses = np.asarray(buses, dtype=int)
    emfs = np.asarray(emfs, dtype=complex)
    y = 1.0 / np.asarray(impedances, dtype=complex)

    def injections(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        current = np.zeros(n, dtype=complex)
        blocks = np.zeros((n, 2, 2))
        np.add.at(current, buses, (emfs - v[buses]) * y)
        for k, yk in zip(buses, y):
            blocks[k] += -np.array([[yk.real, -yk.imag], [yk.imag, yk.real]])
        return current, blocks

    return injections


__all__ = [
    "BUS_TYPES",
    "Branch",
    "Bus",
    "Dispatch",
    "Network",
    "NetworkError",
    "NetworkSolveError",
    "PowerFlowError",
    "PowerFlowSolution",
    "build_ybus",
    "calibrate_load_scale",
    "emf_injections",
    "load_currents",
    "network_jacobian",
    "network_residual",
    "network_solve",
    "power_flow_init",
]
