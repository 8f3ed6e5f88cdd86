"""
Time-domain simulation of devices coupled through the network.

The network is eliminated at every derivative evaluation (bus voltages are
solved for the current device states), which leaves an ODE in the device
states.  That ODE is advanced with the implicit trapezoidal rule; Newton
iterations reuse a finite-difference Jacobian that is refreshed after
events or when convergence slows down.  The power-sharing integrators of
Droop-e devices are sampled once per accepted step.
"""

from __future__ import annotations

import math
import time
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping

import numpy as np
import pandas as pd
from scipy.linalg import lu_factor, lu_solve
from scipy.optimize import root

from device_models import GfmParams, GridFormingInverter, SgParams, SynchronousMachine
from droop_e_control import power_sharing_step
from network import (
    Dispatch,
    Network,
    NetworkError,
    NetworkSolveError,
    PowerFlowError,
    PowerFlowSolution,
    build_ybus,
    network_solve,
    power_flow_init,
)

logger = logging.getLogger(__name__)

PRE_EVENT_HOLD_S = 0.5
FLAT_TOLERANCE = 1e-6
METRIC_SPANS = ("full", "pre_sharing")


class SimulationError(RuntimeError):
    """Raised when a run cannot proceed; carries the time and event context."""


# ----------------------------------------------------------------------
# Scenario description
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class LoadStep:
    time: float
    bus: int
    delta_p: float
    delta_q: float = 0.0

    kind = "load_step"


@dataclass(frozen=True)
class GenTrip:
    time: float
    device: str

    kind = "gen_trip"


Event = LoadStep | GenTrip


@dataclass
class DeviceSpec:
    name: str
    kind: str
    bus: int
    params: SgParams | GfmParams
    power_sharing: bool = False


@dataclass
class AnalysisDirectives:
    sweep_device: str | None = None
    sweep_grid: tuple[float, float, float] | None = None
    metrics_window: float = 0.1
    metrics_channel: str | None = None
    # "full" or "pre_sharing" (stop the metrics where the first sharing latch engages)
    metrics_span: str = "full"


@dataclass
class Scenario:
    name: str
    network: Network
    devices: list[DeviceSpec]
    dispatch: dict[str, Dispatch]
    events: list[Event] = field(default_factory=list)
    t_end: float = 10.0
    dt: float = 0.001
    outputs: dict[str, str] | None = None
    analysis: AnalysisDirectives = field(default_factory=AnalysisDirectives)
    description: str = ""
    notes: list[str] = field(default_factory=list)
    defaults_applied: list[str] = field(default_factory=list, compare=False)
    source: str | None = field(default=None, compare=False)

    def device(self, name: str) -> DeviceSpec:
        for spec in self.devices:
            if spec.name == name:
                return spec
        raise SimulationError(f"unknown device {name!r}")

    def validate(self) -> list[str]:
        """Return every violated invariant; an empty list means the scenario is valid."""
        errors: list[str] = []
        if not self.dt > 0:
            errors.append(f"dt must be positive, got {self.dt}")
        if not self.t_end > 0:
            errors.append(f"t_end must be positive, got {self.t_end}")
        bus_ids = {b.id for b in self.network.buses}
        names = [d.name for d in self.devices]
        if len(set(names)) != len(names):
            errors.append("device names are not unique")
        for spec in self.devices:
            if spec.kind not in ("sg", "gfm"):
                errors.append(f"device {spec.name!r}: unknown kind {spec.kind!r}")
            if spec.bus not in bus_ids:
                errors.append(f"device {spec.name!r} references unknown bus {spec.bus}")
            if spec.name not in self.dispatch:
                errors.append(f"device {spec.name!r} has no dispatch entry")
        for name, d in self.dispatch.items():
            if name not in names:
                errors.append(f"dispatch entry {name!r} names no device")
        for event in self.events:
            if not 0 < event.time < self.t_end:
                errors.append(f"{event.kind} at t={event.time} s lies outside (0, t_end={self.t_end})")
            if isinstance(event, LoadStep) and event.bus not in bus_ids:
                errors.append(f"load_step references unknown bus {event.bus}")
            if isinstance(event, GenTrip) and event.device not in names:
                errors.append(f"gen_trip references unknown device {event.device!r}")
        return errors


@dataclass
class TimeSeries:
    time: np.ndarray
    channels: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def __getitem__(self, channel: str) -> np.ndarray:
        if channel == "time_s":
            return self.time
        return self.channels[channel]

    def __contains__(self, channel: str) -> bool:
        return channel == "time_s" or channel in self.channels

    @property
    def dt(self) -> float:
        return float(self.time[1] - self.time[0]) if len(self.time) > 1 else 0.0

    def select(self, outputs: Mapping[str, str] | None) -> "TimeSeries":
        """Rename/select channels with a ``column -> channel`` mapping."""
        if not outputs:
            return self
        missing = [ch for ch in outputs.values() if ch not in self.channels]
        if missing:
            raise SimulationError(f"unknown output channels: {', '.join(missing)}")
        return TimeSeries(self.time, {col: self.channels[ch] for col, ch in outputs.items()}, dict(self.meta))

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.channels)
        frame.insert(0, "time_s", self.time)
        return frame

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, meta: dict | None = None) -> "TimeSeries":
        if "time_s" not in frame.columns:
            raise SimulationError("time series table has no time_s column")
        channels = {c: frame[c].to_numpy(dtype=float) for c in frame.columns if c != "time_s"}
        return cls(frame["time_s"].to_numpy(dtype=float), channels, meta or {})


# ----------------------------------------------------------------------
# Numerical kernels
# ----------------------------------------------------------------------
def numerical_jacobian(fun: Callable[[np.ndarray], np.ndarray], x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian with an absolute perturbation per state."""
    x = np.asarray(x, dtype=float)
    m = len(x)
    jac = np.empty((m, m))
    for j in range(m):
        xp = x.copy()
        xm = x.copy()
        xp[j] += eps
        xm[j] -= eps
        jac[:, j] = (fun(xp) - fun(xm)) / (2.0 * eps)
    return jac


def trapezoidal_step(
    fun: Callable[[np.ndarray], np.ndarray],
    x: np.ndarray,
    fx: np.ndarray,
    dt: float,
    solve: Callable[[np.ndarray], np.ndarray],
    atol: float = 1e-10,
    rtol: float = 1e-12,
    max_iter: int = 12,
) -> tuple[np.ndarray, np.ndarray, int]:
    """One implicit trapezoidal step solved by (modified) Newton.

    ``solve(g)`` must return ``(I - dt/2 * J)^-1 g`` for some Jacobian
    estimate ``J``.  Returns the new state, its derivative and the number
    of Newton iterations used.
    """
    y = x + dt * fx
    half = 0.5 * dt
    for iteration in range(1, max_iter + 1):
        fy = fun(y)
        g = y - x - half * (fx + fy)
        delta = solve(g)
        y = y - delta
        if not np.all(np.isfinite(y)):
            break
        if np.max(np.abs(delta)) <= atol + rtol * np.max(np.abs(y)):
            return y, fun(y), iteration
    raise SimulationError(f"trapezoidal Newton iteration did not converge in {max_iter} iterations")


# ----------------------------------------------------------------------
# Power system model
# ----------------------------------------------------------------------
class PowerSystemModel:
    """Devices plus network with the algebraic constraint eliminated."""

    def __init__(self, scenario: Scenario, log_info=None, log_error=None):
        self.log_info = log_info or logger.info
        self.log_error = log_error or logger.error
        errors = scenario.validate()
        if errors:
            raise SimulationError(f"invalid scenario {scenario.name!r}: " + "; ".join(errors))
        self.scenario = scenario
        self.network = scenario.network
        self.network.validate()
        self.s_base = self.network.s_base
        self.f_nom = self.network.f_nom
        self.bus_index = self.network.index()
        self.n_bus = len(self.network.buses)
        self.ybus = build_ybus(self.network)
        self.loads = self.network.loads()
        self.fixed = np.array([b.type == "infinite" for b in self.network.buses])

        self.devices: list[SynchronousMachine | GridFormingInverter] = []
        for spec in scenario.devices:
            if spec.kind == "sg":
                device = SynchronousMachine(spec.name, spec.bus, spec.params, self.s_base)
            else:
                device = GridFormingInverter(spec.name, spec.bus, spec.params, self.s_base, spec.power_sharing)
            self.devices.append(device)
        self.slices: list[slice] = []
        self.device_buses: list[int] = []
        offset = 0
        for device in self.devices:
            self.slices.append(slice(offset, offset + device.n_states))
            self.device_buses.append(self.bus_index[device.bus])
            offset += device.n_states
        self.n_states = offset
        self.labels = [f"{d.name}.{label}" for d in self.devices for label in d.labels]

        self.v = np.array([b.v_setpoint + 0j for b in self.network.buses])
        self.x0: np.ndarray | None = None
        self.power_flow: PowerFlowSolution | None = None
        self.time = 0.0

    # -- lookup --------------------------------------------------------
    def device(self, name: str):
        for device in self.devices:
            if device.name == name:
                return device
        raise SimulationError(f"unknown device {name!r}")

    def gfms(self) -> list[GridFormingInverter]:
        return [d for d in self.devices if isinstance(d, GridFormingInverter)]

    # -- initialization ------------------------------------------------
    def qv_dispatch(self) -> dict[str, Dispatch]:
        """Dispatch whose inverter bus voltages put every |E| on its Q-V line.

        Inverters without ``v_set`` keep the voltage of their bus.  Each
        inverter with one must regulate its bus (pv or slack); its voltage
        becomes the unknown of a root solve over the full power flow.
        """
        dispatch = dict(self.scenario.dispatch)
        regulated = [d for d in self.gfms() if d.params.v_set is not None]
        if not regulated:
            return dispatch
        for device in regulated:
            bus = self.network.bus(device.bus)
            if bus.type not in ("pv", "slack"):
                raise SimulationError(
                    f"{device.name}: a Q-V reference needs a voltage-regulated bus, bus {bus.id} is {bus.type}"
                )

        def with_voltages(u: np.ndarray) -> dict[str, Dispatch]:
            trial = dict(dispatch)
            for device, vk in zip(regulated, u):
                trial[device.name] = replace(trial[device.name], v=float(vk))
            return trial

        def residual(u: np.ndarray) -> np.ndarray:
            solution = power_flow_init(self.network, with_voltages(u))
            return np.array([
                d.qv_mismatch(solution.v[self.bus_index[d.bus]], solution.injections[d.name]) for d in regulated
            ])

        u0 = np.array([
            dispatch[d.name].v if dispatch[d.name].v is not None else self.network.bus(d.bus).v_setpoint
            for d in regulated
        ])
        try:
            result = root(residual, u0, method="hybr", tol=1e-12)
        except (PowerFlowError, NetworkError) as e:
            raise SimulationError(f"{self.scenario.name}: Q-V initialization failed: {e}") from e
        if not result.success or np.max(np.abs(result.fun)) > 1e-8:
            raise SimulationError(f"{self.scenario.name}: Q-V initialization did not converge: {result.message}")
        for device, vk in zip(regulated, result.x):
            self.log_info(f"{device.name}: bus {device.bus} voltage {vk:.5f} pu from its Q-V reference {device.params.v_set}")
        return with_voltages(result.x)

    def initialize(self) -> np.ndarray:
        """Solve the power flow and back-solve every device state."""
        solution = power_flow_init(self.network, self.qv_dispatch())
        self.power_flow = solution
        self.v = solution.v.copy()
        x0 = np.empty(self.n_states)
        for device, sl, k in zip(self.devices, self.slices, self.device_buses):
            x0[sl] = device.initialize(solution.v[k], solution.injections[device.name])
        self.v = self.solve_network(x0)
        self.x0 = x0
        residual = self.equilibrium_residual(x0)
        self.log_info(f"{self.scenario.name}: initialized {self.n_states} states, equilibrium residual {residual:.2e}")
        return x0.copy()

    def equilibrium_residual(self, x: np.ndarray) -> float:
        return float(np.max(np.abs(self.rhs(x)))) if self.n_states else 0.0

    # -- algebraic and differential maps -------------------------------
    def _injections(self, x: np.ndarray):
        def injections(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
            current = np.zeros(self.n_bus, dtype=complex)
            blocks = np.zeros((self.n_bus, 2, 2))
            for device, sl, k in zip(self.devices, self.slices, self.device_buses):
                if device.in_service:
                    current[k] += device.current(x[sl], v[k])
                    blocks[k] += device.current_jacobian(x[sl], v[k])
            return current, blocks

        return injections

    def solve_network(self, x: np.ndarray) -> np.ndarray:
        self.v = network_solve(self.ybus, self._injections(x), self.loads, self.v, self.fixed, t=self.time)
        return self.v

    def rhs(self, x: np.ndarray) -> np.ndarray:
        """Reduced derivative map: network solved, then every device evaluated."""
        v = self.solve_network(x)
        dx = np.empty(self.n_states)
        for device, sl, k in zip(self.devices, self.slices, self.device_buses):
            dx[sl] = device.derivatives(x[sl], v[k])
        return dx

    def device_power(self, x: np.ndarray) -> dict[str, complex]:
        """Complex output of every device at the cached bus voltages, system base."""
        out = {}
        for device, sl, k in zip(self.devices, self.slices, self.device_buses):
            out[device.name] = complex(self.v[k] * np.conj(device.current(x[sl], self.v[k])))
        return out

    # -- events --------------------------------------------------------
    def apply_event(self, event: Event) -> None:
        if isinstance(event, LoadStep):
            if event.bus not in self.bus_index:
                raise SimulationError(f"load_step at t={event.time} s: unknown bus {event.bus}")
            k = self.bus_index[event.bus]
            self.loads[k] += complex(event.delta_p, event.delta_q)
            self.log_info(
                f"t={event.time:.3f} s: load at bus {event.bus} stepped by "
                f"{event.delta_p:+.4f}{event.delta_q:+.4f}j pu to {self.loads[k].real:.4f}{self.loads[k].imag:+.4f}j pu"
            )
        elif isinstance(event, GenTrip):
            device = self.device(event.device)
            device.in_service = False
            self.log_info(f"t={event.time:.3f} s: {device.name} tripped ({device.s_rating:.0f} MVA)")
        else:
            raise SimulationError(f"unsupported event {event!r}")


def apply_event(model: PowerSystemModel, event: Event) -> None:
    """Apply ``event`` to a live model (loads or device status)."""
    model.apply_event(event)


# ----------------------------------------------------------------------
# Simulator
# ----------------------------------------------------------------------
class Simulator:
    """Runs a scenario on a uniform grid with the implicit trapezoidal rule."""

    def __init__(self, scenario: Scenario, log_info=None, log_error=None):
        self.log_info = log_info or logger.info
        self.log_error = log_error or logger.error
        self.scenario = scenario
        self.model = PowerSystemModel(scenario, log_info=self.log_info, log_error=self.log_error)
        self._lu = None
        self._lu_dt: float | None = None
        self._fx: np.ndarray | None = None

    # -- stepping ------------------------------------------------------
    def refresh_jacobian(self, x: np.ndarray, dt: float) -> None:
        jac = numerical_jacobian(self.model.rhs, x)
        self._lu = lu_factor(np.eye(len(x)) - 0.5 * dt * jac)
        self._lu_dt = dt
        self._fx = self.model.rhs(x)

    def _solve(self, g: np.ndarray) -> np.ndarray:
        return lu_solve(self._lu, g)

    def step(self, x: np.ndarray, t: float, dt: float) -> np.ndarray:
        """Advance the device states from ``t`` to ``t + dt``."""
        self.model.time = t + dt
        if self._lu is None or self._lu_dt != dt:
            self.refresh_jacobian(x, dt)
        if self._fx is None:
            self._fx = self.model.rhs(x)
        fx = self._fx
        try:
            x_next, f_next, iterations = trapezoidal_step(self.model.rhs, x, fx, dt, self._solve)
        except (SimulationError, NetworkSolveError):
            # stale Jacobian; retry once with a fresh one
            self.model.time = t
            self.refresh_jacobian(x, dt)
            self.model.time = t + dt
            try:
                x_next, f_next, iterations = trapezoidal_step(self.model.rhs, x, self._fx, dt, self._solve)
            except (SimulationError, NetworkSolveError) as e:
                raise SimulationError(f"t={t + dt:.6f} s: integration failed: {e}") from e
        if iterations > 5:
            self._lu = None
        self._fx = f_next
        return x_next

    def _invalidate(self, x: np.ndarray) -> None:
        self._lu = None
        self._fx = self.model.rhs(x)

    # -- recording -----------------------------------------------------
    def channel_names(self) -> list[str]:
        names: list[str] = []
        for device in self.model.devices:
            names += [f"f_{device.name}_hz", f"p_{device.name}_pu", f"q_{device.name}_pu"]
            if isinstance(device, GridFormingInverter):
                names += [f"omega_ps_{device.name}_pu", f"p_filt_{device.name}_pu"]
        names += [f"v_bus{bus.id}_pu" for bus in self.model.network.buses]
        names.append("f_weighted_hz")
        return names

    def sample(self, x: np.ndarray) -> list[float]:
        model = self.model
        row: list[float] = []
        weighted = 0.0
        rating = 0.0
        for device, sl, k in zip(model.devices, model.slices, model.device_buses):
            xs = x[sl]
            f_hz = model.f_nom * device.frequency_pu(xs)
            s = model.v[k] * np.conj(device.current(xs, model.v[k]))
            row += [f_hz, s.real, s.imag]
            if isinstance(device, GridFormingInverter):
                omega_ps = device.ps_state.omega_ps if device.ps_state is not None else 0.0
                row += [omega_ps, float(xs[1])]
            if device.in_service:
                weighted += device.s_rating * f_hz
                rating += device.s_rating
        row += list(np.abs(model.v))
        row.append(weighted / rating if rating > 0 else math.nan)
        return row

    # -- run -----------------------------------------------------------
    def run(self, t_end: float | None = None, dt: float | None = None) -> TimeSeries:
        scenario = self.scenario
        t_end = scenario.t_end if t_end is None else t_end
        dt = scenario.dt if dt is None else dt
        started = time.perf_counter()
        model = self.model

        x = model.initialize()
        n_steps = int(round(t_end / dt))
        grid = np.arange(n_steps + 1) * dt

        schedule: dict[int, list[Event]] = {}
        for event in sorted(scenario.events, key=lambda e: e.time):
            k = int(round(event.time / dt))
            if abs(k * dt - event.time) > 1e-9:
                logger.warning(f"{event.kind} at t={event.time} s snapped to the grid at {k * dt:.6f} s")
            if not 0 < k <= n_steps:
                raise SimulationError(f"{event.kind} at t={event.time} s lies outside the simulated window")
            schedule.setdefault(k, []).append(event)
        first_event = min(schedule) if schedule else n_steps + 1
        if schedule and first_event * dt < PRE_EVENT_HOLD_S:
            logger.warning(f"first event at {first_event * dt:.3f} s is inside the {PRE_EVENT_HOLD_S} s steady hold")

        names = self.channel_names()
        data = np.empty((n_steps + 1, len(names)))
        self._invalidate(x)
        data[0] = self.sample(x)
        warned: set[str] = set()
        engaged: dict[str, float] = {}

        for k in range(n_steps):
            t = grid[k]
            x = self.step(x, t, dt)
            refresh = False

            for device, sl in zip(model.devices, model.slices):
                if not isinstance(device, GridFormingInverter) or not device.in_service:
                    continue
                p_i = float(x[sl][1])
                if abs(device.control_power(p_i)) > 1.0 and device.name not in warned:
                    warned.add(device.name)
                    logger.warning(f"t={grid[k + 1]:.3f} s: {device.name} operating beyond rated power (p={p_i:.4f})")
                if device.power_sharing:
                    before = device.ps_state
                    device.ps_state = power_sharing_step(
                        before,
                        device.control_power(p_i),
                        device.control_power(device.params.p_set),
                        dt,
                        device.params.controller,
                    )
                    if device.ps_state.latched and not before.latched:
                        engaged[device.name] = float(grid[k + 1])
                        self.log_info(f"t={grid[k + 1]:.3f} s: power sharing latched on {device.name}")
                    if device.ps_state.omega_ps != before.omega_ps:
                        refresh = True

            for event in schedule.get(k + 1, []):
                try:
                    model.apply_event(event)
                except SimulationError as e:
                    self.log_error(f"Event failed at t={event.time} s: {e}", exc_info=True)
                    raise
                self._lu = None
                refresh = True

            if refresh:
                model.time = grid[k + 1]
                self._fx = model.rhs(x)
            data[k + 1] = self.sample(x)

        if not np.all(np.isfinite(data)):
            raise SimulationError(f"{scenario.name}: non-finite samples in the output")

        hold = data[:first_event]
        drift = float(np.max(np.ptp(hold, axis=0))) if len(hold) > 1 else 0.0
        flat = drift < FLAT_TOLERANCE
        if not flat:
            logger.warning(f"{scenario.name}: pre-event channels drift by {drift:.2e} (limit {FLAT_TOLERANCE:.0e})")

        elapsed = time.perf_counter() - started
        self.log_info(f"{scenario.name}: simulated {t_end:.2f} s in {n_steps} steps ({elapsed:.2f} s wall)")
        meta = {
            "case": scenario.name,
            "dt_s": dt,
            "t_end_s": t_end,
            "first_event_s": first_event * dt if schedule else None,
            "pre_event_drift": drift,
            "pre_event_flat": flat,
            "ratings_mva": {d.name: d.s_rating for d in model.devices},
            "wall_time_s": elapsed,
            "sharing_engaged_s": min(engaged.values()) if engaged else None,
            "sharing_engaged_by_device": engaged,
        }
        return TimeSeries(grid, {name: data[:, j] for j, name in enumerate(names)}, meta)


def run(scenario: Scenario, t_end: float | None = None, dt: float | None = None) -> TimeSeries:
    """Simulate ``scenario`` from its power-flow equilibrium."""
    return Simulator(scenario).run(t_end=t_end, dt=dt)


def scenario_dispatch(scenario: Scenario, device: str, p_sys: float) -> Scenario:
    """Copy of ``scenario`` with one device redispatched (system-base active power)."""
    dispatch = dict(scenario.dispatch)
    dispatch[device] = replace(dispatch[device], p=p_sys)
    return replace(scenario, dispatch=dispatch, events=[])


__all__ = [
    "AnalysisDirectives",
    "DeviceSpec",
    "Event",
    "GenTrip",
    "LoadStep",
    "METRIC_SPANS",
    "PowerSystemModel",
    "Scenario",
    "SimulationError",
    "Simulator",
    "TimeSeries",
    "apply_event",
    "numerical_jacobian",
    "run",
    "scenario_dispatch",
    "trapezoidal_step",
]
