"""
Case file loading, validation and emission.

Case files are JSON documents with unit-suffixed keys (``_pu``, ``_s``,
``_mva``, ``_rad_s``...).  Every section is checked for unknown keys,
omitted parameters are filled from the documented defaults and recorded
in ``Scenario.defaults_applied``, and all violations are reported
together in one :class:`CaseFileError`.
"""

from __future__ import annotations

import os
import json
import logging
from dataclasses import MISSING, fields
from typing import Any

from config import CASES_DIR, get_config_value
from device_models import DeviceModelError, GfmParams, SgParams
from droop_e_control import DroopEParams, DroopParameterError, LinearDroopParams
from network import (
    Branch,
    Bus,
    Dispatch,
    Network,
    NetworkError,
    PowerFlowError,
    calibrate_load_scale,
)
from simulator import METRIC_SPANS, AnalysisDirectives, DeviceSpec, GenTrip, LoadStep, Scenario

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

TOP_LEVEL_KEYS = {
    "schema_version", "name", "description", "notes", "network", "devices",
    "dispatch", "events", "simulation", "outputs", "analysis",
}

# case key -> dataclass field
NETWORK_KEYS = {"s_base_mva": "s_base", "v_base_kv": "v_base", "f_nom_hz": "f_nom"}
BUS_KEYS = {
    "id": "id",
    "type": "type",
    "v_setpoint_pu": "v_setpoint",
    "load_p_pu": "load_p",
    "load_q_pu": "load_q",
    "g_shunt_pu": "g_shunt",
    "b_shunt_pu": "b_shunt",
}
BRANCH_KEYS = {
    "from_bus": "from_bus",
    "to_bus": "to_bus",
    "r_pu": "r",
    "x_pu": "x",
    "b_pu": "b",
    "tap_ratio": "tap",
}
SG_KEYS = {
    "h_s": "h",
    "d_pu": "d",
    "x_d_pu": "x_d",
    "x_q_pu": "x_q",
    "x_d_prime_pu": "x_d_prime",
    "x_q_prime_pu": "x_q_prime",
    "r_s_pu": "r_s",
    "t_do_prime_s": "t_do_prime",
    "t_qo_prime_s": "t_qo_prime",
    "k_a_pu": "k_a",
    "t_a_s": "t_a",
    "k_e_pu": "k_e",
    "t_e_s": "t_e",
    "k_f_pu": "k_f",
    "t_f_s": "t_f",
    "sat_gamma_pu": "sat_gamma",
    "sat_epsilon_pu": "sat_epsilon",
    "m_d_pu": "m_d",
    "t_tg_s": "t_tg",
    "t_sv_s": "t_sv",
    "s_rating_mva": "s_rating",
    "omega_set_pu": "omega_set",
    "omega_s_rad_s": "omega_s",
}
GFM_KEYS = {
    "x_out_pu": "x_out",
    "r_out_pu": "r_out",
    "t_fil_s": "t_fil",
    "s_rating_mva": "s_rating",
    "q_v_gain_pu": "q_v_gain",
    "v_set_pu": "v_set",
    "positive_export": "positive_export",
    "omega_b_rad_s": "omega_b",
}
DROOP_E_KEYS = {
    "alpha_pu": "alpha",
    "beta_per_pu": "beta",
    "d_max_pu": "d_max",
    "d_min_pu": "d_min",
    "m_d_pu": "m_d",
    "omega_nom_pu": "omega_nom",
    "k_per_s": "k",
    "eps_p_pu": "eps_p",
    "eps_dp_pu_s": "eps_dp",
}
LINEAR_DROOP_KEYS = {"m_d_pu": "m_d", "omega_set_pu": "omega_set"}
CONTROLLERS = {"droop_e": (DROOP_E_KEYS, DroopEParams), "linear": (LINEAR_DROOP_KEYS, LinearDroopParams)}
DEVICE_KEYS = {"name", "type", "bus", "controller", "power_sharing", "params", "controller_params"}
DISPATCH_KEYS = {"p_pu", "q_pu", "v_pu"}
LOAD_STEP_KEYS = {"type", "time_s", "bus", "delta_p_pu", "delta_q_pu", "fraction"}
GEN_TRIP_KEYS = {"type", "time_s", "device"}
SIMULATION_KEYS = {"t_end_s", "dt_s"}
ANALYSIS_KEYS = {"sweep_device", "sweep_grid", "metrics_window_s", "metrics_channel", "metrics_span"}
NETWORK_FILE_KEYS = {"file", "calibrate_loads"}
CALIBRATE_KEYS = {"slack_device", "target_p_pu"}


class CaseFileError(ValueError):
    """Raised for unreadable or invalid case files.

    ``violations`` lists every problem found; ``line``/``column`` are set
    for JSON syntax errors.
    """

    def __init__(self, message: str, violations: list[str] | None = None,
                 line: int | None = None, column: int | None = None, path: str | None = None):
        self.violations = violations or [message]
        self.line = line
        self.column = column
        self.path = path
        super().__init__(message)


# ----------------------------------------------------------------------
# Lookup
# ----------------------------------------------------------------------
def resolve_case_path(path_or_name: str) -> str:
    """Return an existing case path, looking in the bundled case library for bare names."""
    if os.path.isfile(path_or_name):
        return path_or_name
    for candidate in (path_or_name, f"{path_or_name}.json"):
        bundled = os.path.join(CASES_DIR, candidate)
        if os.path.isfile(bundled):
            return bundled
    raise CaseFileError(f"case {path_or_name!r} not found (looked in {CASES_DIR})", path=path_or_name)


def list_bundled_cases() -> list[str]:
    if not os.path.isdir(CASES_DIR):
        return []
    return sorted(name[:-5] for name in os.listdir(CASES_DIR) if name.startswith("case_") and name.endswith(".json"))


def _read_json(path: str) -> Any:
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise CaseFileError(f"cannot read {path}: {e}", path=path) from e
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise CaseFileError(
            f"{path}:{e.lineno}:{e.colno}: {e.msg}", line=e.lineno, column=e.colno, path=path
        ) from e


def input_files(path_or_name: str) -> list[str]:
    """Every file a case reads: the case itself plus any referenced network file."""
    path = resolve_case_path(path_or_name)
    files = [path]
    data = _read_json(path)
    network = data.get("network") if isinstance(data, dict) else None
    if isinstance(network, dict) and "file" in network:
        files.append(_network_file_path(path, network["file"]))
    return files


def _network_file_path(case_path: str, name: str) -> str:
    local = os.path.join(os.path.dirname(os.path.abspath(case_path)), name)
    return local if os.path.isfile(local) else os.path.join(CASES_DIR, name)


# ----------------------------------------------------------------------
# Parsing
# ----------------------------------------------------------------------
class _CaseReader:
    """Collects violations and applied defaults while a case is parsed."""

    def __init__(self, path: str):
        self.path = path
        self.violations: list[str] = []
        self.defaults: list[str] = []

    def fail(self, where: str, message: str) -> None:
        self.violations.append(f"{where}: {message}")

    def section(self, value: Any, where: str, allowed: set[str] | dict) -> dict:
        if not isinstance(value, dict):
            self.fail(where, f"expected an object, got {type(value).__name__}")
            return {}
        for key in value:
            if key not in allowed:
                self.fail(where, f"unknown key {key!r}")
        return value

    def number(self, value: Any, where: str) -> float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            self.fail(where, f"expected a number, got {value!r}")
            return float("nan")
        return float(value)

    def integer(self, value: Any, where: str) -> int | None:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not float(value).is_integer():
            self.fail(where, f"expected an integer, got {value!r}")
            return None
        return int(value)

    def params(self, section: dict, keymap: dict[str, str], cls: type, where: str) -> dict:
        """Map unit-suffixed keys onto ``cls`` fields, applying and recording defaults."""
        section = self.section(section, where, keymap)
        defaults = {f.name: f.default for f in fields(cls) if f.default is not MISSING}
        kwargs: dict[str, Any] = {}
        for key, name in keymap.items():
            if key in section:
                value = section[key]
                kwargs[name] = value if isinstance(value, bool) else self.number(value, f"{where}.{key}")
            elif defaults.get(name) is not None:
                kwargs[name] = defaults[name]
                self.defaults.append(f"{where}.{key}={defaults[name]!r}")
        return kwargs


def _parse_network(reader: _CaseReader, raw: Any) -> Network | None:
    section = reader.section(raw, "network", {"buses", "branches", "provenance", *NETWORK_KEYS})
    kwargs = reader.params({k: v for k, v in section.items() if k in NETWORK_KEYS}, NETWORK_KEYS, Network, "network")
    buses: list[Bus] = []
    for i, raw_bus in enumerate(section.get("buses", [])):
        where = f"network.buses[{i}]"
        bus = reader.section(raw_bus, where, BUS_KEYS)
        if "id" not in bus:
            reader.fail(where, "missing id")
            continue
        bus_id = reader.integer(bus["id"], f"{where}.id")
        if bus_id is None:
            continue
        buses.append(
            Bus(
                id=bus_id,
                type=str(bus.get("type", "pq")),
                v_setpoint=reader.number(bus.get("v_setpoint_pu", 1.0), f"{where}.v_setpoint_pu"),
                load_p=reader.number(bus.get("load_p_pu", 0.0), f"{where}.load_p_pu"),
                load_q=reader.number(bus.get("load_q_pu", 0.0), f"{where}.load_q_pu"),
                g_shunt=reader.number(bus.get("g_shunt_pu", 0.0), f"{where}.g_shunt_pu"),
                b_shunt=reader.number(bus.get("b_shunt_pu", 0.0), f"{where}.b_shunt_pu"),
            )
        )
    branches: list[Branch] = []
    for i, raw_branch in enumerate(section.get("branches", [])):
        where = f"network.branches[{i}]"
        br = reader.section(raw_branch, where, BRANCH_KEYS)
        missing = [k for k in ("from_bus", "to_bus", "x_pu") if k not in br]
        if missing:
            reader.fail(where, f"missing {', '.join(missing)}")
            continue
        from_bus = reader.integer(br["from_bus"], f"{where}.from_bus")
        to_bus = reader.integer(br["to_bus"], f"{where}.to_bus")
        if from_bus is None or to_bus is None:
            continue
        branches.append(
            Branch(
                from_bus=from_bus,
                to_bus=to_bus,
                r=reader.number(br.get("r_pu", 0.0), f"{where}.r_pu"),
                x=reader.number(br["x_pu"], f"{where}.x_pu"),
                b=reader.number(br.get("b_pu", 0.0), f"{where}.b_pu"),
                tap=reader.number(br.get("tap_ratio", 1.0), f"{where}.tap_ratio"),
            )
        )
    network = Network(buses=buses, branches=branches, **kwargs)
    try:
        network.validate()
    except NetworkError as e:
        reader.fail("network", str(e))
        return None
    return network


def _parse_device(reader: _CaseReader, raw: Any, i: int) -> DeviceSpec | None:
    where = f"devices[{i}]"
    dev = reader.section(raw, where, DEVICE_KEYS)
    name = dev.get("name")
    if not isinstance(name, str) or not name:
        reader.fail(where, "missing device name")
        return None
    where = f"devices.{name}"
    kind = dev.get("type")
    if "bus" not in dev:
        reader.fail(where, "missing bus")
        return None
    bus = reader.integer(dev["bus"], f"{where}.bus")
    if bus is None:
        return None
    try:
        if kind == "sg":
            for key in ("controller", "controller_params", "power_sharing"):
                if key in dev:
                    reader.fail(where, f"key {key!r} does not apply to a synchronous machine")
            params = SgParams(**reader.params(dev.get("params", {}), SG_KEYS, SgParams, f"{where}.params"))
            return DeviceSpec(name, "sg", bus, params)
        if kind == "gfm":
            controller = dev.get("controller", "droop_e")
            if controller not in CONTROLLERS:
                reader.fail(where, f"unknown controller {controller!r} (expected one of {', '.join(CONTROLLERS)})")
                return None
            gfm_kwargs = reader.params(dev.get("params", {}), GFM_KEYS, GfmParams, f"{where}.params")
            keymap, cls = CONTROLLERS[controller]
            ctrl_kwargs = reader.params(dev.get("controller_params", {}), keymap, cls, f"{where}.controller_params")
            if cls is DroopEParams:
                ctrl_kwargs["omega_b"] = gfm_kwargs.get("omega_b", GfmParams.omega_b)
            else:
                ctrl_kwargs["omega_fil"] = 1.0 / gfm_kwargs.get("t_fil", GfmParams.t_fil)
            power_sharing = bool(dev.get("power_sharing", controller == "droop_e"))
            if power_sharing and controller != "droop_e":
                reader.fail(where, "power sharing requires the droop_e controller")
            params = GfmParams(controller=cls(**ctrl_kwargs), **gfm_kwargs)
            return DeviceSpec(name, "gfm", bus, params, power_sharing)
        reader.fail(where, f"unknown device type {kind!r} (expected 'sg' or 'gfm')")
    except (DroopParameterError, DeviceModelError, TypeError) as e:
        reader.fail(where, str(e))
    return None


def _parse_event(reader: _CaseReader, raw: Any, i: int, network: Network | None):
    where = f"events[{i}]"
    kind = raw.get("type") if isinstance(raw, dict) else None
    if kind == "load_step":
        ev = reader.section(raw, where, LOAD_STEP_KEYS)
        bus = reader.integer(ev.get("bus"), f"{where}.bus")
        t = reader.number(ev.get("time_s"), f"{where}.time_s")
        if bus is None:
            return None
        if "fraction" in ev:
            if "delta_p_pu" in ev or "delta_q_pu" in ev:
                reader.fail(where, "give either fraction or delta_p_pu/delta_q_pu, not both")
                return None
            if network is None:
                return None
            try:
                base = network.bus(bus)
            except NetworkError as e:
                reader.fail(where, str(e))
                return None
            fraction = reader.number(ev["fraction"], f"{where}.fraction")
            return LoadStep(t, bus, fraction * base.load_p, fraction * base.load_q)
        if "delta_p_pu" not in ev:
            reader.fail(where, "missing delta_p_pu")
            return None
        return LoadStep(
            t,
            bus,
            reader.number(ev["delta_p_pu"], f"{where}.delta_p_pu"),
            reader.number(ev.get("delta_q_pu", 0.0), f"{where}.delta_q_pu"),
        )
    if kind == "gen_trip":
        ev = reader.section(raw, where, GEN_TRIP_KEYS)
        return GenTrip(reader.number(ev.get("time_s"), f"{where}.time_s"), str(ev.get("device", "")))
    reader.fail(where, f"unknown event type {kind!r} (expected 'load_step' or 'gen_trip')")
    return None


def _parse_grid(reader: _CaseReader, value: Any) -> tuple[float, float, float] | None:
    try:
        if isinstance(value, str):
            parts = tuple(float(p) for p in value.split(":"))
        else:
            parts = tuple(float(p) for p in value)
    except (TypeError, ValueError):
        parts = ()
    if len(parts) != 3 or parts[1] <= 0 or parts[2] < parts[0]:
        reader.fail("analysis.sweep_grid", f"expected start:step:stop, got {value!r}")
        return None
    return parts


def parse_case(data: Any, path: str = "<memory>") -> Scenario:
    """Validate a decoded case document and build the :class:`Scenario`."""
    reader = _CaseReader(path)
    top = reader.section(data, "case", TOP_LEVEL_KEYS)
    if top.get("schema_version") != SCHEMA_VERSION:
        reader.fail("schema_version", f"expected {SCHEMA_VERSION}, got {top.get('schema_version')!r}")
    name = top.get("name") or os.path.splitext(os.path.basename(path))[0]

    raw_network = top.get("network")
    calibrate = None
    if isinstance(raw_network, dict) and "file" in raw_network:
        ref = reader.section(raw_network, "network", NETWORK_FILE_KEYS)
        network_path = _network_file_path(path, str(ref["file"]))
        included = _read_json(network_path)
        raw_network = included.get("network") if isinstance(included, dict) else None
        if raw_network is None:
            reader.fail("network.file", f"{network_path} has no network section")
        if "calibrate_loads" in ref:
            calibrate = reader.section(ref["calibrate_loads"], "network.calibrate_loads", CALIBRATE_KEYS)
    network = _parse_network(reader, raw_network) if raw_network is not None else None
    if raw_network is None and "network" not in top:
        reader.fail("case", "missing network section")

    devices = [d for i, raw in enumerate(top.get("devices", [])) if (d := _parse_device(reader, raw, i))]
    bus_of = {d.name: d.bus for d in devices}

    dispatch: dict[str, Dispatch] = {}
    raw_dispatch = top.get("dispatch", {})
    if not isinstance(raw_dispatch, dict):
        reader.fail("dispatch", "expected an object keyed by device name")
        raw_dispatch = {}
    for dev_name, raw in raw_dispatch.items():
        where = f"dispatch.{dev_name}"
        entry = reader.section(raw, where, DISPATCH_KEYS)
        if dev_name not in bus_of:
            reader.fail(where, "names no device")
            continue
        v = entry.get("v_pu")
        dispatch[dev_name] = Dispatch(
            bus=bus_of[dev_name],
            p=reader.number(entry.get("p_pu", 0.0), f"{where}.p_pu"),
            q=reader.number(entry.get("q_pu", 0.0), f"{where}.q_pu"),
            v=None if v is None else reader.number(v, f"{where}.v_pu"),
        )

    events = [e for i, raw in enumerate(top.get("events", [])) if (e := _parse_event(reader, raw, i, network))]

    sim = reader.section(top.get("simulation", {}), "simulation", SIMULATION_KEYS)
    t_end = reader.number(sim.get("t_end_s", 10.0), "simulation.t_end_s")
    if "dt_s" in sim:
        dt = reader.number(sim["dt_s"], "simulation.dt_s")
    else:
        dt = float(get_config_value("DT_S", 0.001))
        reader.defaults.append(f"simulation.dt_s={dt!r}")

    raw_analysis = reader.section(top.get("analysis", {}), "analysis", ANALYSIS_KEYS)
    analysis = AnalysisDirectives(
        sweep_device=raw_analysis.get("sweep_device"),
        sweep_grid=_parse_grid(reader, raw_analysis["sweep_grid"]) if "sweep_grid" in raw_analysis else None,
        metrics_window=reader.number(raw_analysis.get("metrics_window_s", 0.1), "analysis.metrics_window_s"),
        metrics_channel=raw_analysis.get("metrics_channel"),
        metrics_span=str(raw_analysis.get("metrics_span", "full")),
    )
    if analysis.metrics_span not in METRIC_SPANS:
        reader.fail("analysis.metrics_span", f"expected one of {', '.join(METRIC_SPANS)}, got {analysis.metrics_span!r}")

    outputs = top.get("outputs")
    if outputs is not None and not (isinstance(outputs, dict) and all(isinstance(v, str) for v in outputs.values())):
        reader.fail("outputs", "expected an object mapping column names to channel names")
        outputs = None

    if network is not None and calibrate and not reader.violations:
        slack = calibrate.get("slack_device")
        if slack not in dispatch:
            reader.fail("network.calibrate_loads", f"unknown slack device {slack!r}")
        else:
            target = reader.number(calibrate.get("target_p_pu", dispatch[slack].p), "network.calibrate_loads.target_p_pu")
            try:
                network, scale, _ = calibrate_load_scale(network, dispatch, slack, target)
            except (PowerFlowError, NetworkError) as e:
                reader.fail("network.calibrate_loads", str(e))
            else:
                logger.info(f"{name}: loads scaled by {scale:.6f}")

    scenario = None
    if network is not None:
        scenario = Scenario(
            name=name,
            network=network,
            devices=devices,
            dispatch=dispatch,
            events=events,
            t_end=t_end,
            dt=dt,
            outputs=outputs,
            analysis=analysis,
            description=str(top.get("description", "")),
            notes=list(top.get("notes", [])),
            defaults_applied=list(reader.defaults),
            source=path,
        )
        reader.violations.extend(scenario.validate())
        if analysis.sweep_device is not None and analysis.sweep_device not in bus_of:
            reader.fail("analysis.sweep_device", f"names no device ({analysis.sweep_device!r})")

    if reader.violations:
        raise CaseFileError(
            f"{path}: {len(reader.violations)} problem(s): " + "; ".join(reader.violations),
            violations=reader.violations,
            path=path,
        )
    for default in reader.defaults:
        logger.info(f"{name}: default applied {default}")
    return scenario


def load_case(path_or_name: str) -> Scenario:
    """Read, validate and build a scenario from a case file or bundled case name."""
    path = resolve_case_path(path_or_name)
    try:
        scenario = parse_case(_read_json(path), path)
    except CaseFileError as e:
        logger.error(f"Failed to load case {path}: {e}")
        raise
    logger.info(f"Loaded case {scenario.name} from {path} ({len(scenario.devices)} devices, {len(scenario.events)} events)")
    return scenario


# ----------------------------------------------------------------------
# Emission
# ----------------------------------------------------------------------
def _emit_params(obj: Any, keymap: dict[str, str]) -> dict:
    return {key: getattr(obj, name) for key, name in keymap.items() if getattr(obj, name) is not None}


def case_to_dict(scenario: Scenario) -> dict:
    """Fully explicit case document: inline network, every parameter written out."""
    network = scenario.network
    devices = []
    for spec in scenario.devices:
        entry: dict[str, Any] = {"name": spec.name, "type": spec.kind, "bus": spec.bus}
        if spec.kind == "sg":
            entry["params"] = _emit_params(spec.params, SG_KEYS)
        else:
            controller = spec.params.controller
            is_droop_e = isinstance(controller, DroopEParams)
            entry["controller"] = "droop_e" if is_droop_e else "linear"
            entry["power_sharing"] = spec.power_sharing
            entry["params"] = _emit_params(spec.params, GFM_KEYS)
            entry["controller_params"] = _emit_params(controller, DROOP_E_KEYS if is_droop_e else LINEAR_DROOP_KEYS)
        devices.append(entry)

    dispatch = {}
    for name, d in scenario.dispatch.items():
        entry = {"p_pu": d.p, "q_pu": d.q}
        if d.v is not None:
            entry["v_pu"] = d.v
        dispatch[name] = entry

    events = []
    for event in scenario.events:
        if isinstance(event, LoadStep):
            events.append({"type": "load_step", "time_s": event.time, "bus": event.bus,
                           "delta_p_pu": event.delta_p, "delta_q_pu": event.delta_q})
        else:
            events.append({"type": "gen_trip", "time_s": event.time, "device": event.device})

    analysis: dict[str, Any] = {"metrics_window_s": scenario.analysis.metrics_window}
    if scenario.analysis.sweep_device is not None:
        analysis["sweep_device"] = scenario.analysis.sweep_device
    if scenario.analysis.sweep_grid is not None:
        analysis["sweep_grid"] = list(scenario.analysis.sweep_grid)
    if scenario.analysis.metrics_channel is not None:
        analysis["metrics_channel"] = scenario.analysis.metrics_channel
    if scenario.analysis.metrics_span != "full":
        analysis["metrics_span"] = scenario.analysis.metrics_span

    doc: dict[str, Any] = {
        "schema_version": SCHEMA_VERSION,
        "name": scenario.name,
        "description": scenario.description,
        "notes": list(scenario.notes),
        "network": {
            **_emit_params(network, NETWORK_KEYS),
            "buses": [_emit_params(b, BUS_KEYS) for b in network.buses],
            "branches": [_emit_params(br, BRANCH_KEYS) for br in network.branches],
        },
        "devices": devices,
        "dispatch": dispatch,
        "events": events,
        "simulation": {"t_end_s": scenario.t_end, "dt_s": scenario.dt},
        "analysis": analysis,
    }
    if scenario.outputs is not None:
        doc["outputs"] = dict(scenario.outputs)
    return doc


def save_case(scenario: Scenario, path: str) -> str:
    """Write ``scenario`` as an explicit case file and return the path."""
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(case_to_dict(scenario), f, indent=2)
            f.write("\n")
    except OSError as e:
        logger.error(f"Failed to save case {path}: {e}", exc_info=True)
        raise
    logger.info(f"Saved case {scenario.name} to {path}")
    return path


__all__ = [
    "CaseFileError",
    "SCHEMA_VERSION",
    "case_to_dict",
    "input_files",
    "list_bundled_cases",
    "load_case",
    "parse_case",
    "resolve_case_path",
    "save_case",
]
