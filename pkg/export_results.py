"""
CSV writers, run manifests and summary tables.

All numeric CSV output goes through :func:`write_frame`, which writes
full-precision (``%.17g``) locale-independent decimals with ``\\n`` line
endings so repeated runs are byte-identical.
"""

from __future__ import annotations

import os
import sys
import json
import hashlib
import logging
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
import pandas as pd
import scipy
from rich.table import Table

from analysis import FrequencyMetrics, ModalReport
from droop_e_control import (
    DroopEParams,
    LinearDroopParams,
    d_exp,
    droop_e_frequency,
    linear_droop_frequency,
    tangent_droop,
)
from simulator import Scenario, TimeSeries

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"

METRIC_COLUMNS = [
    "case", "channel", "event_time_s", "until_s", "window_s", "nadir_hz", "peak_hz",
    "max_rocof_hz_s", "settling_hz", "mode_freq_hz", "mode_damping",
]
MODE_COLUMNS = [
    "p_set_pu", "mode", "track", "real", "imag", "freq_hz", "damping",
    "gfm_mode", "reference_mode", "bifurcation", "dominant_states",
]
CURVE_COLUMNS = ["p_pu", "d_exp_pu", "freq_hz", "tangent_droop_pu", "linear_5pct_hz"]


@dataclass
class RunArtifacts:
    timeseries_csv: str | None = None
    metrics_csv: str | None = None
    modes_csv: str | None = None
    curves_csv: str | None = None
    manifest_path: str | None = None
    manifest: dict = field(default_factory=dict)

    def paths(self) -> list[str]:
        return [p for p in (self.timeseries_csv, self.metrics_csv, self.modes_csv, self.curves_csv, self.manifest_path) if p]


# ----------------------------------------------------------------------
# CSV
# ----------------------------------------------------------------------
def write_frame(frame: pd.DataFrame, path: str) -> str:
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    except OSError as e:
        logger.error(f"CSV export failed for {path}: {e}", exc_info=True)
        raise
    logger.info(f"Wrote {len(frame)} rows to {path}")
    return path


def write_timeseries(series: TimeSeries, path: str) -> str:
    return write_frame(series.to_frame(), path)


def read_timeseries(path: str) -> TimeSeries:
    try:
        frame = pd.read_csv(path)
    except (OSError, pd.errors.ParserError) as e:
        raise ValueError(f"cannot read time series {path}: {e}") from e
    return TimeSeries.from_frame(frame, {"source": path})


def metrics_frame(rows: Iterable[tuple[str, FrequencyMetrics]]) -> pd.DataFrame:
    records = [{"case": case, **asdict(m)} for case, m in rows]
    return pd.DataFrame.from_records(records, columns=METRIC_COLUMNS)


def modal_frame(reports: Sequence[ModalReport]) -> pd.DataFrame:
    """One row per (operating point, mode)."""
    records = []
    for report in reports:
        p_set = report.operating_point.get("p_set", np.nan)
        for i, lam in enumerate(report.eigenvalues):
            records.append(
                {
                    "p_set_pu": p_set,
                    "mode": i,
                    "track": int(report.track[i]) if report.track is not None else i,
                    "real": lam.real,
                    "imag": lam.imag,
                    "freq_hz": report.freq_hz[i],
                    "damping": report.damping[i],
                    "gfm_mode": bool(report.gfm_mode[i]),
                    "reference_mode": bool(report.reference_mode[i]),
                    "bifurcation": bool(report.bifurcation[i]) if report.bifurcation is not None else False,
                    "dominant_states": ";".join(report.dominant_states(i)),
                }
            )
    return pd.DataFrame.from_records(records, columns=MODE_COLUMNS)


def emit_curve_tables(
    params: DroopEParams | None = None,
    grid: Sequence[float] | np.ndarray | None = None,
    p_set: float = 0.0,
    f_nom: float = 60.0,
) -> pd.DataFrame:
    """Droop-e curve, its tangent slope and a 5% linear droop over a power grid."""
    params = params or DroopEParams()
    points = np.linspace(-1.0, 1.0, 201) if grid is None else np.asarray(grid, dtype=float)
    linear = LinearDroopParams(m_d=0.05)
    rows = []
    for p in points:
        p = float(p)
        rows.append(
            {
                "p_pu": p,
                "d_exp_pu": d_exp(p, params),
                "freq_hz": f_nom * droop_e_frequency(p, p_set, 0.0, params) / params.omega_b,
                "tangent_droop_pu": tangent_droop(p, params),
                "linear_5pct_hz": f_nom * linear_droop_frequency(p, p_set, linear),
            }
        )
    return pd.DataFrame.from_records(rows, columns=CURVE_COLUMNS)


# ----------------------------------------------------------------------
# Manifest
# ----------------------------------------------------------------------
def input_hash(paths: Sequence[str], options: dict) -> str:
    """sha256 over the input files' bytes and the canonical options JSON."""
    digest = hashlib.sha256()
    for path in paths:
        with open(path, "rb") as f:
            digest.update(f.read())
    digest.update(json.dumps(options, sort_keys=True, default=str).encode("utf-8"))
    return digest.hexdigest()


def build_manifest(
    scenario: Scenario | None,
    inputs: Sequence[str],
    options: dict,
    outputs: Sequence[str],
    wall_time_s: float,
) -> dict:
    return {
        "case": scenario.name if scenario else None,
        "inputs": [os.path.basename(p) for p in inputs],
        "options": options,
        "input_sha256": input_hash(inputs, options),
        "outputs": [os.path.basename(p) for p in outputs],
        "defaults_applied": list(scenario.defaults_applied) if scenario else [],
        "notes": list(scenario.notes) if scenario else [],
        "versions": {
            "python": sys.version.split()[0],
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "pandas": pd.__version__,
        },
        "wall_time_s": wall_time_s,
    }


def write_manifest(manifest: dict, path: str) -> str:
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=2, default=str)
            f.write("\n")
    except OSError as e:
        logger.error(f"Failed to write manifest {path}: {e}", exc_info=True)
        raise
    return path


# ----------------------------------------------------------------------
# Summary tables
# ----------------------------------------------------------------------
def _fmt(value: float, spec: str = ".4f") -> str:
    return "n/a" if value is None or (isinstance(value, float) and np.isnan(value)) else format(value, spec)


def metrics_table(rows: Iterable[tuple[str, FrequencyMetrics]]) -> Table:
    table = Table(title="Frequency response")
    for header in ("Case", "Channel", "Nadir [Hz]", "Peak [Hz]", "Max ROCOF [Hz/s]", "Settling [Hz]", "Mode [Hz]", "Damping"):
        table.add_column(header, justify="right" if "[" in header or header == "Damping" else "left")
    for case, m in rows:
        table.add_row(
            case, m.channel, _fmt(m.nadir_hz), _fmt(m.peak_hz), _fmt(m.max_rocof_hz_s, ".3f"),
            _fmt(m.settling_hz), _fmt(m.mode_freq_hz, ".3f"), _fmt(m.mode_damping, ".3f"),
        )
    return table


def modal_table(report: ModalReport, limit: int = 20) -> Table:
    p_set = report.operating_point.get("p_set")
    title = "Eigenvalues" if p_set is None else f"Eigenvalues at p_set = {p_set:+.3f} pu"
    table = Table(title=title)
    for header in ("#", "Real", "Imag", "f [Hz]", "Damping", "GFM", "Dominant states"):
        table.add_column(header)
    for i, lam in enumerate(report.eigenvalues[:limit]):
        flags = "ref" if report.reference_mode[i] else ("yes" if report.gfm_mode[i] else "")
        table.add_row(
            str(i), f"{lam.real:.4f}", f"{lam.imag:.4f}", f"{report.freq_hz[i]:.3f}",
            f"{report.damping[i]:.3f}", flags, ", ".join(report.dominant_states(i)),
        )
    return table


def scenario_table(scenario: Scenario) -> Table:
    table = Table(title=f"{scenario.name}: {len(scenario.network.buses)} buses, {len(scenario.network.branches)} branches")
    for header in ("Device", "Type", "Bus", "Rating [MVA]", "P [pu]", "Controller"):
        table.add_column(header)
    for spec in scenario.devices:
        if spec.kind == "gfm":
            controller = "droop-e" if isinstance(spec.params.controller, DroopEParams) else "linear"
            if spec.power_sharing:
                controller += " + sharing"
        else:
            controller = "governor"
        table.add_row(
            spec.name, spec.kind, str(spec.bus), f"{spec.params.s_rating:.0f}",
            f"{scenario.dispatch[spec.name].p:.4f}", controller,
        )
    return table


__all__ = [
    "RunArtifacts",
    "build_manifest",
    "emit_curve_tables",
    "input_hash",
    "metrics_frame",
    "metrics_table",
    "modal_frame",
    "modal_table",
    "read_timeseries",
    "scenario_table",
    "write_frame",
    "write_manifest",
    "write_timeseries",
]
