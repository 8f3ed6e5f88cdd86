"""
DroopSim command line.

    python main.py simulate case_3bus_A
    python main.py sweep case_3bus --grid -1:0.05:1
    python main.py metrics results/case_3bus_A_timeseries.csv --window 0.1
    python main.py curves
    python main.py validate case_39bus_C
"""

from __future__ import annotations

import os
import sys
import json
import time
import logging
import filecmp
import tempfile

import click
from dotenv import load_dotenv
from rich.console import Console

from analysis import dispatch_sweep, frequency_metrics, metrics_until, parse_grid
from case_files import input_files, load_case, resolve_case_path
from config import DEFAULT_LOG_FILE, configure_logging, get_config_value
from droop_e_control import DroopEParams
from export_results import (
    RunArtifacts,
    build_manifest,
    emit_curve_tables,
    metrics_frame,
    metrics_table,
    modal_frame,
    modal_table,
    read_timeseries,
    scenario_table,
    write_frame,
    write_manifest,
    write_timeseries,
)
from simulator import Simulator

load_dotenv()

logger = logging.getLogger(__name__)
console = Console(stderr=True)


def log_info(message):
    logger.info(message)


def log_error(message, exc_info=False):
    logger.error(message, exc_info=exc_info)


def _out_dir(out_dir: str | None) -> str:
    path = out_dir or get_config_value("OUT_DIR", "results")
    os.makedirs(path, exist_ok=True)
    return path


# ----------------------------------------------------------------------
# Command bodies
# ----------------------------------------------------------------------
def simulate_case(case: str, out_dir: str | None = None, dt: float | None = None,
                  t_end: float | None = None, window: float | None = None) -> RunArtifacts:
    started = time.perf_counter()
    scenario = load_case(case)
    out = _out_dir(out_dir)
    series = Simulator(scenario, log_info=log_info, log_error=log_error).run(t_end=t_end, dt=dt)

    window = window if window is not None else scenario.analysis.metrics_window
    until = metrics_until(series, scenario.analysis.metrics_span)
    metrics = frequency_metrics(series, window=window, channel=scenario.analysis.metrics_channel, until=until)
    rows = [(scenario.name, metrics)]

    artifacts = RunArtifacts()
    artifacts.timeseries_csv = write_timeseries(series.select(scenario.outputs), os.path.join(out, f"{scenario.name}_timeseries.csv"))
    artifacts.metrics_csv = write_frame(metrics_frame(rows), os.path.join(out, f"{scenario.name}_metrics.csv"))
    options = {"command": "simulate", "dt_s": dt, "t_end_s": t_end, "window_s": window}
    artifacts.manifest = build_manifest(
        scenario, input_files(case), options, [artifacts.timeseries_csv, artifacts.metrics_csv],
        time.perf_counter() - started,
    )
    artifacts.manifest_path = write_manifest(artifacts.manifest, os.path.join(out, f"{scenario.name}_manifest.json"))
    console.print(metrics_table(rows))
    return artifacts


def sweep_case(case: str, grid: str | None = None, device: str | None = None,
               workers: int | None = None, out_dir: str | None = None) -> RunArtifacts:
    started = time.perf_counter()
    scenario = load_case(case)
    out = _out_dir(out_dir)
    workers = workers or int(get_config_value("SWEEP_WORKERS", 1))
    reports = dispatch_sweep(scenario, grid, device=device, workers=workers)
    if not reports:
        raise RuntimeError(f"{scenario.name}: every sweep point was infeasible")

    artifacts = RunArtifacts()
    artifacts.modes_csv = write_frame(modal_frame(reports), os.path.join(out, f"{scenario.name}_modes.csv"))
    options = {"command": "sweep", "grid": grid, "device": device}
    artifacts.manifest = build_manifest(scenario, input_files(case), options, [artifacts.modes_csv], time.perf_counter() - started)
    artifacts.manifest_path = write_manifest(artifacts.manifest, os.path.join(out, f"{scenario.name}_sweep_manifest.json"))
    console.print(modal_table(reports[len(reports) // 2]))
    return artifacts


def metrics_for_csv(path: str, window: float | None = None, channel: str | None = None,
                    event_time: float | None = None, out_dir: str | None = None,
                    until: float | None = None) -> RunArtifacts:
    series = read_timeseries(path)
    window = window if window is not None else float(get_config_value("ROCOF_WINDOW_S", 0.1))
    metrics = frequency_metrics(
        series, window=window, channel=channel, event_time=event_time, until=until,
        max_samples=int(get_config_value("PENCIL_MAX_SAMPLES", 1000)),
    )
    stem = os.path.splitext(os.path.basename(path))[0]
    out = _out_dir(out_dir)
    rows = [(stem, metrics)]
    artifacts = RunArtifacts(metrics_csv=write_frame(metrics_frame(rows), os.path.join(out, f"{stem}_metrics.csv")))
    console.print(metrics_table(rows))
    return artifacts


def curves(grid: str | None = None, case: str | None = None, out_dir: str | None = None) -> RunArtifacts:
    params = DroopEParams()
    if case:
        scenario = load_case(case)
        gfms = [d for d in scenario.devices if d.kind == "gfm" and isinstance(d.params.controller, DroopEParams)]
        if not gfms:
            raise ValueError(f"{scenario.name} has no Droop-e device")
        params = gfms[0].params.controller
    points = parse_grid(grid) if grid else None
    out = _out_dir(out_dir)
    return RunArtifacts(curves_csv=write_frame(emit_curve_tables(params, points), os.path.join(out, "droop_e_curves.csv")))


# ----------------------------------------------------------------------
# click group
# ----------------------------------------------------------------------
@click.group()
@click.option("--verbose", "-v", is_flag=True, help="Log at DEBUG level.")
@click.option("--log-file", default=None, help="Rotating log file (default: the data directory).")
@click.pass_context
def cli(ctx, verbose, log_file):
    """Droop-e grid-forming simulation and analysis."""
    configure_logging(
        log_file=log_file or get_config_value("LOG_FILE", DEFAULT_LOG_FILE),
        level="DEBUG" if verbose else get_config_value("LOG_LEVEL", "INFO"),
    )
    ctx.ensure_object(dict)


def _case_arg(case, case_opt):
    chosen = case_opt or case
    if not chosen:
        raise click.UsageError("give a case name or path (positional or --case)")
    return chosen


@cli.command()
@click.argument("case", required=False)
@click.option("--case", "case_opt", default=None, help="Case name or path.")
@click.option("--out-dir", default=None)
@click.option("--dt", type=float, default=None, help="Step size [s]; default from the case.")
@click.option("--t-end", type=float, default=None, help="Simulated time [s]; default from the case.")
@click.option("--window", type=float, default=None, help="ROCOF window [s].")
@click.option("--seedless", is_flag=True, help="Run twice and require bit-identical outputs.")
@click.pass_context
def simulate(ctx, case, case_opt, out_dir, dt, t_end, window, seedless):
    """Run a case and write time series, metrics and manifest."""
    case = _case_arg(case, case_opt)
    artifacts = simulate_case(case, out_dir, dt, t_end, window)
    if seedless:
        with tempfile.TemporaryDirectory() as tmp:
            again = simulate_case(case, tmp, dt, t_end, window)
            for first, second in ((artifacts.timeseries_csv, again.timeseries_csv), (artifacts.metrics_csv, again.metrics_csv)):
                if not filecmp.cmp(first, second, shallow=False):
                    raise RuntimeError(f"determinism check failed: {os.path.basename(first)} differs between runs")
            if artifacts.manifest["input_sha256"] != again.manifest["input_sha256"]:
                raise RuntimeError("determinism check failed: manifest hash differs between runs")
        log_info("Determinism check passed: repeated run is bit-identical")
    ctx.obj["artifacts"] = artifacts


@cli.command()
@click.argument("case", required=False)
@click.option("--case", "case_opt", default=None)
@click.option("--grid", default=None, help="start:step:stop in device per unit.")
@click.option("--device", default=None, help="Grid-forming device to redispatch.")
@click.option("--workers", type=int, default=None)
@click.option("--out-dir", default=None)
@click.pass_context
def sweep(ctx, case, case_opt, grid, device, workers, out_dir):
    """Eigenvalue sweep over a grid of inverter setpoints."""
    ctx.obj["artifacts"] = sweep_case(_case_arg(case, case_opt), grid, device, workers, out_dir)


@cli.command()
@click.argument("csv_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--window", type=float, default=None, help="ROCOF window [s].")
@click.option("--channel", default=None, help="Frequency column (default: weighted or first f_*_hz).")
@click.option("--event-time", type=float, default=None)
@click.option("--until", type=float, default=None, help="Stop the metrics at this time [s].")
@click.option("--out-dir", default=None)
@click.pass_context
def metrics(ctx, csv_path, window, channel, event_time, until, out_dir):
    """Nadir, peak, ROCOF, settling frequency and dominant mode of a time-series CSV."""
    ctx.obj["artifacts"] = metrics_for_csv(csv_path, window, channel, event_time, out_dir, until)


@cli.command(name="curves")
@click.option("--grid", default=None, help="start:step:stop power grid in per unit.")
@click.option("--case", "case_opt", default=None, help="Take controller constants from this case.")
@click.option("--out-dir", default=None)
@click.pass_context
def curves_command(ctx, grid, case_opt, out_dir):
    """Tabulate the Droop-e curve and its tangent droop."""
    ctx.obj["artifacts"] = curves(grid, case_opt, out_dir)


@cli.command()
@click.argument("case", required=False)
@click.option("--case", "case_opt", default=None)
@click.pass_context
def validate(ctx, case, case_opt):
    """Load and validate a case without running it."""
    scenario = load_case(_case_arg(case, case_opt))
    console.print(scenario_table(scenario))
    for default in scenario.defaults_applied:
        console.print(f"default: {default}")
    for note in scenario.notes:
        console.print(f"note: {note}")
    click.echo(json.dumps({"status": "ok", "case": scenario.name, "path": resolve_case_path(_case_arg(case, case_opt))}))
    ctx.obj["artifacts"] = RunArtifacts()


def _error_payload(exc: BaseException) -> str:
    return json.dumps({"status": "error", "kind": type(exc).__name__, "message": str(exc)})


def run_command(argv: list[str]) -> RunArtifacts:
    """Run a subcommand in-process and return the artifacts it wrote."""
    obj: dict = {}
    cli.main(args=list(argv), prog_name="droopsim", standalone_mode=False, obj=obj)
    return obj.get("artifacts", RunArtifacts())


def main(argv: list[str] | None = None) -> int:
    try:
        run_command(sys.argv[1:] if argv is None else argv)
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.ClickException as e:
        e.show()
        sys.stderr.write(_error_payload(e) + "\n")
        return 1
    except Exception as e:
        log_error(f"Command failed: {e}", exc_info=True)
        sys.stderr.write(_error_payload(e) + "\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
