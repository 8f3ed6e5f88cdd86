"""
Small-signal and post-event analysis.

* ``linearize`` / ``eigen_report``: state matrix of the reduced derivative
  map by central differences, eigenvalues, damping and participation.
* ``dispatch_sweep``: eigen reports over a grid of inverter setpoints with
  modes tracked by eigenvector overlap.
* ``matrix_pencil``: damped-exponential decomposition of a sampled signal.
* ``frequency_metrics`` and friends: nadir, peak, windowed ROCOF, settling
  frequency and dominant mode of a simulated frequency channel.
"""

from __future__ import annotations

import math
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import linalg
from scipy.optimize import linear_sum_assignment

from droop_e_control import DroopParameterError
from network import NetworkSolveError, PowerFlowError
from simulator import (
    METRIC_SPANS,
    PowerSystemModel,
    Scenario,
    SimulationError,
    TimeSeries,
    numerical_jacobian,
    scenario_dispatch,
)

logger = logging.getLogger(__name__)

GFM_STATES = ("delta_i", "p_i")
ANGLE_STATES = ("delta_g", "delta_i")


class LinearizationError(RuntimeError):
    """Raised when the operating point is not an equilibrium."""


class MetricsError(ValueError):
    """Raised for metric requests the series cannot support."""


# ----------------------------------------------------------------------
# Result containers
# ----------------------------------------------------------------------
@dataclass
class StateMatrix:
    a_sys: np.ndarray
    labels: list[str]
    operating_point: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        a = np.asarray(self.a_sys, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise LinearizationError(f"state matrix must be square, got shape {a.shape}")
        if len(self.labels) != a.shape[0] or len(set(self.labels)) != len(self.labels):
            raise LinearizationError("state labels must cover every state exactly once")
        if not np.all(np.isfinite(a)):
            raise LinearizationError("state matrix has non-finite entries")
        self.a_sys = a


@dataclass
class ModalReport:
    eigenvalues: np.ndarray
    damping: np.ndarray
    freq_hz: np.ndarray
    participation: np.ndarray
    labels: list[str]
    right_vectors: np.ndarray
    reference_mode: np.ndarray
    gfm_mode: np.ndarray
    operating_point: dict = field(default_factory=dict)
    track: np.ndarray | None = None
    bifurcation: np.ndarray | None = None

    @property
    def n_modes(self) -> int:
        return len(self.eigenvalues)

    def max_real(self, exclude_reference: bool = True) -> float:
        mask = ~self.reference_mode if exclude_reference else np.ones(self.n_modes, dtype=bool)
        return float(np.max(self.eigenvalues[mask].real)) if np.any(mask) else -math.inf

    def is_stable(self) -> bool:
        return self.max_real() < 0

    def dominant_states(self, mode: int, count: int = 3) -> list[str]:
        order = np.argsort(-self.participation[:, mode])[:count]
        return [self.labels[i] for i in order if self.participation[i, mode] > 0]


@dataclass
class PencilMode:
    freq_hz: float
    damping: float
    amplitude: float
    phase: float
    sigma: float
    energy: float


@dataclass
class FrequencyMetrics:
    nadir_hz: float
    peak_hz: float
    max_rocof_hz_s: float
    settling_hz: float
    mode_freq_hz: float
    mode_damping: float
    channel: str = ""
    window_s: float = 0.1
    event_time_s: float = 0.0
    until_s: float | None = None


# ----------------------------------------------------------------------
# Linearization and eigenanalysis
# ----------------------------------------------------------------------
def linearize(
    target: Scenario | PowerSystemModel,
    eps: float = 1e-6,
    residual_tol: float = 1e-8,
) -> StateMatrix:
    """State matrix of the network-reduced derivative map at its equilibrium."""
    if isinstance(target, Scenario):
        model = PowerSystemModel(target)
        x0 = model.initialize()
    else:
        model = target
        x0 = model.x0.copy() if model.x0 is not None else model.initialize()

    residual = model.equilibrium_residual(x0)
    if residual >= residual_tol:
        raise LinearizationError(
            f"{model.scenario.name}: equilibrium residual {residual:.3e} exceeds {residual_tol:.0e}"
        )
    try:
        a_sys = numerical_jacobian(model.rhs, x0, eps)
    except NetworkSolveError as e:
        raise LinearizationError(f"network solve failed while linearizing: {e}") from e
    model.rhs(x0)
    dispatch = {name: d.p for name, d in model.scenario.dispatch.items()}
    return StateMatrix(a_sys, list(model.labels), {"case": model.scenario.name, "dispatch": dispatch})


def _state_suffix(label: str) -> str:
    return label.rsplit(".", 1)[-1]


def eigen_report(
    a: StateMatrix,
    participation_threshold: float = 0.1,
    reference_tol: float = 1e-4,
) -> ModalReport:
    """Eigenvalues, damping ratios, frequencies and normalized participation factors."""
    try:
        w, vl, vr = linalg.eig(a.a_sys, left=True, right=True)
    except linalg.LinAlgError as e:
        raise LinearizationError(f"eigensolver failed: {e}") from e
    order = np.lexsort((-w.imag, -w.real))
    w, vl, vr = w[order], vl[:, order], vr[:, order]

    magnitude = np.abs(w)
    with np.errstate(invalid="ignore", divide="ignore"):
        damping = np.where(magnitude > 0, -w.real / np.where(magnitude > 0, magnitude, 1.0), 0.0)
    freq = np.abs(w.imag) / (2.0 * math.pi)

    participation = np.abs(vl * vr)
    col_max = participation.max(axis=0)
    participation = participation / np.where(col_max > 0, col_max, 1.0)

    suffixes = [_state_suffix(label) for label in a.labels]
    gfm_rows = np.array([s in GFM_STATES for s in suffixes])
    angle_rows = np.array([s in ANGLE_STATES for s in suffixes])
    if gfm_rows.any():
        gfm_mode = participation[gfm_rows].max(axis=0) > participation_threshold
    else:
        gfm_mode = np.zeros(len(w), dtype=bool)
    reference_mode = np.zeros(len(w), dtype=bool)
    if angle_rows.any():
        dominant = np.argmax(participation, axis=0)
        reference_mode = (magnitude < reference_tol) & angle_rows[dominant]

    return ModalReport(
        eigenvalues=w,
        damping=damping,
        freq_hz=freq,
        participation=participation,
        labels=list(a.labels),
        right_vectors=vr,
        reference_mode=reference_mode,
        gfm_mode=gfm_mode,
        operating_point=dict(a.operating_point),
    )


# ----------------------------------------------------------------------
# Dispatch sweep
# ----------------------------------------------------------------------
def parse_grid(grid: str | Sequence[float] | tuple[float, float, float]) -> np.ndarray:
    """Expand ``"start:step:stop"`` (or a 3-tuple, or an explicit list) into grid points."""
    if isinstance(grid, str):
        parts = [float(p) for p in grid.split(":")]
        if len(parts) != 3:
            raise ValueError(f"grid must look like start:step:stop, got {grid!r}")
        start, step, stop = parts
    elif isinstance(grid, tuple) and len(grid) == 3:
        start, step, stop = (float(g) for g in grid)
    else:
        return np.asarray(list(grid), dtype=float)
    if step <= 0 or stop < start:
        raise ValueError(f"invalid grid {start}:{step}:{stop}")
    count = int(round((stop - start) / step)) + 1
    return np.round(np.linspace(start, start + (count - 1) * step, count), 12)


def _sweep_point(scenario: Scenario, device: str, p_set: float, eps: float) -> ModalReport | None:
    spec = scenario.device(device)
    p_sys = p_set * spec.params.s_rating / scenario.network.s_base
    try:
        model = PowerSystemModel(scenario_dispatch(scenario, device, p_sys))
        model.initialize()
        report = eigen_report(linearize(model, eps))
    except (PowerFlowError, NetworkSolveError, LinearizationError, SimulationError, DroopParameterError) as e:
        logger.warning(f"Skipping p_set={p_set:+.3f} for {device}: {e}")
        return None
    report.operating_point.update({"device": device, "p_set": float(p_set)})
    return report


def track_modes(reports: Sequence[ModalReport], overlap_threshold: float = 0.8, imag_tol: float = 1e-6) -> None:
    """Assign track ids across adjacent reports and flag bifurcations in place.

    Modes are matched by the magnitude of normalized right-eigenvector
    overlap.  A match below ``overlap_threshold`` or a change between a
    real and a complex eigenvalue flags a bifurcation on the new point.
    """
    previous: ModalReport | None = None
    for report in reports:
        m = report.n_modes
        if previous is None or previous.n_modes != m:
            report.track = np.arange(m)
            report.bifurcation = np.zeros(m, dtype=bool)
            previous = report
            continue
        a = previous.right_vectors / np.linalg.norm(previous.right_vectors, axis=0)
        b = report.right_vectors / np.linalg.norm(report.right_vectors, axis=0)
        overlap = np.abs(a.conj().T @ b)
        rows, cols = linear_sum_assignment(-overlap)
        track = np.empty(m, dtype=int)
        flags = np.zeros(m, dtype=bool)
        for i, j in zip(rows, cols):
            track[j] = previous.track[i]
            was_complex = abs(previous.eigenvalues[i].imag) > imag_tol
            is_complex = abs(report.eigenvalues[j].imag) > imag_tol
            flags[j] = overlap[i, j] < overlap_threshold or was_complex != is_complex
        report.track = track
        report.bifurcation = flags
        previous = report


def dispatch_sweep(
    scenario: Scenario,
    grid: str | Sequence[float] | tuple[float, float, float] | None = None,
    device: str | None = None,
    workers: int = 1,
    eps: float = 1e-6,
) -> list[ModalReport]:
    """Eigen reports over a grid of inverter setpoints (device base).

    Infeasible points are skipped with a warning; the returned reports are
    in grid order and carry ``track`` and ``bifurcation`` annotations.
    """
    if grid is None:
        grid = scenario.analysis.sweep_grid
    if grid is None:
        raise ValueError(f"{scenario.name}: no sweep grid given")
    points = parse_grid(grid)
    device = device or scenario.analysis.sweep_device
    if device is None:
        gfms = [d.name for d in scenario.devices if d.kind == "gfm"]
        if not gfms:
            raise ValueError(f"{scenario.name}: no grid-forming device to sweep")
        device = gfms[0]

    logger.info(f"Sweeping {device} over {len(points)} setpoints with {workers} worker(s)")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda p: _sweep_point(scenario, device, p, eps), points))
    else:
        results = [_sweep_point(scenario, device, p, eps) for p in points]

    reports = [r for r in results if r is not None]
    if len(reports) < len(points):
        logger.warning(f"{len(points) - len(reports)} of {len(points)} sweep points were infeasible")
    track_modes(reports)
    return reports


# ----------------------------------------------------------------------
# Matrix pencil
# ----------------------------------------------------------------------
def matrix_pencil(
    signal: Sequence[float] | np.ndarray,
    dt: float,
    order: int | None = None,
    sv_cutoff: float = 1e-8,
    pencil_fraction: float = 1.0 / 3.0,
    max_samples: int = 1000,
) -> list[PencilMode]:
    """Decompose a uniformly sampled signal into damped exponentials.

    Long records are decimated to at most ``max_samples`` samples before
    the Hankel SVD.  Conjugate pole pairs are reported once with the
    combined (real-signal) amplitude.  Modes are sorted by energy.
    """
    y = np.asarray(signal, dtype=float)
    if y.ndim != 1:
        raise MetricsError("matrix pencil needs a one-dimensional signal")
    if len(y) > max_samples:
        stride = math.ceil(len(y) / max_samples)
        y = y[::stride]
        dt = dt * stride
    n = len(y)
    if n < 4 or (order is not None and n < 4 * order):
        raise MetricsError(f"matrix pencil needs at least {4 * (order or 1)} samples, got {n}")
    scale = float(np.max(np.abs(y)))
    if scale == 0.0 or float(np.ptp(y)) <= 1e-12 * max(1.0, scale):
        return []

    pencil = max(2, int(n * pencil_fraction))
    hankel = linalg.hankel(y[: n - pencil], y[n - pencil - 1 :])
    _, sv, vh = linalg.svd(hankel, full_matrices=False)
    rank = int(np.sum(sv > sv_cutoff * sv[0]))
    if order is not None:
        rank = min(rank, order)
    if rank == 0:
        return []

    w = vh[:rank]
    poles = linalg.eigvals(w[:, 1:] @ linalg.pinv(w[:, :-1]))
    vander = poles[None, :] ** np.arange(n)[:, None]
    residues, *_ = linalg.lstsq(vander, y.astype(complex))
    s = np.log(poles.astype(complex)) / dt

    modes: list[PencilMode] = []
    imag_tol = 1e-9 / dt
    for pole, sk, rk in zip(poles, s, residues):
        if sk.imag < -imag_tol:
            continue
        real_pole = abs(sk.imag) <= imag_tol
        amplitude = abs(rk) if real_pole else 2.0 * abs(rk)
        magnitude = abs(sk)
        damping = -sk.real / magnitude if magnitude > 0 else 0.0
        energy = amplitude**2 * float(np.sum(np.abs(pole) ** (2 * np.arange(n))))
        modes.append(
            PencilMode(
                freq_hz=0.0 if real_pole else sk.imag / (2.0 * math.pi),
                damping=float(damping),
                amplitude=float(amplitude),
                phase=float(np.angle(rk)),
                sigma=float(sk.real),
                energy=energy,
            )
        )
    modes.sort(key=lambda m: -m.energy)
    return modes


# ----------------------------------------------------------------------
# Frequency metrics
# ----------------------------------------------------------------------
def default_frequency_channel(series: TimeSeries) -> str:
    preferred = series.meta.get("metrics_channel")
    if preferred and preferred in series.channels:
        return preferred
    if "f_weighted_hz" in series.channels:
        return "f_weighted_hz"
    for name in series.channels:
        if name.startswith("f_") and name.endswith("_hz"):
            return name
    raise MetricsError("series has no frequency channel")


def _event_index(series: TimeSeries, f: np.ndarray, event_time: float | None) -> int:
    if event_time is None:
        event_time = series.meta.get("first_event_s")
    if event_time is not None:
        return int(np.searchsorted(series.time, event_time - 1e-9))
    moved = np.flatnonzero(np.abs(f - f[0]) > 1e-9)
    return max(int(moved[0]) - 1, 0) if moved.size else 0


def metrics_until(series: TimeSeries, span: str = "full") -> float | None:
    """Stop time for ``frequency_metrics`` under a case's metrics span."""
    if span not in METRIC_SPANS:
        raise MetricsError(f"unknown metrics span {span!r}; expected one of {', '.join(METRIC_SPANS)}")
    if span == "full":
        return None
    engaged = series.meta.get("sharing_engaged_s")
    if engaged is None:
        logger.info("power sharing never engaged; metrics cover the whole run")
    return engaged


def frequency_metrics(
    series: TimeSeries,
    window: float = 0.1,
    channel: str | None = None,
    event_time: float | None = None,
    mode_horizon: float = 10.0,
    mode_order: int = 20,
    max_samples: int = 1000,
    until: float | None = None,
) -> FrequencyMetrics:
    """Nadir, peak, windowed ROCOF, settling frequency and dominant mode after the first event.

    ``until`` stops every metric at that time, e.g. where power sharing
    engaged; the settling value is then the mean of the last second before it.
    """
    channel = channel or default_frequency_channel(series)
    if channel not in series.channels:
        raise MetricsError(f"unknown channel {channel!r}")
    t = series.time
    f = series[channel]
    if len(t) < 2 or window > t[-1] - t[0]:
        raise MetricsError(f"window {window} s is longer than the series")
    dt = series.dt
    lag = max(1, int(round(window / dt)))

    start = _event_index(series, f, event_time)
    stop = len(f)
    if until is not None:
        if until <= t[start]:
            raise MetricsError(f"metrics stop at {until} s, before the event at {t[start]:.3f} s")
        stop = int(np.searchsorted(t, until + 1e-9))
    post = f[start:stop]
    if len(post) <= lag:
        raise MetricsError(f"window {window} s is longer than the post-event series")

    nadir = float(np.min(post))
    peak = float(np.max(post))
    tail = max(1, int(round(1.0 / dt)))
    settling = float(np.mean(post[-tail:]))
    rocof = np.abs(post[lag:] - post[:-lag]) / (lag * dt)
    max_rocof = float(np.max(rocof))

    horizon = post[: max(4, int(round(mode_horizon / dt)) + 1)]
    mode_freq, mode_damping = math.nan, math.nan
    try:
        modes = matrix_pencil(horizon - settling, dt, order=mode_order, max_samples=max_samples)
    except (MetricsError, linalg.LinAlgError) as e:
        logger.warning(f"Mode identification on {channel} failed: {e}")
        modes = []
    for mode in modes:
        if mode.freq_hz >= 0.05:
            mode_freq, mode_damping = mode.freq_hz, mode.damping
            break

    return FrequencyMetrics(
        nadir_hz=nadir,
        peak_hz=peak,
        max_rocof_hz_s=max_rocof,
        settling_hz=settling,
        mode_freq_hz=mode_freq,
        mode_damping=mode_damping,
        channel=channel,
        window_s=window,
        event_time_s=float(t[start]),
        until_s=until,
    )


def weighted_average(frequencies: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Row-wise weighted mean; ``weights`` is per column or per sample and column."""
    frequencies = np.asarray(frequencies, dtype=float)
    weights = np.broadcast_to(np.asarray(weights, dtype=float), frequencies.shape)
    total = weights.sum(axis=1)
    if np.any(total <= 0):
        raise MetricsError("total rating must be positive at every sample")
    return (frequencies * weights).sum(axis=1) / total


def weighted_frequency(series: TimeSeries, ratings: Mapping[str, float]) -> TimeSeries:
    """MVA-weighted average of the named frequency channels."""
    if not ratings:
        raise MetricsError("no ratings given")
    missing = [name for name in ratings if name not in series.channels]
    if missing:
        raise MetricsError(f"ratings name channels missing from the series: {', '.join(missing)}")
    if any(r < 0 for r in ratings.values()):
        raise MetricsError("ratings must be non-negative")
    stacked = np.column_stack([series.channels[name] for name in ratings])
    averaged = weighted_average(stacked, np.array(list(ratings.values())))
    return TimeSeries(series.time, {"f_weighted_hz": averaged}, dict(series.meta))


def aggregate_inertia(devices: Iterable) -> float:
    """MVA-weighted inertia constant; grid-forming devices count with H = 0."""
    weighted = 0.0
    total = 0.0
    count = 0
    for device in devices:
        params = getattr(device, "params", device)
        rating = float(params.s_rating)
        weighted += float(getattr(params, "h", 0.0)) * rating
        total += rating
        count += 1
    if count == 0:
        raise MetricsError("aggregate inertia needs at least one device")
    if total <= 0:
        raise MetricsError("total device rating is zero")
    return weighted / total


__all__ = [
    "FrequencyMetrics",
    "LinearizationError",
    "MetricsError",
    "ModalReport",
    "PencilMode",
    "StateMatrix",
    "aggregate_inertia",
    "default_frequency_channel",
    "dispatch_sweep",
    "eigen_report",
    "frequency_metrics",
    "linearize",
    "matrix_pencil",
    "metrics_until",
    "parse_grid",
    "track_modes",
    "weighted_average",
    "weighted_frequency",
]
