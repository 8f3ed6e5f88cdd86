"""
Droop-e frequency law for grid-forming inverters.

The exponential droop ``d_exp`` is odd about the origin, follows
``alpha*(exp(beta*|p|) - 1)`` up to the linearization power ``p_l`` and
continues with slope ``d_max`` beyond it.  The autonomous power-sharing
loop adds a slowly integrated offset ``omega_ps`` once a disturbance has
been registered and the transient has settled, steering the device back
onto the equitable linear droop ``m_d``.

All powers are per unit on the device base and lie in ``[-1, 1]``;
frequencies are per unit of ``omega_b`` unless a function says rad/s.
"""

from __future__ import annotations

import math
import logging
from dataclasses import dataclass, replace

logger = logging.getLogger(__name__)

# Time constant of the |dp/dt| smoothing used by the sharing gate.
RATE_FILTER_TAU_S = 0.1

OMEGA_B_60HZ = 2.0 * math.pi * 60.0


class DroopParameterError(ValueError):
    """Raised for invalid controller constants or powers outside [-1, 1]."""


# ----------------------------------------------------------------------
# Parameter sets
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class DroopEParams:
    alpha: float = 0.0012
    beta: float = 3.2
    d_max: float = 0.06
    d_min: float = 0.0025
    m_d: float = 0.05
    omega_nom: float = 1.0
    omega_b: float = OMEGA_B_60HZ
    k: float = 0.2
    eps_p: float = 0.01
    eps_dp: float = 0.001

    def __post_init__(self) -> None:
        for name in ("alpha", "beta", "d_max", "omega_b"):
            if not getattr(self, name) > 0:
                raise DroopParameterError(f"{name} must be positive, got {getattr(self, name)}")
        if self.k < 0:
            raise DroopParameterError(f"k must be non-negative, got {self.k}")
        if self.eps_p < 0 or self.eps_dp < 0:
            raise DroopParameterError("eps_p and eps_dp must be non-negative")
        slope0 = self.alpha * self.beta
        if not self.d_min <= slope0 < self.m_d:
            raise DroopParameterError(
                f"minimum droop alpha*beta={slope0:.6g} must satisfy "
                f"d_min={self.d_min} <= alpha*beta < m_d={self.m_d}"
            )
        if slope0 >= self.d_max:
            raise DroopParameterError(
                f"alpha*beta={slope0:.6g} must be below d_max={self.d_max}; p_l is undefined otherwise"
            )

    @property
    def min_droop(self) -> float:
        """Tangent droop magnitude at the origin, ``alpha*beta``."""
        return self.alpha * self.beta

    @property
    def p_l(self) -> float:
        return compute_p_l(self)


@dataclass(frozen=True)
class LinearDroopParams:
    m_d: float = 0.05
    omega_fil: float = 1.0 / 0.0167
    omega_set: float = 1.0

    def __post_init__(self) -> None:
        if not self.m_d > 0:
            raise DroopParameterError(f"linear droop m_d must be positive, got {self.m_d}")
        if not self.omega_fil > 0:
            raise DroopParameterError(f"omega_fil must be positive, got {self.omega_fil}")


@dataclass(frozen=True)
class PowerSharingState:
    """Integrator and disturbance-latch state of the sharing loop."""

    omega_ps: float = 0.0
    latched: bool = False
    last_p: float = 0.0
    dp_dt_est: float = 0.0

    @classmethod
    def at_rest(cls, p: float) -> "PowerSharingState":
        return cls(omega_ps=0.0, latched=False, last_p=p, dp_dt_est=0.0)


# ----------------------------------------------------------------------
# Droop-e law
# ----------------------------------------------------------------------
def _check_power(p: float, name: str = "p") -> None:
    if not -1.0 <= p <= 1.0:
        raise DroopParameterError(f"{name}={p!r} is outside the per-unit domain [-1, 1]")


def compute_p_l(params: DroopEParams) -> float:
    """Power magnitude where the exponential slope reaches ``d_max``."""
    slope0 = params.alpha * params.beta
    if slope0 >= params.d_max:
        raise DroopParameterError(
            f"alpha*beta={slope0:.6g} >= d_max={params.d_max}; no positive linearization point"
        )
    return math.log(params.d_max / slope0) / params.beta


def d_exp_unchecked(p: float, params: DroopEParams, p_l: float | None = None) -> float:
    """``d_exp`` without the domain check; the linear branch extends past |p| = 1."""
    if p_l is None:
        p_l = compute_p_l(params)
    mag = abs(p)
    if mag < p_l:
        value = params.alpha * math.expm1(params.beta * mag)
    else:
        value = params.alpha * math.expm1(params.beta * p_l) + params.d_max * (mag - p_l)
    return -math.copysign(value, p)


def tangent_droop_unchecked(p: float, params: DroopEParams, p_l: float | None = None) -> float:
    if p_l is None:
        p_l = compute_p_l(params)
    mag = abs(p)
    if mag < p_l:
        return -params.alpha * params.beta * math.exp(params.beta * mag)
    return -params.d_max


def d_exp(p: float, params: DroopEParams) -> float:
    """Per-unit frequency deviation of the Droop-e curve at power ``p``.

    Args:
        p: Device power in ``[-1, 1]``.
        params: Controller constants.

    Returns:
        ``-sign(p) * alpha*(exp(beta*|p|)-1)`` below ``p_l``, the tangent
        continuation with slope ``d_max`` above it.
    """
    _check_power(p)
    return d_exp_unchecked(p, params)


def tangent_droop(p: float, params: DroopEParams) -> float:
    """Local slope of ``d_exp``; strictly negative, between ``-d_max`` and ``-alpha*beta``."""
    _check_power(p)
    return tangent_droop_unchecked(p, params)


def omega_setpoint(p_set: float, params: DroopEParams) -> float:
    """Frequency offset that places ``p_set`` at nominal frequency."""
    _check_power(p_set, "p_set")
    return -d_exp_unchecked(p_set, params)


def droop_e_frequency(
    p: float,
    p_set: float,
    omega_ps: float,
    params: DroopEParams,
    strict: bool = True,
) -> float:
    """Inverter angular frequency in rad/s.

    ``strict=False`` skips the domain checks so device models can evaluate
    operating points slightly past rated power.
    """
    if strict:
        _check_power(p)
        _check_power(p_set, "p_set")
    p_l = compute_p_l(params)
    offset = -d_exp_unchecked(p_set, params, p_l) + d_exp_unchecked(p, params, p_l)
    return params.omega_b * (params.omega_nom + offset + omega_ps)


def gfm_frequency_rate(p: float, p_meas: float, omega_fil: float, params: DroopEParams) -> float:
    """dω/dt in rad/s² implied by the power filter, by the chain rule through the tangent droop."""
    return params.omega_b * tangent_droop_unchecked(p, params) * omega_fil * (p_meas - p)


def to_control_domain(p: float) -> float:
    """Map a positive-export power in [0, 1] onto the symmetric control domain."""
    if not 0.0 <= p <= 1.0:
        raise DroopParameterError(f"positive-export power {p!r} is outside [0, 1]")
    return 2.0 * p - 1.0


# ----------------------------------------------------------------------
# Autonomous power sharing
# ----------------------------------------------------------------------
def sharing_error(p: float, p_set: float, omega_ps: float, params: DroopEParams) -> float:
    """Distance between the equitable droop target and the current Droop-e offset."""
    omega_md = (p_set - p) * params.m_d
    p_l = compute_p_l(params)
    curve = d_exp_unchecked(p, params, p_l) - d_exp_unchecked(p_set, params, p_l)
    # Zero when the device sits on the linear droop through (p_set, omega_nom).
    # Positive error raises omega_ps.
    return omega_md - curve - omega_ps


def power_sharing_step(
    state: PowerSharingState,
    p: float,
    p_set: float,
    dt: float,
    params: DroopEParams,
    rate_tau: float = RATE_FILTER_TAU_S,
) -> PowerSharingState:
    """Advance the sharing integrator by one sample of filtered power ``p``.

    The integrator only runs once the disturbance latch is set, which
    happens the first time ``|p_set - p| > eps_p`` while the smoothed
    ``|dp/dt|`` is below ``eps_dp``.  Until then ``omega_ps`` is returned
    unchanged.
    """
    if not dt > 0:
        raise DroopParameterError(f"dt must be positive, got {dt}")

    raw_rate = abs(p - state.last_p) / dt
    gain = dt / (rate_tau + dt)
    rate = state.dp_dt_est + gain * (raw_rate - state.dp_dt_est)

    latched = state.latched
    if not latched and abs(p_set - p) > params.eps_p and rate < params.eps_dp:
        latched = True
        logger.info(f"Power sharing engaged at p={p:.4f} (p_set={p_set:.4f}, |dp/dt|={rate:.2e})")

    omega_ps = state.omega_ps
    if latched:
        omega_ps = omega_ps + params.k * sharing_error(p, p_set, omega_ps, params) * dt

    return replace(state, omega_ps=omega_ps, latched=latched, last_p=p, dp_dt_est=rate)


# ----------------------------------------------------------------------
# Linear droop reference
# ----------------------------------------------------------------------
def linear_droop_frequency(p: float, p_set: float, params: LinearDroopParams) -> float:
    """Per-unit frequency of a linear droop device; callers scale by their base."""
    return params.m_d * (p_set - p) + params.omega_set


def linear_droop_rocof(p: float, p_meas: float, params: LinearDroopParams) -> float:
    """Per-unit frequency rate produced by the power filter of a linear droop device."""
    return -params.m_d * params.omega_fil * (p_meas - p)


__all__ = [
    "DroopEParams",
    "DroopParameterError",
    "LinearDroopParams",
    "PowerSharingState",
    "compute_p_l",
    "d_exp",
    "d_exp_unchecked",
    "droop_e_frequency",
    "gfm_frequency_rate",
    "linear_droop_frequency",
    "linear_droop_rocof",
    "omega_setpoint",
    "power_sharing_step",
    "sharing_error",
    "tangent_droop",
    "tangent_droop_unchecked",
    "to_control_domain",
]
