"""
Dynamic device models coupled to the network as voltage sources behind impedance.

* Synchronous generator: two-axis flux-decay machine, IEEE Type-1 exciter
  with exponential saturation, and a droop governor split into a valve lag
  (``p_sv``) and a turbine lag (``p_m``).  Nine states.
* Grid-forming inverter: internal EMF at angle ``delta_i`` behind the LCL
  output impedance, with a first-order power filter and either the Droop-e
  law or a linear droop.  Two states.

Device parameters are on the device's own MVA base.  Currents returned to
the network are on the system base; voltages are the same in both bases.
"""

from __future__ import annotations

import math
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from droop_e_control import (
    OMEGA_B_60HZ,
    DroopEParams,
    LinearDroopParams,
    PowerSharingState,
    droop_e_frequency,
    linear_droop_frequency,
)

logger = logging.getLogger(__name__)

SG_STATE_LABELS = ("delta_g", "omega_g", "e_q_prime", "e_d_prime", "e_fd", "v_r", "r_f", "p_m", "p_sv")
GFM_STATE_LABELS = ("delta_i", "p_i")


class DeviceModelError(ValueError):
    """Raised for invalid device parameters or non-finite device states."""


# ----------------------------------------------------------------------
# Parameter and state containers
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class SgParams:
    h: float = 3.01
    d: float = 0.0
    x_d: float = 1.3125
    x_q: float = 1.2578
    x_d_prime: float = 0.1813
    x_q_prime: float = 0.25
    r_s: float = 0.0
    t_do_prime: float = 5.89
    t_qo_prime: float = 0.6
    k_a: float = 20.0
    t_a: float = 0.2
    k_e: float = 1.0
    t_e: float = 0.314
    k_f: float = 0.063
    t_f: float = 0.35
    sat_gamma: float = 0.0039
    sat_epsilon: float = 1.555
    m_d: float = 0.05
    t_tg: float = 0.25
    t_sv: float = 0.25
    s_rating: float = 100.0
    v_ref: float = 1.0
    p_set: float = 0.0
    omega_set: float = 1.0
    omega_s: float = OMEGA_B_60HZ

    def __post_init__(self) -> None:
        if not self.h > 0:
            raise DeviceModelError(f"inertia constant h must be positive, got {self.h}")
        if not self.m_d > 0:
            raise DeviceModelError(f"governor droop m_d must be positive, got {self.m_d}")
        for name in ("t_do_prime", "t_qo_prime", "t_a", "t_e", "t_f", "t_tg", "t_sv"):
            if not getattr(self, name) > 0:
                raise DeviceModelError(f"time constant {name} must be positive, got {getattr(self, name)}")
        if not self.s_rating > 0:
            raise DeviceModelError(f"s_rating must be positive, got {self.s_rating}")
        if self.x_d_prime * self.x_q_prime + self.r_s**2 <= 0:
            raise DeviceModelError("stator impedance is singular")


@dataclass
class SgState:
    delta_g: float
    omega_g: float
    e_q_prime: float
    e_d_prime: float
    e_fd: float
    v_r: float
    r_f: float
    p_m: float
    p_sv: float

    def to_array(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in SG_STATE_LABELS], dtype=float)

    @classmethod
    def from_array(cls, x) -> "SgState":
        return cls(*(float(v) for v in x))


@dataclass(frozen=True)
class GfmParams:
    controller: DroopEParams | LinearDroopParams = field(default_factory=DroopEParams)
    x_out: float = 0.15
    r_out: float = 0.005
    t_fil: float = 0.0167
    s_rating: float = 50.0
    q_v_gain: float = 0.05
    # Q-V reference; when None the EMF follows the power-flow voltage at the terminal
    v_set: float | None = None
    e_mag: float = 1.0
    p_set: float = 0.0
    positive_export: bool = False
    omega_b: float = OMEGA_B_60HZ

    def __post_init__(self) -> None:
        if not self.t_fil > 0:
            raise DeviceModelError(f"t_fil must be positive, got {self.t_fil}")
        if not self.x_out > 0:
            raise DeviceModelError(f"coupling reactance x_out must be positive, got {self.x_out}")
        if not self.s_rating > 0:
            raise DeviceModelError(f"s_rating must be positive, got {self.s_rating}")
        if self.q_v_gain < 0:
            raise DeviceModelError(f"q_v_gain must be non-negative, got {self.q_v_gain}")
        if self.v_set is not None and not self.v_set > 0:
            raise DeviceModelError(f"v_set must be positive, got {self.v_set}")
        if not self.e_mag > 0:
            raise DeviceModelError(f"EMF magnitude must be positive, got {self.e_mag}")

    @property
    def omega_fil(self) -> float:
        return 1.0 / self.t_fil

    @property
    def z_out(self) -> complex:
        return complex(self.r_out, self.x_out)

    @property
    def base_omega(self) -> float:
        """Angular frequency that corresponds to 1 pu for this device."""
        if isinstance(self.controller, DroopEParams):
            return self.controller.omega_b
        return self.omega_b

    @property
    def uses_droop_e(self) -> bool:
        return isinstance(self.controller, DroopEParams)


@dataclass
class GfmState:
    delta_i: float
    p_i: float

    def to_array(self) -> np.ndarray:
        return np.array([self.delta_i, self.p_i], dtype=float)

    @classmethod
    def from_array(cls, x) -> "GfmState":
        return cls(float(x[0]), float(x[1]))


def _as_array(state, size: int) -> np.ndarray:
    x = state.to_array() if hasattr(state, "to_array") else np.asarray(state, dtype=float)
    if x.shape != (size,):
        raise DeviceModelError(f"expected a state vector of length {size}, got shape {x.shape}")
    if not math.isfinite(float(np.sum(x))):
        raise DeviceModelError(f"non-finite device state: {x}")
    return x


# ----------------------------------------------------------------------
# Synchronous generator
# ----------------------------------------------------------------------
def saturation(e_fd: float, params: SgParams) -> float:
    """Exciter saturation ``S_E(E_fd) = gamma * exp(epsilon * E_fd)``."""
    return params.sat_gamma * math.exp(params.sat_epsilon * e_fd)


def _sg_stator(x: np.ndarray, v: complex, params: SgParams) -> tuple[float, float, float, float]:
    """Solve the two-axis stator algebra; returns (i_d, i_q, v_d, v_q) on the machine base."""
    # dq frame is rotated by delta - pi/2 from the network frame
    c = math.sin(x[0])
    s = -math.cos(x[0])
    v_d = v.real * c + v.imag * s
    v_q = v.imag * c - v.real * s
    a = x[3] - v_d
    b = x[2] - v_q
    det = params.r_s * params.r_s + params.x_q_prime * params.x_d_prime
    i_d = (params.r_s * a + params.x_q_prime * b) / det
    i_q = (params.r_s * b - params.x_d_prime * a) / det
    return i_d, i_q, v_d, v_q


def sg_current(state, terminal: complex, params: SgParams) -> complex:
    """Stator current injected into the terminal bus, machine base."""
    x = _as_array(state, 9)
    i_d, i_q, _, _ = _sg_stator(x, terminal, params)
    c = math.sin(x[0])
    s = -math.cos(x[0])
    return complex(i_d * c - i_q * s, i_d * s + i_q * c)


def sg_electrical_torque(state, terminal: complex, params: SgParams) -> float:
    x = _as_array(state, 9)
    i_d, i_q, _, _ = _sg_stator(x, terminal, params)
    return x[3] * i_d + x[2] * i_q + (params.x_q_prime - params.x_d_prime) * i_d * i_q


def sg_derivatives(state, terminal: complex, params: SgParams) -> np.ndarray:
    """Time derivatives of ``[delta_g, omega_g, e_q', e_d', e_fd, v_r, r_f, p_m, p_sv]``."""
    x = _as_array(state, 9)
    if abs(terminal) <= 0.0 or not math.isfinite(abs(terminal)):
        raise DeviceModelError(f"invalid terminal voltage {terminal}")
    delta, omega, e_qp, e_dp, e_fd, v_r, r_f, p_m, p_sv = x
    i_d, i_q, _, _ = _sg_stator(x, terminal, params)
    t_e = e_dp * i_d + e_qp * i_q + (params.x_q_prime - params.x_d_prime) * i_d * i_q
    w_s = params.omega_s
    kf_tf = params.k_f / params.t_f

    dx = np.empty(9)
    dx[0] = omega - w_s
    dx[1] = (w_s / (2.0 * params.h)) * (p_m - t_e - params.d * (omega - w_s) / w_s)
    dx[2] = (-e_qp - (params.x_d - params.x_d_prime) * i_d + e_fd) / params.t_do_prime
    dx[3] = (-e_dp + (params.x_q - params.x_q_prime) * i_q) / params.t_qo_prime
    dx[4] = (-(params.k_e + saturation(e_fd, params)) * e_fd + v_r) / params.t_e
    dx[5] = (
        -v_r + params.k_a * r_f - params.k_a * kf_tf * e_fd + params.k_a * (params.v_ref - abs(terminal))
    ) / params.t_a
    dx[6] = (-r_f + kf_tf * e_fd) / params.t_f
    dx[7] = (-p_m + p_sv) / params.t_tg
    dx[8] = (-p_sv + params.p_set - (omega / (params.omega_set * w_s) - 1.0) / params.m_d) / params.t_sv
    return dx


# ----------------------------------------------------------------------
# Grid-forming inverter
# ----------------------------------------------------------------------
def gfm_current(state, terminal: complex, params: GfmParams) -> complex:
    """Current through the coupling impedance into the terminal bus, device base."""
    x = _as_array(state, 2)
    emf = params.e_mag * complex(math.cos(x[0]), math.sin(x[0]))
    return (emf - terminal) / params.z_out


def _control_power(p: float, params: GfmParams) -> float:
    return 2.0 * p - 1.0 if params.positive_export else p


def gfm_frequency(state, ps_state: PowerSharingState | None, params: GfmParams) -> float:
    """Inverter angular frequency in rad/s."""
    x = _as_array(state, 2)
    omega_ps = ps_state.omega_ps if ps_state is not None else 0.0
    ctrl = params.controller
    if isinstance(ctrl, DroopEParams):
        return droop_e_frequency(
            _control_power(x[1], params),
            _control_power(params.p_set, params),
            omega_ps,
            ctrl,
            strict=False,
        )
    return params.omega_b * linear_droop_frequency(x[1], params.p_set, ctrl)


def gfm_derivatives(
    state,
    terminal: complex,
    ps_state: PowerSharingState | None,
    params: GfmParams,
) -> np.ndarray:
    """Time derivatives of ``[delta_i, p_i]`` relative to the synchronous frame."""
    x = _as_array(state, 2)
    current = gfm_current(x, terminal, params)
    p_meas = (terminal * current.conjugate()).real
    dx = np.empty(2)
    dx[0] = gfm_frequency(x, ps_state, params) - params.base_omega
    dx[1] = (p_meas - x[1]) / params.t_fil
    return dx


def device_injection(state, params: SgParams | GfmParams, terminal: complex, s_base: float = 100.0) -> complex:
    """Current injected by a device into its terminal bus, on the system base."""
    if not (math.isfinite(terminal.real) and math.isfinite(terminal.imag)):
        raise DeviceModelError(f"non-finite terminal voltage {terminal}")
    if isinstance(params, SgParams):
        current = sg_current(state, terminal, params)
    elif isinstance(params, GfmParams):
        if params.z_out == 0:
            raise DeviceModelError("zero coupling impedance")
        current = gfm_current(state, terminal, params)
    else:
        raise DeviceModelError(f"unsupported device parameters: {type(params).__name__}")
    return current * (params.s_rating / s_base)


# ----------------------------------------------------------------------
# Device wrappers used by the simulator
# ----------------------------------------------------------------------
class SynchronousMachine:
    """Synchronous generator attached to a bus, with network-facing helpers."""

    kind = "sg"
    labels = SG_STATE_LABELS
    n_states = 9

    def __init__(self, name: str, bus: int, params: SgParams, s_base: float = 100.0):
        self.name = name
        self.bus = bus
        self.params = params
        self.s_base = s_base
        self.s_ratio = params.s_rating / s_base
        self.in_service = True

    @property
    def s_rating(self) -> float:
        return self.params.s_rating

    @property
    def h(self) -> float:
        return self.params.h

    def initialize(self, v: complex, s_sys: complex) -> np.ndarray:
        """Back-solve the equilibrium state for terminal voltage ``v`` and output ``s_sys``."""
        p = self.params
        s_dev = s_sys / self.s_ratio
        current = (s_dev / v).conjugate()
        e_q_axis = v + complex(p.r_s, p.x_q) * current
        delta = math.atan2(e_q_axis.imag, e_q_axis.real)
        rot = complex(math.sin(delta), -math.cos(delta)).conjugate()
        i_dq = current * rot
        v_dq = v * rot
        i_d, i_q = i_dq.real, i_dq.imag
        v_q = v_dq.imag
        e_dp = (p.x_q - p.x_q_prime) * i_q
        e_qp = v_q + p.r_s * i_q + p.x_d_prime * i_d
        e_fd = e_qp + (p.x_d - p.x_d_prime) * i_d
        v_r = (p.k_e + saturation(e_fd, p)) * e_fd
        r_f = p.k_f / p.t_f * e_fd
        t_e = e_dp * i_d + e_qp * i_q + (p.x_q_prime - p.x_d_prime) * i_d * i_q
        self.params = replace(p, v_ref=abs(v) + v_r / p.k_a, p_set=t_e)
        logger.debug(f"{self.name}: delta={delta:.4f} rad, E_fd={e_fd:.4f}, p_m={t_e:.4f}")
        return np.array([delta, p.omega_s, e_qp, e_dp, e_fd, v_r, r_f, t_e, t_e])

    def current(self, x: np.ndarray, v: complex) -> complex:
        if not self.in_service:
            return 0j
        i_d, i_q, _, _ = _sg_stator(x, v, self.params)
        c = math.sin(x[0])
        s = -math.cos(x[0])
        return complex(i_d * c - i_q * s, i_d * s + i_q * c) * self.s_ratio

    def current_jacobian(self, x: np.ndarray, v: complex) -> np.ndarray:
        """d[I_re, I_im]/d[V_re, V_im] on the system base."""
        if not self.in_service:
            return np.zeros((2, 2))
        p = self.params
        c = math.sin(x[0])
        s = -math.cos(x[0])
        rot = np.array([[c, -s], [s, c]])
        det = p.r_s * p.r_s + p.x_q_prime * p.x_d_prime
        m_inv = np.array([[p.r_s, p.x_q_prime], [-p.x_d_prime, p.r_s]]) / det
        return -self.s_ratio * (rot @ m_inv @ rot.T)

    def derivatives(self, x: np.ndarray, v: complex) -> np.ndarray:
        if not self.in_service:
            return np.zeros(9)
        return sg_derivatives(x, v, self.params)

    def omega(self, x: np.ndarray) -> float:
        return float(x[1])

    def frequency_pu(self, x: np.ndarray) -> float:
        return float(x[1]) / self.params.omega_s


class GridFormingInverter:
    """Grid-forming inverter attached to a bus, optionally with power sharing."""

    kind = "gfm"
    labels = GFM_STATE_LABELS
    n_states = 2
    h = 0.0

    def __init__(self, name: str, bus: int, params: GfmParams, s_base: float = 100.0, power_sharing: bool = False):
        self.name = name
        self.bus = bus
        self.params = params
        self.s_base = s_base
        self.s_ratio = params.s_rating / s_base
        self.in_service = True
        self.power_sharing = bool(power_sharing and params.uses_droop_e)
        self.ps_state: PowerSharingState | None = None

    @property
    def s_rating(self) -> float:
        return self.params.s_rating

    def control_power(self, p: float) -> float:
        return _control_power(p, self.params)

    def operating_emf(self, v: complex, s_sys: complex) -> tuple[complex, complex]:
        """EMF behind the coupling impedance and device-base output at a terminal operating point."""
        s_dev = s_sys / self.s_ratio
        current = (s_dev / v).conjugate()
        return v + self.params.z_out * current, s_dev

    def qv_mismatch(self, v: complex, s_sys: complex) -> float:
        """How far |E| lies from the Q-V line ``v_set - q_v_gain*Q``; zero without a reference."""
        if self.params.v_set is None:
            return 0.0
        emf, s_dev = self.operating_emf(v, s_sys)
        return abs(emf) - (self.params.v_set - self.params.q_v_gain * s_dev.imag)

    def initialize(self, v: complex, s_sys: complex) -> np.ndarray:
        p = self.params
        emf, s_dev = self.operating_emf(v, s_sys)
        e_mag = abs(emf)
        mismatch = self.qv_mismatch(v, s_sys)
        if abs(mismatch) > 1e-6:
            logger.warning(f"{self.name}: |E|={e_mag:.5f} is {mismatch:+.2e} pu off its Q-V line")
        self.params = replace(p, e_mag=e_mag, p_set=s_dev.real)
        self.ps_state = PowerSharingState.at_rest(self.control_power(s_dev.real))
        logger.debug(
            f"{self.name}: |E|={e_mag:.5f}, delta={math.atan2(emf.imag, emf.real):.4f} rad, "
            f"Q={s_dev.imag:.4f}, p_set={s_dev.real:.4f}"
        )
        return np.array([math.atan2(emf.imag, emf.real), s_dev.real])

    def current(self, x: np.ndarray, v: complex) -> complex:
        if not self.in_service:
            return 0j
        emf = self.params.e_mag * complex(math.cos(x[0]), math.sin(x[0]))
        return (emf - v) / self.params.z_out * self.s_ratio

    def current_jacobian(self, x: np.ndarray, v: complex) -> np.ndarray:
        if not self.in_service:
            return np.zeros((2, 2))
        y = 1.0 / self.params.z_out
        return -self.s_ratio * np.array([[y.real, -y.imag], [y.imag, y.real]])

    def derivatives(self, x: np.ndarray, v: complex) -> np.ndarray:
        if not self.in_service:
            return np.zeros(2)
        return gfm_derivatives(x, v, self.ps_state, self.params)

    def omega(self, x: np.ndarray) -> float:
        return gfm_frequency(x, self.ps_state, self.params)

    def frequency_pu(self, x: np.ndarray) -> float:
        return self.omega(x) / self.params.base_omega


__all__ = [
    "DeviceModelError",
    "GFM_STATE_LABELS",
    "GfmParams",
    "GfmState",
    "GridFormingInverter",
    "SG_STATE_LABELS",
    "SgParams",
    "SgState",
    "SynchronousMachine",
    "device_injection",
    "gfm_current",
    "gfm_derivatives",
    "gfm_frequency",
    "saturation",
    "sg_current",
    "sg_derivatives",
    "sg_electrical_torque",
]
