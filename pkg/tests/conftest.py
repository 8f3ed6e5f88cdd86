"""Shared fixtures for the DroopSim test suite."""

from __future__ import annotations

import os
import sys
import json

_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, _ROOT)

import pytest

from device_models import GfmParams, SgParams
from droop_e_control import DroopEParams, LinearDroopParams
from network import Branch, Bus, Dispatch, Network
from simulator import DeviceSpec, LoadStep, Scenario


@pytest.fixture
def droop_params():
    return DroopEParams()


def gfm_infinite_bus(controller=None, p_sys=0.2, x_line=0.1, power_sharing=False, t_end=5.0, dt=0.002):
    """One 50 MVA grid-forming inverter behind a line to an infinite bus."""
    controller = controller or LinearDroopParams(omega_fil=1.0 / 0.0167)
    network = Network(
        buses=[Bus(1, "infinite", 1.0), Bus(2, "pv", 1.0)],
        branches=[Branch(1, 2, 0.0, x_line)],
    )
    params = GfmParams(controller=controller, r_out=0.0, x_out=0.15, s_rating=50.0)
    return Scenario(
        name="gfm_infinite_bus",
        network=network,
        devices=[DeviceSpec("gfm", "gfm", 2, params, power_sharing)],
        dispatch={"gfm": Dispatch(bus=2, p=p_sys)},
        t_end=t_end,
        dt=dt,
    )


def three_bus(p_gfm=0.03, controller=None, events=None, t_end=10.0, dt=0.004, power_sharing=True):
    """The bundled three-bus layout built in code (SG slack, load bus, GFM)."""
    controller = controller or DroopEParams()
    network = Network(
        buses=[Bus(1, "slack", 1.02), Bus(2, "pq", 1.0, 0.75, 0.25), Bus(3, "pv", 1.02)],
        branches=[Branch(1, 2, 0.0, 0.05), Branch(2, 3, 0.0, 0.05)],
    )
    devices = [
        DeviceSpec("sg", "sg", 1, SgParams()),
        DeviceSpec("gfm", "gfm", 3, GfmParams(controller=controller), power_sharing),
    ]
    return Scenario(
        name="three_bus",
        network=network,
        devices=devices,
        dispatch={"sg": Dispatch(bus=1, p=0.72), "gfm": Dispatch(bus=3, p=p_gfm)},
        events=list(events or []),
        t_end=t_end,
        dt=dt,
    )


@pytest.fixture
def infinite_bus_scenario():
    return gfm_infinite_bus()


@pytest.fixture
def three_bus_scenario():
    return three_bus()


@pytest.fixture
def load_step():
    return LoadStep(time=1.0, bus=2, delta_p=0.15, delta_q=0.05)


@pytest.fixture
def write_case(tmp_path):
    """Write a case document to a temporary file and return its path."""

    def _write(doc, name="case_tmp.json"):
        path = tmp_path / name
        path.write_text(doc if isinstance(doc, str) else json.dumps(doc, indent=2), encoding="utf-8")
        return str(path)

    return _write
