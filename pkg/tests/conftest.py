import dataclasses

import numpy as np
import pytest

from packsim.espm import FAST_DISCRETIZATION
from packsim.module_solver import FAST_PROFILE, SimProfile
from packsim.params import (
    ModuleConfig,
    ProtocolPhase,
    ProtocolSpec,
    SamplingRanges,
    default_cell,
    default_protocol,
    reference_module_config,
    sample_module,
)


@pytest.fixture(scope="session")
def nominal_cell():
    return default_cell()


@pytest.fixture(scope="session")
def fast_profile():
    return FAST_PROFILE


@pytest.fixture(scope="session")
def coarse_profile():
    # Even coarser than FAST for cheap unit tests that only need trends.
    return SimProfile(
        disc=FAST_DISCRETIZATION, dt_cc=10.0, dt_cv=10.0, dt_rest=120.0,
        rate_scaled_dt=True, trace_every=1, dense_cycles=1,
    )


def make_module(cells, *, r_int=0.25e-3, spacing=5e-3, n_cycles=1, seed=0,
                t_amb=298.15, protocol=None, eps_bounds=True):
    n_p = len(cells)
    ranges = SamplingRanges()
    kwargs = {}
    if eps_bounds:
        kwargs = {
            "eps_bounds_n": ranges.eps_bounds("n"),
            "eps_bounds_p": ranges.eps_bounds("p"),
        }
    return ModuleConfig(
        n_p=n_p,
        cells=tuple(cells),
        r_int=r_int,
        spacing=spacing,
        t_amb=t_amb,
        protocol=protocol or default_protocol(n_p),
        n_cycles=n_cycles,
        seed=seed,
        **kwargs,
    )


@pytest.fixture(scope="session")
def homogeneous_cfg(nominal_cell):
    """Fully symmetric null module: identical cells and no ladder resistance."""
    return make_module([nominal_cell] * 4, r_int=0.0)


@pytest.fixture(scope="session")
def reference_cfg():
    return reference_module_config(n_cycles=1)


@pytest.fixture(scope="session")
def sampled_cfg(nominal_cell):
    return sample_module(
        20240817, nominal_cell, SamplingRanges(), n_p=4, n_cycles=1
    )


def discharge_only_protocol(rate=1.0, cutoff=2.5):
    return ProtocolSpec(
        phases=(ProtocolPhase(kind="cc_discharge", rate=rate,
                              cutoff_voltage=cutoff),)
    )


def replace_cfg(cfg, **kwargs):
    return dataclasses.replace(cfg, **kwargs)
