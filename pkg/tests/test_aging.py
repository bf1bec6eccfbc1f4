import dataclasses
import math

import numpy as np
import pytest

from packsim.aging import initial_sei_state, sei_resistance, step_sei
from packsim.constants import FARADAY, R_GAS
from packsim.espm import cell_voltage, initial_cell_state
from packsim.params import default_cell


@pytest.fixture(scope="module")
def cell():
    return default_cell()


def sei_rate_oracle(cell, state, cell_state, i_cell, t_cell):
    """Closed-form side-reaction current density, restated independently."""
    vb = cell_voltage(cell_state, i_cell, cell)
    i0 = cell.i0_sei * math.exp(
        (cell.ea_sei / R_GAS) * (1.0 / cell.t_ref - 1.0 / t_cell)
    )
    eta = vb.u_n + vb.eta_n - cell.u_sei - i_cell * state.r_sei
    if eta >= 0.0:
        return 0.0
    return i0 * math.exp(-cell.alpha_sei * FARADAY * eta / (R_GAS * t_cell))


class TestSeiStep:
    def test_disabled_when_exchange_current_zero(self, cell):
        dead = dataclasses.replace(cell, i0_sei=0.0)
        cs = initial_cell_state(dead, soc=0.9)
        state = initial_sei_state(dead)
        for _ in range(50):
            state = step_sei(state, cs, -4.85, 30.0, dead)
        assert state == initial_sei_state(dead)

    def test_monotone_under_random_loads(self, cell):
        rng = np.random.default_rng(9)
        state = initial_sei_state(cell)
        prev = state
        for _ in range(200):
            soc = rng.uniform(0.05, 0.95)
            cs = initial_cell_state(cell, soc=soc, t_cell=rng.uniform(288, 318))
            current = rng.uniform(-6, 6)
            state = step_sei(state, cs, current, rng.uniform(1, 60), cell)
            assert state.delta_sei >= prev.delta_sei
            assert state.r_sei >= prev.r_sei
            assert state.n_li_lost >= prev.n_li_lost
            prev = state

    def test_active_during_charge_gated_off_at_low_soc_discharge(self, cell):
        state = initial_sei_state(cell)
        charging = initial_cell_state(cell, soc=0.9)
        grown = step_sei(state, charging, -4.85, 60.0, cell)
        assert grown.delta_sei > state.delta_sei

        # Below ~12% SOC the anode OCP exceeds the reaction reference
        # potential and the side reaction shuts off entirely.
        discharging = initial_cell_state(cell, soc=0.08)
        still = step_sei(state, discharging, 4.85, 60.0, cell)
        assert still == state
        # At mid SOC the reaction persists but orders of magnitude slower
        # than during charge.
        mid = initial_cell_state(cell, soc=0.5)
        slow = step_sei(state, mid, 4.85, 60.0, cell).delta_sei - state.delta_sei
        fast = step_sei(state, charging, -4.85, 60.0, cell).delta_sei - state.delta_sei
        assert slow < 0.05 * fast

    def test_matches_closed_form_rate(self, cell):
        state = initial_sei_state(cell)
        cs = initial_cell_state(cell, soc=0.85, t_cell=303.15)
        i_cell, dt = -3.0, 25.0
        j = sei_rate_oracle(cell, state, cs, i_cell, cs.t_cell)
        new = step_sei(state, cs, i_cell, dt, cell)
        film_area = cell.specific_area("n") * cell.l_n * cell.area
        d_delta = j * cell.m_sei / (cell.rho_sei * FARADAY) * dt
        d_moles = j * film_area / FARADAY * dt
        assert new.delta_sei - state.delta_sei == pytest.approx(d_delta, rel=1e-12)
        assert new.n_li_lost - state.n_li_lost == pytest.approx(d_moles, rel=1e-12)
        assert new.r_sei == pytest.approx(
            sei_resistance(new.delta_sei, cell), rel=1e-12
        )

    def test_hotter_grows_strictly_faster(self, cell):
        # Arrhenius dominance over the Tafel temperature softening.
        state = initial_sei_state(cell)
        for t_base in (288.15, 298.15, 308.15):
            cool = initial_cell_state(cell, soc=0.9, t_cell=t_base)
            hot = initial_cell_state(cell, soc=0.9, t_cell=t_base + 10.0)
            d_cool = step_sei(state, cool, -4.85, 60.0, cell).r_sei - state.r_sei
            d_hot = step_sei(state, hot, -4.85, 60.0, cell).r_sei - state.r_sei
            assert d_hot > d_cool > 0.0
            # Cross-check both against the closed-form oracle.
            for cs, grown in ((cool, d_cool), (hot, d_hot)):
                j = sei_rate_oracle(cell, state, cs, -4.85, cs.t_cell)
                expect = sei_resistance(
                    state.delta_sei
                    + j * cell.m_sei / (cell.rho_sei * FARADAY) * 60.0,
                    cell,
                ) - state.r_sei
                assert grown == pytest.approx(expect, rel=1e-12)

    def test_charge_conservation_bookkeeping(self, cell):
        # Lithium moles x F must equal the independently integrated side
        # current over the film area.
        rng = np.random.default_rng(21)
        state = initial_sei_state(cell)
        film_area = cell.specific_area("n") * cell.l_n * cell.area
        charge_oracle = 0.0
        for _ in range(120):
            soc = rng.uniform(0.3, 0.95)
            cs = initial_cell_state(cell, soc=soc, t_cell=rng.uniform(293, 313))
            current = rng.uniform(-6.0, 2.0)
            dt = rng.uniform(5.0, 60.0)
            j = sei_rate_oracle(cell, state, cs, current, cs.t_cell)
            charge_oracle += j * film_area * dt
            state = step_sei(state, cs, current, dt, cell)
        assert state.n_li_lost * FARADAY == pytest.approx(
            charge_oracle, rel=1e-8
        )

    def test_negative_dt_rejected(self, cell):
        cs = initial_cell_state(cell, soc=0.5)
        with pytest.raises(Exception):
            step_sei(initial_sei_state(cell), cs, 0.0, -1.0, cell)


def test_persistent_gradient_orders_aging(cell):
    # In a module with a *persistent* thermal gradient (heterogeneous
    # cooling, identical capacities) the end-of-simulation film-resistance
    # ordering follows the time-averaged temperature ordering.  Capacity
    # heterogeneity instead orders aging through SOC-timing (smaller cells
    # spend longer at low anode potential), which swamps the ~0.05 K
    # time-averaged gradients of transient discharge spikes.
    import dataclasses

    import numpy as np

    from packsim.module_solver import FAST_PROFILE, run_protocol
    from packsim.params import ModuleConfig, default_protocol

    cells = tuple(
        dataclasses.replace(cell, r_u=r) for r in (6.0, 4.8, 3.6, 2.8)
    )
    cfg = ModuleConfig(
        n_p=4, cells=cells, r_int=0.25e-3, spacing=5e-3, t_amb=298.15,
        protocol=default_protocol(4), n_cycles=5, seed=0,
    )
    trace = run_protocol(cfg, FAST_PROFILE)
    rsei = np.array(trace.summaries[-1].r_sei_end)
    t_avg = np.mean([s.t_avg_k for s in trace.summaries], axis=0)
    assert t_avg.max() - t_avg.min() > 0.5  # the gradient is persistent
    assert np.array_equal(np.argsort(rsei), np.argsort(t_avg))
