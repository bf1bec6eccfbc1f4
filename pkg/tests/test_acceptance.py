"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The heavy fixtures (five 100-module x 20-cycle fast campaigns and one full
fast-tier sweep) are shared across criteria and run once per session.
"""

import dataclasses
import math

import numpy as np
import pytest

from packsim.arrange import arrange_descending_capacity
from packsim.aging import initial_sei_state, step_sei
from packsim.constants import FARADAY, R_GAS
from packsim.espm import initial_cell_state, total_solid_moles, cell_voltage
from packsim.ioutil import sha256_file
from packsim.module_solver import (
    DEFAULT_PROFILE,
    FAST_PROFILE,
    run_protocol,
    simulate_module,
)
from packsim.montecarlo import CampaignSpec, module_config_for, run_campaign
from packsim.params import SamplingRanges, default_cell, sample_module
from packsim.stats import (
    BASIC_PREDICTORS,
    EXTENDED_PREDICTORS,
    fit_ols,
    pareto_report,
    relative_importance,
    stepwise_fit,
)

from conftest import make_module

N_CAMPAIGN_SEEDS = 5
CAMPAIGN_MODULES = 100
CAMPAIGN_CYCLES = 20
FAST_SWEEP_MODULES = 50
FAST_SWEEP_CYCLES = 50
ARRANGEMENT_MODULES = 100


def _report(criterion: int, passed: bool, detail: str) -> None:
    status = "PASS" if passed else "FAIL"
    print(f"\nACCEPTANCE {criterion:02d}: {status} - {detail}")
    assert passed, f"criterion {criterion}: {detail}"


@pytest.fixture(scope="session")
def campaign_rows(tmp_path_factory):
    """Five independent fast campaigns used by criteria 5, 6, and 8."""
    base = tmp_path_factory.mktemp("campaigns")
    per_seed = {}
    for seed in range(N_CAMPAIGN_SEEDS):
        spec = CampaignSpec(
            n_modules=CAMPAIGN_MODULES, n_cycles=CAMPAIGN_CYCLES,
            master_seed=seed, profile="fast",
        )
        rows = run_campaign(spec, base / f"seed{seed}", workers=None)
        per_seed[seed] = [r for r in rows if r["status"] == "ok"]
    return per_seed


@pytest.fixture(scope="session")
def fast_sweep(tmp_path_factory):
    """One full fast-tier sweep (criterion 1)."""
    out = tmp_path_factory.mktemp("fast_sweep")
    spec = CampaignSpec(
        n_modules=FAST_SWEEP_MODULES, n_cycles=FAST_SWEEP_CYCLES,
        master_seed=99, profile="fast",
    )
    return run_campaign(spec, out, workers=None)


def _rank_for(rows, response, predictors):
    usable = [
        r for r in rows
        if all(np.isfinite(r[p]) for p in predictors)
        and np.isfinite(r[response])
    ]
    x = np.array([[r[p] for p in predictors] for r in usable])
    y = np.array([r[response] for r in usable])
    model = stepwise_fit(x, y, names=list(predictors))
    importance = relative_importance(model, x, y)
    report = pareto_report(model, importance)
    return model, report


def test_criterion_1_kirchhoff_exactness(fast_sweep):
    ok_rows = [r for r in fast_sweep if r["status"] == "ok"]
    worst_kcl = max(r["max_res_kcl"] for r in ok_rows)
    worst_ladder = max(r["max_res_ladder"] for r in ok_rows)
    # Residual bounds are enforced at every accepted step inside the solver
    # (violations raise); the recorded maxima confirm the margins.
    passed = (
        len(ok_rows) == FAST_SWEEP_MODULES
        and worst_kcl <= 1e-9
        and worst_ladder <= 1e-9
    )
    _report(1, passed,
            f"{len(ok_rows)}/{FAST_SWEEP_MODULES} modules over "
            f"{FAST_SWEEP_CYCLES} cycles; max |sum i - i_mod| = "
            f"{worst_kcl:.2e} A (bound 1e-9*max(1,|i_mod|), enforced "
            f"per step), max ladder residual = {worst_ladder:.2e} V")


def test_criterion_2_symmetry_null():
    cell = default_cell()
    cfg = make_module([cell] * 4, r_int=0.0, n_cycles=1)
    trace = run_protocol(cfg, DEFAULT_PROFILE)
    s = trace.summaries[0]
    passed = (
        s.sigma_i_a <= 1e-9 and s.sigma_t_k <= 1e-9 and s.dt_max_k <= 1e-9
    )
    _report(2, passed,
            f"homogeneous module: sigma_i = {s.sigma_i_a:.2e} A, "
            f"sigma_t = {s.sigma_t_k:.2e} K, dT_max = {s.dt_max_k:.2e} K "
            f"over a full cycle")


def test_criterion_3_ols_oracle_equivalence():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(30, 1001))
        q = int(rng.integers(1, 21))
        if n < q + 5:
            n = q + 5
        x = rng.normal(size=(n, q))
        y = x @ rng.normal(size=q) + rng.normal(scale=0.3, size=n)
        model = fit_ols(x, y, standardize=False)
        design = np.column_stack([np.ones(n), x])
        oracle = np.linalg.solve(design.T @ design, design.T @ y)
        scale = max(1.0, float(np.max(np.abs(oracle))))
        worst = max(worst, float(np.max(np.abs(model.coef - oracle))) / scale)
    passed = worst <= 1e-8
    _report(3, passed,
            f"100 random problems (n <= 1000, q <= 20): worst relative "
            f"deviation from normal equations = {worst:.2e} (bound 1e-8)")


def test_criterion_4_dominance_identity():
    import itertools

    rng = np.random.default_rng(77)
    worst_sum = 0.0
    worst_oracle = 0.0
    for _ in range(20):
        q = int(rng.integers(2, 5))
        x = rng.normal(size=(150, q))
        beta = rng.normal(size=q)
        y = x @ beta + 0.5 * x[:, 0] * x[:, -1] + rng.normal(scale=0.4, size=150)
        model = stepwise_fit(x, y)
        shares = relative_importance(model, x, y)
        if not shares:
            continue
        worst_sum = max(worst_sum,
                        abs(sum(shares.values()) - model.r_squared))

        # Brute-force subset enumeration with independent lstsq fits.
        x_std = (x - model.means) / model.scales
        groups = model.predictor_groups()

        def r2(subset):
            cols = [np.ones(150)]
            for t in model.terms:
                if t.kind == "intercept":
                    continue
                if not all(v in subset for v in t.variables()):
                    continue
                if t.kind == "linear":
                    cols.append(x_std[:, t.i])
                elif t.kind == "quadratic":
                    cols.append(x_std[:, t.i] ** 2)
                else:
                    cols.append(x_std[:, t.i] * x_std[:, t.j])
            d = np.column_stack(cols)
            coef, *_ = np.linalg.lstsq(d, y, rcond=None)
            r = y - d @ coef
            return 1.0 - (r @ r) / np.sum((y - y.mean()) ** 2)

        for g in groups:
            others = [h for h in groups if h != g]
            total = 0.0
            for r in range(len(others) + 1):
                w = (math.factorial(r) * math.factorial(len(groups) - 1 - r)
                     / math.factorial(len(groups)))
                for combo in itertools.combinations(others, r):
                    total += w * (r2(set(combo) | {g}) - r2(set(combo)))
            name = model.predictor_names[g]
            worst_oracle = max(worst_oracle, abs(shares[name] - total))
    passed = worst_sum <= 1e-10 and worst_oracle <= 1e-10
    _report(4, passed,
            f"share-sum vs R^2 deviation = {worst_sum:.2e} (bound 1e-10); "
            f"worst gap to brute-force subset oracle = {worst_oracle:.2e}")


def test_criterion_5_short_term_ranking(campaign_rows):
    hits = 0
    details = []
    for seed, rows in campaign_rows.items():
        _model, report = _rank_for(rows, "sigma_i", BASIC_PREDICTORS)
        top2 = {name for name, _s, _c in report.rows[:2]}
        ok = "r_int" in top2 and (
            "sigma_eps_n" in top2 or "sigma_eps_p" in top2
        )
        hits += int(ok)
        details.append(f"seed{seed}:{sorted(top2)}")
    passed = hits >= math.ceil(0.8 * N_CAMPAIGN_SEEDS)
    _report(5, passed,
            f"sigma_i top-2 = {{r_int, sigma_eps}} in {hits}/"
            f"{N_CAMPAIGN_SEEDS} seeds ({'; '.join(details)})")


def test_criterion_6_capacity_mean_effect(campaign_rows):
    hits = 0
    details = []
    for seed, rows in campaign_rows.items():
        _model, report = _rank_for(rows, "pct_delta_q", EXTENDED_PREDICTORS)
        top = report.rows[0][0] if report.rows else "none"
        hits += int(top == "mu_comb")
        details.append(f"seed{seed}:{top}")
    passed = hits >= math.ceil(0.8 * N_CAMPAIGN_SEEDS)
    _report(6, passed,
            f"mu_comb is the top %DQ predictor in {hits}/"
            f"{N_CAMPAIGN_SEEDS} seeds ({'; '.join(details)})")


def test_criterion_7_arrangement_direction(tmp_path_factory):
    rng_seeds = range(7000, 7000 + ARRANGEMENT_MODULES)
    nominal = default_cell()
    ranges = SamplingRanges()
    reductions = []
    wins = 0
    for seed in rng_seeds:
        cfg = sample_module(seed, nominal, ranges, n_cycles=1)
        desc = arrange_descending_capacity(cfg.cells)
        asc = list(reversed(desc))
        dt = {}
        for name, order in (("desc", desc), ("asc", asc)):
            trace = run_protocol(cfg.reordered(order), FAST_PROFILE)
            dt[name] = trace.summaries[0].dt_max_k
        if dt["desc"] < dt["asc"]:
            wins += 1
        reductions.append((dt["asc"] - dt["desc"]) / dt["asc"])
    win_rate = wins / ARRANGEMENT_MODULES
    median_reduction = float(np.median(reductions))
    passed = win_rate >= 0.90 and median_reduction >= 0.25
    _report(7, passed,
            f"descending order reduces dT_max in {100 * win_rate:.0f}% of "
            f"{ARRANGEMENT_MODULES} modules (need >= 90%); median reduction "
            f"{100 * median_reduction:.1f}% (need >= 25%)")


def test_criterion_8_aging_monotonicity_and_ordering(campaign_rows):
    # KNOWN RED (see the analysis below and tests/test_aging.py): the
    # monotonicity clause holds everywhere; the ordering clause is
    # structurally unattainable for capacity-heterogeneous modules because
    # end-of-simulation R_SEI ordering is set by SOC-timing (smaller cells
    # spend longer at low anode potential; corr(R_SEI, capacity) ~ -0.99)
    # while the time-averaged temperature ordering follows current share
    # (corr(T_avg, capacity) ~ +0.97), so the two orderings anti-correlate.
    # The dT_max > 0.2 K gate selects transient end-of-discharge spikes, not
    # persistent gradients; with a persistent gradient and no capacity
    # spread the hotter-ages-faster ordering does hold (test_aging.py).
    total = 0
    matched = 0
    monotone_ok = True
    gated = 0
    for rows in campaign_rows.values():
        for r in rows:
            monotone_ok &= bool(r["rsei_monotone"])
            total += 1
            if r["delta_t_max"] <= 0.2:
                continue
            gated += 1
            n_p = 4
            rsei = np.array([r[f"rsei_eos_{k + 1}"] for k in range(n_p)])
            t_avg = np.array([r[f"t_avg_{k + 1}"] for k in range(n_p)])
            if np.array_equal(np.argsort(rsei), np.argsort(t_avg)):
                matched += 1
    match_rate = matched / gated if gated else 1.0
    passed = monotone_ok and gated > 0 and match_rate >= 0.90
    _report(8, passed,
            f"R_sei non-decreasing per cell per cycle in all {total} modules: "
            f"{monotone_ok}; EOS R_sei ordering matches time-avg temperature "
            f"ordering in {matched}/{gated} modules with dT_max > 0.2 K "
            f"({100 * match_rate:.0f}%, need >= 90%). The ordering clause is "
            f"a documented spec defect for capacity-heterogeneous modules: "
            f"SOC-timing sets the R_SEI ordering and anti-correlates with "
            f"the time-averaged temperature ordering; the hotter-ages-faster "
            f"invariant holds under a persistent gradient (see "
            f"tests/test_aging.py::test_persistent_gradient_orders_aging).")


def test_criterion_9_conservation_suite():
    details = []

    # (a) Lithium conservation over a full cycle with SEI disabled.
    cell = default_cell()
    cfg = make_module([cell] * 4, r_int=0.25e-3, n_cycles=1)
    init = initial_cell_state(cell, soc=0.0, t_cell=cfg.t_amb,
                              disc=DEFAULT_PROFILE.disc)
    n0, p0 = total_solid_moles(init, cell, DEFAULT_PROFILE.disc)
    total0 = 4 * (n0 + p0)
    _trace, state = simulate_module(cfg, DEFAULT_PROFILE, sei_enabled=False)
    total1 = sum(
        sum(total_solid_moles(cs, c, DEFAULT_PROFILE.disc))
        for cs, c in zip(state.cells, cfg.cells)
    )
    li_err = abs(total1 - total0) / total0
    details.append(f"lithium {li_err:.2e} (1e-9)")

    # (b) Side-reaction charge bookkeeping against the closed-form rate.
    sei = initial_sei_state(cell)
    film_area = cell.specific_area("n") * cell.l_n * cell.area
    charge = 0.0
    rng = np.random.default_rng(4)
    for _ in range(100):
        cs = initial_cell_state(cell, soc=rng.uniform(0.3, 0.95),
                                t_cell=rng.uniform(293, 313))
        cur = rng.uniform(-6.0, 1.0)
        dt = rng.uniform(5.0, 50.0)
        vb = cell_voltage(cs, cur, cell)
        i0 = cell.i0_sei * math.exp(
            (cell.ea_sei / R_GAS) * (1 / cell.t_ref - 1 / cs.t_cell))
        eta = vb.u_n + vb.eta_n - cell.u_sei - cur * sei.r_sei
        if eta < 0:
            charge += i0 * math.exp(
                -cell.alpha_sei * FARADAY * eta / (R_GAS * cs.t_cell)
            ) * film_area * dt
        sei = step_sei(sei, cs, cur, dt, cell)
    side_err = abs(sei.n_li_lost * FARADAY - charge) / charge
    details.append(f"side-reaction {side_err:.2e} (1e-8)")

    # (c) Thermal bookkeeping: per-step residual enforced in the solver;
    # the recorded maximum confirms the margin.
    trace = run_protocol(cfg, FAST_PROFILE)
    th_res = trace.diagnostics["max_thermal_residual"]
    details.append(f"thermal {th_res:.2e} (1e-9)")

    # (d) Discharge-energy ladder identity.
    s = trace.summaries[0]
    e_err = abs(s.e_mod_wh - (s.e_cells_wh - s.e_ladder_wh)) / s.e_mod_wh
    details.append(f"energy identity {e_err:.2e} (1e-6)")

    passed = (
        li_err <= 1e-9 and side_err <= 1e-8
        and th_res <= 1e-9 * 305.0 and e_err <= 1e-6
    )
    _report(9, passed, "; ".join(details))


def test_criterion_10_determinism(tmp_path_factory):
    base = tmp_path_factory.mktemp("determinism")
    spec = CampaignSpec(n_modules=6, n_cycles=2, master_seed=31,
                        profile="fast")
    digests = []
    for label, workers in (("w1", 1), ("w2", 2), ("w2b", 2)):
        out = base / label
        run_campaign(spec, out, workers=workers)
        digests.append(sha256_file(out / "results.csv"))
    passed = len(set(digests)) == 1
    _report(10, passed,
            f"results.csv sha256 identical across reruns and worker counts "
            f"(1 vs 2): {digests[0][:12]}...")
