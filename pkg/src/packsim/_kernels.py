"""Numerical kernels for the coupled module simulation.

Everything here operates on flat float64 arrays so the hot loop can be
compiled with numba.  Set NUMBA_DISABLE_JIT=1 to run the identical code in
pure Python when debugging.  Cells of one module are stacked along the first
axis.  Current sign convention: discharge positive.

One time step is split into ``solve_module_kernel`` (algebraic branch-current
solve at frozen states, no mutation) and ``advance_states_kernel`` (implicit
state updates over dt reusing the solve products), so the caller can locate
protocol cutoff events by bisection without paying a second solve per step.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

from .constants import FARADAY, R_GAS

_JIT_OPTS = dict(cache=True, fastmath=False)

# Slots of the per-cell scalar parameter matrix P[cell, slot].
(
    P_EPS_N, P_EPS_P, P_CSMAX_N, P_CSMAX_P, P_RCELL, P_AREA,
    P_L_N, P_L_SEP, P_L_P, P_AS_N, P_AS_P, P_TPLUS,
    P_DSN_REF, P_DSP_REF, P_DE_REF, P_KN_REF, P_KP_REF,
    P_EA_DSN, P_EA_DSP, P_EA_DE, P_EA_KN, P_EA_KP, P_TREF,
    P_EPSE_N, P_EPSE_S, P_EPSE_P, P_BRUG,
    P_KAP_LIN, P_KAP_15, P_KAP_3,
    P_THN0, P_THN100, P_THP0, P_THP100,
    P_RU, P_CS,
    P_I0SEI, P_ALPHASEI, P_USEI, P_MSEI, P_RHOSEI, P_KAPSEI, P_EASEI,
) = range(43)
N_PARAM_SLOTS = 43

# Columns of the per-cell "frozen" matrix filled by prepare_step.
(
    F_DSN, F_DSP, F_KN, F_KP, F_CONC, F_RE, F_CEAVG_N, F_CEAVG_P,
    F_DCDI_N, F_DCDI_P, F_DE,
) = range(11)
N_FROZEN_COLS = 11

# Columns of the per-cell work matrix filled by the solve for the advance.
(
    W_FLUX_N, W_FLUX_P, W_HEAT, W_UN_SURF, W_ETA_N,
) = range(5)
N_WORK_COLS = 5

# Rows of out_cells.
(
    OC_CURRENT, OC_VOLTAGE, OC_TEMP, OC_SOC, OC_RSEI, OC_HEAT,
) = range(6)
N_OUT_CELL_ROWS = 6

# Slots of out_scalars.
(
    OS_IMOD, OS_VMOD, OS_RES_KCL, OS_RES_LADDER, OS_NEWTON_ITERS,
    OS_CLAMPS, OS_LADDER_LOSS,
) = range(7)
N_OUT_SCALARS = 7

# Mode codes for the branch-current solve.
MODE_CC = 0
MODE_CV = 1


@njit(**_JIT_OPTS)
def pchip_eval(breaks, coefs, x):
    """Evaluate a clamped piecewise-cubic table; returns (value, dvalue/dx)."""
    lo = breaks[0]
    hi = breaks[-1]
    if x < lo:
        x = lo
    elif x > hi:
        x = hi
    idx = np.searchsorted(breaks, x, side="right") - 1
    if idx < 0:
        idx = 0
    last = breaks.shape[0] - 2
    if idx > last:
        idx = last
    dx = x - breaks[idx]
    c3 = coefs[0, idx]
    c2 = coefs[1, idx]
    c1 = coefs[2, idx]
    c0 = coefs[3, idx]
    val = ((c3 * dx + c2) * dx + c1) * dx + c0
    der = (3.0 * c3 * dx + 2.0 * c2) * dx + c1
    return val, der


@njit(**_JIT_OPTS)
def _arrhenius(ref, ea, temp, t_ref):
    return ref * math.exp((ea / R_GAS) * (1.0 / t_ref - 1.0 / temp))


@njit(**_JIT_OPTS)
def _kappa_e(c_e, p_row):
    """Electrolyte conductivity [S/m] as a polynomial in c_e/1000."""
    x = c_e * 1e-3
    if x < 1e-6:
        x = 1e-6
    return (
        p_row[P_KAP_LIN] * x
        + p_row[P_KAP_15] * x * math.sqrt(x)
        + p_row[P_KAP_3] * x * x * x
    )


@njit(**_JIT_OPTS)
def prepare_step(p, c_s_n, c_s_p, c_e, temps, dr_n, dr_p, n_anode, n_sep, frozen):
    """Fill per-cell state-dependent quantities frozen over one time step."""
    n_cells = p.shape[0]
    n_x = c_e.shape[1]
    for b in range(n_cells):
        temp = temps[b]
        t_ref = p[b, P_TREF]
        d_s_n = _arrhenius(p[b, P_DSN_REF], p[b, P_EA_DSN], temp, t_ref)
        d_s_p = _arrhenius(p[b, P_DSP_REF], p[b, P_EA_DSP], temp, t_ref)

        avg_n = 0.0
        for i in range(n_anode):
            avg_n += c_e[b, i]
        avg_n /= n_anode
        avg_s = 0.0
        for i in range(n_anode, n_anode + n_sep):
            avg_s += c_e[b, i]
        avg_s /= n_sep
        n_cath = n_x - n_anode - n_sep
        avg_p = 0.0
        for i in range(n_anode + n_sep, n_x):
            avg_p += c_e[b, i]
        avg_p /= n_cath

        brug = p[b, P_BRUG]
        kap_n = _kappa_e(avg_n, p[b]) * p[b, P_EPSE_N] ** brug
        kap_s = _kappa_e(avg_s, p[b]) * p[b, P_EPSE_S] ** brug
        kap_p = _kappa_e(avg_p, p[b]) * p[b, P_EPSE_P] ** brug
        r_e = (
            p[b, P_L_N] / (2.0 * kap_n)
            + p[b, P_L_SEP] / kap_s
            + p[b, P_L_P] / (2.0 * kap_p)
        ) / p[b, P_AREA]

        ce_lo = max(c_e[b, 0], 1.0)
        ce_hi = max(c_e[b, n_x - 1], 1.0)
        conc = (
            2.0 * R_GAS * temp / FARADAY
            * (1.0 - p[b, P_TPLUS])
            * math.log(ce_hi / ce_lo)
        )

        flux_scale_n = 1.0 / (FARADAY * p[b, P_AS_N] * p[b, P_L_N] * p[b, P_AREA])
        flux_scale_p = 1.0 / (FARADAY * p[b, P_AS_P] * p[b, P_L_P] * p[b, P_AREA])

        frozen[b, F_DSN] = d_s_n
        frozen[b, F_DSP] = d_s_p
        frozen[b, F_KN] = _arrhenius(p[b, P_KN_REF], p[b, P_EA_KN], temp, t_ref)
        frozen[b, F_KP] = _arrhenius(p[b, P_KP_REF], p[b, P_EA_KP], temp, t_ref)
        frozen[b, F_CONC] = conc
        frozen[b, F_RE] = r_e
        frozen[b, F_CEAVG_N] = avg_n
        frozen[b, F_CEAVG_P] = avg_p
        frozen[b, F_DCDI_N] = -0.5 * dr_n[b] * flux_scale_n / d_s_n
        frozen[b, F_DCDI_P] = 0.5 * dr_p[b] * flux_scale_p / d_s_p
        frozen[b, F_DE] = _arrhenius(p[b, P_DE_REF], p[b, P_EA_DE], temp, t_ref)


@njit(**_JIT_OPTS)
def cell_voltage_kernel(
    b, current, p, c_s_n, c_s_p, temps, r_sei, frozen,
    ocpn_breaks, ocpn_coefs, ocpp_breaks, ocpp_coefs,
):
    """Terminal voltage of cell b at the given current and frozen state.

    Returns (v, dv/dI, u_p, eta_p, u_n, eta_n, dphi_e, ohmic, clamped).
    """
    temp = temps[b]
    two_rt_f = 2.0 * R_GAS * temp / FARADAY

    c_surf_n = c_s_n[b, c_s_n.shape[1] - 1] + frozen[b, F_DCDI_N] * current
    c_surf_p = c_s_p[b, c_s_p.shape[1] - 1] + frozen[b, F_DCDI_P] * current

    clamped = 0
    cmax_n = p[b, P_CSMAX_N]
    cmax_p = p[b, P_CSMAX_P]
    floor_n = 1e-6 * cmax_n
    floor_p = 1e-6 * cmax_p
    if c_surf_n < floor_n:
        c_surf_n = floor_n
        clamped = 1
    elif c_surf_n > cmax_n - floor_n:
        c_surf_n = cmax_n - floor_n
        clamped = 1
    if c_surf_p < floor_p:
        c_surf_p = floor_p
        clamped = 1
    elif c_surf_p > cmax_p - floor_p:
        c_surf_p = cmax_p - floor_p
        clamped = 1

    theta_n = c_surf_n / cmax_n
    theta_p = c_surf_p / cmax_p
    if theta_n < ocpn_breaks[0] or theta_n > ocpn_breaks[-1]:
        clamped = 1
    if theta_p < ocpp_breaks[0] or theta_p > ocpp_breaks[-1]:
        clamped = 1
    u_n, du_n = pchip_eval(ocpn_breaks, ocpn_coefs, theta_n)
    u_p, du_p = pchip_eval(ocpp_breaks, ocpp_coefs, theta_p)

    # Exchange currents use the state-frozen shell concentration so the
    # kinetic overpotential stays exactly odd in the current.
    c_base_n = min(max(c_s_n[b, c_s_n.shape[1] - 1], floor_n), cmax_n - floor_n)
    c_base_p = min(max(c_s_p[b, c_s_p.shape[1] - 1], floor_p), cmax_p - floor_p)
    i0_n = frozen[b, F_KN] * FARADAY * math.sqrt(
        frozen[b, F_CEAVG_N] * c_base_n * (cmax_n - c_base_n)
    )
    i0_p = frozen[b, F_KP] * FARADAY * math.sqrt(
        frozen[b, F_CEAVG_P] * c_base_p * (cmax_p - c_base_p)
    )
    s_n = 1.0 / (2.0 * p[b, P_AS_N] * p[b, P_L_N] * p[b, P_AREA] * i0_n)
    s_p = 1.0 / (2.0 * p[b, P_AS_P] * p[b, P_L_P] * p[b, P_AREA] * i0_p)

    eta_n = two_rt_f * math.asinh(current * s_n)
    eta_p = -two_rt_f * math.asinh(current * s_p)

    dphi_e = frozen[b, F_CONC] - current * frozen[b, F_RE]
    r_ohm = p[b, P_RCELL] + r_sei[b]
    ohmic = current * r_ohm

    v = u_p + eta_p - u_n - eta_n + dphi_e - ohmic

    deta_n = two_rt_f * s_n / math.sqrt(1.0 + (current * s_n) ** 2)
    deta_p = two_rt_f * s_p / math.sqrt(1.0 + (current * s_p) ** 2)
    dvdi = (
        du_p / cmax_p * frozen[b, F_DCDI_P]
        - deta_p
        - du_n / cmax_n * frozen[b, F_DCDI_N]
        - deta_n
        - frozen[b, F_RE]
        - r_ohm
    )
    return v, dvdi, u_p, eta_p, u_n, eta_n, dphi_e, ohmic, clamped


@njit(**_JIT_OPTS)
def _ladder_residual_norms(v, x, n, mode, i_mod, v_hold, r_int):
    """(max ladder/voltage residual, KCL residual) at currents x."""
    res_ladder = 0.0
    cum = 0.0
    sum_i = 0.0
    for b in range(n):
        sum_i += x[b]
    for k in range(n - 1):
        cum += x[k]
        rk = v[k + 1] - v[k] - 2.0 * r_int * (i_mod - cum)
        if abs(rk) > res_ladder:
            res_ladder = abs(rk)
    if mode == MODE_CV:
        rk = v[0] - 2.0 * r_int * i_mod - v_hold
        if abs(rk) > res_ladder:
            res_ladder = abs(rk)
    return res_ladder, abs(sum_i - i_mod)


@njit(**_JIT_OPTS)
def solve_branch_currents_kernel(
    p, c_s_n, c_s_p, temps, r_sei, frozen,
    ocpn_breaks, ocpn_coefs, ocpp_breaks, ocpp_coefs,
    r_int, mode, i_mod_in, v_hold, currents,
):
    """Damped Newton solve of the interconnection-ladder current system.

    With ladder segment resistance 2*r_int the residuals are
      v[k+1] - v[k] - 2 r_int (i_mod - sum_{z<=k} i_z) = 0   (k = 1..N-1)
      sum(i) - i_mod = 0
    plus, in CV mode where i_mod is unknown, v[0] - 2 r_int i_mod - v_hold = 0.

    ``currents`` is the warm start and is overwritten with the solution.
    Returns (i_mod, v_mod, ok, kcl_residual, ladder_residual, iters, clamps).
    """
    n = currents.shape[0]
    n_unknown = n + 1 if mode == MODE_CV else n
    x = np.empty(n_unknown)
    for k in range(n):
        x[k] = currents[k]
    i_mod = i_mod_in
    if mode == MODE_CV:
        x[n] = i_mod_in

    res = np.empty(n_unknown)
    v = np.empty(n)
    dv = np.empty(n)
    clamp_count = 0
    ok = False
    iters = 0
    res_kcl = 1e300
    res_ladder = 1e300

    for it in range(25):
        iters = it + 1
        if mode == MODE_CV:
            i_mod = x[n]
        clamped_any = 0
        for b in range(n):
            vb, dvb, _, _, _, _, _, _, cl = cell_voltage_kernel(
                b, x[b], p, c_s_n, c_s_p, temps, r_sei, frozen,
                ocpn_breaks, ocpn_coefs, ocpp_breaks, ocpp_coefs,
            )
            v[b] = vb
            dv[b] = dvb
            clamped_any += cl

        res_ladder, res_kcl = _ladder_residual_norms(
            v, x, n, mode, i_mod, v_hold, r_int
        )
        cum = 0.0
        for k in range(n - 1):
            cum += x[k]
            res[k] = v[k + 1] - v[k] - 2.0 * r_int * (i_mod - cum)
        res[n - 1] = 0.0
        for b in range(n):
            res[n - 1] += x[b]
        res[n - 1] -= i_mod
        if mode == MODE_CV:
            res[n] = v[0] - 2.0 * r_int * i_mod - v_hold

        tol_i = 1e-12 * max(1.0, abs(i_mod))
        if res_ladder <= 1e-12 and res_kcl <= tol_i:
            ok = True
            clamp_count += clamped_any
            break

        norm = max(res_ladder, res_kcl)

        jac = np.zeros((n_unknown, n_unknown))
        for k in range(n - 1):
            jac[k, k + 1] = dv[k + 1]
            jac[k, k] = -dv[k] + 2.0 * r_int
            for z in range(k):
                jac[k, z] = 2.0 * r_int
            if mode == MODE_CV:
                jac[k, n] = -2.0 * r_int
        for z in range(n):
            jac[n - 1, z] = 1.0
        if mode == MODE_CV:
            jac[n - 1, n] = -1.0
            jac[n, 0] = dv[0]
            jac[n, n] = -2.0 * r_int

        step = np.linalg.solve(jac, res)

        lam = 1.0
        accepted = False
        for _damp in range(12):
            x_try = x - lam * step
            i_mod_try = x_try[n] if mode == MODE_CV else i_mod
            for b in range(n):
                vb, _, _, _, _, _, _, _, _cl = cell_voltage_kernel(
                    b, x_try[b], p, c_s_n, c_s_p, temps, r_sei, frozen,
                    ocpn_breaks, ocpn_coefs, ocpp_breaks, ocpp_coefs,
                )
                v[b] = vb
            rl_try, rk_try = _ladder_residual_norms(
                v, x_try, n, mode, i_mod_try, v_hold, r_int
            )
            if max(rl_try, rk_try) < norm or max(rl_try, rk_try) < 1e-14:
                x = x_try
                accepted = True
                break
            lam *= 0.5
        if not accepted:
            x = x - lam * step

    for k in range(n):
        currents[k] = x[k]
    if mode == MODE_CV:
        i_mod = x[n]
    vb, _, _, _, _, _, _, _, _cl = cell_voltage_kernel(
        0, currents[0], p, c_s_n, c_s_p, temps, r_sei, frozen,
        ocpn_breaks, ocpn_coefs, ocpp_breaks, ocpp_coefs,
    )
    v_mod = vb - 2.0 * r_int * i_mod
    return i_mod, v_mod, ok, res_kcl, res_ladder, iters, clamp_count


@njit(**_JIT_OPTS)
def solve_module_kernel(
    # state (read only)
    c_s_n, c_s_p, c_e, temps, r_sei, currents,
    # parameters
    p, dr_n, dr_p, vol_n, vol_p, vsum_n, vsum_p,
    ocpn_breaks, ocpn_coefs, ocpp_breaks, ocpp_coefs,
    entn_breaks, entn_coefs, entp_breaks, entp_coefs,
    n_anode, n_sep, r_int,
    # step controls
    mode, i_mod_in, v_hold,
    # outputs
    out_cells, out_scalars, work, frozen,
):
    """Algebraic solve at frozen states; fills samples and advance products.

    Mutates only ``currents`` (the solved branch currents), the output
    buffers, ``work`` and ``frozen``.  Returns True on Newton success.
    """
    n = currents.shape[0]
    prepare_step(p, c_s_n, c_s_p, c_e, temps, dr_n, dr_p, n_anode, n_sep, frozen)
    i_mod, v_mod, ok, res_kcl, res_ladder, iters, clamps = (
        solve_branch_currents_kernel(
            p, c_s_n, c_s_p, temps, r_sei, frozen,
            ocpn_breaks, ocpn_coefs, ocpp_breaks, ocpp_coefs,
            r_int, mode, i_mod_in, v_hold, currents,
        )
    )
    out_scalars[OS_IMOD] = i_mod
    out_scalars[OS_VMOD] = v_mod
    out_scalars[OS_RES_KCL] = res_kcl
    out_scalars[OS_RES_LADDER] = res_ladder
    out_scalars[OS_NEWTON_ITERS] = iters
    out_scalars[OS_CLAMPS] = clamps
    out_scalars[OS_LADDER_LOSS] = 0.0
    if not ok:
        return False

    ladder_loss = 2.0 * r_int * i_mod * i_mod
    cum = 0.0
    total_clamps = clamps
    for b in range(n):
        cur = currents[b]
        vb, _, u_p, eta_p, u_n, eta_n, dphi, ohm, cl = cell_voltage_kernel(
            b, cur, p, c_s_n, c_s_p, temps, r_sei, frozen,
            ocpn_breaks, ocpn_coefs, ocpp_breaks, ocpp_coefs,
        )
        total_clamps += cl

        acc = 0.0
        for i in range(c_s_n.shape[1]):
            acc += vol_n[b, i] * c_s_n[b, i]
        theta_bulk_n = acc / (vsum_n[b] * p[b, P_CSMAX_N])
        acc = 0.0
        for i in range(c_s_p.shape[1]):
            acc += vol_p[b, i] * c_s_p[b, i]
        theta_bulk_p = acc / (vsum_p[b] * p[b, P_CSMAX_P])

        u_n_bulk, _ = pchip_eval(ocpn_breaks, ocpn_coefs, theta_bulk_n)
        u_p_bulk, _ = pchip_eval(ocpp_breaks, ocpp_coefs, theta_bulk_p)
        dudt_n, _ = pchip_eval(entn_breaks, entn_coefs, theta_bulk_n)
        dudt_p, _ = pchip_eval(entp_breaks, entp_coefs, theta_bulk_p)
        v_ocv = u_p_bulk - u_n_bulk
        heat = cur * (v_ocv - vb) + temps[b] * cur * (dudt_p - dudt_n)

        soc = (theta_bulk_n - p[b, P_THN0]) / (p[b, P_THN100] - p[b, P_THN0])
        out_cells[OC_CURRENT, b] = cur
        out_cells[OC_VOLTAGE, b] = vb
        out_cells[OC_TEMP, b] = temps[b]
        out_cells[OC_SOC, b] = soc
        out_cells[OC_RSEI, b] = r_sei[b]
        out_cells[OC_HEAT, b] = heat

        work[b, W_FLUX_N] = cur / (
            FARADAY * p[b, P_AS_N] * p[b, P_L_N] * p[b, P_AREA]
        )
        work[b, W_FLUX_P] = -cur / (
            FARADAY * p[b, P_AS_P] * p[b, P_L_P] * p[b, P_AREA]
        )
        work[b, W_HEAT] = heat
        work[b, W_UN_SURF] = u_n
        work[b, W_ETA_N] = eta_n
        if b < n - 1:
            cum += cur
            seg = i_mod - cum
            ladder_loss += 2.0 * r_int * seg * seg

    out_scalars[OS_CLAMPS] = total_clamps
    out_scalars[OS_LADDER_LOSS] = ladder_loss
    return True


@njit(**_JIT_OPTS)
def step_solid_diffusion(c, diff, vol, face_w, a_out, dt, flux_out):
    """Backward-Euler finite-volume update of spherical diffusion, in place.

    c: (B, N) shell concentrations; diff: (B,) diffusivity; vol: (B, N) shell
    volumes (radius-normalized); face_w: (B, N-1) interior face area / dr;
    a_out: (B,) outer face area; flux_out: (B,) outward molar flux [mol/m^2/s].
    Total content changes by exactly -flux_out * a_out * dt per batch row.
    """
    n_b, n = c.shape
    lower = np.empty(n)
    diag = np.empty(n)
    upper = np.empty(n)
    rhs = np.empty(n)
    clamps = 0
    for b in range(n_b):
        d = diff[b]
        for i in range(n):
            cap = vol[b, i] / dt
            diag[i] = cap
            rhs[i] = cap * c[b, i]
            lower[i] = 0.0
            upper[i] = 0.0
        for i in range(n - 1):
            g = d * face_w[b, i]
            diag[i] += g
            diag[i + 1] += g
            upper[i] = -g
            lower[i + 1] = -g
        rhs[n - 1] -= flux_out[b] * a_out[b]
        for i in range(1, n):
            m = lower[i] / diag[i - 1]
            diag[i] -= m * upper[i - 1]
            rhs[i] -= m * rhs[i - 1]
        c[b, n - 1] = rhs[n - 1] / diag[n - 1]
        for i in range(n - 2, -1, -1):
            c[b, i] = (rhs[i] - upper[i] * c[b, i + 1]) / diag[i]
        for i in range(n):
            if c[b, i] < 0.0:
                c[b, i] = 0.0
                clamps += 1
    return clamps


@njit(**_JIT_OPTS)
def step_electrolyte(c_e, d_e, cap, face_g, src_w, currents, dt):
    """Backward-Euler update of the 1-D electrolyte concentration, in place.

    cap: (B, N) eps_e * dx storage per volume; face_g: (B, N-1) geometric face
    conductance multiplied by d_e(T); src_w: (B, N) per-volume source weight
    so that source_i = current * src_w[i]; zero-flux ends.
    """
    n_b, n = c_e.shape
    lower = np.empty(n)
    diag = np.empty(n)
    upper = np.empty(n)
    rhs = np.empty(n)
    clamps = 0
    for b in range(n_b):
        d = d_e[b]
        cur = currents[b]
        for i in range(n):
            capi = cap[b, i] / dt
            diag[i] = capi
            rhs[i] = capi * c_e[b, i] + cur * src_w[b, i]
            lower[i] = 0.0
            upper[i] = 0.0
        for i in range(n - 1):
            g = d * face_g[b, i]
            diag[i] += g
            diag[i + 1] += g
            upper[i] = -g
            lower[i + 1] = -g
        for i in range(1, n):
            m = lower[i] / diag[i - 1]
            diag[i] -= m * upper[i - 1]
            rhs[i] -= m * rhs[i - 1]
        c_e[b, n - 1] = rhs[n - 1] / diag[n - 1]
        for i in range(n - 2, -1, -1):
            c_e[b, i] = (rhs[i] - upper[i] * c_e[b, i + 1]) / diag[i]
        for i in range(n):
            if c_e[b, i] < 1.0:
                c_e[b, i] = 1.0
                clamps += 1
    return clamps


@njit(**_JIT_OPTS)
def step_thermal_kernel(temps, heats, r_u, c_s, r_m, t_amb, dt):
    """Backward-Euler update of the cell temperature chain, in place.

    Returns the summed energy-balance residual (inter-cell exchange cancels
    pairwise, so sum C dT/dt must equal sum q - sum (T - T_amb)/R_u).
    """
    n = temps.shape[0]
    lower = np.empty(n)
    diag = np.empty(n)
    upper = np.empty(n)
    rhs = np.empty(n)
    t_old_sum = 0.0
    g = 1.0 / r_m
    for i in range(n):
        cap = c_s[i] / dt
        diag[i] = cap + 1.0 / r_u[i]
        rhs[i] = cap * temps[i] + heats[i] + t_amb / r_u[i]
        lower[i] = 0.0
        upper[i] = 0.0
        t_old_sum += c_s[i] * temps[i]
    for i in range(n - 1):
        diag[i] += g
        diag[i + 1] += g
        upper[i] = -g
        lower[i + 1] = -g
    for i in range(1, n):
        m = lower[i] / diag[i - 1]
        diag[i] -= m * upper[i - 1]
        rhs[i] -= m * rhs[i - 1]
    temps[n - 1] = rhs[n - 1] / diag[n - 1]
    for i in range(n - 2, -1, -1):
        temps[i] = (rhs[i] - upper[i] * temps[i + 1]) / diag[i]
    lhs = 0.0
    out = 0.0
    qsum = 0.0
    for i in range(n):
        lhs += c_s[i] * temps[i]
        out += (temps[i] - t_amb) / r_u[i]
        qsum += heats[i]
    return (lhs - t_old_sum) / dt - (qsum - out)


@njit(**_JIT_OPTS)
def step_sei_kernel(
    p, currents, temps, u_n_surf, eta_n, delta_sei, r_sei,
    n_li_lost, n_li_cycle, dt,
):
    """Kinetics-limited (Tafel) SEI growth on the negative electrode, in place.

    The side reaction runs only while thermodynamically favorable, keeping
    film thickness, resistance, and the consumed-lithium tally non-decreasing.
    """
    n = currents.shape[0]
    for b in range(n):
        i0_ref = p[b, P_I0SEI]
        if i0_ref <= 0.0:
            continue
        temp = temps[b]
        i0 = _arrhenius(i0_ref, p[b, P_EASEI], temp, p[b, P_TREF])
        phi_sn = u_n_surf[b] + eta_n[b]
        eta_sei = phi_sn - p[b, P_USEI] - currents[b] * r_sei[b]
        if eta_sei >= 0.0:
            continue
        j_sei = -i0 * math.exp(
            -p[b, P_ALPHASEI] * FARADAY * eta_sei / (R_GAS * temp)
        )
        growth = -j_sei * p[b, P_MSEI] / (p[b, P_RHOSEI] * FARADAY) * dt
        delta_sei[b] += growth
        film_area = p[b, P_AS_N] * p[b, P_L_N] * p[b, P_AREA]
        r_sei[b] = delta_sei[b] / (p[b, P_KAPSEI] * film_area)
        d_moles = -j_sei * film_area / FARADAY * dt
        n_li_lost[b] += d_moles
        n_li_cycle[b] += d_moles


@njit(**_JIT_OPTS)
def advance_states_kernel(
    # state (mutated in place)
    c_s_n, c_s_p, c_e, temps, delta_sei, r_sei, n_li_lost, n_li_cycle, currents,
    # parameters
    p, vol_n, vol_p, face_w_n, face_w_p, a_out_n, a_out_p,
    cap_e, face_g_e, src_w_e,
    r_u, c_s_heat, r_m, t_amb,
    # solve products
    work, frozen,
    # step controls
    dt, sei_enabled,
):
    """Advance all cell states over dt using the preceding solve's products.

    Order: solid diffusion, electrolyte, thermal, SEI (operator splitting).
    Returns (clamp_count, thermal_residual).
    """
    n = currents.shape[0]
    d_s_n = np.empty(n)
    d_s_p = np.empty(n)
    d_e = np.empty(n)
    flux_n = np.empty(n)
    flux_p = np.empty(n)
    heats = np.empty(n)
    temps_old = np.empty(n)
    for b in range(n):
        d_s_n[b] = frozen[b, F_DSN]
        d_s_p[b] = frozen[b, F_DSP]
        d_e[b] = frozen[b, F_DE]
        flux_n[b] = work[b, W_FLUX_N]
        flux_p[b] = work[b, W_FLUX_P]
        heats[b] = work[b, W_HEAT]
        temps_old[b] = temps[b]

    clamps = step_solid_diffusion(c_s_n, d_s_n, vol_n, face_w_n, a_out_n, dt, flux_n)
    clamps += step_solid_diffusion(c_s_p, d_s_p, vol_p, face_w_p, a_out_p, dt, flux_p)
    clamps += step_electrolyte(c_e, d_e, cap_e, face_g_e, src_w_e, currents, dt)

    thermal_res = step_thermal_kernel(temps, heats, r_u, c_s_heat, r_m, t_amb, dt)

    if sei_enabled:
        un = np.empty(n)
        etan = np.empty(n)
        for b in range(n):
            un[b] = work[b, W_UN_SURF]
            etan[b] = work[b, W_ETA_N]
        step_sei_kernel(p, currents, temps_old, un, etan,
                        delta_sei, r_sei, n_li_lost, n_li_cycle, dt)
    return clamps, thermal_res
