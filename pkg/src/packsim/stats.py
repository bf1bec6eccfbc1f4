"""Predictor/response extraction and the regression toolkit.

Implements the quadratic-with-interactions linear model, ordinary least
squares with t-statistics, forward/backward stepwise term selection, and
general-dominance (subset-averaged, Shapley) importance shares that sum to
the full model R^2.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import qr as scipy_qr
from scipy.linalg import solve_triangular
from scipy.special import betainc

from .module_solver import SimTrace
from .params import ModuleConfig

__all__ = [
    "Term",
    "full_term_set",
    "linear_term_set",
    "RegressionModel",
    "PredictorSet",
    "ResponseSet",
    "BASIC_PREDICTORS",
    "EXTENDED_PREDICTORS",
    "RESPONSE_COLUMNS",
    "position_weights",
    "compute_predictors",
    "compute_responses",
    "fit_ols",
    "stepwise_fit",
    "relative_importance",
    "pareto_report",
    "ParetoReport",
]


# ---------------------------------------------------------------------------
# Model terms
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=True)
class Term:
    """One design-matrix column: intercept, x_i, x_i^2, or x_i * x_j."""

    kind: str
    i: Optional[int] = None
    j: Optional[int] = None

    def __post_init__(self):
        if self.kind not in ("intercept", "linear", "quadratic", "interaction"):
            raise ValueError(f"unknown term kind {self.kind!r}")
        if self.kind == "interaction" and (self.i is None or self.j is None
                                           or self.i == self.j):
            raise ValueError("interaction terms need two distinct predictors")

    def variables(self) -> tuple:
        if self.kind == "intercept":
            return ()
        if self.kind == "interaction":
            return (self.i, self.j)
        return (self.i,)

    def label(self, names: Sequence[str]) -> str:
        if self.kind == "intercept":
            return "intercept"
        if self.kind == "linear":
            return names[self.i]
        if self.kind == "quadratic":
            return f"{names[self.i]}^2"
        return f"{names[self.i]}*{names[self.j]}"


def linear_term_set(q: int) -> list:
    return [Term("intercept")] + [Term("linear", i) for i in range(q)]


def full_term_set(q: int) -> list:
    """All terms of the quadratic-with-interactions model over q predictors."""
    terms = [Term("intercept")]
    terms += [Term("linear", i) for i in range(q)]
    terms += [Term("quadratic", i) for i in range(q)]
    terms += [Term("interaction", i, j)
              for i in range(q - 1) for j in range(i + 1, q)]
    return terms


def _build_design(x_std: np.ndarray, terms: Sequence[Term]) -> np.ndarray:
    n = x_std.shape[0]
    cols = np.empty((n, len(terms)))
    for k, t in enumerate(terms):
        if t.kind == "intercept":
            cols[:, k] = 1.0
        elif t.kind == "linear":
            cols[:, k] = x_std[:, t.i]
        elif t.kind == "quadratic":
            cols[:, k] = x_std[:, t.i] ** 2
        else:
            cols[:, k] = x_std[:, t.i] * x_std[:, t.j]
    return cols


class RankDeficientError(ValueError):
    """Design matrix is not full column rank; names the offending terms."""

    def __init__(self, labels):
        super().__init__(
            "design matrix is rank deficient; collinear terms: "
            + ", ".join(labels)
        )
        self.labels = list(labels)


# ---------------------------------------------------------------------------
# OLS
# ---------------------------------------------------------------------------

@dataclass
class RegressionModel:
    """Fitted linear model over standardized predictors.

    Coefficients live in standardized-predictor space; ``raw_coefficients``
    expands them back to raw predictor units.
    """

    terms: list
    predictor_names: list
    coef: np.ndarray
    std_err: np.ndarray
    t_stat: np.ndarray
    p_value: np.ndarray
    r_squared: float
    df_resid: int
    sigma2: float
    means: np.ndarray
    scales: np.ndarray
    entry_history: list = field(default_factory=list)
    converged: bool = True

    def labels(self) -> list:
        return [t.label(self.predictor_names) for t in self.terms]

    def predictor_groups(self) -> list:
        groups = sorted({v for t in self.terms for v in t.variables()})
        return groups

    def design(self, x_raw: np.ndarray) -> np.ndarray:
        x_std = (np.asarray(x_raw, dtype=float) - self.means) / self.scales
        return _build_design(x_std, self.terms)

    def predict(self, x_raw: np.ndarray) -> np.ndarray:
        return self.design(x_raw) @ self.coef

    def raw_coefficients(self) -> dict:
        """Expand standardized-space coefficients into raw polynomial ones."""
        q = len(self.predictor_names)
        lin = np.zeros(q)
        quad = np.zeros(q)
        inter: dict = {}
        const = 0.0
        mu, sc = self.means, self.scales
        for t, b in zip(self.terms, self.coef):
            if t.kind == "intercept":
                const += b
            elif t.kind == "linear":
                lin[t.i] += b / sc[t.i]
                const -= b * mu[t.i] / sc[t.i]
            elif t.kind == "quadratic":
                quad[t.i] += b / sc[t.i] ** 2
                lin[t.i] -= 2.0 * b * mu[t.i] / sc[t.i] ** 2
                const += b * mu[t.i] ** 2 / sc[t.i] ** 2
            else:
                i, j = t.i, t.j
                denom = sc[i] * sc[j]
                inter[(i, j)] = inter.get((i, j), 0.0) + b / denom
                lin[i] -= b * mu[j] / denom
                lin[j] -= b * mu[i] / denom
                const += b * mu[i] * mu[j] / denom
        out = {"intercept": const}
        names = self.predictor_names
        for i in range(q):
            if lin[i] != 0.0:
                out[names[i]] = lin[i]
        for i in range(q):
            if quad[i] != 0.0:
                out[f"{names[i]}^2"] = quad[i]
        for (i, j), b in inter.items():
            out[f"{names[i]}*{names[j]}"] = b
        return out

    def summary_text(self) -> str:
        lines = [
            f"observations: {self.df_resid + len(self.terms)}",
            f"terms: {len(self.terms)}  residual dof: {self.df_resid}",
            f"R^2 = {self.r_squared:.6f}",
            "",
            f"{'term':<28}{'coef(std)':>14}{'std err':>12}{'t':>10}{'p':>12}",
        ]
        for lbl, b, se, t, p in zip(self.labels(), self.coef, self.std_err,
                                    self.t_stat, self.p_value):
            lines.append(f"{lbl:<28}{b:>14.6g}{se:>12.4g}{t:>10.3f}{p:>12.4g}")
        if self.entry_history:
            lines.append("")
            lines.append("selection history:")
            lines.extend(f"  {h}" for h in self.entry_history)
        if not self.converged:
            lines.append("WARNING: stepwise selection hit the step limit")
        return "\n".join(lines)


def _two_sided_p(t_stat: np.ndarray, df: int) -> np.ndarray:
    t2 = np.asarray(t_stat, dtype=float) ** 2
    return betainc(0.5 * df, 0.5, df / (df + t2))


def _standardize(x: np.ndarray) -> tuple:
    x = np.asarray(x, dtype=float)
    means = x.mean(axis=0)
    scales = x.std(axis=0, ddof=0)
    scales = np.where(scales > 0.0, scales, 1.0)
    return (x - means) / scales, means, scales


def fit_ols(
    x: np.ndarray,
    y: np.ndarray,
    terms: Optional[Sequence[Term]] = None,
    names: Optional[Sequence[str]] = None,
    *,
    standardize: bool = True,
) -> RegressionModel:
    """Least-squares fit of the term set over predictors x (n rows, q cols).

    Uses a QR decomposition; standard errors come from the residual variance
    and the (X^T X)^-1 diagonal, p-values from the t-distribution via the
    regularized incomplete beta function.  Raises RankDeficientError naming
    the collinear terms when the design loses rank.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    n, q = x.shape
    if y.size != n:
        raise ValueError(f"y has {y.size} rows, x has {n}")
    if names is None:
        names = [f"x{i + 1}" for i in range(q)]
    names = list(names)
    if terms is None:
        terms = linear_term_set(q)
    terms = list(terms)

    if standardize:
        x_std, means, scales = _standardize(x)
    else:
        x_std, means, scales = x.copy(), np.zeros(q), np.ones(q)
    design = _build_design(x_std, terms)
    m = design.shape[1]
    if n < m + 1:
        raise ValueError(f"need at least {m + 1} rows to fit {m} terms, got {n}")

    # Rank check with column pivoting so failures can name the culprits.
    _q, r_piv, piv = scipy_qr(design, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r_piv))
    tol = max(n, m) * np.finfo(float).eps * (diag[0] if diag.size else 0.0)
    rank = int(np.sum(diag > tol))
    if rank < m:
        bad = [terms[piv[k]].label(names) for k in range(rank, m)]
        raise RankDeficientError(bad)

    q_mat, r_mat = np.linalg.qr(design)
    coef = solve_triangular(r_mat, q_mat.T @ y)
    resid = y - design @ coef
    ssr = float(resid @ resid)
    sst = float(np.sum((y - y.mean()) ** 2))
    df_resid = n - m
    sigma2 = ssr / df_resid if df_resid > 0 else math.nan
    r_inv = solve_triangular(r_mat, np.eye(m))
    xtx_inv_diag = np.sum(r_inv**2, axis=1)
    std_err = np.sqrt(sigma2 * xtx_inv_diag)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_stat = np.where(std_err > 0, coef / std_err, np.inf)
    p_value = _two_sided_p(t_stat, df_resid)
    r_squared = 1.0 - ssr / sst if sst > 0 else 0.0

    return RegressionModel(
        terms=terms, predictor_names=names, coef=coef, std_err=std_err,
        t_stat=t_stat, p_value=p_value, r_squared=float(r_squared),
        df_resid=df_resid, sigma2=sigma2, means=means, scales=scales,
    )


# ---------------------------------------------------------------------------
# Stepwise selection
# ---------------------------------------------------------------------------

def _hierarchy_ok(candidate: Term, current: Sequence[Term]) -> bool:
    if candidate.kind in ("intercept", "linear"):
        return True
    present = {t.i for t in current if t.kind == "linear"}
    return all(v in present for v in candidate.variables())


def _removable(term: Term, current: Sequence[Term]) -> bool:
    if term.kind == "intercept":
        return False
    if term.kind != "linear":
        return True
    for other in current:
        if other is term or other.kind in ("intercept", "linear"):
            continue
        if term.i in other.variables():
            return False
    return True


def stepwise_fit(
    x: np.ndarray,
    y: np.ndarray,
    candidates: Optional[Sequence[Term]] = None,
    names: Optional[Sequence[str]] = None,
    *,
    p_enter: float = 0.05,
    p_remove: float = 0.10,
    max_steps: int = 200,
) -> RegressionModel:
    """Forward/backward stepwise term selection by coefficient p-values.

    Forward steps add the eligible candidate with the smallest p-value when it
    is below ``p_enter``; backward steps drop the worst removable term with
    p-value above ``p_remove``.  Quadratic and interaction terms may enter
    only while their parent linear terms are present (and parents cannot leave
    before their children).  Iterates to a fixed point, capped at
    ``max_steps`` passes (the returned model is flagged if the cap is hit).
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n, q = x.shape
    if candidates is None:
        candidates = full_term_set(q)
    candidates = [t for t in candidates if t.kind != "intercept"]
    if not candidates:
        raise ValueError("need at least one candidate term beyond the intercept")
    if names is None:
        names = [f"x{i + 1}" for i in range(q)]
    names = list(names)

    current: list = [Term("intercept")]
    history: list = []
    converged = False

    def try_fit(term_list):
        try:
            return fit_ols(x, y, term_list, names)
        except (RankDeficientError, ValueError):
            return None

    for _step in range(max_steps):
        changed = False

        # Forward pass
        best_term = None
        best_p = math.inf
        for cand in candidates:
            if cand in current or not _hierarchy_ok(cand, current):
                continue
            model = try_fit(current + [cand])
            if model is None:
                continue
            p = float(model.p_value[-1])
            if p < best_p:
                best_p = p
                best_term = cand
        if best_term is not None and best_p < p_enter:
            current.append(best_term)
            history.append(f"add {best_term.label(names)} (p={best_p:.3g})")
            changed = True

        # Backward pass
        if len(current) > 1:
            model = try_fit(current)
            if model is None:
                # The current model lost rank (should not happen via forward
                # steps); drop the newest term as a recovery.
                dropped = current.pop()
                history.append(f"drop {dropped.label(names)} (rank recovery)")
                changed = True
            else:
                worst_p = -math.inf
                worst_idx = None
                for k, t in enumerate(model.terms):
                    if not _removable(t, model.terms):
                        continue
                    if float(model.p_value[k]) > worst_p:
                        worst_p = float(model.p_value[k])
                        worst_idx = k
                if worst_idx is not None and worst_p > p_remove:
                    dropped = current.pop(current.index(model.terms[worst_idx]))
                    history.append(f"remove {dropped.label(names)} (p={worst_p:.3g})")
                    changed = True

        if not changed:
            converged = True
            break

    final = fit_ols(x, y, current, names)
    final.entry_history = history
    final.converged = converged
    return final


# ---------------------------------------------------------------------------
# Relative importance (general dominance)
# ---------------------------------------------------------------------------

def _r2_projection(design: np.ndarray, y: np.ndarray) -> float:
    """R^2 of a least-squares projection, tolerant of rank deficiency."""
    coef, _res, _rank, _sv = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ coef
    ssr = float(resid @ resid)
    sst = float(np.sum((y - y.mean()) ** 2))
    return 1.0 - ssr / sst if sst > 0 else 0.0


def relative_importance(
    model: RegressionModel,
    x: np.ndarray,
    y: np.ndarray,
    *,
    method: str = "dominance",
) -> dict:
    """Per-predictor shares of the model R^2.

    ``dominance`` (default): general-dominance/Shapley decomposition over
    predictor groups, where a group bundles the linear, quadratic, and
    interaction terms involving that predictor, and a term enters a subset
    model only when all its predictors are present.  Shares sum to the full
    model R^2.  ``sequential`` adds groups in model order and attributes the
    incremental R^2 (documented fallback for > 15 groups).
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    groups = model.predictor_groups()
    names = model.predictor_names
    if not groups:
        return {}
    x_std = (x - model.means) / model.scales

    def design_for(subset: frozenset) -> np.ndarray:
        terms = [t for t in model.terms
                 if all(v in subset for v in t.variables())]
        return _build_design(x_std, terms)

    if method == "sequential":
        shares = {}
        prev_r2 = 0.0
        included: set = set()
        for g in groups:
            included.add(g)
            r2 = _r2_projection(design_for(frozenset(included)), y)
            shares[names[g]] = r2 - prev_r2
            prev_r2 = r2
        return shares
    if method != "dominance":
        raise ValueError(f"unknown importance method {method!r}")
    if len(groups) > 15:
        raise ValueError(
            f"{len(groups)} predictor groups exceeds the subset-enumeration "
            "bound of 15; use method='sequential' as a documented fallback"
        )

    cache: dict = {}

    def r2_of(subset: frozenset) -> float:
        hit = cache.get(subset)
        if hit is None:
            hit = _r2_projection(design_for(subset), y)
            cache[subset] = hit
        return hit

    g_count = len(groups)
    fact = [math.factorial(k) for k in range(g_count + 1)]
    shares = {names[g]: 0.0 for g in groups}
    for g in groups:
        others = [h for h in groups if h != g]
        for r in range(len(others) + 1):
            weight = fact[r] * fact[g_count - 1 - r] / fact[g_count]
            for combo in itertools.combinations(others, r):
                base = frozenset(combo)
                gain = r2_of(base | {g}) - r2_of(base)
                shares[names[g]] += weight * gain
    return shares


@dataclass
class ParetoReport:
    """Importance ranking with the cumulative R^2 line."""

    rows: list  # (name, share, cumulative)
    r_squared: float

    def to_csv_rows(self) -> list:
        out = [("rank", "predictor", "share", "cumulative_r2")]
        for rank, (name, share, cum) in enumerate(self.rows, start=1):
            out.append((rank, name, repr(share), repr(cum)))
        return out

    def format_text(self) -> str:
        lines = [f"{'rank':<6}{'predictor':<24}{'share':>12}{'cum R^2':>12}"]
        for rank, (name, share, cum) in enumerate(self.rows, start=1):
            lines.append(f"{rank:<6}{name:<24}{share:>12.5f}{cum:>12.5f}")
        lines.append(f"{'':<6}{'model R^2':<24}{self.r_squared:>24.5f}")
        return "\n".join(lines)


def pareto_report(model: RegressionModel, importance: dict) -> ParetoReport:
    """Rank predictors by share and accumulate the cumulative R^2 line."""
    ordered = sorted(importance.items(), key=lambda kv: -kv[1])
    rows = []
    cum = 0.0
    for name, share in ordered:
        cum += share
        rows.append((name, share, cum))
    return ParetoReport(rows=rows, r_squared=model.r_squared)


# ---------------------------------------------------------------------------
# Predictors / responses of one module simulation
# ---------------------------------------------------------------------------

BASIC_PREDICTORS = (
    "r_int", "sp", "mu_eps_n", "mu_eps_p", "sigma_eps_n", "sigma_eps_p", "loc",
)
EXTENDED_PREDICTORS = (
    "r_int", "sp", "mu_comb", "sigma_comb", "loc_n", "loc_p",
    "mu_soc", "sigma_soc", "delta_t_max",
)
RESPONSE_COLUMNS = {
    "sigma_i": "sigma_i",
    "sigma_t": "sigma_t",
    "dtmax": "delta_t_max",
    "dq": "pct_delta_q",
    "de": "pct_delta_e",
    "elost": "e_lost",
    "sigma_rsei": "sigma_r_sei",
}


@dataclass(frozen=True)
class PredictorSet:
    """Module-level regression inputs (values, not time series)."""

    mu_eps_n: float
    mu_eps_p: float
    sigma_eps_n: float
    sigma_eps_p: float
    loc: float
    r_int: float
    sp: float
    mu_comb: float
    sigma_comb: float
    loc_n: float
    loc_p: float
    mu_soc: float
    sigma_soc: float
    delta_t_max: float
    degenerate_normalization: bool = False

    def as_dict(self) -> dict:
        return {
            "mu_eps_n": self.mu_eps_n, "mu_eps_p": self.mu_eps_p,
            "sigma_eps_n": self.sigma_eps_n, "sigma_eps_p": self.sigma_eps_p,
            "loc": self.loc, "r_int": self.r_int, "sp": self.sp,
            "mu_comb": self.mu_comb, "sigma_comb": self.sigma_comb,
            "loc_n": self.loc_n, "loc_p": self.loc_p,
            "mu_soc": self.mu_soc, "sigma_soc": self.sigma_soc,
            "delta_t_max": self.delta_t_max,
        }


@dataclass(frozen=True)
class ResponseSet:
    """Module-level regression outputs; percent deltas need a reference."""

    sigma_i: float
    sigma_t: float
    delta_t_max: float
    pct_delta_e: Optional[float]
    pct_delta_q: Optional[float]
    e_lost: float
    sigma_r_sei: float

    def as_dict(self) -> dict:
        return {
            "sigma_i": self.sigma_i, "sigma_t": self.sigma_t,
            "delta_t_max": self.delta_t_max,
            "pct_delta_e": self.pct_delta_e, "pct_delta_q": self.pct_delta_q,
            "e_lost": self.e_lost, "sigma_r_sei": self.sigma_r_sei,
        }


def position_weights(n_p: int) -> np.ndarray:
    """Location-index weights over 1-based positions (terminal side first)."""
    w = np.empty(n_p)
    half = n_p / 2.0
    for idx in range(n_p):
        pos = idx + 1
        w[idx] = (half + 1.0) - pos if pos <= half else half - pos
    return w


def _normalize_eps(values: np.ndarray, bounds) -> tuple:
    """Map eps values onto [0, 1]; degenerate domains pin everything at 0.5."""
    if bounds is not None:
        lo, hi = bounds
    else:
        lo, hi = float(np.min(values)), float(np.max(values))
    if hi > lo:
        return np.clip((values - lo) / (hi - lo), 0.0, 1.0), False
    return np.full(values.shape, 0.5), True


def compute_predictors(cfg: ModuleConfig, trace: SimTrace) -> PredictorSet:
    """All regression predictors of one module from its config and trace.

    eps values are normalized over the sampling interval recorded in the
    config (falling back to the module's own min-max when absent, with the
    all-equal case pinned at 0.5 and flagged).
    """
    eps_n = np.array([c.eps_s_n for c in cfg.cells])
    eps_p = np.array([c.eps_s_p for c in cfg.cells])
    norm_n, degen_n = _normalize_eps(eps_n, cfg.eps_bounds_n)
    norm_p, degen_p = _normalize_eps(eps_p, cfg.eps_bounds_p)
    comb = np.minimum(norm_n, norm_p)
    w = position_weights(cfg.n_p)

    summary = trace.summaries[0]
    eod = np.asarray(summary.eod_soc, dtype=float)
    if eod.size != cfg.n_p:
        raise ValueError("trace lacks an end-of-discharge SOC vector")

    return PredictorSet(
        mu_eps_n=float(np.mean(eps_n)),
        mu_eps_p=float(np.mean(eps_p)),
        sigma_eps_n=float(np.std(eps_n, ddof=1)),
        sigma_eps_p=float(np.std(eps_p, ddof=1)),
        loc=float(w @ comb),
        r_int=float(cfg.r_int),
        sp=float(cfg.spacing),
        mu_comb=float(np.mean(comb)),
        sigma_comb=float(np.std(comb, ddof=1)),
        loc_n=float(w @ norm_n),
        loc_p=float(w @ norm_p),
        mu_soc=float(np.mean(eod)),
        sigma_soc=float(np.std(eod, ddof=1)),
        delta_t_max=float(summary.dt_max_k),
        degenerate_normalization=bool(degen_n or degen_p),
    )


def _windowed_sigma(trace: SimTrace, values: np.ndarray, t0: float,
                    t1: float) -> float:
    """Time-averaged across-cell standard deviation over [t0, t1]."""
    sl = trace.window(t0, t1)
    t = trace.t[sl]
    if t.size < 2:
        return 0.0
    stds = np.std(values[sl], axis=1, ddof=1)
    span = t[-1] - t[0]
    if span <= 0:
        return float(stds[0])
    return float(np.trapezoid(stds, t) / span)


def compute_responses(
    trace: SimTrace,
    reference: Optional[SimTrace] = None,
) -> ResponseSet:
    """All regression responses of one module simulation.

    Short-term quantities use the first cycle: the current/temperature
    standard deviations are trapezoid time averages over its CC discharge
    window, the maximum thermal gradient spans the whole cycle.  Long-term
    quantities compare the last cycle against the first.  Percent deltas are
    None when no reference trace is supplied.
    """
    first = trace.summaries[0]
    last = trace.summaries[-1]
    t0, t1 = first.t_discharge_start, first.t_discharge_end

    sigma_i = _windowed_sigma(trace, trace.i_branch, t0, t1)
    sigma_t = _windowed_sigma(trace, trace.t_cell, t0, t1)

    pct_de = pct_dq = None
    if reference is not None:
        ref = reference.summaries[0]
        if ref.e_mod_wh != 0.0:
            pct_de = 100.0 * (first.e_mod_wh - ref.e_mod_wh) / ref.e_mod_wh
        if ref.q_mod_ah != 0.0:
            pct_dq = 100.0 * (first.q_mod_ah - ref.q_mod_ah) / ref.q_mod_ah

    r_sei_end = np.asarray(last.r_sei_end, dtype=float)
    return ResponseSet(
        sigma_i=sigma_i,
        sigma_t=sigma_t,
        delta_t_max=float(first.dt_max_k),
        pct_delta_e=pct_de,
        pct_delta_q=pct_dq,
        e_lost=float(last.e_mod_wh - first.e_mod_wh),
        sigma_r_sei=float(np.std(r_sei_end, ddof=1)),
    )
