"""Cell-arrangement strategy: place higher-capacity cells nearer the module
terminals, where the accumulated interconnection resistance is lowest, and
quantify the effect on current/thermal uniformity and long-term aging."""

from __future__ import annotations

import dataclasses
import itertools
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .module_solver import SimProfile, run_protocol
from .params import ConfigError, ModuleConfig, capacity_from_eps
from .stats import compute_responses

__all__ = [
    "cell_capacity_ah",
    "arrange_descending_capacity",
    "ArrangementComparison",
    "compare_arrangements",
]


def cell_capacity_ah(cell) -> float:
    """Cell capacity [Ah] from the limiting (weakest) electrode."""
    return min(
        capacity_from_eps(cell.eps_s_n, "n"),
        capacity_from_eps(cell.eps_s_p, "p"),
    )


def arrange_descending_capacity(cells: Sequence) -> list:
    """Stable descending-capacity permutation (0-based original indices).

    Position 0 of the result is placed nearest the module terminals; ties
    keep their original relative order.
    """
    if len(cells) < 2:
        raise ConfigError("need at least two cells to arrange")
    capacities = [cell_capacity_ah(c) for c in cells]
    return sorted(range(len(cells)), key=lambda i: (-capacities[i], i))


@dataclass(frozen=True)
class ArrangementComparison:
    """Response pairing between the baseline cell order and a permutation."""

    baseline_order: tuple
    proposed_order: tuple
    baseline: dict  # sigma_i, delta_t_max, e_lost, sigma_r_sei
    proposed: dict
    relative_change: dict  # (proposed - baseline) / |baseline|

    @staticmethod
    def _pick(responses) -> dict:
        return {
            "sigma_i": responses.sigma_i,
            "delta_t_max": responses.delta_t_max,
            "e_lost": responses.e_lost,
            "sigma_r_sei": responses.sigma_r_sei,
        }

    @classmethod
    def build(cls, baseline_order, proposed_order, base_resp, prop_resp):
        base = cls._pick(base_resp)
        prop = cls._pick(prop_resp)
        rel = {}
        for key in base:
            denom = abs(base[key])
            rel[key] = (prop[key] - base[key]) / denom if denom > 0 else 0.0
        return cls(
            baseline_order=tuple(baseline_order),
            proposed_order=tuple(proposed_order),
            baseline=base, proposed=prop, relative_change=rel,
        )


def _responses_for_order(cfg: ModuleConfig, order, n_cycles, profile):
    run_cfg = cfg.reordered(list(order))
    if n_cycles is not None:
        run_cfg = dataclasses.replace(run_cfg, n_cycles=n_cycles)
    trace = run_protocol(run_cfg, profile)
    return compute_responses(trace)


def compare_arrangements(
    cfg: ModuleConfig,
    orders: Sequence[Sequence[int]],
    n_cycles: Optional[int] = None,
    *,
    profile: Optional[SimProfile] = None,
    workers: int = 1,
) -> list:
    """Simulate the baseline order and each permutation with identical cells.

    Returns one ArrangementComparison per entry of ``orders`` (0-based
    permutations of the baseline cell list), aggregated in input order.
    """
    identity = list(range(cfg.n_p))
    jobs = [identity] + [list(o) for o in orders]
    for o in jobs:
        if sorted(o) != identity:
            raise ConfigError(f"not a valid permutation: {o}")
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(_responses_for_order, cfg, o, n_cycles, profile)
                for o in jobs
            ]
            all_resp = [f.result() for f in futures]
    else:
        all_resp = [_responses_for_order(cfg, o, n_cycles, profile)
                    for o in jobs]
    base_resp = all_resp[0]
    return [
        ArrangementComparison.build(identity, order, base_resp, resp)
        for order, resp in zip(jobs[1:], all_resp[1:])
    ]


def all_orders(n_p: int) -> list:
    """Every permutation of n_p positions (brute-force enumeration)."""
    if n_p > 6:
        raise ConfigError("exhaustive enumeration is limited to n_p <= 6")
    return [list(p) for p in itertools.permutations(range(n_p))]
