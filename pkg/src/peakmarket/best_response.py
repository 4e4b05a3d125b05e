"""Per-player optimal response machinery.

Water-filling allocations, the average-cost spreading analysis for
anytime peak pricing, capped greedy fills for coincident peak pricing
under deterministic baselines, and the KKT closed form for progressive
pricing under random baselines.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import (
    InfeasibleAllocationError,
    MarketInstance,
    ActionProfile,
    BaselineLoad,
)


class UnimodalityViolationError(RuntimeError):
    """The spreading function failed its unimodality certificate.

    Unreachable for valid inputs; firing indicates a bug.
    """


@dataclass(frozen=True, eq=False)
class SortedPriceView:
    """Periods permuted so ToU rates are ascending (stable within ties)."""

    order: np.ndarray
    sorted_rates: np.ndarray

    @classmethod
    def from_rates(cls, rates) -> "SortedPriceView":
        rates = np.asarray(rates, dtype=float)
        order = np.argsort(rates, kind="stable")
        return cls(order=order, sorted_rates=rates[order])

    def to_sorted(self, values) -> np.ndarray:
        return np.asarray(values, dtype=float)[self.order]

    def to_original(self, sorted_values) -> np.ndarray:
        out = np.empty_like(np.asarray(sorted_values, dtype=float))
        out[self.order] = sorted_values
        return out


@dataclass(frozen=True, eq=False)
class SpreadAnalysis:
    """Average cost h(t) of spreading evenly over the t cheapest periods.

    ``minimizer`` is the smallest minimizing width (a period count in
    1..T, not an index). ``h_values[k]`` is h(k+1).
    """

    h_values: np.ndarray
    minimizer: int
    unimodal: bool


def _pi_vector(pi) -> np.ndarray:
    """Accept a plain vector or anything exposing a ``pi`` attribute."""
    return np.asarray(getattr(pi, "pi", pi), dtype=float)


def water_fill_capped(r: float, m: float, n_periods: int) -> np.ndarray:
    """Fill periods in order up to level ``m`` until ``r`` is allocated.

    Returns the allocation in fill order: ``a[t] = clip(min(m, r - m*t), 0, m)``.
    The entries sum to ``r``; no entry exceeds ``m``.
    """
    if r <= 0:
        raise ValueError("requirement must be positive")
    if m <= 0:
        raise ValueError("cap must be positive")
    if m * n_periods < r * (1 - 1e-12):
        raise InfeasibleAllocationError(
            f"cap {m:.12g} over {n_periods} periods cannot hold requirement {r:.12g}"
        )
    t = np.arange(n_periods, dtype=float)
    return np.clip(r - m * t, 0.0, m)


def greedy_fill_under_caps(total: float, caps, prices) -> np.ndarray:
    """Cheapest-first allocation of ``total`` under per-period caps.

    Minimizes the ToU bill for a fixed total: linear objective, box
    constraints, so the greedy ascending-price fill is optimal.
    """
    caps = np.maximum(np.asarray(caps, dtype=float), 0.0)
    view = SortedPriceView.from_rates(prices)
    caps_sorted = caps[view.order]
    filled = np.zeros_like(caps_sorted)
    remaining = float(total)
    for k in range(caps_sorted.size):
        if remaining <= 0:
            break
        take = min(remaining, caps_sorted[k])
        filled[k] = take
        remaining -= take
    if remaining > 1e-9 * max(1.0, abs(total)):
        raise InfeasibleAllocationError(
            f"capacity {caps.sum():.12g} cannot hold requirement {total:.12g}"
        )
    return view.to_original(filled)


def spread_analysis(instance: MarketInstance) -> SpreadAnalysis:
    """Evaluate h(t) = (demand_rate + sum of t cheapest rates) / t.

    Certifies the one-valley shape (h nonincreasing then nondecreasing)
    and returns the smallest minimizing width. Under the rate assumption
    the minimizer is always T.
    """
    view = SortedPriceView.from_rates(instance.tou_rates)
    widths = np.arange(1, instance.n_periods + 1, dtype=float)
    h = (instance.demand_rate + np.cumsum(view.sorted_rates)) / widths
    slack = 1e-9 * max(1.0, float(np.abs(h).max()))
    for t in range(instance.n_periods - 2):
        if h[t] <= h[t + 1] and h[t + 1] > h[t + 2] + slack:
            raise UnimodalityViolationError(
                f"h rose at width {t + 2} then fell at width {t + 3}"
            )
    return SpreadAnalysis(h_values=h, minimizer=int(np.argmin(h)) + 1, unimodal=True)


def best_response_ap(i: int, instance: MarketInstance) -> np.ndarray:
    """Optimal action under anytime peak pricing: spread evenly over all periods.

    Unique optimum under the rate assumption; independent of opponents
    and of the baseline load.
    """
    instance.require_assumption()
    r_i = instance.requirements[i]
    return np.full(instance.n_periods, r_i / instance.n_periods)


def best_response_deterministic_cp(
    i: int,
    profile: ActionProfile,
    baseline: BaselineLoad,
    instance: MarketInstance,
    peak_cap: float,
) -> np.ndarray:
    """Cheapest fill of player ``i``'s requirement under a peak cap.

    Allocates up to ``peak_cap - baseline - others`` per period, cheapest
    period first (row ``i`` of ``profile`` is ignored). Raises if the cap
    leaves insufficient headroom; the caller then raises the cap.
    """
    if profile.n_periods != baseline.n_periods:
        raise InfeasibleAllocationError("profile and baseline period counts differ")
    others = profile.total_load() - profile.consumption[i]
    headroom = peak_cap - baseline.loads - others
    return greedy_fill_under_caps(
        float(instance.requirements[i]), headroom, instance.tou_rates
    )


def best_response_cp_random(i: int, pi, instance: MarketInstance) -> np.ndarray:
    """Optimal action under CP with an action-independent peak-period law.

    The expected bill is linear with per-period coefficient
    ``tou_rate + demand_rate * pi``, so all consumption goes to the
    earliest period minimizing that coefficient.
    """
    probs = _pi_vector(pi)
    if np.any(probs < 0):
        raise ValueError("peak-period probabilities must be nonnegative")
    coeff = instance.tou_rates + instance.demand_rate * probs
    action = np.zeros(instance.n_periods)
    action[int(np.argmin(coeff))] = instance.requirements[i]
    return action


def best_response_pp_random(i: int, pi, instance: MarketInstance) -> np.ndarray:
    """KKT allocation under progressive pricing with action-independent peaks.

    Minimizes ``sum_t pi[t] * a[t]**delta`` subject to the requirement:
    allocations are proportional to ``pi**(-1/(delta-1))``. Any period
    with zero peak probability absorbs everything (earliest such period).
    """
    probs = _pi_vector(pi)
    if np.any(probs < 0):
        raise ValueError("peak-period probabilities must be nonnegative")
    if instance.delta == 1:
        raise ValueError("delta = 1 is plain CP; use best_response_cp_random")
    r_i = instance.requirements[i]
    action = np.zeros(instance.n_periods)
    zero = np.flatnonzero(probs == 0)
    if zero.size:
        action[zero[0]] = r_i
        return action
    # exp-normalized weights: pi**(-1/(d-1)) overflows for delta near 1
    log_w = -np.log(probs) / (instance.delta - 1.0)
    w = np.exp(log_w - log_w.max())
    return r_i * w / w.sum()
