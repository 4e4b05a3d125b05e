"""Equilibrium peak demand: closed forms, constructive near-equilibrium
profiles, and verification of candidate profiles against deviation bounds.

Deterministic baselines use the closed forms directly. Distributions with
an exact peak-period law and equal support maxima use the stochastic
closed forms. Everything else takes the Monte Carlo route, whose output
is a heuristic lower bound on the true worst-case equilibrium peak and is
labeled ``method="monte-carlo"``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations
from typing import Optional

import numpy as np
from scipy import optimize

from .baselines import (
    BaselineScenario,
    ConditionalUniformSpec,
    DistributionSpec,
    closed_form_peaks_condition_10_11,
    peak_probabilities,
    sample_many,
    support_max,
)
from .best_response import (
    best_response_ap,
    best_response_cp_random,
    best_response_pp_random,
    greedy_fill_under_caps,
)
from .model import (
    ActionProfile,
    BaselineLoad,
    DimensionMismatchError,
    InfeasibleAllocationError,
    MarketInstance,
    MECHANISMS,
    mechanism_cost,
)
from .streams import Stream

_DEFAULT_EPSILONS = (1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6)


@dataclass(frozen=True)
class EpsilonSchedule:
    """Strictly decreasing positive tolerances approximating the exact-
    equilibrium limit."""

    values: tuple = _DEFAULT_EPSILONS
    extrapolation: str = "last-value"

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        if not vals or any(v <= 0 for v in vals):
            raise ValueError("epsilon values must be positive")
        if any(a <= b for a, b in zip(vals, vals[1:])):
            raise ValueError("epsilon values must be strictly decreasing")
        if self.extrapolation not in ("none", "last-value"):
            raise ValueError("extrapolation must be 'none' or 'last-value'")
        object.__setattr__(self, "values", vals)

    @property
    def final(self) -> float:
        return self.values[-1]


@dataclass(frozen=True, eq=False)
class EquilibriumReport:
    mechanism: str
    peak: float
    method: str  # closed-form | constructive | monte-carlo
    epsilon_schedule: EpsilonSchedule
    witness_profile: Optional[ActionProfile] = None
    witness_baseline: Optional[BaselineLoad] = None


@dataclass(frozen=True)
class DeltaGap:
    """Spare baseline headroom: sum of (b_max - b_t) minus total requirement.

    A positive value means the flexible load fits entirely below the
    baseline maximum; its sign selects the construction branch.
    """

    value: float
    b_max: float
    t_max: int
    periods_at_max: tuple


def delta_gap(instance: MarketInstance, baseline: BaselineLoad) -> DeltaGap:
    if baseline.n_periods != instance.n_periods:
        raise DimensionMismatchError("baseline and instance period counts differ")
    b = baseline.loads
    b_max = float(b.max())
    at_max = tuple(int(t) for t in np.flatnonzero(b == b_max))
    value = float((b_max - b).sum() - instance.requirements.sum())
    return DeltaGap(value, b_max, at_max[0], at_max)


def closed_form_peak_ap_deterministic(
    instance: MarketInstance, baseline: BaselineLoad
) -> float:
    """max baseline plus the evenly spread total requirement."""
    instance.require_assumption()
    if baseline.n_periods != instance.n_periods:
        raise DimensionMismatchError("baseline and instance period counts differ")
    return float(baseline.loads.max() + instance.requirements.sum() / instance.n_periods)


def closed_form_peak_cp_deterministic(
    instance: MarketInstance, baseline: BaselineLoad
) -> float:
    """max(baseline peak, flat fill of baseline energy plus requirements)."""
    instance.require_assumption()
    if baseline.n_periods != instance.n_periods:
        raise DimensionMismatchError("baseline and instance period counts differ")
    flat = (baseline.loads.sum() + instance.requirements.sum()) / instance.n_periods
    return float(max(baseline.loads.max(), flat))


def closed_form_peak_pp_deterministic(
    instance: MarketInstance, baseline: BaselineLoad
) -> float:
    """Identical to the CP value for every exponent delta >= 1."""
    return closed_form_peak_cp_deterministic(instance, baseline)


def construct_cp_profile_deterministic(
    instance: MarketInstance, baseline: BaselineLoad, epsilon: float
) -> ActionProfile:
    """Near-equilibrium profile under coincident peak pricing.

    Positive gap: players sequentially water-fill the off-peak periods,
    each kept a small margin below the baseline maximum, so nobody incurs
    a demand charge. Nonpositive gap: loads are equalized across periods
    with a small surplus on the first baseline-maximum period so the
    charged period is unambiguous.

    Raises when ``epsilon`` is too large for the margins to stay feasible.
    """
    instance.require_assumption()
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    gap = delta_gap(instance, baseline)
    n, t = instance.n_players, instance.n_periods
    p_top = float(instance.tou_rates.max())
    req = instance.requirements
    b = baseline.loads

    if gap.value > 0:
        eta = epsilon / (t * p_top) if p_top > 0 else min(epsilon, gap.value / (2 * t))
        if gap.value <= t * eta:
            raise InfeasibleAllocationError(
                "epsilon too large for the off-peak margins; need "
                f"epsilon < {gap.value * p_top:.6g}"
            )
        off_peak = [s for s in range(t) if s not in gap.periods_at_max]
        order = sorted(off_peak, key=lambda s: (instance.tou_rates[s], s))
        rows = np.zeros((n, t))
        remaining = req.astype(float).copy()
        player = 0
        for s in order:
            capacity = gap.b_max - b[s] - eta
            while capacity > 0 and player < n:
                take = min(remaining[player], capacity)
                rows[player, s] += take
                remaining[player] -= take
                capacity -= take
                if remaining[player] <= 1e-12 * max(1.0, req[player]):
                    remaining[player] = 0.0
                    player += 1
        if player < n:
            raise InfeasibleAllocationError(
                "off-peak capacity exhausted before all requirements were placed; "
                "choose a smaller epsilon"
            )
        return ActionProfile(rows, req)

    eta = epsilon / (2 * (instance.demand_rate + p_top))
    shares = req / req.sum()
    base = gap.b_max - b - (gap.value + eta) / t
    base = base.copy()
    base[gap.t_max] += eta
    if base.min() < -1e-12 * max(1.0, gap.b_max):
        raise InfeasibleAllocationError(
            "equalized profile has a negative entry; choose a smaller epsilon "
            "(with duplicated baseline maxima and zero gap no epsilon works)"
        )
    rows = np.outer(shares, np.maximum(base, 0.0))
    return ActionProfile(rows, req)


@dataclass(frozen=True)
class VerificationResult:
    """Outcome of an epsilon-equilibrium check.

    ``certified`` is True only in exact mode, where the deviation value is
    a sound lower bound; grid and Monte Carlo searches may miss deviations.
    """

    holds: bool
    worst_gain: float
    deviating_player: Optional[int]
    certified: bool
    mode: str


def _deviation_floor_capped(
    i: int,
    profile: ActionProfile,
    baseline: BaselineLoad,
    instance: MarketInstance,
    exponent: float,
) -> float:
    """Infimum of player i's deviation cost under favorable tie-breaking.

    With opponents fixed, their load plus the baseline reaches level M at
    the earliest period t_m. Raising the peak by x >= 0 costs a demand
    charge on x at t_m plus the cheapest fill of the remainder below that
    level; x = 0 is the stay-under-the-cap branch. The objective is convex
    in x, so a bounded scalar minimization is exact.
    """
    others = baseline.loads + profile.total_load() - profile.consumption[i]
    level = float(others.max())
    t_m = int(np.argmax(others))
    headroom = level - others  # zero at t_m
    r_i = float(instance.requirements[i])
    prices = instance.tou_rates
    p_d = instance.demand_rate
    x_lo = max(0.0, (r_i - float(headroom.sum())) / instance.n_periods)

    mask = np.ones(instance.n_periods, dtype=bool)
    mask[t_m] = False

    def cost(x: float) -> float:
        x = min(max(x, x_lo), r_i)
        rest = max(r_i - x, 0.0)
        caps = headroom[mask] + x
        try:
            fill = greedy_fill_under_caps(rest, caps, prices[mask])
        except InfeasibleAllocationError:
            return math.inf
        return p_d * x**exponent + prices[t_m] * x + float(prices[mask] @ fill)

    best = min(cost(x_lo), cost(r_i))
    if x_lo < r_i:
        res = optimize.minimize_scalar(
            cost, bounds=(x_lo, r_i), method="bounded", options={"xatol": 1e-11}
        )
        best = min(best, float(res.fun))
    return best


def _pp_random_floor(
    r_i: float, prices: np.ndarray, p_d: float, delta: float, pi: np.ndarray
) -> float:
    """Exact minimum expected cost under an action-independent peak law.

    Solves min sum p*a + p_d * sum pi * a**delta via the stationarity
    condition, bisecting the multiplier of the requirement constraint.
    Zero-probability periods act as demand-free capacity.
    """
    positive = pi > 0
    zero_price = float(prices[~positive].min()) if np.any(~positive) else None

    def alloc(nu: float) -> np.ndarray:
        a = np.zeros_like(prices)
        excess = np.maximum(nu - prices[positive], 0.0)
        a[positive] = (excess / (delta * p_d * pi[positive])) ** (1.0 / (delta - 1.0))
        return a

    def total(nu: float) -> float:
        return float(alloc(nu).sum())

    nu_hi = float(
        prices.max() + delta * p_d * pi.max() * max(r_i, 1.0) ** (delta - 1.0) + 1.0
    )
    if zero_price is not None and total(zero_price) < r_i:
        a = alloc(zero_price)
        rest = r_i - float(a.sum())
        cheapest_zero = int(
            np.flatnonzero(~positive)[np.argmin(prices[~positive])]
        )
        a = a.copy()
        a[cheapest_zero] += rest
        return float(prices @ a + p_d * (pi * a**delta).sum())
    nu_cap = zero_price if zero_price is not None else nu_hi
    if total(nu_cap) < r_i:
        nu_cap = nu_hi
    nu = optimize.brentq(lambda v: total(v) - r_i, float(prices.min()), nu_cap)
    a = alloc(nu)
    a *= r_i / a.sum()
    return float(prices @ a + p_d * (pi * a**delta).sum())


def _expected_cost_known_pi(
    i: int,
    profile: ActionProfile,
    instance: MarketInstance,
    mechanism: str,
    pi: np.ndarray,
) -> float:
    a_i = profile.consumption[i]
    tou = float(instance.tou_rates @ a_i)
    if mechanism == "AP":
        return tou + instance.demand_rate * float(a_i.max())
    if mechanism == "CP":
        return tou + instance.demand_rate * float(pi @ a_i)
    return tou + instance.demand_rate * float(pi @ a_i**instance.delta)


def _simplex_grid(total: float, n_parts: int, steps: int) -> np.ndarray:
    """All splits of ``total`` into ``n_parts`` multiples of total/steps."""
    rows = []
    for dividers in combinations(range(steps + n_parts - 1), n_parts - 1):
        prev = -1
        counts = []
        for d in dividers:
            counts.append(d - prev - 1)
            prev = d
        counts.append(steps + n_parts - 2 - prev)
        rows.append(counts)
    return np.asarray(rows, dtype=float) * (total / steps)


def _grid_steps_for_budget(n_parts: int, max_points: int) -> int:
    steps = 1
    while math.comb(steps + n_parts, n_parts - 1) <= max_points:
        steps += 1
    return steps


def _candidate_costs_deterministic(
    candidates: np.ndarray,
    others: np.ndarray,
    baseline: np.ndarray,
    instance: MarketInstance,
    mechanism: str,
) -> np.ndarray:
    tou = candidates @ instance.tou_rates
    if mechanism == "AP":
        return tou + instance.demand_rate * candidates.max(axis=1)
    agg = baseline + others + candidates
    t_hat = np.argmax(agg, axis=1)
    charged = candidates[np.arange(candidates.shape[0]), t_hat]
    exponent = 1.0 if mechanism == "CP" else instance.delta
    return tou + instance.demand_rate * charged**exponent


def _candidate_costs_sampled(
    candidates: np.ndarray,
    others: np.ndarray,
    draws: np.ndarray,
    instance: MarketInstance,
    mechanism: str,
) -> np.ndarray:
    tou = candidates @ instance.tou_rates
    if mechanism == "AP":
        return tou + instance.demand_rate * candidates.max(axis=1)
    exponent = 1.0 if mechanism == "CP" else instance.delta
    n_cand = candidates.shape[0]
    out = np.empty(n_cand)
    base = draws + others  # (S, T)
    chunk = max(1, int(5e6 // max(draws.size, 1)))
    for start in range(0, n_cand, chunk):
        block = candidates[start : start + chunk]
        agg = base[None, :, :] + block[:, None, :]
        t_hat = np.argmax(agg, axis=2)
        charged = np.take_along_axis(
            np.broadcast_to(block[:, None, :], agg.shape), t_hat[:, :, None], axis=2
        )[:, :, 0]
        out[start : start + chunk] = instance.demand_rate * np.mean(
            charged**exponent, axis=1
        )
    return out + tou


def verify_epsilon_nash(
    profile: ActionProfile,
    scenario: BaselineScenario,
    instance: MarketInstance,
    epsilon: float,
    mode: str = "exact",
    mechanism: str = "CP",
    *,
    grid_steps: int = 20,
    grid_points: int = 1_000,
    samples: int = 10_000,
    stream: Optional[Stream] = None,
) -> VerificationResult:
    """Check whether no player can gain more than ``epsilon`` by deviating.

    Exact mode computes a sound lower bound on each player's best
    deviation cost (deterministic baselines via the favorable-tie-break
    water-filling branches; distributions via the closed-form responses,
    which assumes an action-independent peak-period law). Grid and
    Monte Carlo modes search finite candidate sets and may miss
    deviations, so a False ``certified`` flag accompanies them.
    """
    if mechanism not in MECHANISMS:
        raise ValueError(f"unknown mechanism {mechanism!r}")
    if mode not in ("exact", "grid", "monte-carlo"):
        raise ValueError("mode must be exact, grid or monte-carlo")
    deterministic = isinstance(scenario, BaselineLoad)

    gains = np.empty(instance.n_players)
    if mode == "exact":
        if deterministic:
            for i in range(instance.n_players):
                current = mechanism_cost(mechanism, i, profile, scenario, instance).total
                if mechanism == "AP":
                    action = best_response_ap(i, instance)
                    floor = float(
                        instance.tou_rates @ action
                        + instance.demand_rate * action.max()
                    )
                else:
                    exponent = 1.0 if mechanism == "CP" else instance.delta
                    floor = _deviation_floor_capped(
                        i, profile, scenario, instance, exponent
                    )
                gains[i] = current - floor
        else:
            pi = scenario.analytic_pi()
            if pi is None:
                raise ValueError(
                    "exact mode needs a deterministic baseline or a spec with an "
                    "analytically known peak-period law"
                )
            for i in range(instance.n_players):
                current = _expected_cost_known_pi(i, profile, instance, mechanism, pi)
                r_i = float(instance.requirements[i])
                if mechanism == "AP":
                    action = best_response_ap(i, instance)
                    floor = float(
                        instance.tou_rates @ action
                        + instance.demand_rate * action.max()
                    )
                elif mechanism == "CP" or instance.delta == 1:
                    coeff = instance.tou_rates + instance.demand_rate * pi
                    floor = float(coeff.min()) * r_i
                else:
                    floor = _pp_random_floor(
                        r_i, instance.tou_rates, instance.demand_rate,
                        instance.delta, pi,
                    )
                gains[i] = current - floor
        certified = True
    else:
        if deterministic:
            draws = None
            base_loads = scenario.loads
        else:
            if stream is None:
                stream = Stream(0, "verify")
            draws = sample_many(scenario, samples, stream)
            base_loads = None
        for i in range(instance.n_players):
            r_i = float(instance.requirements[i])
            others = profile.total_load() - profile.consumption[i]
            if mode == "grid":
                steps = grid_steps
            else:
                steps = _grid_steps_for_budget(instance.n_periods, grid_points)
            candidates = _simplex_grid(r_i, instance.n_periods, steps)
            candidates = np.vstack([candidates, profile.consumption[i][None, :]])
            if deterministic:
                costs = _candidate_costs_deterministic(
                    candidates, others, base_loads, instance, mechanism
                )
                current = mechanism_cost(mechanism, i, profile, scenario, instance).total
            else:
                costs = _candidate_costs_sampled(
                    candidates, others, draws, instance, mechanism
                )
                current = float(costs[-1])
            gains[i] = current - float(costs.min())
        certified = False

    worst = float(gains.max())
    player = int(np.argmax(gains)) if worst > 0 else None
    holds = worst <= epsilon * (1 + 1e-9) + 1e-12
    return VerificationResult(holds, worst, player, certified, mode)


def _uniform_profile(instance: MarketInstance) -> ActionProfile:
    rows = np.stack([best_response_ap(i, instance) for i in range(instance.n_players)])
    return ActionProfile(rows, instance.requirements)


def _concentrated_profile(instance: MarketInstance, period: int) -> ActionProfile:
    rows = np.zeros((instance.n_players, instance.n_periods))
    rows[:, period] = instance.requirements
    return ActionProfile(rows, instance.requirements)


def equilibrium_peak(
    instance: MarketInstance,
    scenario: BaselineScenario,
    mechanism: str,
    schedule: Optional[EpsilonSchedule] = None,
    *,
    samples: int = 100_000,
    stream: Optional[Stream] = None,
    verify_candidates: bool = True,
    verify_samples: int = 10_000,
    verify_points: int = 1_000,
) -> EquilibriumReport:
    """Worst-case equilibrium peak for one mechanism on one scenario.

    Deterministic scenarios and distributions with an exact peak-period
    law plus equal support maxima report closed forms. Other
    distributions report the largest realized peak of verified
    best-response candidates over the sampled support — a heuristic
    lower bound, labeled ``method="monte-carlo"``.
    """
    if mechanism not in MECHANISMS:
        raise ValueError(f"unknown mechanism {mechanism!r}")
    instance.require_assumption()
    if schedule is None:
        schedule = EpsilonSchedule()
    if stream is None:
        stream = Stream(0, f"equilibrium/{mechanism}")

    if isinstance(scenario, BaselineLoad):
        if mechanism == "AP":
            peak = closed_form_peak_ap_deterministic(instance, scenario)
            witness = _uniform_profile(instance)
        else:
            peak = closed_form_peak_cp_deterministic(instance, scenario)
            try:
                witness = construct_cp_profile_deterministic(
                    instance, scenario, schedule.final
                )
            except InfeasibleAllocationError:
                witness = None
        return EquilibriumReport(
            mechanism, peak, "closed-form", schedule, witness, scenario
        )

    exact_pi = scenario.analytic_pi()
    analytic_ok = exact_pi is not None and support_max(scenario).equal_supports
    if isinstance(scenario, ConditionalUniformSpec):
        # The peak-period law is action-independent only while the flexible
        # budget cannot bridge the gap between the two ranges.
        analytic_ok = analytic_ok and (
            float(instance.requirements.sum()) <= scenario.action_budget_limit
        )
    if analytic_ok:
        peaks = closed_form_peaks_condition_10_11(instance, scenario, exact_pi)
        if mechanism == "AP":
            peak, witness = peaks.ap, _uniform_profile(instance)
        elif mechanism == "CP" or instance.delta == 1:
            coeff = instance.tou_rates + instance.demand_rate * exact_pi
            peak = peaks.cp if mechanism == "CP" else peaks.pp
            witness = _concentrated_profile(instance, int(np.argmin(coeff)))
        else:
            peak = peaks.pp
            rows = np.stack(
                [
                    best_response_pp_random(i, exact_pi, instance)
                    for i in range(instance.n_players)
                ]
            )
            witness = ActionProfile(rows, instance.requirements)
        return EquilibriumReport(mechanism, peak, "closed-form", schedule, witness, None)

    return _monte_carlo_peak(
        instance,
        scenario,
        mechanism,
        schedule,
        samples=samples,
        stream=stream,
        verify_candidates=verify_candidates,
        verify_samples=verify_samples,
        verify_points=verify_points,
    )


def _monte_carlo_candidates(
    instance: MarketInstance, mechanism: str, pi: np.ndarray
) -> list[ActionProfile]:
    candidates = [_uniform_profile(instance)]
    if mechanism == "AP":
        return candidates
    if mechanism == "CP" or instance.delta == 1:
        coeff = instance.tou_rates + instance.demand_rate * pi
        candidates.insert(0, _concentrated_profile(instance, int(np.argmin(coeff))))
    else:
        rows = np.stack(
            [
                best_response_pp_random(i, pi, instance)
                for i in range(instance.n_players)
            ]
        )
        candidates.insert(0, ActionProfile(rows, instance.requirements))
    return candidates


def _monte_carlo_peak(
    instance: MarketInstance,
    scenario: DistributionSpec,
    mechanism: str,
    schedule: EpsilonSchedule,
    *,
    samples: int,
    stream: Stream,
    verify_candidates: bool,
    verify_samples: int,
    verify_points: int,
) -> EquilibriumReport:
    pi_est = peak_probabilities(scenario, samples, stream.child(0))
    candidates = _monte_carlo_candidates(instance, mechanism, pi_est.pi)

    if verify_candidates:
        kept = []
        for k, cand in enumerate(candidates):
            result = verify_epsilon_nash(
                cand,
                scenario,
                instance,
                schedule.values[0],
                mode="monte-carlo",
                mechanism=mechanism,
                grid_points=verify_points,
                samples=verify_samples,
                stream=stream.child(10 + k),
            )
            if result.holds:
                kept.append(cand)
        if kept:
            candidates = kept

    draws = sample_many(scenario, samples, stream.child(1))
    best_peak = -math.inf
    best_profile = None
    best_draw = None
    for cand in candidates:
        agg = draws + cand.total_load()
        idx = int(np.argmax(agg.max(axis=1)))
        peak = float(agg[idx].max())
        if peak > best_peak:
            best_peak, best_profile, best_draw = peak, cand, draws[idx]
    return EquilibriumReport(
        mechanism,
        best_peak,
        "monte-carlo",
        schedule,
        best_profile,
        BaselineLoad(best_draw),
    )


def monte_carlo_peak_stderr(
    instance: MarketInstance,
    scenario: DistributionSpec,
    profile: ActionProfile,
    samples: int,
    stream: Stream,
    batches: int = 10,
) -> tuple[float, float]:
    """Realized worst peak of a fixed profile plus a batch-based stderr.

    The draws are split into ``batches`` groups; the spread of per-batch
    maxima gives the Monte Carlo error bar used by the qualitative
    figure checks.
    """
    draws = sample_many(scenario, samples, stream)
    peaks = (draws + profile.total_load()).max(axis=1)
    parts = np.array_split(peaks, batches)
    batch_max = np.array([p.max() for p in parts])
    return float(peaks.max()), float(batch_max.std(ddof=1) / math.sqrt(batches))
