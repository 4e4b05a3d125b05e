"""Core market game primitives: instances, actions, baseline loads and costs.

Periods are indexed 0..T-1 throughout. All argmax tie-breaks pick the
earliest period and use exact floating-point comparison.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MECHANISMS = ("AP", "CP", "PP")

# Row-sum feasibility is checked with a small relative slack so that
# allocations assembled from clipped arithmetic still construct.
_FEAS_RTOL = 1e-9


class DimensionMismatchError(ValueError):
    """Profile, baseline and instance period counts disagree."""


class AssumptionViolatedError(ValueError):
    """Operation requires demand_rate > T * max(tou_rates)."""


class InfeasibleAllocationError(ValueError):
    """Requested allocation cannot satisfy its constraints."""


def _frozen_array(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class MarketInstance:
    """Game parameters: N players, T periods, rates and the PP exponent.

    Parameters
    ----------
    requirements : array-like of shape (N,)
        Per-player consumption requirements, all > 0.
    tou_rates : array-like of shape (T,)
        Time-of-use price per unit in each period, all >= 0.
    demand_rate : float
        Price per unit of demand-charged consumption, > 0.
    delta : float
        Progressive pricing exponent, >= 1. Use 1.0 for plain CP.
    """

    requirements: np.ndarray
    tou_rates: np.ndarray
    demand_rate: float
    delta: float = 1.0

    def __post_init__(self):
        req = _frozen_array(self.requirements)
        rates = _frozen_array(self.tou_rates)
        if req.ndim != 1 or req.size == 0:
            raise ValueError("requirements must be a non-empty 1-D vector")
        if rates.ndim != 1 or rates.size == 0:
            raise ValueError("tou_rates must be a non-empty 1-D vector")
        if not np.all(req > 0):
            raise ValueError("every requirement must be > 0")
        if not np.all(rates >= 0):
            raise ValueError("tou_rates must be nonnegative")
        if not np.isfinite(req).all() or not np.isfinite(rates).all():
            raise ValueError("instance parameters must be finite")
        if not (self.demand_rate > 0 and np.isfinite(self.demand_rate)):
            raise ValueError("demand_rate must be positive and finite")
        if not (self.delta >= 1 and np.isfinite(self.delta)):
            raise ValueError("delta must be >= 1")
        object.__setattr__(self, "requirements", req)
        object.__setattr__(self, "tou_rates", rates)
        object.__setattr__(self, "demand_rate", float(self.demand_rate))
        object.__setattr__(self, "delta", float(self.delta))

    @property
    def n_players(self) -> int:
        return self.requirements.size

    @property
    def n_periods(self) -> int:
        return self.tou_rates.size

    @property
    def assumption_violated(self) -> bool:
        """True when demand_rate <= T * max(tou_rates).

        Such instances are constructible for negative testing, but the
        closed-form equilibrium operations refuse them.
        """
        return not (self.demand_rate > self.n_periods * self.tou_rates.max())

    def require_assumption(self) -> None:
        if self.assumption_violated:
            raise AssumptionViolatedError(
                "instance violates demand_rate > T * max(tou_rates); "
                "closed-form equilibrium results do not apply"
            )


@dataclass(frozen=True, eq=False)
class ActionProfile:
    """N x T nonnegative consumption matrix meeting per-player requirements.

    Infeasible profiles (negative entries, or a row summing to less than
    its requirement) are rejected at construction.
    """

    consumption: np.ndarray
    requirements: np.ndarray

    def __post_init__(self):
        mat = _frozen_array(self.consumption)
        req = _frozen_array(self.requirements)
        if mat.ndim != 2:
            raise ValueError("consumption must be an N x T matrix")
        if req.ndim != 1 or req.size != mat.shape[0]:
            raise DimensionMismatchError(
                f"requirements has length {req.size}, expected {mat.shape[0]}"
            )
        if not np.isfinite(mat).all():
            raise ValueError("consumption entries must be finite")
        if np.any(mat < 0):
            raise ValueError("consumption entries must be nonnegative")
        row_sums = mat.sum(axis=1)
        slack = _FEAS_RTOL * np.maximum(1.0, np.abs(req))
        short = row_sums < req - slack
        if np.any(short):
            i = int(np.argmax(short))
            raise InfeasibleAllocationError(
                f"player {i} consumes {row_sums[i]:.12g} < requirement {req[i]:.12g}"
            )
        object.__setattr__(self, "consumption", mat)
        object.__setattr__(self, "requirements", req)

    @property
    def n_players(self) -> int:
        return self.consumption.shape[0]

    @property
    def n_periods(self) -> int:
        return self.consumption.shape[1]

    def total_load(self) -> np.ndarray:
        """Aggregate flexible consumption per period."""
        return self.consumption.sum(axis=0)


@dataclass(frozen=True, eq=False)
class BaselineLoad:
    """Inflexible per-period load vector."""

    loads: np.ndarray

    def __post_init__(self):
        arr = _frozen_array(self.loads)
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError("loads must be a non-empty 1-D vector")
        if not np.isfinite(arr).all() or np.any(arr < 0):
            raise ValueError("loads must be finite and nonnegative")
        object.__setattr__(self, "loads", arr)

    @property
    def n_periods(self) -> int:
        return self.loads.size


@dataclass(frozen=True)
class CostBreakdown:
    """Diagnostic decomposition of a player's bill.

    ``charged_period`` is the period whose consumption incurred the
    demand charge (earliest maximizer for AP, the coincident peak period
    for CP/PP).
    """

    tou_component: float
    demand_component: float
    charged_period: int

    @property
    def total(self) -> float:
        return self.tou_component + self.demand_component


def _check_periods(profile: ActionProfile, baseline: BaselineLoad) -> None:
    if profile.n_periods != baseline.n_periods:
        raise DimensionMismatchError(
            f"profile has {profile.n_periods} periods, baseline has {baseline.n_periods}"
        )


def peak_demand(profile: ActionProfile, baseline: BaselineLoad) -> tuple[float, int]:
    """Maximum aggregate load and the earliest period attaining it."""
    _check_periods(profile, baseline)
    aggregate = baseline.loads + profile.total_load()
    period = int(np.argmax(aggregate))
    return float(aggregate[period]), period


def coincident_peak_period(profile: ActionProfile, baseline: BaselineLoad) -> int:
    """Earliest period with maximal aggregate load."""
    return peak_demand(profile, baseline)[1]


def cost_ap(i: int, profile: ActionProfile, instance: MarketInstance) -> CostBreakdown:
    """Anytime peak bill: ToU charges plus demand_rate * own maximum consumption."""
    a_i = profile.consumption[i]
    if a_i.size != instance.n_periods:
        raise DimensionMismatchError("profile and instance period counts differ")
    tou = float(instance.tou_rates @ a_i)
    charged = int(np.argmax(a_i))
    demand = instance.demand_rate * float(a_i[charged])
    return CostBreakdown(tou, demand, charged_period=charged)


def cost_cp(
    i: int,
    profile: ActionProfile,
    baseline: BaselineLoad,
    instance: MarketInstance,
) -> CostBreakdown:
    """Coincident peak bill: ToU charges plus demand_rate * consumption at the peak period."""
    a_i = profile.consumption[i]
    if a_i.size != instance.n_periods:
        raise DimensionMismatchError("profile and instance period counts differ")
    t_hat = coincident_peak_period(profile, baseline)
    tou = float(instance.tou_rates @ a_i)
    demand = instance.demand_rate * float(a_i[t_hat])
    return CostBreakdown(tou, demand, charged_period=t_hat)


def cost_pp(
    i: int,
    profile: ActionProfile,
    baseline: BaselineLoad,
    instance: MarketInstance,
) -> CostBreakdown:
    """Progressive peak bill: the coincident-peak consumption is raised to delta."""
    a_i = profile.consumption[i]
    if a_i.size != instance.n_periods:
        raise DimensionMismatchError("profile and instance period counts differ")
    t_hat = coincident_peak_period(profile, baseline)
    tou = float(instance.tou_rates @ a_i)
    demand = instance.demand_rate * float(a_i[t_hat]) ** instance.delta
    return CostBreakdown(tou, demand, charged_period=t_hat)


def mechanism_cost(
    mechanism: str,
    i: int,
    profile: ActionProfile,
    baseline: BaselineLoad,
    instance: MarketInstance,
) -> CostBreakdown:
    """Dispatch to the cost function of ``mechanism`` ("AP", "CP" or "PP")."""
    if mechanism == "AP":
        return cost_ap(i, profile, instance)
    if mechanism == "CP":
        return cost_cp(i, profile, baseline, instance)
    if mechanism == "PP":
        return cost_pp(i, profile, baseline, instance)
    raise ValueError(f"unknown mechanism {mechanism!r}; expected one of {MECHANISMS}")
