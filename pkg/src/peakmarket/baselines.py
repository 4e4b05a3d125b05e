"""Baseline-load distributions: sampling, peak-period probabilities and
the stochastic closed-form peaks.

A scenario's baseline is either a fixed ``BaselineLoad`` or one of the
distribution specs below. All Monte Carlo estimates draw from addressed
``Stream`` handles so results are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional, Union

import numpy as np

from .model import BaselineLoad, MarketInstance, _frozen_array
from .streams import Stream

_ATOL_PROB = 1e-12


class DistributionSpec:
    """Base class for baseline-load distributions over T periods."""

    @property
    def n_periods(self) -> int:
        raise NotImplementedError

    def sample_many(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Draw an (n, T) matrix of baseline loads."""
        raise NotImplementedError

    def per_period_support_max(self) -> np.ndarray:
        raise NotImplementedError

    def analytic_pi(self) -> Optional[np.ndarray]:
        """Exact peak-period probabilities, or None if only Monte Carlo applies."""
        return None


BaselineScenario = Union[BaselineLoad, DistributionSpec]


@dataclass(frozen=True, eq=False)
class DiscreteSpec(DistributionSpec):
    """Finitely many baseline profiles with given probabilities."""

    profiles: np.ndarray  # (n_atoms, T)
    probabilities: np.ndarray  # (n_atoms,)

    def __post_init__(self):
        mat = _frozen_array(self.profiles)
        probs = _frozen_array(self.probabilities)
        if mat.ndim != 2 or mat.shape[0] == 0:
            raise ValueError("profiles must be a non-empty (n_atoms, T) matrix")
        if probs.shape != (mat.shape[0],):
            raise ValueError("one probability per profile required")
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > _ATOL_PROB:
            raise ValueError("probabilities must be nonnegative and sum to 1")
        if np.any(mat < 0) or not np.isfinite(mat).all():
            raise ValueError("baseline profiles must be finite and nonnegative")
        object.__setattr__(self, "profiles", mat)
        object.__setattr__(self, "probabilities", probs)

    @property
    def n_periods(self) -> int:
        return self.profiles.shape[1]

    def sample_many(self, n: int, rng: np.random.Generator) -> np.ndarray:
        idx = rng.choice(self.profiles.shape[0], size=n, p=self.probabilities)
        return self.profiles[idx]

    def per_period_support_max(self) -> np.ndarray:
        return self.profiles.max(axis=0)

    def analytic_pi(self) -> np.ndarray:
        pi = np.zeros(self.n_periods)
        for loads, prob in zip(self.profiles, self.probabilities):
            pi[int(np.argmax(loads))] += prob
        return pi


@dataclass(frozen=True)
class Triangular:
    low: float
    mode: float
    high: float

    def __post_init__(self):
        if not (self.low <= self.mode <= self.high and self.low < self.high):
            raise ValueError("triangular needs low <= mode <= high and low < high")

    def draw(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.triangular(self.low, self.mode, self.high, size=n)

    @property
    def support_max(self) -> float:
        return self.high


@dataclass(frozen=True)
class BetaFamily:
    """Beta(alpha, beta) scaled to [0, scale]."""

    alpha: float
    beta: float
    scale: float

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0 or self.scale <= 0:
            raise ValueError("beta family needs alpha, beta, scale > 0")

    def draw(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.scale * rng.beta(self.alpha, self.beta, size=n)

    @property
    def support_max(self) -> float:
        return self.scale


@dataclass(frozen=True)
class UniformFamily:
    low: float
    high: float

    def __post_init__(self):
        if not self.low <= self.high:
            raise ValueError("uniform family needs low <= high")

    def draw(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.low, self.high, size=n)

    @property
    def support_max(self) -> float:
        return self.high


PeriodFamily = Union[Triangular, BetaFamily, UniformFamily]


@dataclass(frozen=True, eq=False)
class IndependentSpec(DistributionSpec):
    """Independent per-period draws, one family per period."""

    families: tuple

    def __post_init__(self):
        if not self.families:
            raise ValueError("at least one period family required")
        object.__setattr__(self, "families", tuple(self.families))

    @property
    def n_periods(self) -> int:
        return len(self.families)

    def sample_many(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return np.column_stack([f.draw(n, rng) for f in self.families])

    def per_period_support_max(self) -> np.ndarray:
        return np.array([f.support_max for f in self.families])


@dataclass(frozen=True, eq=False)
class ConditionalUniformSpec(DistributionSpec):
    """One period carries a high-range draw, the rest low-range draws.

    The high range sits entirely above the low range, so the chosen
    period is the peak with probability one and the peak-period law is
    exactly ``peak_probs`` for any flexible action too small to bridge
    the gap between the ranges.
    """

    peak_probs: np.ndarray
    low_range: tuple
    high_range: tuple

    def __post_init__(self):
        probs = _frozen_array(self.peak_probs)
        lo = (float(self.low_range[0]), float(self.low_range[1]))
        hi = (float(self.high_range[0]), float(self.high_range[1]))
        if probs.ndim != 1 or probs.size == 0:
            raise ValueError("peak_probs must be a non-empty vector")
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > _ATOL_PROB:
            raise ValueError("peak_probs must be nonnegative and sum to 1")
        if not (lo[0] <= lo[1] and hi[0] < hi[1]):
            raise ValueError("ranges must satisfy low <= high")
        if hi[0] < lo[1]:
            raise ValueError("high range must sit above the low range")
        if lo[0] < 0:
            raise ValueError("loads must be nonnegative")
        object.__setattr__(self, "peak_probs", probs)
        object.__setattr__(self, "low_range", lo)
        object.__setattr__(self, "high_range", hi)

    @property
    def n_periods(self) -> int:
        return self.peak_probs.size

    def sample_many(self, n: int, rng: np.random.Generator) -> np.ndarray:
        t = self.n_periods
        idx = rng.choice(t, size=n, p=self.peak_probs)
        loads = rng.uniform(self.low_range[0], self.low_range[1], size=(n, t))
        loads[np.arange(n), idx] = rng.uniform(
            self.high_range[0], self.high_range[1], size=n
        )
        return loads

    def per_period_support_max(self) -> np.ndarray:
        high = np.where(self.peak_probs > 0, self.high_range[1], self.low_range[1])
        return high.astype(float)

    def analytic_pi(self) -> np.ndarray:
        return self.peak_probs.copy()

    @property
    def action_budget_limit(self) -> float:
        """Largest total flexible load that provably cannot move the peak."""
        return self.high_range[0] - self.low_range[1]


@dataclass(frozen=True, eq=False)
class PeakProbabilities:
    """Per-period probability that the period carries the maximal baseline."""

    pi: np.ndarray
    method: str = "analytic"
    samples: Optional[int] = None
    seed: Optional[int] = None
    stderr: Optional[np.ndarray] = None

    def __post_init__(self):
        pi = _frozen_array(self.pi)
        if pi.ndim != 1 or pi.size == 0:
            raise ValueError("pi must be a non-empty vector")
        if np.any(pi < 0):
            raise ValueError("pi entries must be nonnegative")
        tol = 1e-9
        if self.stderr is not None:
            err = _frozen_array(self.stderr)
            tol += 3.0 * float(np.sqrt(np.sum(err**2)))
            object.__setattr__(self, "stderr", err)
        if abs(pi.sum() - 1.0) > tol:
            raise ValueError(f"pi sums to {pi.sum():.12g}, expected 1")
        object.__setattr__(self, "pi", pi)

    @property
    def n_periods(self) -> int:
        return self.pi.size


class SupportMax(NamedTuple):
    per_period: np.ndarray
    global_max: float
    equal_supports: bool


def sample(spec: DistributionSpec, stream: Stream) -> BaselineLoad:
    """Draw one baseline load from ``spec`` on the given stream."""
    return BaselineLoad(spec.sample_many(1, stream.generator())[0])


def sample_many(spec: DistributionSpec, n: int, stream: Stream) -> np.ndarray:
    """Draw ``n`` baseline loads as an (n, T) matrix."""
    if n < 1:
        raise ValueError("sample count must be >= 1")
    return spec.sample_many(n, stream.generator())


def support_max(spec: DistributionSpec) -> SupportMax:
    """Per-period support maxima, their maximum, and the equal-support flag."""
    per = spec.per_period_support_max()
    top = float(per.max())
    return SupportMax(per, top, bool(np.all(per == top)))


def peak_probabilities(
    spec: DistributionSpec, samples: int, stream: Stream
) -> PeakProbabilities:
    """Peak-period probabilities: exact where the spec allows, else Monte Carlo.

    Ties go to the earliest period; for the continuous families ties have
    probability zero.
    """
    if samples < 1:
        raise ValueError("sample count must be >= 1")
    exact = spec.analytic_pi()
    if exact is not None:
        return PeakProbabilities(exact, method="analytic")
    draws = spec.sample_many(samples, stream.generator())
    counts = np.bincount(np.argmax(draws, axis=1), minlength=spec.n_periods)
    pi = counts / samples
    stderr = np.sqrt(pi * (1 - pi) / samples)
    return PeakProbabilities(
        pi, method="monte-carlo", samples=samples, seed=stream.seed, stderr=stderr
    )


def check_condition_11(
    spec: DistributionSpec,
    instance: MarketInstance,
    samples: int,
    probes: int,
    stream: Stream,
) -> tuple[bool, float]:
    """Falsification test for action-independence of the peak period.

    Replays the same baseline draws against ``probes`` random feasible
    action profiles and compares the induced peak-period frequencies with
    the action-free ones. Passing makes independence plausible, not proven.
    """
    if samples < 1 or probes < 0:
        raise ValueError("samples must be >= 1 and probes >= 0")
    draws = spec.sample_many(samples, stream.child(0).generator())
    base_idx = np.argmax(draws, axis=1)
    t = spec.n_periods
    base_pi = np.bincount(base_idx, minlength=t) / samples
    base_var = base_pi * (1 - base_pi) / samples

    rng = stream.child(1).generator()
    plausible = True
    worst = 0.0
    for _ in range(probes):
        shares = rng.dirichlet(np.ones(t), size=instance.n_players)
        total_action = instance.requirements @ shares
        probe_idx = np.argmax(draws + total_action, axis=1)
        probe_pi = np.bincount(probe_idx, minlength=t) / samples
        diff = np.abs(probe_pi - base_pi)
        worst = max(worst, float(diff.max()))
        pooled = np.sqrt(base_var + probe_pi * (1 - probe_pi) / samples)
        if np.any(diff > 3.0 * pooled):
            plausible = False
    return plausible, worst


class StochasticPeaks(NamedTuple):
    ap: float
    cp: float
    pp: float


def closed_form_peaks_condition_10_11(
    instance: MarketInstance, spec: DistributionSpec, pi
) -> StochasticPeaks:
    """Equilibrium peaks when supports share a maximum and the peak-period
    law is action-independent (the caller asserts the latter).

    The progressive factor multiplying the total requirement equals
    ``1 / sum_t (min(pi)/pi[t])**(1/(delta-1))`` and always lies in
    [1/T, 1].
    """
    instance.require_assumption()
    smax = support_max(spec)
    if not smax.equal_supports:
        raise ValueError(
            "per-period support maxima differ; the stochastic closed forms need "
            f"equal supports (got {smax.per_period})"
        )
    probs = np.asarray(getattr(pi, "pi", pi), dtype=float)
    if probs.size != instance.n_periods:
        raise ValueError("pi length does not match the instance period count")
    b_max = smax.global_max
    total_r = float(instance.requirements.sum())
    t = instance.n_periods
    ap = b_max + total_r / t
    cp = b_max + total_r
    delta = instance.delta
    if delta == 1 or np.any(probs == 0):
        # With a never-peak period available, everyone piles onto it and the
        # worst realization still reaches the CP value.
        return StochasticPeaks(ap, cp, cp)
    ratio = (probs.min() / probs) ** (1.0 / (delta - 1.0))
    factor = 1.0 / float(ratio.sum())
    if not (1.0 / t - 1e-9 <= factor <= 1.0 + 1e-9):
        raise RuntimeError(f"progressive factor {factor!r} escaped [1/T, 1]")
    factor = min(max(factor, 1.0 / t), 1.0)
    return StochasticPeaks(ap, cp, b_max + factor * total_r)
