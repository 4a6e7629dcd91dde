"""Hindsight-optimal expert bidding via dual multipliers.

With full knowledge of a day's opportunity stream (and all other bidders
fixed), the value-maximizing bid under budget and return-on-spend caps
takes the form

    bid_j = (1 + alpha_c * C) / (alpha_b + alpha_c) * value_j

where ``alpha_b`` prices the budget constraint and ``alpha_c`` the RoS
constraint.  This module solves for the multiplier pair against a recorded
stream (grid over ``alpha_c``, bisection on ``alpha_b`` targeting full
budget use), replays the resulting constant bid scale, and emits expert
trajectories.  ``brute_force_optimal`` enumerates small instances exactly
and serves as the independent optimality oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from bagbid import _kernels
from bagbid.market import MarketConfig, OpportunityStream, constant_policy, run_episode
from bagbid.trajectory import CampaignConstraints, Trajectory

ALPHA_B_MIN = 1e-4
ALPHA_B_MAX = 1e3
ROS_SLACK = 1e-6
DEFAULT_ALPHA_C_GRID = tuple(float(x) for x in np.arange(0.0, 4.0 + 1e-9, 0.25))


class InvalidMultipliersError(ValueError):
    """Multiplier pair outside the valid domain."""


class TooManyOpportunitiesError(ValueError):
    """Instance too large for exhaustive enumeration."""


@dataclass(frozen=True)
class DualMultipliers:
    alpha_b: float
    alpha_c: float

    def __post_init__(self):
        if self.alpha_b < 0 or self.alpha_c < 0:
            raise InvalidMultipliersError("multipliers must be non-negative")
        if self.alpha_b + self.alpha_c <= 0:
            raise InvalidMultipliersError("alpha_b + alpha_c must be positive")


@dataclass(frozen=True)
class ReplaySummary:
    total_value: float
    total_spend: float
    ros: float
    wins: int
    forfeits: int


@dataclass(frozen=True)
class MultiplierSolution:
    multipliers: DualMultipliers
    feasible: bool
    summary: ReplaySummary
    ros_bound: float

    @property
    def scale(self) -> float:
        return bid_scale(self.multipliers, self.ros_bound)


def bid_scale(multipliers: DualMultipliers, ros_bound: float) -> float:
    """The constant factor applied to every opportunity value."""
    denom = multipliers.alpha_b + multipliers.alpha_c
    if denom <= 0:
        raise InvalidMultipliersError("alpha_b + alpha_c must be positive")
    return (1.0 + multipliers.alpha_c * ros_bound) / denom


def expert_bid(value: float, multipliers: DualMultipliers, ros_bound: float) -> float:
    """Hindsight-optimal bid for a single opportunity."""
    return bid_scale(multipliers, ros_bound) * value


def _replay_scale(stream: OpportunityStream, scale: float, budget: float) -> ReplaySummary:
    spend, value, wins, forfeits = _kernels.replay_scan(
        float(scale), stream.values, stream.comp_bids, stream.eff_values, float(budget)
    )
    ros = spend / value if value > 0 else 0.0
    return ReplaySummary(
        total_value=value, total_spend=spend, ros=ros, wins=int(wins),
        forfeits=int(forfeits),
    )


def replay(stream: OpportunityStream, multipliers: DualMultipliers,
           constraints: CampaignConstraints) -> ReplaySummary:
    """Replay the expert bid formula against a recorded stream.

    Budget is enforced by per-auction forfeiture; value is accounted as
    expected value, so the same multipliers always reproduce the same
    summary.
    """
    scale = bid_scale(multipliers, constraints.ros_bound)
    return _replay_scale(stream, scale, constraints.budget)


def _feasible_unforfeited(stream, scale, constraints) -> tuple[bool, ReplaySummary]:
    """Would bidding at ``scale`` fit both constraints without forfeits?

    Uses an unbounded-budget replay, whose spend is exactly monotone in the
    scale (won sets nest), which is what makes bisection sound.
    """
    summary = _replay_scale(stream, scale, math.inf)
    ok = (
        summary.total_spend <= constraints.budget
        and summary.ros <= constraints.ros_bound + ROS_SLACK
    )
    return ok, summary


def solve_multipliers(stream: OpportunityStream, constraints: CampaignConstraints,
                      alpha_c_grid=DEFAULT_ALPHA_C_GRID, bisect_iters: int = 70,
                      a_max: float | None = None) -> MultiplierSolution:
    """Search the multiplier pair maximizing replay value on a stream.

    Outer grid over ``alpha_c``; for each, bisection on ``alpha_b`` finds
    the most aggressive bid scale whose full (unforfeited) spend still fits
    the budget and whose RoS stays within bound.  The scale is capped at
    the market's action ceiling so the solution is realizable as a
    constant-action episode.  If no grid point is feasible the most
    conservative corner is returned with ``feasible=False``.
    """
    if stream.size == 0:
        raise ValueError("opportunity stream is empty")
    if a_max is None:
        a_max = stream.config.a_max
    c = constraints.ros_bound

    best: MultiplierSolution | None = None
    for alpha_c in alpha_c_grid:
        # Keep the implied scale within [0, a_max].
        lo = max(ALPHA_B_MIN, (1.0 + alpha_c * c) / a_max - alpha_c)
        hi = ALPHA_B_MAX
        if lo >= hi:
            continue

        def scale_at(alpha_b):
            return (1.0 + alpha_c * c) / (alpha_b + alpha_c)

        ok_lo, _ = _feasible_unforfeited(stream, scale_at(lo), constraints)
        if ok_lo:
            alpha_b = lo
        else:
            ok_hi, _ = _feasible_unforfeited(stream, scale_at(hi), constraints)
            if not ok_hi:
                continue
            a, b = lo, hi  # infeasible at a, feasible at b
            for _ in range(bisect_iters):
                mid = 0.5 * (a + b)
                ok_mid, _ = _feasible_unforfeited(stream, scale_at(mid), constraints)
                if ok_mid:
                    b = mid
                else:
                    a = mid
            alpha_b = b

        summary = _replay_scale(stream, scale_at(alpha_b), constraints.budget)
        if best is None or summary.total_value > best.summary.total_value:
            best = MultiplierSolution(
                multipliers=DualMultipliers(alpha_b=alpha_b, alpha_c=float(alpha_c)),
                feasible=True,
                summary=summary,
                ros_bound=c,
            )

    if best is None:
        multipliers = DualMultipliers(alpha_b=ALPHA_B_MAX, alpha_c=float(max(alpha_c_grid)))
        return MultiplierSolution(
            multipliers=multipliers,
            feasible=False,
            summary=replay(stream, multipliers, constraints),
            ros_bound=c,
        )
    return best


def generate_expert_trajectory(config: MarketConfig, constraints: CampaignConstraints,
                               campaign_id="c0") -> Trajectory:
    """Hindsight expert episode for one (config, seed) campaign-day.

    Solves the multipliers against the day's stream and rolls the market
    at the resulting constant bid scale, so the episode reproduces the
    replay's won set exactly.
    """
    stream = OpportunityStream(config)
    solution = solve_multipliers(stream, constraints, a_max=config.a_max)
    scale = bid_scale(solution.multipliers, constraints.ros_bound)
    scale = min(scale, config.a_max)
    trajectory = run_episode(
        constant_policy(scale), config, constraints,
        campaign_id=campaign_id, source="expert",
        meta={
            "alpha_b": float(solution.multipliers.alpha_b),
            "alpha_c": float(solution.multipliers.alpha_c),
            "expert_scale": float(scale),
            "feasible": bool(solution.feasible),
            "replay_value": float(solution.summary.total_value),
            "replay_spend": float(solution.summary.total_spend),
        },
    )
    return trajectory


def brute_force_optimal(eff_values, costs, constraints: CampaignConstraints,
                        max_opportunities: int = 20) -> float:
    """Exact optimum over all win-subsets of a small instance.

    Maximizes total effective value subject to total cost <= budget and
    cost <= ros_bound * value, with payments equal to competitor bids.
    Exponential enumeration; refuses instances beyond
    ``max_opportunities``.
    """
    eff_values = np.asarray(eff_values, dtype=np.float64)
    costs = np.asarray(costs, dtype=np.float64)
    n = eff_values.shape[0]
    if costs.shape[0] != n:
        raise ValueError("eff_values and costs must have equal length")
    if n > max_opportunities:
        raise TooManyOpportunitiesError(
            f"{n} opportunities exceed the enumeration limit {max_opportunities}"
        )
    if n == 0:
        return 0.0

    best = 0.0
    chunk_bits = min(n, 16)
    lows = np.arange(2 ** chunk_bits, dtype=np.uint32)
    low_mat = ((lows[:, None] >> np.arange(chunk_bits)) & 1).astype(np.float64)
    low_val = low_mat @ eff_values[:chunk_bits]
    low_cost = low_mat @ costs[:chunk_bits]
    for high in range(2 ** (n - chunk_bits)):
        hv = hc = 0.0
        for i in range(n - chunk_bits):
            if (high >> i) & 1:
                hv += eff_values[chunk_bits + i]
                hc += costs[chunk_bits + i]
        val = low_val + hv
        cost = low_cost + hc
        feasible = (cost <= constraints.budget + 1e-12) & (
            cost <= constraints.ros_bound * val + 1e-9
        )
        if feasible.any():
            best = max(best, float(val[feasible].max()))
    return best
