# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled auction-scan kernels.

Sequential budget-forfeit scans over an opportunity stream.  The budget
state makes the loop inherently sequential, so it cannot be vectorized;
this module is the hot path of multiplier search and episode simulation.

Arithmetic must stay bit-identical to ``pyscan``: plain double ops in the
same order, compiled with FP contraction disabled.
"""


def replay_scan(double scale, double[::1] values, double[::1] comp_bids,
                double[::1] eff_values, double budget):
    """Replay constant-scale bids over a full opportunity stream.

    Bid for opportunity j is ``scale * values[j]``; a strictly higher bid
    than the competitor wins and pays the competitor bid, unless the
    payment would exceed the remaining budget (forfeit).  Value is
    accounted as the expected value ``eff_values[j]`` of won auctions.

    Returns (total_spend, total_value, wins, forfeits).
    """
    cdef Py_ssize_t j, n = values.shape[0]
    cdef double spend = 0.0, value = 0.0, remaining = budget, bid, pay
    cdef long wins = 0, forfeits = 0
    for j in range(n):
        bid = scale * values[j]
        if bid > comp_bids[j]:
            pay = comp_bids[j]
            if pay <= remaining:
                remaining -= pay
                spend += pay
                value += eff_values[j]
                wins += 1
            else:
                forfeits += 1
    return spend, value, wins, forfeits


def step_scan(double action, double[::1] values, double[::1] comp_bids,
              double[::1] eff_values, double[::1] conv_draws,
              double remaining):
    """Run one market step's auctions at a given bid-scale action.

    Same win/forfeit rule as ``replay_scan``; a won auction converts when
    its pre-drawn uniform variate falls below the effective conversion
    probability.  The returned remaining budget is the sequentially
    decremented value, so chaining step scans is bit-identical to one
    whole-stream replay scan.

    Returns (wins, total_spend, conversions, value_gained, remaining).
    """
    cdef Py_ssize_t j, n = values.shape[0]
    cdef double spend = 0.0, value = 0.0, rem = remaining, bid, pay
    cdef long wins = 0, conversions = 0
    for j in range(n):
        bid = action * values[j]
        if bid > comp_bids[j]:
            pay = comp_bids[j]
            if pay <= rem:
                rem -= pay
                spend += pay
                value += eff_values[j]
                wins += 1
                if conv_draws[j] < eff_values[j]:
                    conversions += 1
    return wins, spend, conversions, value, rem
