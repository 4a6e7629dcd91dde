"""Pure-Python fallback for the auction-scan kernels.

Mirrors ``_scan.pyx`` operation for operation: both run plain IEEE double
arithmetic in the same order, so results are bit-identical across
backends.  This path is roughly two orders of magnitude slower and exists
so the package works without a C toolchain.
"""

import numpy as np


def replay_scan(scale, values, comp_bids, eff_values, budget):
    """See ``_scan.replay_scan``."""
    v = np.ascontiguousarray(values, dtype=np.float64).tolist()
    c = np.ascontiguousarray(comp_bids, dtype=np.float64).tolist()
    ev = np.ascontiguousarray(eff_values, dtype=np.float64).tolist()
    scale = float(scale)
    remaining = float(budget)
    spend = 0.0
    value = 0.0
    wins = 0
    forfeits = 0
    for j in range(len(v)):
        bid = scale * v[j]
        if bid > c[j]:
            pay = c[j]
            if pay <= remaining:
                remaining -= pay
                spend += pay
                value += ev[j]
                wins += 1
            else:
                forfeits += 1
    return spend, value, wins, forfeits


def step_scan(action, values, comp_bids, eff_values, conv_draws, remaining):
    """See ``_scan.step_scan``."""
    v = np.ascontiguousarray(values, dtype=np.float64).tolist()
    c = np.ascontiguousarray(comp_bids, dtype=np.float64).tolist()
    ev = np.ascontiguousarray(eff_values, dtype=np.float64).tolist()
    u = np.ascontiguousarray(conv_draws, dtype=np.float64).tolist()
    action = float(action)
    rem = float(remaining)
    spend = 0.0
    value = 0.0
    wins = 0
    conversions = 0
    for j in range(len(v)):
        bid = action * v[j]
        if bid > c[j]:
            pay = c[j]
            if pay <= rem:
                rem -= pay
                spend += pay
                value += ev[j]
                wins += 1
                if u[j] < ev[j]:
                    conversions += 1
    return wins, spend, conversions, value, rem
