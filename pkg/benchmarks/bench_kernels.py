"""Benchmark the compiled auction-scan kernels against the pure-Python
fallback and confirm bit-identical results.

Run: python benchmarks/bench_kernels.py
"""

import time

import numpy as np

from bagbid._kernels import get_backend
from bagbid.expert import solve_multipliers
from bagbid.market import MarketConfig, OpportunityStream
from bagbid.trajectory import CampaignConstraints


def time_replay(backend, stream, scales, budget):
    t0 = time.perf_counter()
    out = [
        backend.replay_scan(s, stream.values, stream.comp_bids, stream.eff_values, budget)
        for s in scales
    ]
    return time.perf_counter() - t0, out


def time_steps(backend, stream, action, budget, reps):
    cfg = stream.config
    t0 = time.perf_counter()
    for _ in range(reps):
        remaining = budget
        for t in range(cfg.steps_per_episode):
            sl = stream.step_slice(t)
            *_, remaining = backend.step_scan(
                action, stream.values[sl], stream.comp_bids[sl],
                stream.eff_values[sl], stream.conv_draws[sl], remaining,
            )
    return time.perf_counter() - t0


def main():
    cfg = MarketConfig(seed=123)
    constraints = CampaignConstraints(budget=50.0, ros_bound=6.0)
    stream = OpportunityStream(cfg)
    scales = np.linspace(0.05, 8.0, 200)

    try:
        compiled = get_backend("cython")
    except RuntimeError:
        compiled = None
    pure = get_backend("python")

    n_ops = len(scales) * stream.size
    print(f"stream: {stream.size} opportunities; {len(scales)} replay scales")

    t_py, out_py = time_replay(pure, stream, scales, constraints.budget)
    print(f"replay_scan  python: {t_py:8.3f} s  ({n_ops / t_py / 1e6:7.1f} M ops/s)")
    if compiled is not None:
        t_cy, out_cy = time_replay(compiled, stream, scales, constraints.budget)
        print(f"replay_scan  cython: {t_cy:8.3f} s  ({n_ops / t_cy / 1e6:7.1f} M ops/s)"
              f"  speedup x{t_py / t_cy:.0f}")
        assert out_py == out_cy, "backends disagree bitwise"
        print("replay results bit-identical across backends")

    reps = 20
    t_py = time_steps(pure, stream, 2.0, constraints.budget, reps)
    print(f"episode scan python: {t_py / reps * 1e3:8.2f} ms/episode")
    if compiled is not None:
        t_cy = time_steps(compiled, stream, 2.0, constraints.budget, reps)
        print(f"episode scan cython: {t_cy / reps * 1e3:8.2f} ms/episode"
              f"  speedup x{t_py / t_cy:.0f}")

    t0 = time.perf_counter()
    sol = solve_multipliers(stream, constraints)
    t_solve = time.perf_counter() - t0
    print(f"full multiplier solve (active backend): {t_solve * 1e3:.1f} ms "
          f"(value {sol.summary.total_value:.2f})")


if __name__ == "__main__":
    main()
