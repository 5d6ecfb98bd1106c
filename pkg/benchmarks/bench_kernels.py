"""Time the compiled kernels against the numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from pombu import kernels
from pombu.envs import build_chain_posterior, uniform_policy
from pombu.mdp import sample_trajectories
from pombu.posterior import mean_mdp, q_moments_oracle


def cases():
    chain = build_chain_posterior(12)
    pi = uniform_policy(chain)
    mdp = mean_mdp(build_chain_posterior(30))
    pi30 = uniform_policy(build_chain_posterior(30))
    x = np.random.default_rng(0).normal(size=(2000, 200))
    lengths = np.full(2000, 200)
    return {
        "enumeration oracle (chain H=12, 4096 MDPs)": lambda b: q_moments_oracle(chain, pi, backend=b),
        "tabular sampling (20k trajectories, H=30)": lambda b: sample_trajectories(mdp, pi30, 20_000, seed=0, backend=b),
        "reverse cumsum (2000 x 200)": lambda b: b.discounted_reverse_cumsum(x, 0.99, lengths),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=3)
    args = parser.parse_args()
    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled kernels not built; timing the fallback only")
    print(f"{'case':45s} " + " ".join(f"{b:>10s}" for b in backends) + ("    speedup" if len(backends) > 1 else ""))
    for name, fn in cases().items():
        times = []
        for b in backends:
            mod = kernels.get_backend(b)
            fn(mod)  # warm up
            times.append(min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat)))
        row = f"{name:45s} " + " ".join(f"{t * 1e3:8.1f}ms" for t in times)
        if len(times) > 1:
            row += f"  {times[0] / times[1]:8.1f}x"
        print(row)


if __name__ == "__main__":
    main()
