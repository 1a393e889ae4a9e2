"""Time the numba and numpy propagation kernels on the same inputs.

    python3 benchmarks/bench_kernels.py [--n 20000] [--grid 100] [--repeat 3]
"""
import argparse
import time

import numpy as np

from neqwork import _accel
from neqwork.hamiltonian import harmonic_stiffness, two_state
from neqwork.kernel import FiniteMetropolisKernel, MetropolisKernel, SamplerConfig, simulate_block
from neqwork.protocol import Protocol


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=20_000)
    ap.add_argument("--grid", type=int, default=100)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    cases = [
        ("metropolis/stiffness", harmonic_stiffness(), Protocol.linear(1.0, 2.0), lambda m: MetropolisKernel(m, 0.7)),
        ("finite/two_state", two_state(), Protocol.linear(0.0, 2.0), FiniteMetropolisKernel),
    ]
    backends = ["numpy"] + (["numba"] if _accel.HAVE_NUMBA else [])
    print(f"{'case':<22}{'backend':<9}{'seconds':>10}{'traj/s':>12}")
    for name, model, p, make in cases:
        ref = None
        for be in backends:
            cfg = SamplerConfig(make(model), grid_steps=args.grid, master_seed=0, backend=be)
            run = lambda: simulate_block(model, p, cfg, 0, args.n)[1]
            run()  # warm-up (numba compile)
            dt, states = best_of(run, args.repeat)
            same = "" if ref is None else ("  identical" if np.array_equal(ref, states) else "  DIFFERENT")
            ref = states if ref is None else ref
            print(f"{name:<22}{be:<9}{dt:>10.3f}{args.n / dt:>12.0f}{same}")


if __name__ == "__main__":
    main()
