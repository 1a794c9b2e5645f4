"""Compare the compiled and pure-Python simulation kernels.

    python3 benchmarks/bench_kernels.py [--repeats N] [--json out.json]

Times a single lattice step and a full episode (no trajectory recording) on a small and a
full 5x5 body, checks that both backends agree to rounding, and prints a speedup table.
"""
import argparse
import json
import sys
import timeit

import numpy as np

from qdvox import controller as ctl
from qdvox.sim import TaskConfig, build_body, rollout, step
from qdvox.sim import _kernels_py

try:
    from qdvox.sim import _kernels_cy
except ImportError:  # extension not built
    _kernels_cy = None

BODIES = {
    "2x1": np.array([[3, 4]]),
    "5x5": np.array([[1, 3, 3, 3, 1],
                     [4, 2, 3, 2, 4],
                     [4, 3, 1, 3, 4],
                     [1, 4, 4, 4, 1],
                     [3, 3, 0, 3, 3]]),
}


def bench(kernels, grid, cfg, params, repeats):
    body = build_body(grid, cfg)
    actions = np.full(grid.size, 1.2)
    t_step = min(timeit.repeat(lambda: step(body, actions, cfg, kernels=kernels), number=200,
                               repeat=repeats)) / 200
    t_ep = min(timeit.repeat(lambda: rollout(body, params, 7, cfg, kernels=kernels), number=5,
                             repeat=repeats)) / 5
    fit = rollout(body, params, 7, cfg, kernels=kernels).fitness
    return t_step, t_ep, fit


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--json")
    args = ap.parse_args(argv)
    if _kernels_cy is None:
        print("compiled kernels unavailable; build with `pip install -e . --no-build-isolation`")
        return 1
    cfg = TaskConfig()
    rows = []
    print(f"{'body':<6} {'op':<8} {'python':>12} {'cython':>12} {'speedup':>8}")
    for name, grid in BODIES.items():
        n_in, n_out = ctl.dims_for_box(*grid.shape[::-1])
        params = ctl.init_params(n_in, n_out, np.random.default_rng(0))
        py = bench(_kernels_py, grid, cfg, params, args.repeats)
        cy = bench(_kernels_cy, grid, cfg, params, args.repeats)
        if not np.isclose(py[2], cy[2], rtol=1e-9, atol=1e-12):
            print(f"backend mismatch on {name}: {py[2]!r} vs {cy[2]!r}", file=sys.stderr)
            return 1
        for op, a, b in (("step", py[0], cy[0]), ("episode", py[1], cy[1])):
            print(f"{name:<6} {op:<8} {a * 1e6:>10.1f}us {b * 1e6:>10.1f}us {a / b:>7.1f}x")
            rows.append({"body": name, "op": op, "python_s": a, "cython_s": b, "speedup": a / b})
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
