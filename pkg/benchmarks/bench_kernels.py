"""Compare the numba kernels with the pure-Python fallback.

Runs the aircraft closed loop for a short horizon in two subprocesses, one
with ROBUSTREG_DISABLE_NUMBA=1, and reports time per RK4 step plus the
largest difference in the final state.

    python3 benchmarks/bench_kernels.py [--t-end 2.0] [--dt 1e-3]
"""

import argparse
import json
import os
import subprocess
import sys

WORKER = """
import json, sys, time
import numpy as np
from robustreg import aircraft as ac
t_end, dt = float(sys.argv[1]), float(sys.argv[2])
p = ac.AircraftParams()
loop = ac.AircraftLoop(params=p).with_levels(ac.aircraft_level_sets(p, 3000.0))
s0 = ac.nominal_initial_state(p)
loop.simulate(s0, 10 * dt, dt, 1)  # warm up / compile
t0 = time.perf_counter()
tr = loop.simulate(s0, t_end, dt, 100)
elapsed = time.perf_counter() - t0
print(json.dumps({"elapsed": elapsed, "steps": round(t_end / dt),
                  "final": [float(v) for v in tr.matrix()[-1, 1:]]}))
"""


def run(t_end, dt, disable):
    env = dict(os.environ)
    env.pop("ROBUSTREG_DISABLE_NUMBA", None)
    if disable:
        env["ROBUSTREG_DISABLE_NUMBA"] = "1"
    out = subprocess.run([sys.executable, "-c", WORKER, str(t_end), str(dt)],
                         env=env, check=True, capture_output=True, text=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--t-end", type=float, default=2.0)
    ap.add_argument("--dt", type=float, default=1e-3)
    args = ap.parse_args()

    fast = run(args.t_end, args.dt, disable=False)
    slow = run(args.t_end, args.dt, disable=True)
    diff = max(abs(a - b) for a, b in zip(fast["final"], slow["final"]))
    for name, r in (("numba", fast), ("python", slow)):
        print(f"{name:7s} {r['elapsed']:8.3f} s  {1e6 * r['elapsed'] / r['steps']:9.2f} us/step")
    print(f"speedup {slow['elapsed'] / fast['elapsed']:.1f}x, max final-state difference {diff:.1e}")


if __name__ == "__main__":
    main()
