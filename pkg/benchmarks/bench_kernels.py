"""Numba vs plain numpy timings of the hot kernels.

Each backend runs in its own interpreter because the backend is fixed at
import time by ``SPGM_DISABLE_NUMBA``. Usage:

    python3 benchmarks/bench_kernels.py [--repeat 5] [--size 64]
"""
import argparse
import json
import os
import subprocess
import sys
import time

WORKER = r"""
import json, sys, time
import numpy as np
from spgm import kernels, backend_name

size, repeat = int(sys.argv[1]), int(sys.argv[2])
rng = np.random.Generator(np.random.Philox(0))
z = rng.standard_normal(4 * size)
xp = rng.standard_normal((2 * size, size))
fp = rng.standard_normal(2 * size)
g = rng.standard_normal((2 * size, size))
B = rng.standard_normal((size, size))
K = B @ B.T
a = rng.standard_normal(size)
alpha0 = np.full(size, 1.0 / size)
step = 1.0 / np.linalg.eigvalsh(K)[-1]

cases = {
    "project_simplex": lambda: kernels.project_simplex(z),
    "moreau_max": lambda: kernels.moreau_max(z),
    "pairwise_q": lambda: kernels.pairwise_q(xp, fp, g),
    "simplex_qp_apg": lambda: kernels.simplex_qp_apg(a, K, 1.0, alpha0, step, 500, 0.0),
}
out = {"backend": backend_name()}
for name, fn in cases.items():
    t0 = time.perf_counter()
    fn()  # first call includes compilation
    first = time.perf_counter() - t0
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    out[name] = {"first_s": first, "best_s": best}
print(json.dumps(out))
"""


def run_backend(disable, size, repeat):
    env = dict(os.environ)
    env["SPGM_DISABLE_NUMBA"] = "1" if disable else "0"
    proc = subprocess.run([sys.executable, "-c", WORKER, str(size), str(repeat)],
                          env=env, capture_output=True, text=True, check=True)
    return json.loads(proc.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    t0 = time.perf_counter()
    jit = run_backend(False, args.size, args.repeat)
    ref = run_backend(True, args.size, args.repeat)
    if jit["backend"] != "numba":
        print("numba is not installed: both runs use the numpy path")
    print(f"{'kernel':<18s} {'numpy (ms)':>12s} {'numba (ms)':>12s} {'speedup':>9s} {'jit compile (s)':>16s}")
    for name in ("project_simplex", "moreau_max", "pairwise_q", "simplex_qp_apg"):
        a, b = ref[name]["best_s"], jit[name]["best_s"]
        print(f"{name:<18s} {1e3 * a:12.3f} {1e3 * b:12.3f} {a / b:9.1f} {jit[name]['first_s']:16.2f}")
    print(f"total wall time {time.perf_counter() - t0:.1f}s")


if __name__ == "__main__":
    main()
