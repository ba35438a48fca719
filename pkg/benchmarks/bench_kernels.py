"""Compare the compiled and pure-Python kernel backends.

Runs the same workloads through both backends, checks the outputs agree and
prints wall time and speedup per workload:

    python3 benchmarks/bench_kernels.py [--duration 0.3] [--repeat 3]
"""

import argparse
import time

import numpy as np

from ebstrack import _kernels
from ebstrack.catalog import gen_synthetic_catalog
from ebstrack.geometry import CameraIntrinsics
from ebstrack.pixel_model import NOMINAL_PARAMS, build_offset_table
from ebstrack.simulator import SensorNoiseParams, simulate_events
from ebstrack.tracker import TrackerConfig, track
from ebstrack.trajectory import gen_trajectory


def best_of(fn, repeat):
    best, out = float("inf"), None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def bench_lowpass(backend, n):
    rng = np.random.default_rng(0)
    itilde = rng.uniform(0.0, 5.0, (8, 2 * n + 1))
    v0 = np.zeros(8)
    return lambda: _kernels.lowpass_response(itilde, 5e-5, 20.0, 2.0, v0, backend=backend)


def scene(duration):
    cat = gen_synthetic_catalog(7, 5000, (0.0, 7.0), 0.5)
    traj = gen_trajectory("velocity_sweep", {"start": [40.0, 20.0, 0.0]}, max(duration, 0.5))
    return cat, traj, CameraIntrinsics()


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--duration", type=float, default=0.3, help="simulated seconds")
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    if _kernels.compiled_backend is None:
        print("compiled backend not built; nothing to compare")
        return 1

    cat, traj, intr = scene(args.duration)
    noise = SensorNoiseParams(seed=1)
    span = (0.0, args.duration)
    results = []

    times, outs = {}, {}
    for b in ("cython", "python"):
        times[b], outs[b] = best_of(bench_lowpass(b, 20_000), args.repeat)
    agree = all(np.allclose(a, b, rtol=1e-12, atol=1e-12)
                for a, b in zip(outs["cython"], outs["python"]))
    results.append(("lowpass_response", 8 * 20_000, times, agree))

    times, outs = {}, {}
    for b in ("cython", "python"):
        rep = args.repeat if b == "cython" else 1
        times[b], outs[b] = best_of(
            lambda: simulate_events(cat, traj, intr, NOMINAL_PARAMS, noise, 2.0, span, backend=b), rep)
    sc, sp = outs["cython"], outs["python"]
    agree = (np.array_equal(sc.t, sp.t) and np.array_equal(sc.x, sp.x)
             and np.array_equal(sc.y, sp.y) and np.array_equal(sc.p, sp.p))
    results.append(("simulate_events", len(sc), times, agree))

    # Tracker on the simulated stream; the offset table is built once outside the timing.
    tab = build_offset_table(NOMINAL_PARAMS, np.arange(0.0, 7.01, 0.5),
                             (10.0, 25.0, 50.0, 100.0, 225.0, 500.0, 1000.0), 2.0)
    cfg = TrackerConfig(offset_curve=tab)
    times, outs = {}, {}
    for b in ("cython", "python"):
        rep = args.repeat if b == "cython" else 1
        times[b], outs[b] = best_of(lambda: track(sc, cat, intr, cfg, backend=b), rep)
    rc, rp = outs["cython"], outs["python"]
    agree = (np.array_equal(rc.t_us, rp.t_us) and np.allclose(rc.q, rp.q, atol=1e-9)
             and np.array_equal(rc.n_absorbed, rp.n_absorbed))
    results.append(("track", rc.n_events, times, agree))

    print(f"{'workload':<18}{'items':>10}{'cython_s':>11}{'python_s':>11}{'speedup':>9}  agree")
    for name, n, t, ok in results:
        print(f"{name:<18}{n:>10}{t['cython']:>11.4f}{t['python']:>11.4f}"
              f"{t['python'] / t['cython']:>9.1f}  {ok}")
    return 0 if all(r[3] for r in results) else 1


if __name__ == "__main__":
    raise SystemExit(main())
