"""Compare the compiled and pure-Python ring kernels.

Two measurements per backend:
  loop  - the event loop alone, fed by a constant-work callback
  full  - an end-to-end run of the bundled reference config (driver included)

Usage: python benchmarks/bench_kernel.py [--repeat N] [--latency-ms L]
"""
from __future__ import annotations

import argparse
import time

from ringpipe.config import load_config
from ringpipe.planner import plan
from ringpipe.sim import run
from ringpipe.sim.kernel import BACKENDS


def loop_only(kernel, n_stages=8, n_mb=16, end_us=600_000_000):
    durs = [70_000] * n_stages

    def on_circuit(m, t):
        return 32, durs, 32 * 16384, [0] * n_stages, ()

    initial = [(durs, 0, [0] * n_stages, ()) for _ in range(n_mb)]
    ev = kernel(n_stages, n_mb, [64_000] * n_stages, [1_250_000_000] * n_stages,
                [32_000_000_000] * n_stages, True, end_us, on_circuit, initial)
    return len(ev)


def full_run(backend, latency_us):
    cfg = load_config("reference")
    topo = cfg.topology.with_latency(latency_us)
    p = plan(cfg.model, topo, cfg.workload, cfg.policy)
    _, trace = run(p, topo, cfg.workload, cfg.model, backend=backend)
    return len(trace)


def best_of(fn, repeat):
    best, n = float("inf"), 0
    for _ in range(repeat):
        t0 = time.perf_counter()
        n = fn()
        best = min(best, time.perf_counter() - t0)
    return best, n


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--latency-ms", type=float, default=64)
    args = ap.parse_args()
    lat = round(args.latency_ms * 1000)
    rows = []
    for name in sorted(BACKENDS):
        k = BACKENDS[name]
        t_loop, n_loop = best_of(lambda: loop_only(k), args.repeat)
        t_full, n_full = best_of(lambda: full_run(name, lat), args.repeat)
        rows.append((name, t_loop, n_loop, t_full, n_full))
    print(f"{'backend':<10}{'loop s':>10}{'Mev/s':>10}{'full s':>10}{'Mev/s':>10}")
    for name, tl, nl, tf, nf in rows:
        print(f"{name:<10}{tl:>10.3f}{nl / tl / 1e6:>10.2f}{tf:>10.3f}{nf / tf / 1e6:>10.2f}")
    if len(rows) == 2:
        (_, pl, _, pf, _), (_, cl, _, cf, _) = sorted(rows, key=lambda r: r[0] != "python")
        print(f"speedup: loop {pl / cl:.1f}x, full run {pf / cf:.1f}x")
    else:
        print("compiled kernel not built; only the Python loop was timed")


if __name__ == "__main__":
    main()
