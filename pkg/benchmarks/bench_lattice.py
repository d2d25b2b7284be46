"""Benchmark the lattice kernels: compiled extension vs pure-Python fallback.

Times the transducer alpha+beta recursions and the CTC forward/backward on a
grid of lattice sizes. Run as:

    python benchmarks/bench_lattice.py
"""
from __future__ import annotations

import time

import numpy as np

from prefixasr import lattice_ref
from prefixasr.lattice import ctc_extend_targets

try:
    from prefixasr import _lattice_fast
except ImportError:
    _lattice_fast = None


def _time(fn, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def bench_rnnt(backend, t_dim: int, u_len: int, repeats: int) -> float:
    rng = np.random.default_rng(0)
    logp_blank = np.ascontiguousarray(rng.normal(-1.0, 0.5, size=(t_dim, u_len + 1)))
    logp_label = np.ascontiguousarray(rng.normal(-1.0, 0.5, size=(t_dim, u_len)))

    def run():
        backend.rnnt_alpha(logp_blank, logp_label)
        backend.rnnt_beta(logp_blank, logp_label)

    return _time(run, repeats)


def bench_ctc(backend, t_dim: int, u_len: int, repeats: int) -> float:
    rng = np.random.default_rng(1)
    v = 32
    logp = rng.normal(-2.0, 0.5, size=(t_dim, v + 1))
    logp = np.ascontiguousarray(logp - np.log(np.exp(logp).sum(axis=1, keepdims=True)))
    targets = rng.integers(0, v, size=u_len)
    ext = ctc_extend_targets(targets, v)

    def run():
        backend.ctc_alpha(logp, ext)
        backend.ctc_beta(logp, ext)

    return _time(run, repeats)


def main() -> None:
    sizes = [(8, 4), (32, 16), (64, 32), (128, 64), (256, 96)]
    backends = [("reference", lattice_ref)]
    if _lattice_fast is not None:
        backends.append(("compiled", _lattice_fast))
    else:
        print("compiled extension not built; timing the reference backend only\n")

    for name, bench in (("rnnt alpha+beta", bench_rnnt), ("ctc alpha+beta", bench_ctc)):
        print(f"== {name} ==")
        header = f"{'T x U':>12}" + "".join(f"{bname:>14}" for bname, _ in backends)
        if len(backends) == 2:
            header += f"{'speedup':>10}"
        print(header)
        for t_dim, u_len in sizes:
            repeats = max(3, min(50, 20000 // (t_dim * u_len)))
            times = [bench(mod, t_dim, u_len, repeats) for _, mod in backends]
            row = f"{t_dim:>6} x {u_len:<4}" + "".join(f"{t * 1e3:>12.3f}ms" for t in times)
            if len(times) == 2:
                row += f"{times[0] / times[1]:>9.1f}x"
            print(row)
        print()


if __name__ == "__main__":
    main()
