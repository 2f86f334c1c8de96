"""Time the compiled kernels against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--participants 300] [--resamples 10000]
"""
import argparse
import time

import numpy as np

from psypipe import _fallback

try:
    from psypipe import _kernels
except ImportError:
    _kernels = None


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def random_csr(rng, rows, vocab, max_len):
    lengths = rng.integers(3, max_len, size=rows)
    tok = [np.unique(rng.integers(0, vocab, size=k)).astype(np.int32) for k in lengths]
    ptr = np.zeros(rows + 1, dtype=np.int32)
    ptr[1:] = np.cumsum([len(t) for t in tok])
    return ptr, np.concatenate(tok)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--participants", type=int, default=300)
    parser.add_argument("--resamples", type=int, default=10000)
    parser.add_argument("--sentences", type=int, default=20000)
    parser.add_argument("--stems", type=int, default=60)
    parser.add_argument("--repeat", type=int, default=3)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    rng = np.random.default_rng(args.seed)
    truth = rng.normal(3, 0.5, size=(args.participants, 6))
    recovered = truth + rng.normal(0, 0.5, size=truth.shape)
    idx = rng.integers(0, args.participants, size=(args.resamples, args.participants), dtype=np.int64)
    sent = random_csr(rng, args.sentences, 2000, 25)
    stems = random_csr(rng, args.stems, 2000, 14)

    backends = [("python", _fallback)] + ([("cython", _kernels)] if _kernels is not None else [])
    results = {}
    for name, mod in backends:
        results[name] = (
            best_of(lambda: mod.bootstrap_mean_r(truth, recovered, idx), args.repeat),
            best_of(lambda: mod.jaccard_best(*sent, *stems), args.repeat),
        )

    print(f"bootstrap: {args.resamples} resamples x {args.participants} participants x 6 scales")
    print(f"jaccard:   {args.sentences} sentences x {args.stems} stems")
    print(f"{'backend':<8} {'bootstrap (s)':>14} {'jaccard (s)':>12}")
    for name, (boot, jac) in results.items():
        print(f"{name:<8} {boot:>14.4f} {jac:>12.4f}")
    if "cython" in results:
        py, cy = results["python"], results["cython"]
        print(f"speedup  {py[0] / cy[0]:>14.1f}x {py[1] / cy[1]:>11.1f}x")


if __name__ == "__main__":
    main()
