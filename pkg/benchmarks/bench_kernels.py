#!/usr/bin/env python3
"""Benchmark the compiled kernels against the pure-Python fallback.

Times the two per-step hot kernels (additive-smoothing row fill and the
temperature/nucleus token selection) and reports the speedup, plus a
decode-loop throughput figure under whichever kernel backend is active.

Usage: python benchmarks/bench_kernels.py [--size 64] [--calls 20000]
"""

import argparse
import time

import numpy as np

from selfinfill import kernels
from selfinfill.backends import train_ngram
from selfinfill.decoding import SelfInfillConfig, self_infill
from selfinfill.kernels import _pure
from selfinfill.sampling import SamplerConfig, rng_stream
from selfinfill.textops import StopSpec

try:
    from selfinfill.kernels import _core
except ImportError:
    _core = None


def bench(fn, *args, calls):
    start = time.perf_counter()
    for _ in range(calls):
        fn(*args)
    return time.perf_counter() - start


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--size", type=int, default=64, help="vocabulary size")
    parser.add_argument("--calls", type=int, default=20000, help="kernel calls per measurement")
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    counts = rng.integers(0, 40, size=args.size).astype(np.int64)
    raw = rng.random(args.size)
    probs = raw / raw.sum()
    u = 0.371

    rows = []
    for name, fn_pure, fn_core, fn_args in [
        ("laplace_row", _pure.laplace_row, getattr(_core, "laplace_row", None), (counts, 1.0, args.size)),
        ("sample_pick", _pure.sample_pick, getattr(_core, "sample_pick", None), (probs, 0.8, 0.95, u)),
        ("greedy_pick", _pure.greedy_pick, getattr(_core, "greedy_pick", None), (probs,)),
    ]:
        t_pure = bench(fn_pure, *fn_args, calls=args.calls)
        if fn_core is not None:
            t_core = bench(fn_core, *fn_args, calls=args.calls)
            rows.append((name, t_pure, t_core, t_pure / t_core))
        else:
            rows.append((name, t_pure, None, None))

    print(f"kernel backend active: {kernels.ACTIVE}")
    print(f"{args.calls} calls at vocabulary size {args.size}\n")
    print(f"{'kernel':<14} {'pure (s)':>10} {'compiled (s)':>13} {'speedup':>9}")
    for name, t_pure, t_core, speedup in rows:
        if t_core is None:
            print(f"{name:<14} {t_pure:>10.4f} {'n/a':>13} {'n/a':>9}")
        else:
            print(f"{name:<14} {t_pure:>10.4f} {t_core:>13.4f} {speedup:>8.1f}x")

    # decode throughput under the active kernel backend
    backend = train_ngram("rararara" * 8, order=3, alpha=1.0)
    vocab = backend.vocab
    cfg = SamplerConfig(mode="sample", temperature=0.8, top_p=0.95, seed=0)
    si = SelfInfillConfig(tau=0.6, suffix_prompt=vocab.tokenize("r"),
                          stop=StopSpec(()), max_new_tokens=256)
    start = time.perf_counter()
    runs = 20
    tokens = 0
    for i in range(runs):
        _, trace = self_infill((vocab.pre,) + vocab.tokenize("ra"), backend, cfg, si, rng_stream(0, i))
        tokens += len(trace.steps)
    elapsed = time.perf_counter() - start
    print(f"\ndecode throughput ({kernels.ACTIVE}): {tokens / elapsed:,.0f} tokens/s "
          f"({tokens} tokens in {elapsed:.2f}s)")


if __name__ == "__main__":
    main()
