"""Compare the compiled kernels against the pure-Python fallback.

Imports both backends side by side, checks they produce identical
output on the benchmark inputs, then times each hot function.  Run:

    python3 benchmarks/bench_kernels.py [--repeat N] [--quick]
"""

import argparse
import random
import time

from exac._kernels import _pykernels as py

try:
    from exac._kernels import _ckernels as c
except ImportError:
    c = None


def timeit(fn, args, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def make_track(cells, seed=0):
    rng = random.Random(seed)
    x, y = 0, 0
    path = [(x, y)]
    for _ in range(cells):
        dx, dy = rng.choice([(1, 0), (-1, 0), (0, 1), (0, -1)])
        x, y = x + dx, y + dy
        path.append((x, y))
    return path


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5, help="best-of repetitions")
    ap.add_argument("--quick", action="store_true", help="smaller inputs")
    opts = ap.parse_args()

    if c is None:
        print("compiled backend not built; showing pure-python timings only")

    scale = 10 if opts.quick else 100
    payload = random.Random(1).randbytes(2048 * scale)
    small_chunks = py.split_chunks(payload, 64)
    pairs = list(enumerate(small_chunks))
    rng = random.Random(2)
    shuffled = pairs[:]
    rng.shuffle(shuffled)
    merged = dict(pairs)
    sparse = {i: ch for i, ch in pairs if i % 7}
    track = make_track(40 * scale)
    samples = py.interpolate_track(track, 0.02, 2.0)
    encoded = py.encode_samples(samples)

    cases = [
        ("split_chunks 64B", "split_chunks", (payload, 64)),
        ("split_chunks 4300B", "split_chunks", (payload, 4300)),
        ("merge_pairs shuffled", "merge_pairs", (None, shuffled)),  # dict arg per call
        ("join_chunks", "join_chunks", (merged, len(pairs))),
        ("missing_seqs", "missing_seqs", (sparse, len(pairs))),
        ("encode_samples", "encode_samples", (samples,)),
        ("decode_samples", "decode_samples", (encoded,)),
        ("interpolate_track", "interpolate_track", (track, 0.02, 2.0)),
    ]

    print(f"{'kernel':24} {'python':>10} {'compiled':>10} {'speedup':>8}")
    for label, name, args in cases:
        def bind(mod):
            fn = getattr(mod, name)
            if name == "merge_pairs":
                return lambda _none, p: fn({}, p)  # fresh dict so inserts happen
            return fn

        t_py = timeit(bind(py), args, opts.repeat)
        if c is None:
            print(f"{label:24} {t_py * 1e3:9.2f}ms {'-':>10} {'-':>8}")
            continue
        got_py = bind(py)(*args)
        got_c = bind(c)(*args)
        if got_py != got_c:
            raise SystemExit(f"backend outputs differ for {name}")
        t_c = timeit(bind(c), args, opts.repeat)
        print(f"{label:24} {t_py * 1e3:9.2f}ms {t_c * 1e3:9.2f}ms {t_py / t_c:7.1f}x")


if __name__ == "__main__":
    main()
