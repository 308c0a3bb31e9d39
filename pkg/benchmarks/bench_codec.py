"""Time the GF(256) product kernel: numba JIT against the numpy fallback.

The codec spends essentially all of its arithmetic in one kernel,
``gf256.gf_matmul`` (a (p,k) x (k,L) product over the field), used both
to generate parity and, after inverting a small decode matrix, to
reconstruct erased payloads.  Production code picks the backend once at
import: numba when importable unless CASPR_NUMBA=0.  This script times
both backends on batch shapes the simulator actually produces and
prints per-call medians plus the speedup, checking first that the two
paths agree byte for byte.

Run from the repo root:

    python benchmarks/bench_codec.py
    python benchmarks/bench_codec.py --repeats 2000 --payload 256
"""

import argparse
import statistics
import time

import numpy as np

from caspr import gf256

# (k data symbols, p parity) pairs seen in the bundled scenarios, small
# cross-stream groups up to the widest the codec accepts
SHAPES = [(4, 1), (4, 2), (8, 2), (16, 1), (16, 2), (20, 4)]


def _batch(rng, k, length):
    return rng.integers(0, 256, size=(k, length), dtype=np.uint8)


def _time_call(fn, args, repeats):
    """Median wall time of fn(*args) in microseconds."""
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        samples.append((time.perf_counter() - t0) * 1e6)
    return statistics.median(samples)


def bench(payload, repeats, seed):
    rng = np.random.default_rng(seed)
    backends = [("numpy", gf256._matmul_numpy)]
    if gf256.HAS_NUMBA:
        backends.append(("numba", gf256._matmul_numba))
    else:
        print("numba not importable; timing the numpy path alone")

    rows = []
    for k, p in SHAPES:
        mat = gf256.parity_matrix(k, p)
        data = _batch(rng, k, payload)

        # decode work item: invert a p x p corner and multiply it out,
        # the shape reconstruction hits after p erasures
        square = gf256.parity_matrix(p, p) if p > 1 else np.ones((1, 1), np.uint8)
        inv = gf256.gf_inv_matrix(square)
        dec_data = _batch(rng, p, payload)

        ref_enc = gf256._matmul_numpy(mat, data)
        ref_dec = gf256._matmul_numpy(inv, dec_data)

        cells = {}
        for name, fn in backends:
            # first call outside the timed region: JIT compilation
            got_enc = fn(mat, data)
            got_dec = fn(inv, dec_data)
            assert np.array_equal(got_enc, ref_enc), name
            assert np.array_equal(got_dec, ref_dec), name
            cells[name] = (_time_call(fn, (mat, data), repeats),
                          _time_call(fn, (inv, dec_data), repeats))
        rows.append((k, p, cells))
    return rows


def report(rows, payload):
    have_numba = rows and "numba" in rows[0][2]
    print(f"\npayload {payload} B per symbol, per-call median (us)")
    head = f"{'k':>3} {'p':>2} {'enc numpy':>10}"
    if have_numba:
        head += f" {'enc numba':>10} {'x':>6}"
    head += f" {'dec numpy':>10}"
    if have_numba:
        head += f" {'dec numba':>10} {'x':>6}"
    print(head)
    for k, p, cells in rows:
        enc_np, dec_np = cells["numpy"]
        line = f"{k:>3} {p:>2} {enc_np:>10.1f}"
        if have_numba:
            enc_nb, dec_nb = cells["numba"]
            line += f" {enc_nb:>10.1f} {enc_np / enc_nb:>6.1f}"
        line += f" {dec_np:>10.1f}"
        if have_numba:
            line += f" {dec_nb:>10.1f} {dec_np / dec_nb:>6.1f}"
        print(line)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--payload", type=int, default=1200,
                    help="symbol length in bytes (default matches the "
                         "bundled scenarios)")
    ap.add_argument("--repeats", type=int, default=500)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()

    rows = bench(args.payload, args.repeats, args.seed)
    report(rows, args.payload)


if __name__ == "__main__":
    main()
