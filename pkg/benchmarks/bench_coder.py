"""Throughput of the compiled and pure-Python range coders.

    python3 benchmarks/bench_coder.py --symbols 200000 --alphabet 9

Both backends code the same random stream under random quantized PMFs; the
script checks they emit identical bytes and decode back to the input.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from cwic import coder


def make_stream(count: int, alphabet: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    pmfs = rng.dirichlet(np.full(alphabet, 0.5), size=count)
    tables = coder.quantize_pmfs(pmfs)
    u = rng.random(count)[:, None]
    symbols = (np.cumsum(pmfs, axis=1) < u).sum(axis=1).clip(0, alphabet - 1)
    return symbols.astype(np.int64), tables


def bench(enc_cls, dec_cls, symbols, tables, repeat: int) -> tuple[float, float, bytes]:
    best_e = best_d = float("inf")
    payload = b""
    for _ in range(repeat):
        t = time.perf_counter()
        enc = enc_cls()
        enc.encode_many(symbols, tables)
        payload = enc.finish()
        best_e = min(best_e, time.perf_counter() - t)
        t = time.perf_counter()
        dec = dec_cls(payload)
        out = dec.decode_many(tables)
        dec.finish()
        best_d = min(best_d, time.perf_counter() - t)
        if not np.array_equal(np.asarray(out), symbols):
            raise SystemExit("round trip failed")
    return best_e, best_d, payload


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--symbols", type=int, default=100_000)
    ap.add_argument("--alphabet", type=int, default=9)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    symbols, tables = make_stream(args.symbols, args.alphabet, args.seed)
    results = {}
    print(f"{args.symbols} symbols, alphabet {args.alphabet}")
    print(f"{'backend':8s} {'encode MB/s':>12s} {'decode MB/s':>12s} {'Msym/s enc':>11s} {'Msym/s dec':>11s}")
    for name, (enc_cls, dec_cls) in coder.backends().items():
        te, td, payload = bench(enc_cls, dec_cls, symbols, tables, args.repeat)
        results[name] = (te, td, payload)
        mb = len(payload) / 1e6
        print(f"{name:8s} {mb / te:12.3f} {mb / td:12.3f} {args.symbols / te / 1e6:11.3f} {args.symbols / td / 1e6:11.3f}")
    if len(results) == 2:
        (pe, pd, pp), (ce, cd, cp) = results["python"], results["cython"]
        print(f"speedup: encode {pe / ce:.1f}x, decode {pd / cd:.1f}x; identical bytes: {pp == cp}")
    else:
        print("compiled backend not built; only the fallback was measured")


if __name__ == "__main__":
    main()
