"""Time every kernel under both backends and check they agree.

    python3 benchmarks/bench_kernels.py [--rows 4096] [--cols 128] [--repeat 20]

Prints one line per kernel: median milliseconds per call for numpy and numba,
the speedup, and the max absolute difference between outputs.
"""
from __future__ import annotations

import argparse
import math
import timeit

import numpy as np

from mext import _kernels as K


def cases(rows: int, cols: int, rng: np.random.Generator) -> dict:
    x = rng.normal(size=(rows, cols))
    g = rng.normal(size=(rows, cols))
    gain, bias = rng.normal(size=cols), rng.normal(size=cols)
    _, xhat, rstd = K.np_layernorm_fwd(x, gain, bias, 1e-5)
    p = K.np_softmax_fwd(x)
    logp = K.np_log_softmax_fwd(x)
    ids = rng.integers(0, 1000, size=rows)
    ent = rng.uniform(0, 0.7, size=(6, rows * 4))
    return {
        "layernorm_fwd": (x, gain, bias, 1e-5),
        "layernorm_bwd": (g, xhat, rstd, gain),
        "gelu_fwd": (x,),
        "gelu_bwd": (g, x),
        "softmax_fwd": (x,),
        "softmax_bwd": (g, p),
        "log_softmax_fwd": (x,),
        "log_softmax_bwd": (g, logp),
        "embedding_bwd": (g, ids, 1000),
        "first_exit": (ent, 0.3),
    }


def _flat(out):
    parts = out if isinstance(out, tuple) else (out,)
    return np.concatenate([np.asarray(o, dtype=np.float64).ravel() for o in parts])


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--rows", type=int, default=4096)
    ap.add_argument("--cols", type=int, default=128)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    if "numba" not in K.IMPLS:
        raise SystemExit("numba is not importable; nothing to compare")
    data = cases(args.rows, args.cols, np.random.default_rng(0))
    print(f"rows={args.rows} cols={args.cols} repeat={args.repeat} active_backend={K.BACKEND}")
    print(f"{'kernel':18s} {'numpy_ms':>10s} {'numba_ms':>10s} {'speedup':>8s} {'max_abs_diff':>13s}")
    for name, inputs in data.items():
        outs, times = {}, {}
        for backend in ("numpy", "numba"):
            fn = K.IMPLS[backend][name]
            outs[backend] = fn(*inputs)  # warm-up and JIT compile
            t = timeit.repeat(lambda: fn(*inputs), number=1, repeat=args.repeat)
            times[backend] = sorted(t)[len(t) // 2] * 1e3
        diff = float(np.abs(_flat(outs["numpy"]) - _flat(outs["numba"])).max())
        speed = times["numpy"] / times["numba"] if times["numba"] > 0 else math.inf
        print(f"{name:18s} {times['numpy']:10.3f} {times['numba']:10.3f} {speed:8.2f} {diff:13.3e}")


if __name__ == "__main__":
    main()
