"""Time the compiled kernels against the numpy fallback on default-scenario shapes.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""

from __future__ import annotations

import argparse
import importlib
import timeit

import numpy as np

from rcpa_lab import _kernels_py

try:
    _compiled = importlib.import_module("rcpa_lab._kernels")
except ImportError:
    _compiled = None

V, ORDER, G, L, N_TOK = 32, 2, 8, 8, 2000


def _inputs(seed: int = 0):
    rng = np.random.default_rng(seed)
    n_ctx = (V + 1) ** ORDER
    logits = rng.normal(size=(n_ctx, V))
    uniforms = rng.random((G, L))
    ctx = rng.integers(n_ctx, size=N_TOK)
    tok = rng.integers(V, size=N_TOK)
    uniq, inv = np.unique(ctx, return_inverse=True)
    compact = np.ascontiguousarray(logits[uniq])
    blp = _kernels_py.token_logps(compact, inv, tok) + rng.normal(scale=0.1, size=N_TOK)
    ref = _kernels_py.token_logps(compact, inv, tok)
    adv = rng.normal(size=N_TOK) / N_TOK
    klc = np.full(N_TOK, 0.01 / N_TOK)
    return logits, uniforms, ctx, tok, compact, inv.astype(np.int64), blp, ref, adv, klc


def _cases(mod, data):
    logits, uniforms, ctx, tok, compact, inv, blp, ref, adv, klc = data
    start = np.full(G, (V + 1) ** ORDER - 1, dtype=np.int64)
    grad = np.zeros_like(compact)
    return {
        "sample_batch": lambda: mod.sample_batch(logits, ORDER, start, uniforms, 0),
        "token_logps": lambda: mod.token_logps(logits, ctx, tok),
        "surrogate_accumulate": lambda: mod.surrogate_accumulate(compact, inv, tok, blp, ref, adv, klc, 0.2, grad),
    }


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args()
    data = _inputs()
    backends = {"python": _kernels_py}
    if _compiled is not None:
        backends["cython"] = _compiled
    timings = {}
    for name, mod in backends.items():
        for case, fn in _cases(mod, data).items():
            fn()
            best = min(timeit.repeat(fn, number=args.repeat, repeat=3)) / args.repeat
            timings[(case, name)] = best
    print(f"{'kernel':<22} {'python us':>10} {'cython us':>10} {'speedup':>8}")
    for case in ("sample_batch", "token_logps", "surrogate_accumulate"):
        py = timings[(case, "python")] * 1e6
        if "cython" in backends:
            cy = timings[(case, "cython")] * 1e6
            print(f"{case:<22} {py:>10.1f} {cy:>10.1f} {py / cy:>7.1f}x")
        else:
            print(f"{case:<22} {py:>10.1f} {'n/a':>10}")


if __name__ == "__main__":
    main()
