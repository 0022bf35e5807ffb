"""Time the compiled kernels against the numpy fallback.

Both backends implement the same reduction-order contract, so outputs are
checked for agreement before timing.  Reports best-of-N wall time per
kernel and an end-to-end layer forward.

    python benchmarks/bench_backends.py --tokens 2048 --experts 16 --dim 64
"""

import argparse
import time

import numpy as np

from stunmoe.backend import ACT_SILU, get_backend
from stunmoe.rng import SeededRng


def best_of(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def build_workload(args):
    rng = SeededRng(args.seed)
    d, h, n = args.dim, args.hidden, args.experts
    return {
        "router": rng.normal((n, d)) * 0.3,
        "w_in": rng.normal((n, h, d)) * 0.3,
        "w_out": rng.normal((n, d, h)) * 0.3,
        "x": rng.normal((args.tokens, d)),
        "flat": rng.normal((args.flat,)),
        "mat_a": rng.normal((args.dim, args.dim)),
        "mat_b": rng.normal((args.dim, args.dim)),
    }


def kernel_cases(w, args):
    logits = w["x"][: args.tokens // 4] @ w["router"].T
    return [
        ("matmul", lambda k: k.matmul(w["mat_a"], w["mat_b"])),
        ("softmax xN", lambda k: [k.softmax(row) for row in logits[:256]]),
        ("topk xN", lambda k: [k.topk(row, 2) for row in logits[:256]]),
        ("frobenius", lambda k: k.frobenius(w["flat"])),
        ("central_moments", lambda k: k.central_moments(w["flat"])),
        (
            "layer_forward_batch",
            lambda k: k.layer_forward_batch(
                w["router"], w["w_in"], w["w_out"], w["x"], 2, False, ACT_SILU
            ),
        ),
    ]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--tokens", type=int, default=2048)
    ap.add_argument("--experts", type=int, default=16)
    ap.add_argument("--dim", type=int, default=64)
    ap.add_argument("--hidden", type=int, default=64)
    ap.add_argument("--flat", type=int, default=200000)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    try:
        compiled = get_backend("compiled")
    except ImportError:
        print("compiled backend unavailable; nothing to compare")
        return
    python = get_backend("python")
    w = build_workload(args)

    out_c = compiled.layer_forward_batch(
        w["router"], w["w_in"], w["w_out"], w["x"], 2, False, ACT_SILU
    )[0]
    out_p = python.layer_forward_batch(
        w["router"], w["w_in"], w["w_out"], w["x"], 2, False, ACT_SILU
    )[0]
    agree = float(np.max(np.abs(out_c - out_p)))
    print(f"backend agreement: max |compiled - python| = {agree:.3e}")
    print()
    print(f"{'kernel':<22} {'python':>10} {'compiled':>10} {'speedup':>8}")
    for label, call in kernel_cases(w, args):
        tp = best_of(lambda: call(python), args.repeats)
        tc = best_of(lambda: call(compiled), args.repeats)
        print(f"{label:<22} {tp * 1e3:9.2f}ms {tc * 1e3:9.2f}ms {tp / tc:7.2f}x")


if __name__ == "__main__":
    main()
