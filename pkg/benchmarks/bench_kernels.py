"""Compare the compiled and numpy kernel backends.

Times quantized GEMM, fused attention and a full encoder forward under each
available backend and checks that both produce the same numbers.

    python3 benchmarks/bench_kernels.py --repeats 20 --csv kernels.csv
"""
from __future__ import annotations

import argparse
import csv
import statistics
import sys
import time

import numpy as np

from slimformer import _backend
from slimformer.encoder import ExecPlan, ModelConfig, forward, init_model
from slimformer.qgemm import PackCache, gemm_i8, pack_weight, quantize_activations_dynamic, quantize_weight_per_column
from slimformer.runtime import Batch


def _time(fn, repeats):
    fn()  # warm-up (packing, page faults)
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples)


def gemm_cases(rng):
    for m, k, n in [(1, 768, 3072), (16, 768, 768), (64, 768, 768), (128, 256, 1024)]:
        x = rng.standard_normal((m, k)).astype(np.float32)
        w = rng.standard_normal((k, n)).astype(np.float32)
        b = rng.standard_normal(n).astype(np.float32)
        packed = pack_weight(quantize_weight_per_column(w), ("bench", m, k, n), cache=PackCache())
        yield f"gemm_i8 {m}x{k}x{n}", lambda x=x, p=packed, b=b: gemm_i8(quantize_activations_dynamic(x), p, b, "relu")


def attention_cases(rng):
    for b, s, a, d in [(1, 128, 12, 64), (8, 64, 12, 64), (32, 32, 4, 32)]:
        q, k, v = (rng.standard_normal((b * s, a * d)).astype(np.float32) for _ in range(3))
        mask = np.zeros((b, s), dtype=np.float32)
        ones = np.ones(a, dtype=np.float32)

        def run(q=q, k=k, v=v, mask=mask, ones=ones, b=b, s=s, a=a, d=d):
            return _backend.impl.fused_attention(q, k, v, mask, ones, b, s, a, d, 1.0 / np.sqrt(d), 1)

        yield f"fused_attention b{b} s{s} a{a} d{d}", run


def forward_cases(rng):
    cfg = ModelConfig(num_layers=4, hidden=256, num_heads=4, ffn_size=1024, vocab_size=1000,
                      max_seq_len=128, num_classes=2)
    model = init_model(cfg, seed=0)
    batch = Batch.from_sequences([rng.integers(1, 1000, size=int(rng.integers(16, 128))) for _ in range(8)])
    plan = ExecPlan.optimized()
    yield "forward i8+fused L4 H256 b8", lambda: forward(model, batch, plan)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--csv", default=None)
    args = ap.parse_args(argv)

    backends = _backend.available()
    if "cython" not in backends:
        print("compiled extension not built; only the numpy backend will be timed", file=sys.stderr)
    rows = []
    for make in (gemm_cases, attention_cases, forward_cases):
        for label, fn in make(np.random.default_rng(args.seed)):
            times, outs = {}, {}
            for name in backends:
                with _backend.use(name):
                    outs[name] = fn()
                    times[name] = _time(fn, args.repeats)
            ref = outs[backends[-1]]
            diff = max(float(np.max(np.abs(o - ref))) for o in outs.values())
            cy, py = times.get("cython", float("nan")), times["python"]
            rows.append((label, cy * 1e3, py * 1e3, py / cy, diff))
            print(f"{label:<32} cython {cy * 1e3:9.3f} ms   python {py * 1e3:9.3f} ms   "
                  f"ratio {py / cy:6.2f}   max|diff| {diff:.2e}")
    if args.csv:
        with open(args.csv, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["case", "cython_ms", "python_ms", "python_over_cython", "max_abs_diff"])
            w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
