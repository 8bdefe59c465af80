"""Timing of the class-aware moment loss: kernel form against explicit flattening."""
import time
from typing import NamedTuple

import numpy as np

from .hmm import cahomm_bruteforce, cahomm_loss
from .numerics import SeededStream, softmax

BENCH_COLUMNS = ("method", "p", "q", "time_per_batch_ms", "total_ms")
METHODS = {"kernel": cahomm_loss, "flatten": cahomm_bruteforce}


class BenchRow(NamedTuple):
    method: str
    p: int
    q: int
    time_per_batch_ms: float
    total_ms: float

    def csv(self):
        return f"{self.method},{self.p},{self.q},{self.time_per_batch_ms:.6f},{self.total_ms:.6f}"


def bench_inputs(p, batch, num_classes, stream):
    gen = stream.generator
    zs = gen.normal(size=(batch, p))
    zt = gen.normal(size=(batch, p))
    ys = np.arange(batch) % num_classes
    t_probs = softmax(gen.normal(size=(batch, num_classes)))
    return zs, ys, zt, t_probs


def run_bench(ps=(8, 16), qs=(2, 3), batch=128, repeats=5, num_classes=3, seed=0):
    """Loss plus all gradients per batch, averaged over ``repeats`` batches, per method."""
    rows = []
    root = SeededStream(seed, ("bench",))
    for p in ps:
        for q in qs:
            args = bench_inputs(p, batch, num_classes, root.child(f"p{p}q{q}"))
            scale = 1.0 / p
            for method, fn in METHODS.items():
                fn(*args, q, scale)  # warm-up
                start = time.perf_counter()
                for _ in range(repeats):
                    fn(*args, q, scale)
                total = (time.perf_counter() - start) * 1000.0
                rows.append(BenchRow(method, p, q, total / repeats, total))
    return rows


def kernel_faster(rows, p=16, q=3):
    """True/False for the (p, q) pair, or None when it was not benchmarked."""
    t = {r.method: r.time_per_batch_ms for r in rows if r.p == p and r.q == q}
    if set(t) != set(METHODS):
        return None
    return t["kernel"] < t["flatten"]


def format_csv(rows):
    return "\n".join([",".join(BENCH_COLUMNS)] + [r.csv() for r in rows]) + "\n"
