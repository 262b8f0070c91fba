"""Filtering wall time against the number of series at a fixed parental-set size."""
import argparse
import time

import numpy as np

from recouple import ddnm, synthetic


def filter_time(q, parents, steps, reps, workers):
    s = synthetic.banded_structure(q, parents)
    y = np.random.default_rng(q).standard_normal((steps, q))
    best = np.inf
    for _ in range(reps):
        models = synthetic.prior_models(s, delta=0.99, beta=0.98)
        t0 = time.perf_counter()
        for t in range(steps):
            models, _, _ = ddnm.filter_step(models, s, y[t], workers=workers)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--sizes", type=int, nargs="+", default=[50, 100, 200, 400])
    p.add_argument("--parents", type=int, default=3)
    p.add_argument("--steps", type=int, default=30)
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--workers", type=int, default=1)
    a = p.parse_args()
    base = None
    for q in a.sizes:
        t = filter_time(q, a.parents, a.steps, a.reps, a.workers)
        base = base or t / q
        print(f"q={q:5d}  {t:8.3f}s  per-series {1e3 * t / (q * a.steps):.3f} ms/step  "
              f"relative {t / (q * base):.2f}")


if __name__ == "__main__":
    main()
