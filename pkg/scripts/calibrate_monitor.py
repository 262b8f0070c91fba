"""Sweep monitor thresholds on synthetic Poisson flows: null false alarms and shift detection."""
import argparse

import numpy as np

from recouple.netflow import MonitorConfig
from recouple.synthetic import flow_monitor_trial


def rates(tau, l_min, k, reps, seed, rate, delta):
    cfg = MonitorConfig(k=k, tau=tau, l_min=l_min)
    null, _ = flow_monitor_trial(reps, 520, rate, None, delta=delta, config=cfg, seed=seed)
    # 500 counted steps after a burn-in from the vague initial prior
    fa = np.mean(null[20:].any(axis=0))
    shift, _ = flow_monitor_trial(reps, 120, rate, 100, delta=delta, config=cfg, seed=seed + 1)
    det = np.mean(shift[100:105].any(axis=0) & ~shift[20:100].any(axis=0))
    return fa, det


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--replicates", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rate", type=float, default=50.0)
    p.add_argument("--delta", type=float, default=0.98)
    p.add_argument("--k", type=float, default=2.5)
    a = p.parse_args()
    print("log_tau l_min  false_alarm  detect_5")
    for log_tau in (2.0, 4.0, 6.0, 7.5, 9.0):
        for l_min in (3, 10, 30, 60, 1000):
            fa, det = rates(np.exp(log_tau), l_min, a.k, a.replicates, a.seed, a.rate, a.delta)
            print(f"{log_tau:7.1f} {l_min:5d}  {fa:11.3f}  {det:8.3f}")


if __name__ == "__main__":
    main()
