"""Compare routed K heads with a single head and the per-regime least-squares oracle.

    python3 scripts/regime_discovery.py [--seed 0] [--epochs 25]
"""

import argparse
import dataclasses
import time

import numpy as np

from tra.config import load_config
from tra.evaluation import period_coefficients
from tra.experiments import fit_and_score, prepare_synthetic


def oracle_mse(prep) -> float:
    tr, te = prep.sets["train"], prep.sets["test"]

    def design(d):
        return np.hstack([d.windows().reshape(len(d), -1), np.ones((len(d), 1))])

    rtr = prep.regime_grid[tr.stock_idx, tr.day_idx]
    rte = prep.regime_grid[te.stock_idx, te.day_idx]
    pred = np.zeros(len(te))
    for r in np.unique(rte):
        coef, *_ = np.linalg.lstsq(design(tr)[rtr == r], tr.labels[rtr == r], rcond=None)
        pred[rte == r] = design(te)[rte == r] @ coef
    return float(np.mean((pred - te.labels) ** 2))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int)
    args = ap.parse_args()
    cfg = load_config(args.config)
    train = dataclasses.replace(cfg.train, seed=args.seed, epochs=args.epochs or cfg.train.epochs)
    prep = prepare_synthetic(cfg.synthetic, cfg.backbone.window_len, cfg.split)

    print(f"{'model':<14}{'test MSE':>10}{'IC':>9}{'accuracy':>10}{'secs':>7}")
    print(f"{'oracle':<14}{oracle_mse(prep):>10.4f}")
    for K in (1, train.K):
        t0 = time.perf_counter()
        fit = fit_and_score(dataclasses.replace(train, K=K), cfg.backbone, cfg.router, prep, cfg.sinkhorn)
        acc = "" if K == 1 else f"{fit.accuracy:.3f}"
        print(f"{f'K={K}':<14}{fit.test_mse:>10.4f}{fit.test_ic:>9.4f}{acc:>10}{time.perf_counter() - t0:>7.0f}")

    # the first feature's coefficient per block of days shows the sign flips the router has to track
    tr = prep.sets["train"]
    x_last = tr.windows()[:, -1, :]
    for c in period_coefficients(x_last, tr.labels, tr.day_idx, cfg.eval.period_len)[:6]:
        print(f"period {c['period']} (from day {c['first_day']}): feature-0 coefficient {c['coef'][0]:+.3f}")


if __name__ == "__main__":
    main()
