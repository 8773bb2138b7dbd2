"""Simulation-based calibration of the sampler: rank histograms for |xi| and the mean effect.

    python3 scripts/sbc.py --replicates 40 --thin 30
"""
import argparse
import sys
from pathlib import Path

import numpy as np
from scipy.stats import chisquare

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))
from test_acceptance import SBC_CONFIG, sbc_ranks  # noqa: E402


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--replicates", type=int, default=40)
    p.add_argument("--thin", type=int, default=SBC_CONFIG.thin)
    p.add_argument("--bins", type=int, default=5)
    args = p.parse_args()
    cfg = SBC_CONFIG.updated(thin=args.thin)
    ranks = np.array([sbc_ranks(r, cfg) for r in range(args.replicates)])
    L = cfg.n_draws + 1
    for k, name in enumerate(("|xi|", "mean effect")):
        h = np.bincount(ranks[:, k] * args.bins // L, minlength=args.bins)
        print(f"{name:12s} histogram {h.tolist()}  chi-square p = {chisquare(h).pvalue:.3f}")


if __name__ == "__main__":
    main()
