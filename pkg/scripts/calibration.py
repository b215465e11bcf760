"""Decile calibration of the projected weights against oracle complier labels.

    python scripts/calibration.py --scenario 2 --case 4 --n 20000
"""

import argparse

import numpy as np

from ivcox.simgen import SimConfig, generate
from ivcox.weights import compute_weights


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scenario", type=int, default=2)
    ap.add_argument("--case", type=int, default=4)
    ap.add_argument("--n", type=int, default=20_000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--bins", type=int, default=10)
    a = ap.parse_args()

    o = generate(SimConfig.from_case(a.scenario, a.case, seed=a.seed, n=a.n))
    k = compute_weights(o.dataset, "kappa_v").values
    edges = np.quantile(k, np.linspace(0, 1, a.bins + 1))
    b = np.clip(np.searchsorted(edges, k, side="right") - 1, 0, a.bins - 1)
    print(f"{'bin':>3} {'size':>6} {'mean w':>8} {'compliers':>9} {'z':>6}")
    for j in range(a.bins):
        m = b == j
        size = int(m.sum())
        p = float(np.clip(k[m].mean(), 0.5 / size, 1 - 0.5 / size))
        frac = o.is_complier[m].mean()
        print(f"{j:3d} {size:6d} {k[m].mean():8.4f} {frac:9.4f} {(frac - p) / np.sqrt(p * (1 - p) / size):6.2f}")


if __name__ == "__main__":
    main()
