"""Lower and upper nonlinear expectations of a payoff as the drift bound L grows."""
import argparse
import csv
import sys

import numpy as np

from ppdelab import catalog
from ppdelab.paths import TimeGrid
from ppdelab.stochastics import lower_expectation, sample_brownian, upper_expectation


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--payoff", default="identity")
    ap.add_argument("--L", default="0,0.25,0.5,1,1.5")
    ap.add_argument("--N", type=int, default=50)
    ap.add_argument("--M", type=int, default=50_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    grid = TimeGrid(1.0, args.N)
    batch = sample_brownian(grid, 1, args.M, args.seed)
    xi = catalog.get_functional(args.payoff)(batch.paths, grid)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["L", "method", "lower", "lower_se", "plain", "upper", "upper_se"])
    for L in map(float, args.L.split(",")):
        for method in ("bsde", "control_search"):
            lo = lower_expectation(xi, L, batch, method)
            hi = upper_expectation(xi, L, batch, method)
            w.writerow([L, method, f"{lo.value:.6f}", f"{lo.se:.2g}", f"{np.mean(xi):.6f}",
                        f"{hi.value:.6f}", f"{hi.se:.2g}"])


if __name__ == "__main__":
    main()
