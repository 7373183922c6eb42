"""RMS functional Ito residual against the grid size for several catalog functionals."""
import argparse
import csv
import sys

from ppdelab import catalog
from ppdelab.functional_calculus import ito_residual
from ppdelab.paths import TimeGrid
from ppdelab.stochastics import sample_brownian


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--functionals", default="square_minus_t,cos,heat_cos,integral")
    ap.add_argument("--steps", default="32,64,128,256")
    ap.add_argument("--M", type=int, default=10_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["functional", "N", "rms_residual", "max_residual"])
    for name in args.functionals.split(","):
        u = catalog.get_functional(name)
        for N in map(int, args.steps.split(",")):
            g = TimeGrid(1.0, N)
            r = ito_residual(u, sample_brownian(g, 1, args.M, args.seed + N).paths, g)
            w.writerow([name, N, f"{r.rms:.6g}", f"{r.max_residual.max():.6g}"])


if __name__ == "__main__":
    main()
