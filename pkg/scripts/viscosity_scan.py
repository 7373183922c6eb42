"""Falsifier verdicts for the heat solution u0 and for u0 + c (T - t) over a range of c."""
import argparse
import csv
import sys

from ppdelab import catalog
from ppdelab.bsde import lattice_functional, solve_bsde_lattice, zero_generator
from ppdelab.paths import PathFunctional, TimeGrid
from ppdelab.viscosity import random_anchors, viscosity_falsifier


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--shifts", default="-0.4,-0.2,-0.05,0,0.05,0.2,0.4")
    ap.add_argument("--anchors", type=int, default=20)
    ap.add_argument("--L", type=float, default=0.5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    grid = TimeGrid(1.0, 500)
    u0 = lattice_functional(solve_bsde_lattice(zero_generator(), catalog.cosine(), grid))
    anchors = random_anchors(grid, args.anchors, args.seed, t_max=0.95)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["shift", "sub_violations", "super_violations", "vacuous"])
    for c in map(float, args.shifts.split(",")):
        u = PathFunctional(lambda x, g, c=c: u0(x, g) + c * (g.T - (x.shape[-2] - 1) * g.dt), f"u0{c:+g}")
        reps = viscosity_falsifier(u, zero_generator(), args.L, anchors, grid)
        w.writerow([c, sum(r.verdict == "violation" and r.side == "sub" for r in reps),
                    sum(r.verdict == "violation" and r.side == "super" for r in reps),
                    sum(r.verdict == "vacuous" for r in reps)])
        sys.stdout.flush()


if __name__ == "__main__":
    main()
