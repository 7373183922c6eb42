"""Stitched smooth approximations and the certified Perron gap over a range of eps."""
import argparse
import csv
import sys

from ppdelab import catalog
from ppdelab.bank_baum import perron_gap, reference_solution, stitch
from ppdelab.bsde import get_generator
from ppdelab.paths import TimeGrid


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--eps", default="0.2,0.1,0.05,0.025")
    ap.add_argument("--generator", default="zero")
    ap.add_argument("--terminal", default="cos")
    ap.add_argument("--N", type=int, default=200)
    ap.add_argument("--M", type=int, default=10_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    f, g = get_generator(args.generator), catalog.get_functional(args.terminal)
    ref = reference_solution(f, g, TimeGrid(1.0, args.N), args.M, args.seed)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["eps", "segments", "degree", "h_tilde", "fraction_within", "u0_0", "u_eps_0", "u_eps_sub_0",
                "certified_gap", "ok"])
    for eps in map(float, args.eps.split(",")):
        a = stitch(ref, eps, seed=args.seed)
        pg = perron_gap(ref, g, eps, approx=a)
        w.writerow([eps, a.n_segments, a.segments[0].psi.degree, f"{a.segments[0].h_tilde:.3g}",
                    f"{a.fraction_within():.4f}", f"{pg.u0_0:.6f}", f"{pg.u_eps_0:.6f}", f"{pg.u_eps_sub_0:.6f}",
                    f"{pg.certified_gap:.6f}", pg.ok])
        sys.stdout.flush()


if __name__ == "__main__":
    main()
