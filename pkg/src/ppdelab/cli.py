"""Command line runner: every experiment is a subcommand writing CSV tables.

Configuration is layered: built-in defaults, then ``--config`` (JSON), then
``PPDE_*`` environment variables, then explicit flags.  Outputs go to
``--out`` together with ``manifest.csv`` listing each artifact, its SHA-256
and the hash of the resolved configuration.  The exit code is nonzero when
the subcommand's own check fails.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import bank_baum as bb
from . import bsde, stochastics, viscosity
from .catalog import FUNCTIONALS, get_functional
from .functional_calculus import derivatives, ito_residual
from .paths import GridStoppingTime, PathFunctional, TimeGrid

log = logging.getLogger("ppdelab")


@dataclass
class ExperimentConfig:
    command: str = ""
    T: float = 1.0
    N: int = 50
    M: int = 10_000
    seed: int = 0
    d: int = 1
    generator: dict = field(default_factory=lambda: {"name": "zero"})
    terminal: dict = field(default_factory=lambda: {"name": "cos"})
    functional: dict = field(default_factory=lambda: {"name": "square_minus_t"})
    L: float = 0.5
    lam: float = 1.0
    eps: float = 0.05
    shift: float = 0.0
    anchors: int = 10
    method: str = "bsde"
    tolerances: dict = field(default_factory=lambda: {"delta": 0.01, "segment": 1e-3, "operator": 0.05})
    out: str = "ppde_out"

    def validate(self):
        if self.N < 1 or self.M < 1:
            raise ValueError("N and M must be >= 1")
        if not isinstance(self.seed, int):
            raise ValueError("seed must be an explicit integer")
        bsde.get_generator(self.generator["name"], **_params(self.generator))
        for entry in (self.terminal, self.functional):
            if entry["name"] not in FUNCTIONALS:
                raise KeyError(f"unknown functional {entry['name']!r}; known: {sorted(FUNCTIONALS)}")

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.T, self.N)

    def f(self):
        return bsde.get_generator(self.generator["name"], **_params(self.generator))

    def g(self) -> PathFunctional:
        return get_functional(self.terminal["name"], **_params(self.terminal))

    def u(self) -> PathFunctional:
        return get_functional(self.functional["name"], **_params(self.functional))

    def digest(self) -> str:
        blob = json.dumps({k: v for k, v in asdict(self).items() if k != "out"}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _params(entry: dict) -> dict:
    return {k: v for k, v in entry.items() if k != "name"}


# ---------------------------------------------------------------------------
# subcommands: each returns ({table_name: (header, rows)}, passed)


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.10g}"
    return x


def cmd_ito_check(cfg):
    u = cfg.u()
    rows, summary = [], []
    for N in (cfg.N, 2 * cfg.N, 4 * cfg.N):
        grid = TimeGrid(cfg.T, N)
        batch = stochastics.sample_brownian(grid, cfg.d, cfg.M, cfg.seed)
        res = ito_residual(u, batch.paths, grid)
        summary.append([N, res.rms, float(res.max_residual.max())])
        if N == cfg.N:
            rows = [[m, mx, rms] for m, mx, rms in res.rows()]
    rms = [s[1] for s in summary]
    exact = max(rms) < 1e-10
    ratios = [rms[i + 1] / rms[i] for i in range(2)] if not exact else [0.0, 0.0]
    ok = exact or all(0.4 <= r <= 0.6 for r in ratios)
    return {"ito_residual": (["path_id", "max_residual", "rms"], rows),
            "ito_summary": (["N", "rms", "max_residual"], summary)}, ok


def cmd_derivatives(cfg):
    u, grid = cfg.u(), cfg.grid
    batch = stochastics.sample_brownian(grid, cfg.d, min(cfg.M, 20), cfg.seed)
    rows = []
    for m in range(batch.M):
        k = grid.N // 2
        rep = derivatives(u, batch.paths[m, : k + 1], grid)
        rows.append([m, k, float(rep.dt), *np.ravel(rep.dx), *np.ravel(rep.dxx), rep.richardson_gap])
    head = ["path_id", "k", "dt"] + [f"dx_{i + 1}" for i in range(cfg.d)] + \
           [f"dxx_{i + 1}{j + 1}" for i in range(cfg.d) for j in range(cfg.d)] + ["gap"]
    return {"derivatives": (head, rows)}, True


def cmd_nlexp(cfg):
    g, grid = cfg.g(), cfg.grid
    batch = stochastics.sample_brownian(grid, cfg.d, cfg.M, cfg.seed)
    lo = stochastics.lower_expectation(g, cfg.L, batch, cfg.method)
    up = stochastics.upper_expectation(g, cfg.L, batch, cfg.method)
    plain, se = stochastics._mean_se(g(batch.paths, grid))
    ok = lo.value <= plain + 3 * se + 3 * lo.se and plain <= up.value + 3 * se + 3 * up.se
    return {"nlexp": (["quantity", "value", "se"],
                      [["lower", lo.value, lo.se], ["plain", plain, se], ["upper", up.value, up.se]])}, ok


def cmd_stop(cfg):
    grid = TimeGrid(cfg.T, min(cfg.N, 12))
    tree = stochastics.TreeBatch(grid, 1)
    sv = stochastics.optimal_stop_lower(cfg.u(), tree, cfg.L)
    inv = sv.invariant_violations()
    ok = inv["Y_above_X"] <= 1e-10 and inv["contact_gap"] <= 1e-10 and inv["complementarity"] <= 1e-10
    rows = [[k, float(np.mean(sv.Y[:, k])), float(np.mean(sv.tau_star == k))] for k in range(grid.N + 1)]
    return {"stopping": (["k", "Y_mean", "P_tau_star"], rows),
            "stopping_invariants": (["name", "value"], [[a, b] for a, b in inv.items()])}, ok


def cmd_solve(cfg):
    batch = stochastics.sample_brownian(cfg.grid, cfg.d, cfg.M, cfg.seed)
    sol = bsde.solve_bsde_regression(cfg.f(), cfg.g(), batch)
    d = sol.Z.shape[2]
    rows = []
    for k in range(cfg.N + 1):
        col = sol.Y[:, k]
        z = sol.Z[:, k].mean(axis=0) if k < cfg.N else np.full(d, np.nan)
        rows.append([k, cfg.grid.time(k), col.mean(), col.std(ddof=1) / np.sqrt(cfg.M), *z])
    return {"solution": (["k", "t", "Y_mean", "Y_se"] + [f"Z_mean_{i + 1}" for i in range(d)], rows),
            "y0": (["Y0", "se"], [[sol.y0, sol.se]])}, True


def cmd_u0_surface(cfg):
    grid = cfg.grid
    anchors = viscosity.random_anchors(grid, cfg.anchors, cfg.seed, cfg.d)
    rows = []
    for i, (k, omega) in enumerate(anchors):
        e = bsde.u0_value(k, omega, cfg.f(), cfg.g(), grid, cfg.M, cfg.seed + 1 + i)
        rows.append([i, k, grid.time(k), float(omega[-1, 0]), e.value, e.se])
    return {"u0_surface": (["anchor_id", "k", "t", "omega_t", "u0", "se"], rows)}, True


def _u0_field(cfg):
    lat = bsde.solve_bsde_lattice(cfg.f(), cfg.g(), TimeGrid(cfg.T, 2000))
    base = bsde.lattice_functional(lat)
    c = cfg.shift
    if c == 0:
        return base
    return PathFunctional(lambda x, g: base(x, g) + c * (g.T - (x.shape[-2] - 1) * g.dt), f"u0{c:+g}(T-t)",
                          markovian=True)


def cmd_viscosity_check(cfg):
    grid = TimeGrid(cfg.T, 500)
    u = _u0_field(cfg)
    anchors = viscosity.random_anchors(grid, cfg.anchors, cfg.seed, t_max=cfg.T - 0.05)
    reps = viscosity.viscosity_falsifier(u, cfg.f(), cfg.L if cfg.f().L0 > 0 else 0.0, anchors, grid,
                                         op_tol=cfg.tolerances.get("operator", 0.05))
    bad = sum(r.verdict == "violation" for r in reps)
    return {"viscosity": (["anchor_id", "phi_id", "side", "membership", "L_phi", "verdict"],
                          [r.row() for r in reps])}, bad == 0


def cmd_classical_check(cfg):
    u, grid = cfg.u(), cfg.grid
    batch = stochastics.sample_brownian(grid, 1, 20, cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    pts = [batch.paths[m, : int(rng.integers(0, grid.N)) + 1] for m in range(batch.M)]
    rep = viscosity.classical_check(u, cfg.f(), pts, grid=grid)
    rows = [[i, v] for i, v in enumerate(rep.values)]
    return {"classical": (["point_id", "L_u"], rows),
            "classification": (["classification", "failures"], [[rep.classification, len(rep.failures)]])}, \
        rep.classification == "solution"


def cmd_transform(cfg):
    grid = TimeGrid(cfg.T, 10_000)
    u = cfg.u()
    ft = viscosity.generator_transform(cfg.f(), cfg.lam)
    ut = viscosity.transform_functional(u, cfg.lam)
    batch = stochastics.sample_brownian(grid, 1, 50, cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    rows = []
    for m in range(batch.M):
        k = int(rng.integers(0, grid.N))
        x = batch.paths[m, : k + 1]
        rows.append([m, grid.time(k), viscosity.ppde_operator(ut, x, ft, grid, analytic=False),
                     viscosity.ppde_operator(ut, x, ft, grid, analytic=True) if ut.has_derivatives else np.nan])
    worst = max(abs(r[2]) for r in rows)
    return {"transform": (["point_id", "t", "L_numeric", "L_analytic"], rows)}, worst < 1e-3


def _reference(cfg):
    return bb.reference_solution(cfg.f(), cfg.g(), TimeGrid(cfg.T, max(cfg.N, 200)), cfg.M, cfg.seed)


def cmd_bank_baum(cfg):
    ref = _reference(cfg)
    ap = bb.stitch(ref, cfg.eps)
    rows = []
    N = ap.grid.N
    for m in range(ref.X.shape[0]):
        for i, eps_i in enumerate(ap.eps_budget):
            t0 = ap.taus[m, i]
            if t0 >= N:
                break
            t1 = ap.taus[m, i + 1]
            rows.append([m, i, int(t0), eps_i, float(np.max(np.abs(ap.X_eps[m, t0: t1 + 1] - ap.X[m, t0: t1 + 1])))])
    frac = ap.fraction_within()
    total, budget, tol = ap.budget_check()
    summary = [[ap.n_segments, frac, total, budget, ap.C]]
    ok = frac >= 1 - cfg.tolerances.get("delta", 0.01) and total <= budget + tol
    return {"stitch": (["path_id", "i", "tau_i", "eps_i", "seg_error"], rows),
            "stitch_summary": (["segments", "fraction_within_eps", "failure_freq", "budget", "C"], summary)}, ok


def cmd_perron_gap(cfg):
    ref = _reference(cfg)
    pg = bb.perron_gap(ref, cfg.g(), cfg.eps, cfg.tolerances.get("delta", 0.01))
    return {"perron_gap": (["u0_0", "u_eps_0", "gap", "certified_bound"], [pg.summary_row()])}, pg.ok


def cmd_stability(cfg):
    batch = stochastics.sample_brownian(cfg.grid, cfg.d, cfg.M, cfg.seed)
    rows = bsde.stability_experiment(cfg.f(), cfg.g(), batch, [0.1, 0.05, 0.025])
    ok = all(r.within for r in rows) and rows[0].gap > rows[1].gap > rows[2].gap
    return {"stability": (["eps", "y_eps", "y0", "gap", "se", "lower", "upper"],
                          [[r.eps, r.y_eps, r.y0, r.gap, r.se, r.lower, r.upper] for r in rows])}, ok


def cmd_comparison(cfg):
    g1 = cfg.g()
    g2 = PathFunctional(lambda x, gr: g1(x, gr) + 0.1, f"{g1.name}+0.1")
    tree = stochastics.TreeBatch(TimeGrid(cfg.T, min(cfg.N, 10)), 1)
    v_tree = bsde.comparison_test(cfg.f(), g1, g2, tree)
    batch = stochastics.sample_brownian(cfg.grid, cfg.d, cfg.M, cfg.seed)
    v_mc = bsde.comparison_test(cfg.f(), g1, g2, batch)
    rows = [["tree", v_tree.y1, v_tree.y2, v_tree.se, v_tree.ok], ["mc", v_mc.y1, v_mc.y2, v_mc.se, v_mc.ok]]
    return {"comparison": (["engine", "y1", "y2", "se", "ok"], rows)}, v_tree.ok and v_mc.ok


COMMANDS = {
    "ito-check": (cmd_ito_check, "Residual of the functional Ito expansion "
                  "u(t+dt) - u(t) = (dt u + tr(dxx u)/2) dt + dx u . dB along Brownian paths, at N, 2N, 4N. "
                  "Defaults: functional square_minus_t, M=10000."),
    "derivatives": (cmd_derivatives, "Horizontal and vertical finite-difference derivatives of a functional at "
                    "the midpoint of sampled paths, with a step-halving gap."),
    "nlexp": (cmd_nlexp, "Lower/upper nonlinear expectations inf/sup over drifts bounded by L, as the BSDE with "
              "driver -/+ L|z| or by greedy bang-bang control search. Defaults: L=0.5, terminal cos."),
    "stop": (cmd_stop, "Optimal stopping under the lower nonlinear expectation on the exhaustive tree "
             "(N capped at 12); reports the value, the first contact time and compensator checks."),
    "solve": (cmd_solve, "Regression Monte Carlo BSDE Y = g + int f ds - int Z dB; table of Y and Z means."),
    "u0-surface": (cmd_u0_surface, "u0(t, omega) = Y_t of the shifted BSDE at random anchors."),
    "viscosity-check": (cmd_viscosity_check, "Falsifier: paraboloid and self test functions touching u0 (+ shift "
                        "(T-t)) via optimal stopping; reports operator sign violations. Lattice u0, 500-step grid."),
    "classical-check": (cmd_classical_check, "Sign of -dt u - tr(dxx u)/2 - f(t, omega, u, dx u) on samples."),
    "transform": (cmd_transform, "Exponential scaling f~ = -lam y + e^{lam t} f(t, omega, e^{-lam t} y, "
                  "e^{-lam t} z); operator residual of e^{lam t} u on a 10000-step grid. Default lam=1."),
    "bank-baum": (cmd_bank_baum, "Smooth projection, trailing-window mollification and stitching with budgets "
                  "eps_i = 2^{-i-2} e^{-L0 T} eps. Default eps=0.05, at least 200 steps."),
    "perron-gap": (cmd_perron_gap, "Super/subsolutions X^eps_0 +/- e^{L0 T} eps driven by the stitched control; "
                   "terminal domination and the certified gap."),
    "stability": (cmd_stability, "|Y^eps_0 - Y_0| for f + eps, eps in {0.1, 0.05, 0.025}, against "
                  "[eps T / 2, e^{L0 T} eps T]."),
    "comparison": (cmd_comparison, "Ordering Y1 <= Y2 for g1 <= g2 = g1 + 0.1 on the tree (every node) and "
                   "on Monte Carlo with common random numbers."),
}


# ---------------------------------------------------------------------------
# plumbing


def _env_overrides() -> dict:
    out = {}
    for key, val in os.environ.items():
        if not key.startswith("PPDE_"):
            continue
        name = key[5:].lower()
        try:
            out[name] = json.loads(val)
        except json.JSONDecodeError:
            out[name] = val
    return out


def resolve_config(args) -> ExperimentConfig:
    cfg = asdict(ExperimentConfig())
    if args.config:
        with open(args.config) as fh:
            cfg.update(json.load(fh))
    keys = {k.lower(): k for k in cfg}
    cfg.update({keys[k]: v for k, v in _env_overrides().items() if k in keys})
    for key in ("T", "N", "M", "seed", "L", "lam", "eps", "shift", "anchors", "method", "out"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    for key in ("generator", "terminal", "functional"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = {"name": val}
    cfg["command"] = args.command
    conf = ExperimentConfig(**cfg)
    conf.validate()
    return conf


def write_outputs(cfg: ExperimentConfig, tables: dict) -> list:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, (header, rows) in tables.items():
        path = out / f"{name}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([_fmt(x) for x in r])
        written.append(path)
    with open(out / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["artifact", "sha256", "command", "config_hash"])
        for p in written:
            w.writerow([p.name, hashlib.sha256(p.read_bytes()).hexdigest(), cfg.command, cfg.digest()])
    return written


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ppdelab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_, text) in COMMANDS.items():
        s = sub.add_parser(name, help=text.split(".")[0], description=text)
        s.add_argument("--config", help="JSON file with configuration keys")
        s.add_argument("--seed", type=int)
        s.add_argument("--out")
        s.add_argument("--explain", action="store_true", help="print what the command computes and exit")
        s.add_argument("--T", type=float)
        s.add_argument("--N", type=int)
        s.add_argument("--M", type=int)
        s.add_argument("--L", type=float)
        s.add_argument("--lam", type=float)
        s.add_argument("--eps", type=float)
        s.add_argument("--shift", type=float)
        s.add_argument("--anchors", type=int)
        s.add_argument("--method")
        s.add_argument("--generator", help=f"one of {sorted(bsde.GENERATORS)}")
        s.add_argument("--terminal", help="catalog functional used as terminal value")
        s.add_argument("--functional", help="catalog functional under test")
    return p


def run(cfg: ExperimentConfig) -> int:
    fn, _ = COMMANDS[cfg.command]
    tables, ok = fn(cfg)
    paths = write_outputs(cfg, tables)
    for p in paths:
        print(p)
    print(f"{cfg.command}: {'pass' if ok else 'FAIL'}")
    return 0 if ok else 1


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if args.explain:
        defaults = asdict(ExperimentConfig())
        print(f"{args.command}: {COMMANDS[args.command][1]}")
        print("defaults: " + json.dumps({k: v for k, v in defaults.items() if k != "command"}, sort_keys=True))
        return 0
    try:
        cfg = resolve_config(args)
    except (KeyError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
