"""The PPDE operator, classical solution checks and a viscosity falsifier.

The semilinear operator is ``L u = -dt u - tr(dxx u)/2 - f(t, omega, u, dx u)``.
Viscosity sub/supersolutions are tested with functions that touch ``u`` in the
sense of optimal stopping under the nonlinear expectation: ``phi`` belongs to
the lower class at an anchor when

    0 = phi(t, 0) - u(t, omega) = min_tau E_lower^L[(phi - u^{t,omega})_{tau ^ tau_eps}].

Only finitely many test functions can be tried, so :func:`viscosity_falsifier`
can refute the viscosity property but never certify it.
"""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .bsde import Generator
from .functional_calculus import DerivativeError, derivatives, vertical_hessian
from .paths import PathFunctional, PathPoint, TimeGrid, first_exit
from .stochastics import TreeBatch, optimal_stop_lower, optimal_stop_upper, sample_brownian

__all__ = [
    "ppde_operator",
    "classical_check",
    "ClassicalReport",
    "TestFunction",
    "paraboloid",
    "Membership",
    "membership_test",
    "ViscosityReport",
    "viscosity_falsifier",
    "random_anchors",
    "generator_transform",
    "transform_functional",
    "write_reports_csv",
]


def _prefix(p, grid):
    if isinstance(p, PathPoint):
        return p.prefix, p.path.grid
    if grid is None:
        raise TypeError("a grid is required with a raw prefix")
    return np.asarray(p, dtype=float), grid


def _jet(u: PathFunctional, x, grid, analytic=None):
    use = u.has_derivatives if analytic is None else analytic
    if use:
        return u.dt(x, grid), u.dx(x, grid), u.dxx(x, grid)
    rep = derivatives(u, x, grid)
    return rep.dt, rep.dx, rep.dxx


def ppde_operator(u: PathFunctional, p, f: Generator, grid: Optional[TimeGrid] = None, analytic=None):
    """``-dt u - tr(dxx u)/2 - f(t, omega, u, dx u)`` at a point or a batch of prefixes."""
    x, grid = _prefix(p, grid)
    dt, dx, dxx = _jet(u, x, grid, analytic)
    t = (x.shape[-2] - 1) * grid.dt
    val = u(x, grid)
    y = np.atleast_1d(val)
    xb = x if x.ndim == 3 else x[None]
    fv = f(t, xb, y, np.atleast_2d(dx)).reshape(np.shape(val))
    out = -dt - 0.5 * np.trace(dxx, axis1=-2, axis2=-1) - fv
    return float(out) if np.ndim(out) == 0 else out


@dataclass
class ClassicalReport:
    classification: str  # solution | subsolution | supersolution | neither
    values: np.ndarray
    failures: list = field(default_factory=list)


def classical_check(u: PathFunctional, f: Generator, points, tol: float = 1e-3, grid=None,
                    analytic=None, stability: float = 1e-2) -> ClassicalReport:
    """Classify ``u`` by the sign of ``L u`` on sample points.

    Numerical second derivatives are recomputed with half the bump; a relative
    jump above ``stability`` marks the point as non-differentiable (a kink).
    """
    vals, failures = [], []
    for i, p in enumerate(points):
        x, g = _prefix(p, grid)
        try:
            if not (u.has_derivatives if analytic is None else analytic):
                h = 1e-3 * (1 + np.max(np.abs(x)))
                a = vertical_hessian(u, x, h, g)
                b = vertical_hessian(u, x, h / 2, g)
                if np.max(np.abs(a - b)) > stability * (1 + np.max(np.abs(a))):
                    raise DerivativeError(f"second vertical derivative unstable at point {i}")
            vals.append(ppde_operator(u, x, f, g, analytic))
        except DerivativeError as exc:
            failures.append((i, str(exc)))
            vals.append(np.nan)
    v = np.asarray(vals, dtype=float)
    ok = v[np.isfinite(v)]
    if failures or ok.size == 0:
        cls = "neither"
    elif np.all(np.abs(ok) <= tol):
        cls = "solution"
    elif np.all(ok <= tol):
        cls = "subsolution"
    elif np.all(ok >= -tol):
        cls = "supersolution"
    else:
        cls = "neither"
    return ClassicalReport(cls, v, failures)


# ---------------------------------------------------------------------------
# test functions


@dataclass
class TestFunction:
    """A smooth functional on the shifted space ``[t, T] x Omega^t`` with analytic
    derivatives, tied to an anchor ``(t_k, omega)``."""

    __test__ = False  # not a pytest class

    phi: PathFunctional
    k: int
    omega: np.ndarray
    grid: TimeGrid
    eps: float = 0.02
    radius: float = 0.5
    label: str = ""

    def __post_init__(self):
        if not self.phi.has_derivatives:
            raise ValueError("test functions need analytic derivatives")
        self.omega = np.asarray(self.omega, dtype=float)[: self.k + 1]

    @property
    def d(self) -> int:
        return self.omega.shape[-1]

    def at_anchor(self) -> float:
        return float(self.phi(np.zeros((1, self.d)), self.grid))

    def operator(self, f: Generator) -> float:
        """``(L^{t,omega} phi)(t, 0)``: derivatives at the zero shifted path,
        generator at the frozen anchor path."""
        z = np.zeros((1, 1, self.d))
        dt, dx, dxx = self.phi.dt(z, self.grid), self.phi.dx(z, self.grid), self.phi.dxx(z, self.grid)
        y = self.phi(z, self.grid)
        fv = f(self.grid.time(self.k), self.omega[None], y, dx)
        return float(-dt[0] - 0.5 * np.trace(dxx[0]) - fv[0])


def paraboloid(value: float, a: float, b, q, d: int = 1) -> PathFunctional:
    """``value + a (s - t) + b . x_s + x_s^T q x_s / 2`` on the shifted space."""
    b = np.broadcast_to(np.asarray(b, dtype=float), (d,)).copy()
    q = np.broadcast_to(np.asarray(q, dtype=float), (d, d)).copy() if np.ndim(q) == 2 else np.eye(d) * float(q)

    def s_of(x, g):
        return (x.shape[-2] - 1) * g.dt

    def func(x, g):
        xs = x[..., -1, :]
        return value + a * s_of(x, g) + xs @ b + 0.5 * np.einsum("...i,ij,...j->...", xs, q, xs)

    return PathFunctional(
        func, f"paraboloid(a={a:.3g},b={b[0]:.3g},q={q[0, 0]:.3g})",
        dt=lambda x, g: np.full(x.shape[:-2], float(a)),
        dx=lambda x, g: b + x[..., -1, :] @ q,
        dxx=lambda x, g: np.broadcast_to(q, x.shape[:-2] + (d, d)).copy(),
    )


@dataclass
class Membership:
    status: str  # member | non-member | inconclusive
    value: float
    tol: float
    se: float = 0.0
    expected_tau: float = 0.0


def _window(tf: TestFunction, levels: int):
    g = tf.grid
    n = min(levels, g.N - tf.k)
    if n < 1:
        raise ValueError("anchor sits at the terminal time")
    return TimeGrid(g.time(tf.k) + n * g.dt, tf.k + n), n


def membership_test(tf: TestFunction, u: PathFunctional, L: float = 0.0, side: str = "lower",
                    levels: int = 10, engine: str = "tree", M: int = 20_000, seed: int = 0,
                    tol: float = 1e-3, anchor_tol: float = 1e-6) -> Membership:
    """Decide ``phi`` in the lower (``side='lower'``) or upper test class at the anchor.

    The localizing time is the first exit of the shifted path from
    ``radius`` capped at ``t + eps`` (and at the window end).  The optimal
    stopping value is computed on the exact tree over ``levels`` grid steps,
    or by regression on ``M`` sampled paths with ``engine='mc'``.
    """
    if side not in ("lower", "upper"):
        raise ValueError("side must be 'lower' or 'upper'")
    u_anchor = float(u(tf.omega, tf.grid))
    if abs(tf.at_anchor() - u_anchor) > anchor_tol:
        raise ValueError(f"anchor mismatch: phi(t,0)={tf.at_anchor():.6g} but u(t,omega)={u_anchor:.6g}")
    W, n = _window(tf, levels)
    if engine == "tree":
        batch = TreeBatch(W, tf.d, tf.omega)
    elif engine == "mc":
        batch = sample_brownian(W, tf.d, M, seed, prefix=tf.omega)
    else:
        raise ValueError(f"unknown engine {engine!r}")
    paths = batch.paths
    k = tf.k
    shifted = paths[:, k:] - paths[:, k: k + 1]
    X = np.zeros((batch.M, W.N + 1))
    for j in range(n + 1):
        X[:, k + j] = tf.phi(shifted[:, : j + 1], tf.grid) - u(paths[:, : k + j + 1], tf.grid)
    steps = first_exit(tf.radius, tf.eps)(shifted, W.sub(k))
    bound = k + np.maximum(steps, 1)
    stop = optimal_stop_lower if side == "lower" else optimal_stop_upper
    sv = stop(X, batch, L, bound)
    value = sv.value if batch.exact else float(np.mean(sv.Y[:, k]))
    se = 0.0
    if not batch.exact:
        rows = np.arange(batch.M)
        pay = sv.X[rows, sv.tau_star]
        se = float(np.std(pay, ddof=1) / np.sqrt(batch.M))
    band = max(tol, 3 * se)
    e_tau = float(np.mean(bound - k)) * W.dt
    signed = value if side == "lower" else -value
    if signed >= -band:
        status = "member"
    elif signed >= -band - 3 * se:
        status = "inconclusive"
    else:
        status = "non-member"
    return Membership(status, value, band, se, e_tau)


# ---------------------------------------------------------------------------
# falsifier


@dataclass
class ViscosityReport:
    anchor_id: int
    phi_id: str
    side: str  # sub | super
    membership: str
    stop_value: float
    tol: float
    L_phi: float
    verdict: str  # consistent | violation | vacuous

    def row(self):
        return [self.anchor_id, self.phi_id, self.side, self.membership, f"{self.L_phi:.6g}", self.verdict]


def random_anchors(grid: TimeGrid, n: int, seed: int = 0, d: int = 1, t_max: Optional[float] = None,
                   t_min: float = 0.0, x_max: Optional[float] = None) -> list:
    """``n`` anchors ``(k, prefix)`` from Brownian paths at random grid times."""
    rng = np.random.default_rng(seed)
    kmax = grid.N - 1 if t_max is None else min(grid.N - 1, int(np.floor(t_max / grid.dt)))
    kmin = int(np.ceil(t_min / grid.dt))
    batch = sample_brownian(grid, d, 4 * n, seed + 1)
    out = []
    for m in range(batch.M):
        k = int(rng.integers(kmin, kmax + 1))
        x = batch.paths[m, : k + 1]
        if x_max is not None and np.max(np.abs(x[-1])) > x_max:
            continue
        out.append((k, x))
        if len(out) == n:
            break
    return out


def _default_family(u, k, omega, grid, include_self, da=0.5, db=0.5, dq=0.5):
    d = omega.shape[-1]
    x = omega[: k + 1]
    val = float(u(x, grid))
    try:
        rep = derivatives(u, x, grid)
        a0, b0, q0 = float(rep.dt), np.asarray(rep.dx, dtype=float), np.asarray(rep.dxx, dtype=float)
    except DerivativeError:
        a0, b0, q0 = 0.0, np.zeros(d), np.zeros((d, d))
    fam = []
    for sa, sb, sq in itertools.product((-1, 0, 1), repeat=3):
        fam.append((f"parab[{sa:+d},{sb:+d},{sq:+d}]",
                    paraboloid(val, a0 + sa * da, b0 + sb * db, q0 + sq * dq * np.eye(d), d)))
    if include_self and u.has_derivatives:
        from .paths import shift_functional

        fam.append(("self", shift_functional(u, k, omega, grid)))
    elif include_self:
        fam.append(("self", _self_numeric(u, k, omega, grid)))
    return fam


def _self_numeric(u, k, omega, grid):
    """``u^{t,omega}`` with finite-difference derivatives frozen as callables."""
    from .paths import concat

    prefix = np.asarray(omega, dtype=float)[: k + 1]

    def full(x):
        return concat(prefix, x)

    def dt_(x, g):
        return derivatives(u, full(x), grid).dt

    def dx_(x, g):
        return derivatives(u, full(x), grid).dx

    def dxx_(x, g):
        return derivatives(u, full(x), grid).dxx

    return PathFunctional(lambda x, g: u(full(x), grid), f"{u.name}^shift", dt=dt_, dx=dx_, dxx=dxx_)


def viscosity_falsifier(u: PathFunctional, f: Generator, L: float, anchors, grid: TimeGrid, family=None,
                        eps: float = 0.02, radius: float = 0.5, levels: int = 10, op_tol: float = 0.05,
                        include_self: bool = True, sides=("sub", "super"), **kw) -> list:
    """Search for test functions that touch ``u`` yet have the wrong operator sign.

    ``family(u, k, omega, grid)`` may supply extra ``(label, PathFunctional)``
    pairs; by default paraboloids centred on the finite-difference jet of
    ``u`` at the anchor (offsets ``±0.5`` in ``a``, ``b`` and ``q``) plus the
    shifted ``u`` itself.

    ``op_tol`` bounds the operator sign error that membership up to the
    stopping tolerance can hide; it is roughly ``tol / E[tau_eps]``.
    """
    reports = []
    for aid, (k, omega) in enumerate(anchors):
        cands = _default_family(u, k, omega, grid, include_self)
        if family is not None:
            cands += list(family(u, k, omega, grid))
        for side in sides:
            found = False
            for label, phi in cands:
                tf = TestFunction(phi, k, omega, grid, eps, radius, label)
                mem = membership_test(tf, u, L, "lower" if side == "sub" else "upper", levels, **kw)
                Lphi = tf.operator(f)
                if mem.status != "member":
                    verdict = "consistent"
                else:
                    found = True
                    bad = Lphi > op_tol if side == "sub" else Lphi < -op_tol
                    verdict = "violation" if bad else "consistent"
                reports.append(ViscosityReport(aid, label, side, mem.status, mem.value, mem.tol, Lphi, verdict))
            if not found:
                reports.append(ViscosityReport(aid, "-", side, "none", np.nan, np.nan, np.nan, "vacuous"))
    return reports


def write_reports_csv(path: str, reports) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["anchor_id", "phi_id", "side", "membership", "L_phi", "verdict"])
        for r in reports:
            w.writerow(r.row())


# ---------------------------------------------------------------------------
# exponential scaling


def generator_transform(f: Generator, lam: float) -> Generator:
    """``f~(t, x, y, z) = -lam y + e^{lam t} f(t, x, e^{-lam t} y, e^{-lam t} z)``.

    Pairs with ``u~ = e^{lam t} u`` (:func:`transform_functional`); a
    positive ``lam`` makes the new generator strictly decreasing in ``y``.
    """
    if lam == 0:
        return f

    def ft(t, x, y, z):
        e = np.exp(lam * t)
        return -lam * y + e * f.f(t, x, y / e, z / e)

    return Generator(ft, f"{f.name}~(lam={lam:g})", np.inf, f.L0 + abs(lam), f.markovian, f.cadlag)


def transform_functional(u: PathFunctional, lam: float) -> PathFunctional:
    """``e^{lam t} u`` with transformed analytic derivatives when available."""
    if lam == 0:
        return u

    def t_of(x, g):
        return (x.shape[-2] - 1) * g.dt

    def e(x, g):
        return np.exp(lam * t_of(x, g))

    out = PathFunctional(lambda x, g: e(x, g) * u(x, g), f"exp({lam:g}t){u.name}", u.cadlag,
                         markovian=u.markovian)
    if u.has_derivatives:
        out.dt = lambda x, g: e(x, g) * (lam * u(x, g) + u.dt(x, g))
        out.dx = lambda x, g: e(x, g) * u.dx(x, g)
        out.dxx = lambda x, g: e(x, g) * u.dxx(x, g)
    return out
