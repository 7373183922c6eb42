"""Backward SDE solvers for ``Y_t = g + int_t^T f(s, B, Y, Z) ds - int_t^T Z dB``.

Three engines share one backward loop:

* regression Monte Carlo on a :class:`~ppdelab.stochastics.BrownianBatch`,
* the exact non-recombining tree (small ``N``, any path dependence),
* a recombining binomial lattice for Markovian data (large ``N``, ``d = 1``).
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.interpolate import CubicSpline

from .paths import PathFunctional, PathPoint, TimeGrid, concat, dist_inf, shift_functional
from .stochastics import BrownianBatch, Estimate, TreeBatch, sample_brownian

log = logging.getLogger(__name__)

TerminalFunctional = PathFunctional

__all__ = [
    "Generator",
    "TerminalFunctional",
    "GENERATORS",
    "get_generator",
    "BSDESolution",
    "solve_bsde",
    "solve_bsde_regression",
    "solve_bsde_tree",
    "LatticeSolution",
    "solve_bsde_lattice",
    "lattice_functional",
    "u0_value",
    "modulus_probe",
    "ComparisonLinearization",
    "comparison_linearization",
    "comparison_test",
    "f_martingale_check",
    "stability_experiment",
    "write_solution_csv",
]


# ---------------------------------------------------------------------------
# generators


@dataclass
class Generator:
    """Driver ``f(t, x, y, z)``: ``x`` is a path prefix ``(M, k+1, d)``,
    ``y`` is ``(M,)`` and ``z`` is ``(M, d)``; returns ``(M,)``."""

    f: Callable[[float, np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    name: str = "f"
    bound: float = np.inf
    L0: float = 0.0
    markovian: bool = True
    cadlag: bool = True

    def __call__(self, t, x, y, z) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        return np.broadcast_to(np.asarray(self.f(t, x, y, z), dtype=float), y.shape)

    def plus(self, eps: float) -> "Generator":
        return Generator(lambda t, x, y, z: self.f(t, x, y, z) + eps, f"{self.name}{eps:+g}",
                         self.bound + abs(eps), self.L0, self.markovian, self.cadlag)

    def shift(self, k: int, omega: np.ndarray, grid: TimeGrid) -> "Generator":
        """``f^{t,omega}(s, x', y, z) = f(t + s, omega ⊗_t x', y, z)``."""
        if k == 0:
            return self
        t0 = grid.time(k)
        prefix = np.asarray(omega, dtype=float)[..., : k + 1, :]
        if self.markovian:
            last = prefix[..., -1:, :]
            fn = lambda s, x, y, z: self.f(t0 + s, last + x[..., -1:, :], y, z)
        else:
            fn = lambda s, x, y, z: self.f(t0 + s, concat(prefix, x), y, z)
        return Generator(fn, f"{self.name}^(t={t0:g})", self.bound, self.L0, self.markovian, self.cadlag)

    def check(self, n: int = 2000, seed: int = 0, scale: float = 3.0, d: int = 1) -> dict:
        """Sampled bound and difference quotients in ``(y, z)``."""
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((n, 3, d))
        y1, y2 = rng.uniform(-scale, scale, (2, n))
        z1, z2 = rng.uniform(-scale, scale, (2, n, d))
        f1 = self(0.5, x, y1, z1)
        f2 = self(0.5, x, y2, z2)
        den = np.abs(y1 - y2) + np.sum(np.abs(z1 - z2), axis=1)
        return {"max_abs": float(np.max(np.abs(f1))), "lipschitz": float(np.max(np.abs(f1 - f2) / den))}


def _zero(t, x, y, z):
    return np.zeros_like(y)


def zero_generator() -> Generator:
    return Generator(_zero, "zero", 0.0, 0.0)


def linear_generator(r: float = 0.1) -> Generator:
    return Generator(lambda t, x, y, z: -r * y, f"linear(-{r:g}y)", np.inf, abs(r))


def drift_down(L: float = 0.5) -> Generator:
    """``-L |z|_1``: the lower nonlinear expectation."""
    return Generator(lambda t, x, y, z: -L * np.sum(np.abs(z), axis=-1), f"-{L:g}|z|", np.inf, L)


def drift_up(L: float = 0.5) -> Generator:
    return Generator(lambda t, x, y, z: L * np.sum(np.abs(z), axis=-1), f"+{L:g}|z|", np.inf, L)


def nonlinear_generator(a: float = 0.3, b: float = 0.2) -> Generator:
    """``a sin(y) + b cos(z_1)``; bounded, Lipschitz with constant ``a + b``."""
    return Generator(lambda t, x, y, z: a * np.sin(y) + b * np.cos(z[..., 0]), f"{a:g}sin(y)+{b:g}cos(z)",
                     abs(a) + abs(b), abs(a) + abs(b))


def constant_generator(c: float = 0.0) -> Generator:
    return Generator(lambda t, x, y, z: np.full_like(y, c), f"const({c:g})", abs(c), 0.0)


GENERATORS = {
    "zero": zero_generator,
    "linear": linear_generator,
    "drift_down": drift_down,
    "drift_up": drift_up,
    "nonlinear": nonlinear_generator,
    "constant": constant_generator,
}


def get_generator(name: str, **params) -> Generator:
    try:
        return GENERATORS[name](**params)
    except KeyError:
        raise KeyError(f"unknown generator {name!r}; known: {sorted(GENERATORS)}") from None


# ---------------------------------------------------------------------------
# solution and the shared backward loop


@dataclass
class BSDESolution:
    Y: np.ndarray  # (M, N+1)
    Z: np.ndarray  # (M, N, d)
    grid: TimeGrid
    start: int = 0
    se: float = 0.0
    basis: str = ""
    diagnostics: dict = field(default_factory=dict)

    @property
    def y0(self) -> float:
        return float(self.Y[0, self.start])

    @property
    def estimate(self) -> Estimate:
        return Estimate(self.y0, self.se, self.basis)


def _backward(f: Generator, g_vals, batch, est, picard: int, tol: float = 0.0):
    N, s, dt = batch.grid.N, batch.start, batch.grid.dt
    M, d = batch.M, batch.d
    paths = batch.paths
    Y = np.empty((M, N + 1))
    Z = np.zeros((M, N, d))
    Y[:, N] = g_vals
    fsum = np.zeros(M)
    mart = np.zeros(M)
    fp_gap = 0.0
    # a priori bound |Y_k| <= sup|g| + (T - t_k) sup|f|; regression tails can overshoot it
    gmax = float(np.max(np.abs(g_vals))) if g_vals.size else 0.0
    for k in range(N - 1, s - 1, -1):
        nxt = Y[:, k + 1]
        ev = est.cond(k, nxt)
        z = est.z(k, nxt, ev)
        x = paths[:, : k + 1]
        t = batch.grid.time(k)
        y = ev + f(t, x, ev, z) * dt
        for _ in range(picard):
            y_new = ev + f(t, x, y, z) * dt
            gap = float(np.max(np.abs(y_new - y)))
            y = y_new
            if gap <= tol:
                break
        else:
            if picard:
                fp_gap = max(fp_gap, gap)
        if np.isfinite(f.bound):
            cap = gmax + (batch.grid.T - batch.grid.time(k)) * f.bound
            y = np.clip(y, -cap, cap)
        Y[:, k] = y
        Z[:, k] = z
        fsum += f(t, x, y, z) * dt
        mart += np.sum(z * (paths[:, k + 1] - paths[:, k]), axis=1)
    Y[:, :s] = Y[:, s: s + 1]
    return Y, Z, fsum, mart, fp_gap


def _terminal(g, batch) -> np.ndarray:
    if isinstance(g, PathFunctional):
        vals = g(batch.paths, batch.grid)
    else:
        vals = np.asarray(g, dtype=float)
    if not np.all(np.isfinite(vals)):
        raise ValueError("terminal functional is not finite on the batch")
    return vals


def solve_bsde_regression(f: Generator, g, batch: BrownianBatch, features: str = "path", degree: int = 2,
                          picard: int = 1) -> BSDESolution:
    """Implicit-in-``y`` backward Euler with least-squares conditional expectations.

    ``Y_k = E[Y_{k+1} | F_k] + f(t_k, x, Y_k, Z_k) dt`` with ``picard`` fixed
    point passes in ``y`` and ``Z_k = E[Y_{k+1} dB_k | F_k] / dt``.  The root
    regression is the plain sample mean, so ``Y_0`` is one number.  Its
    standard error comes from the pathwise estimator ``g + sum f dt``.
    """
    g_vals = _terminal(g, batch)
    est = batch.estimator(features=features, degree=degree)
    Y, Z, fsum, mart, gap = _backward(f, g_vals, batch, est, picard)
    se = float(np.std(g_vals + fsum, ddof=1) / np.sqrt(batch.M)) if batch.M > 1 else 0.0
    resid = g_vals + fsum - mart - Y[:, batch.start]
    diag = {
        "r2": dict(est.r2),
        "se_control_variate": float(np.std(resid, ddof=1) / np.sqrt(batch.M)) if batch.M > 1 else 0.0,
        "pathwise_residual_rms": float(np.sqrt(np.mean(resid**2))),
        "picard_gap": gap,
    }
    return BSDESolution(Y, Z, batch.grid, batch.start, se, f"{features} features, degree {degree}", diag)


def solve_bsde_tree(f: Generator, g, grid: TimeGrid, d: int = 1, prefix=None, tol: float = 1e-14,
                    max_iter: int = 200) -> BSDESolution:
    """Exact backward recursion on all ``2^(d n)`` tree paths with a per-node fixed point in ``y``."""
    if grid.N * d > 16 and prefix is None:
        raise ValueError(f"N*d = {grid.N * d} is too large for the exhaustive tree (at most 16)")
    batch = TreeBatch(grid, d, prefix)
    g_vals = _terminal(g, batch)
    Y, Z, _, _, gap = _backward(f, g_vals, batch, batch.estimator(), max_iter, tol)
    if gap > 1e-10:
        log.warning("tree fixed point did not converge (gap %.3g)", gap)
    return BSDESolution(Y, Z, grid, batch.start, 0.0, "tree", {"picard_gap": gap, "batch": batch})


def solve_bsde(f: Generator, g, batch, **kw) -> BSDESolution:
    """Dispatch on the batch type."""
    if isinstance(batch, TreeBatch):
        g_vals = _terminal(g, batch)
        Y, Z, _, _, gap = _backward(f, g_vals, batch, batch.estimator(), kw.get("max_iter", 200), 1e-14)
        return BSDESolution(Y, Z, batch.grid, batch.start, 0.0, "tree", {"picard_gap": gap})
    return solve_bsde_regression(f, g, batch, **kw)


# ---------------------------------------------------------------------------
# recombining lattice (Markovian data, d = 1)


@dataclass
class LatticeSolution:
    """Binomial lattice values ``u(t_k, x0 + (2j - k) sqrt(dt))``."""

    grid: TimeGrid
    x0: float
    values: list
    z: list

    def nodes(self, k: int) -> np.ndarray:
        return self.x0 + (2.0 * np.arange(k + 1) - k) * np.sqrt(self.grid.dt)

    @property
    def y0(self) -> float:
        return float(self.values[0][0])

    def _spline(self, k):
        cache = self.__dict__.setdefault("_splines", {})
        if k not in cache:
            if k == 0:
                v0 = float(self.values[0][0])
                cache[k] = lambda x: np.full(np.shape(x), v0)
            else:
                cache[k] = CubicSpline(self.nodes(k), self.values[k], extrapolate=True)
        return cache[k]

    def value(self, t, x) -> np.ndarray:
        """Interpolated ``u(t, x)``: cubic splines in ``x``, linear in ``t``.

        Level 0 has a single node, so queries are answered from levels ``>= 2``
        whenever possible.
        """
        x = np.asarray(x, dtype=float)
        s = float(np.clip(t / self.grid.dt, 0.0, self.grid.N))
        exact = self._on_lattice(s, x)
        if exact is not None:
            return exact
        k = min(int(np.floor(s + 1e-12)), self.grid.N - 1)
        k = max(k, 2) if self.grid.N >= 3 else k
        a = s - k
        return (1 - a) * self._spline(k)(x) + a * self._spline(k + 1)(x)

    def _on_lattice(self, s: float, x: np.ndarray):
        """Stored values when every query sits on a lattice node, else ``None``."""
        k = int(round(s))
        if abs(s - k) > 1e-9:
            return None
        j = ((x - self.x0) / np.sqrt(self.grid.dt) + k) / 2
        jr = np.rint(j)
        if np.any(np.abs(j - jr) > 1e-9) or np.any(jr < 0) or np.any(jr > k):
            return None
        return self.values[k][jr.astype(int)]

    def along(self, paths: np.ndarray):
        """Exact lattice ``(Y, Z)`` along on-lattice paths (``±sqrt(dt)`` increments from ``x0``)."""
        sq = np.sqrt(self.grid.dt)
        M, n, _ = paths.shape
        Y = np.empty((M, n))
        Z = np.empty((M, n - 1, 1))
        for k in range(n):
            j = np.rint((paths[:, k, 0] - self.x0) / sq + k) / 2
            if np.any(np.abs(j - np.rint(j)) > 1e-6):
                raise ValueError("paths are not on the lattice")
            j = np.rint(j).astype(int)
            Y[:, k] = self.values[k][j]
            if k < n - 1:
                Z[:, k, 0] = self.z[k][j]
        return Y, Z


def _markov_prefix(x: np.ndarray, k: int) -> np.ndarray:
    """Constant paths ending at ``x`` as a zero-copy ``(n, k+1, 1)`` view."""
    return np.broadcast_to(x[:, None, None], (x.size, k + 1, 1))


def solve_bsde_lattice(f: Generator, g: PathFunctional, grid: TimeGrid, x0: float = 0.0,
                       tol: float = 1e-14, max_iter: int = 200) -> LatticeSolution:
    """Markovian BSDE on the recombining binomial lattice.

    Uses the same scheme as the tree (exact discrete martingale
    representation), so along random-walk paths ``Y_{k+1} = Y_k - f dt + Z dB``
    holds exactly.
    """
    if not (f.markovian and g.markovian):
        raise ValueError("the lattice solver needs Markovian f and g")
    sq, dt, N = np.sqrt(grid.dt), grid.dt, grid.N
    nodes = lambda k: x0 + (2.0 * np.arange(k + 1) - k) * sq
    values = [None] * (N + 1)
    zs = [None] * N
    values[N] = np.asarray(g(_markov_prefix(nodes(N), N), grid), dtype=float)
    for k in range(N - 1, -1, -1):
        up, dn = values[k + 1][1:], values[k + 1][:-1]
        ev = 0.5 * (up + dn)
        z = ((up - dn) / (2 * sq))[:, None]
        x = nodes(k)[:, None, None]
        t = grid.time(k)
        y = ev.copy()
        for _ in range(max_iter):
            y_new = ev + f(t, x, y, z) * dt
            done = np.max(np.abs(y_new - y)) <= tol
            y = y_new
            if done:
                break
        values[k] = y
        zs[k] = z[:, 0]
    return LatticeSolution(grid, x0, values, zs)


def lattice_functional(sol: LatticeSolution, name: str = "u0") -> PathFunctional:
    """The lattice value as a Markovian path functional ``u(t, omega_t)``."""

    def func(x, grid):
        t = (x.shape[-2] - 1) * grid.dt
        return sol.value(t, x[..., -1, 0])

    return PathFunctional(func, name, markovian=True)


# ---------------------------------------------------------------------------
# u0 and checks built on it


def u0_value(k: int, omega, f: Generator, g: PathFunctional, grid: TimeGrid, M: int = 10_000, seed: int = 0,
             method: str = "regression", kind: str = "gaussian", features: str = "path",
             degree: int = 2) -> Estimate:
    """``u0(t_k, omega)``: shift ``f`` and ``g`` by the prefix and solve on ``[t_k, T]``."""
    omega = np.asarray(omega, dtype=float)
    if omega.ndim == 1:
        omega = omega[:, None]
    if omega.shape[0] < k + 1:
        raise ValueError("prefix shorter than the anchor index")
    if k == grid.N:
        return Estimate(float(g(omega[: k + 1], grid)), 0.0, "terminal")
    gs = shift_functional(g, k, omega, grid)
    fs = f.shift(k, omega, grid)
    sub = grid.sub(k)
    if method == "tree":
        sol = solve_bsde_tree(fs, gs, sub, omega.shape[1])
        return Estimate(sol.y0, 0.0, "tree")
    if method == "lattice":
        sol = solve_bsde_lattice(f, g, grid, 0.0)
        return Estimate(float(sol.value(grid.time(k), omega[k, 0])), 0.0, "lattice")
    batch = sample_brownian(sub, omega.shape[1], M, seed, kind)
    sol = solve_bsde_regression(fs, gs, batch, features=features, degree=degree)
    return sol.estimate


@dataclass
class ModulusReport:
    distances: np.ndarray
    differences: np.ndarray
    ses: np.ndarray
    C: float
    violations: list

    @property
    def ok(self) -> bool:
        return not self.violations


def modulus_probe(f: Generator, g: PathFunctional, pairs, M: int = 10_000, seed: int = 0,
                  rho=None) -> ModulusReport:
    """``|u0(p) - u0(q)|`` against ``C (d_inf(p, q) + rho)`` with a fitted ``C``.

    ``pairs`` holds :class:`PathPoint` tuples on a common grid; ``rho`` maps a
    distance to the user's modulus of ``f, g`` (default: zero).
    """
    dists, diffs, ses = [], [], []
    for i, (p, q) in enumerate(pairs):
        grid = p.path.grid
        # common random numbers: both points see the same Brownian batch
        a = u0_value(p.k, p.path.values, f, g, grid, M, seed + i)
        b = u0_value(q.k, q.path.values, f, g, grid, M, seed + i)
        dists.append(dist_inf(p, q))
        diffs.append(abs(a.value - b.value))
        ses.append(np.hypot(a.se, b.se))
    dists, diffs, ses = map(np.asarray, (dists, diffs, ses))
    scale = dists + (0.0 if rho is None else np.asarray([rho(r) for r in dists]))
    pos = scale > 0
    C = float(np.max((np.maximum(diffs[pos] - 3 * ses[pos], 0)) / scale[pos])) if pos.any() else 0.0
    viol = [i for i in range(len(diffs)) if diffs[i] > C * scale[i] + 3 * ses[i] + 1e-12]
    return ModulusReport(dists, diffs, ses, C, viol)


@dataclass
class ComparisonLinearization:
    """``Y1 - Y2`` as a discounted difference: ``alpha`` linearizes ``f`` in ``y``,
    ``beta`` in ``z`` and ``Gamma`` is the discrete exponential discount."""

    alpha: np.ndarray  # (M, N)
    beta: np.ndarray  # (M, N, d)
    Gamma: np.ndarray  # (M, N+1)


def comparison_linearization(f: Generator, s1: BSDESolution, s2: BSDESolution, batch) -> ComparisonLinearization:
    N, s, dt = batch.grid.N, batch.start, batch.grid.dt
    paths = batch.paths
    M, d = batch.M, batch.d
    alpha = np.zeros((M, N))
    beta = np.zeros((M, N, d))
    for k in range(s, N):
        t, x = batch.grid.time(k), paths[:, : k + 1]
        y1, y2 = s1.Y[:, k], s2.Y[:, k]
        z1, z2 = s1.Z[:, k], s2.Z[:, k]
        dy = y1 - y2
        a = f(t, x, y1, z1) - f(t, x, y2, z1)
        alpha[:, k] = np.where(np.abs(dy) > 1e-14, a / np.where(dy == 0, 1, dy), 0.0)
        zc = z1.copy()
        for i in range(d):
            z_next = zc.copy()
            z_next[:, i] = z2[:, i]
            dz = zc[:, i] - z_next[:, i]
            b = f(t, x, y2, zc) - f(t, x, y2, z_next)
            beta[:, k, i] = np.where(np.abs(dz) > 1e-14, b / np.where(dz == 0, 1, dz), 0.0)
            zc = z_next
    dB = np.diff(paths, axis=1)
    logg = np.sum(beta * dB, axis=2) + (alpha - 0.5 * np.sum(beta**2, axis=2)) * dt
    logg[:, :s] = 0.0
    G = np.concatenate([np.zeros((M, 1)), np.cumsum(logg, axis=1)], axis=1)
    return ComparisonLinearization(alpha, beta, np.exp(G))


@dataclass
class ComparisonVerdict:
    ok: bool
    y1: float
    y2: float
    se: float
    max_violation: float


def comparison_test(f: Generator, g1, g2, batch, f2: Optional[Generator] = None, **kw) -> ComparisonVerdict:
    """Solve both problems on one batch (common random numbers) and check ``Y1 <= Y2``.

    On a tree the check is exact at every node; on Monte Carlo batches it is
    ``Y1_0 <= Y2_0 + 3 SE`` with the SE of the pathwise difference.
    """
    v1, v2 = _terminal(g1, batch), _terminal(g2, batch)
    if np.any(v1 > v2 + 1e-12):
        raise ValueError("precondition g1 <= g2 fails on the batch")
    f2 = f2 or f
    s1 = solve_bsde(f, v1, batch, **kw)
    s2 = solve_bsde(f2, v2, batch, **kw)
    if batch.exact:
        worst = float(np.max(s1.Y - s2.Y))
        return ComparisonVerdict(worst <= 1e-12, s1.y0, s2.y0, 0.0, max(worst, 0.0))
    dt = batch.grid.dt
    p1 = v1 + _fsum(f, s1, batch, dt)
    p2 = v2 + _fsum(f2, s2, batch, dt)
    se = float(np.std(p2 - p1, ddof=1) / np.sqrt(batch.M))
    gap = s1.y0 - s2.y0
    return ComparisonVerdict(gap <= 3 * se + 1e-12, s1.y0, s2.y0, se, max(gap, 0.0))


def _fsum(f, sol, batch, dt):
    out = np.zeros(batch.M)
    for k in range(batch.start, batch.grid.N):
        out += f(batch.grid.time(k), batch.paths[:, : k + 1], sol.Y[:, k], sol.Z[:, k]) * dt
    return out


@dataclass
class MartingaleVerdict:
    verdict: str  # martingale | submartingale | supermartingale
    mean_gap: float  # E[u_tau1 - Y_tau1(tau2, u_tau2)]
    se: float
    tol: float


def f_martingale_check(u: PathFunctional, f: Generator, batch, tau1, tau2, tol: float = 1e-3,
                       features: str = "path", degree: int = 2) -> MartingaleVerdict:
    """Compare ``u_{tau1}`` with the ``f``-BSDE value on ``[tau1, tau2]`` started from ``u_{tau2}``.

    ``tau1 <= tau2`` are grid indices (ints or per-path arrays).
    """
    N, s, dt = batch.grid.N, batch.start, batch.grid.dt
    M = batch.M
    t1 = np.broadcast_to(np.asarray(tau1, dtype=int), (M,))
    t2 = np.broadcast_to(np.asarray(tau2, dtype=int), (M,))
    if np.any(t1 > t2):
        raise ValueError("tau1 must not exceed tau2")
    U = u.on_batch(batch.paths, batch.grid)
    rows = np.arange(M)
    est = batch.estimator(features=features, degree=degree) if not batch.exact else batch.estimator()
    W = np.empty((M, N + 1))
    W[:, N] = U[rows, t2]
    for k in range(N - 1, s - 1, -1):
        nxt = W[:, k + 1]
        ev = est.cond(k, nxt)
        z = est.z(k, nxt, ev)
        x, t = batch.paths[:, : k + 1], batch.grid.time(k)
        y = ev + f(t, x, ev, z) * dt
        y = ev + f(t, x, y, z) * dt
        W[:, k] = np.where(k >= t2, U[rows, t2], y)
    gap = U[rows, t1] - W[rows, t1]
    mean = float(np.mean(gap))
    se = float(np.std(gap, ddof=1) / np.sqrt(M)) if M > 1 and not batch.exact else 0.0
    band = max(tol, 3 * se)
    if abs(mean) <= band:
        verdict = "martingale"
    elif mean < 0:
        verdict = "submartingale"
    else:
        verdict = "supermartingale"
    return MartingaleVerdict(verdict, mean, se, band)


@dataclass
class StabilityRow:
    eps: float
    y_eps: float
    y0: float
    gap: float
    se: float
    lower: float
    upper: float

    @property
    def within(self) -> bool:
        return self.lower - 3 * self.se <= self.gap <= self.upper + 3 * self.se


def stability_experiment(f: Generator, g, batch, eps_list, **kw) -> list:
    """``|Y^eps_0 - Y_0|`` for ``f + eps`` on one batch, with the ``[0.5 eps T, e^{L0 T} eps T]`` band."""
    T = batch.grid.T - batch.grid.time(batch.start)
    base = solve_bsde(f, g, batch, **kw)
    v = _terminal(g, batch)
    dt = batch.grid.dt
    p0 = v + _fsum(f, base, batch, dt)
    rows = []
    for eps in eps_list:
        fe = f.plus(eps)
        sol = solve_bsde(fe, g, batch, **kw)
        if batch.exact:
            se = 0.0
        else:
            pe = v + _fsum(fe, sol, batch, dt)
            se = float(np.std(pe - p0, ddof=1) / np.sqrt(batch.M))
        gap = abs(sol.y0 - base.y0)
        rows.append(StabilityRow(eps, sol.y0, base.y0, gap, se, 0.5 * eps * T, np.exp(f.L0 * T) * eps * T))
    return rows


def write_solution_csv(path: str, sol: BSDESolution) -> None:
    """Rows ``k,t,Y_mean,Y_se,Z_mean_1..d``."""
    d = sol.Z.shape[2]
    M = sol.Y.shape[0]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "t", "Y_mean", "Y_se"] + [f"Z_mean_{i + 1}" for i in range(d)])
        for k in range(sol.grid.N + 1):
            col = sol.Y[:, k]
            se = float(np.std(col, ddof=1) / np.sqrt(M)) if M > 1 else 0.0
            z = sol.Z[:, k].mean(axis=0) if k < sol.grid.N else np.full(d, np.nan)
            w.writerow([k, f"{sol.grid.time(k):.10g}", f"{col.mean():.12g}", f"{se:.6g}"]
                       + [f"{v:.12g}" for v in z])
