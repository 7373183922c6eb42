"""Brownian batches, conditional-expectation engines, Girsanov tilts,
nonlinear expectations under drift uncertainty and optimal stopping.

Two kinds of batches share one interface (``grid``, ``paths``,
``increments``, ``start``, ``estimator()``):

* :class:`BrownianBatch` -- ``M`` independent sampled paths; conditional
  expectations are least-squares regressions on path features.
* :class:`TreeBatch` -- every path of the non-recombining tree with
  increments ``±sqrt(dt)`` per coordinate; conditional expectations are exact
  averages over sibling blocks.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .paths import GridStoppingTime, PathFunctional, TimeGrid

log = logging.getLogger(__name__)

__all__ = [
    "Estimate",
    "BrownianBatch",
    "TreeBatch",
    "RegressionEstimator",
    "TreeEstimator",
    "sample_brownian",
    "DriftControl",
    "GirsanovWeight",
    "girsanov_weight",
    "tilted_expectation",
    "lower_expectation",
    "upper_expectation",
    "StoppingValue",
    "optimal_stop_lower",
    "optimal_stop_upper",
    "stopped_lower_expectation",
    "submartingale_check",
]


@dataclass
class Estimate:
    value: float
    se: float = 0.0
    method: str = ""

    def __float__(self):
        return float(self.value)


def _mean_se(x: np.ndarray) -> tuple[float, float]:
    x = np.asarray(x, dtype=float)
    if x.size < 2:
        return float(x.mean()), 0.0
    return float(x.mean()), float(x.std(ddof=1) / np.sqrt(x.size))


# ---------------------------------------------------------------------------
# batches


@dataclass
class BrownianBatch:
    grid: TimeGrid
    d: int
    M: int
    seed: int
    increments: np.ndarray  # (M, n, d), n = N - start
    kind: str = "gaussian"
    prefix: Optional[np.ndarray] = None  # (start+1, d)
    _paths: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def start(self) -> int:
        return 0 if self.prefix is None else self.prefix.shape[0] - 1

    @property
    def paths(self) -> np.ndarray:
        """Full paths ``(M, N+1, d)``; nodes up to ``start`` carry the prefix."""
        if self._paths is None:
            self._paths = _assemble(self.increments, self.prefix, self.d)
        return self._paths

    @property
    def exact(self) -> bool:
        return False

    def estimator(self, features: str = "path", degree: int = 2) -> "RegressionEstimator":
        return RegressionEstimator(self, features=features, degree=degree)

    def mean(self, v: np.ndarray) -> tuple[float, float]:
        return _mean_se(v)


def _assemble(increments, prefix, d):
    M, n, _ = increments.shape
    start = 0 if prefix is None else prefix.shape[0] - 1
    out = np.empty((M, start + n + 1, d))
    if prefix is None:
        out[:, 0] = 0.0
    else:
        out[:, : start + 1] = prefix
    out[:, start + 1:] = out[:, start: start + 1] + np.cumsum(increments, axis=1)
    return out


def sample_brownian(grid: TimeGrid, d: int, M: int, seed: int, kind: str = "gaussian",
                    prefix: Optional[np.ndarray] = None, antithetic: bool = False) -> BrownianBatch:
    """Sample ``M`` paths on ``grid``; reproducible from ``seed``.

    ``kind='rademacher'`` draws ``±sqrt(dt)`` increments (the random-walk
    analogue of the tree).  With a ``prefix`` of ``k+1`` nodes only the
    remaining ``N-k`` increments are drawn.
    """
    if M < 1 or d < 1:
        raise ValueError("M and d must be >= 1")
    start = 0 if prefix is None else np.asarray(prefix).shape[0] - 1
    n = grid.N - start
    if n < 1:
        raise ValueError("prefix covers the whole grid")
    rng = np.random.default_rng(seed)
    m = (M + 1) // 2 if antithetic else M
    if kind == "gaussian":
        inc = rng.standard_normal((m, n, d)) * np.sqrt(grid.dt)
    elif kind == "rademacher":
        inc = (2.0 * rng.integers(0, 2, size=(m, n, d)) - 1.0) * np.sqrt(grid.dt)
    else:
        raise ValueError(f"unknown increment kind {kind!r}")
    if antithetic:
        inc = np.concatenate([inc, -inc])[:M]
    pre = None if prefix is None else np.asarray(prefix, dtype=float).reshape(start + 1, d)
    return BrownianBatch(grid, d, M, seed, inc, kind, pre)


@dataclass
class TreeBatch:
    """All ``2^(d n)`` paths of the binary tree on ``[t_start, T]``."""

    grid: TimeGrid
    d: int = 1
    prefix: Optional[np.ndarray] = None
    max_leaves: int = 2**16
    _paths: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.prefix is not None:
            self.prefix = np.asarray(self.prefix, dtype=float).reshape(-1, self.d)
        n = self.grid.N - self.start
        if n < 1:
            raise ValueError("prefix covers the whole grid")
        if self.branch**n > self.max_leaves:
            raise ValueError(f"tree with {n} levels and d={self.d} has too many leaves; use N*d <= "
                             f"{int(np.log2(self.max_leaves))}")
        idx = np.arange(self.branch**n)
        digits = np.empty((idx.size, n), dtype=int)
        rest = idx.copy()
        for lvl in range(n - 1, -1, -1):
            digits[:, lvl] = rest % self.branch
            rest //= self.branch
        self.increments = self.signs[digits] * np.sqrt(self.grid.dt)  # (M, n, d)

    @property
    def branch(self) -> int:
        return 2**self.d

    @property
    def signs(self) -> np.ndarray:
        """``(branch, d)`` sign pattern of each child; child 0 is all ``+``."""
        bits = (np.arange(self.branch)[:, None] >> np.arange(self.d)[::-1]) & 1
        return 1.0 - 2.0 * bits

    @property
    def start(self) -> int:
        return 0 if self.prefix is None else self.prefix.shape[0] - 1

    @property
    def M(self) -> int:
        return self.increments.shape[0]

    @property
    def paths(self) -> np.ndarray:
        if self._paths is None:
            self._paths = _assemble(self.increments, self.prefix, self.d)
        return self._paths

    @property
    def exact(self) -> bool:
        return True

    def estimator(self, features: str = "path", degree: int = 2) -> "TreeEstimator":
        return TreeEstimator(self)

    def mean(self, v: np.ndarray) -> tuple[float, float]:
        return float(np.mean(v)), 0.0

    def block(self, k: int) -> int:
        """Number of leaves sharing a node at level ``k``."""
        return self.branch ** (self.grid.N - k)

    def node_values(self, k: int, v: np.ndarray) -> np.ndarray:
        """One representative value per node at level ``k``."""
        return np.asarray(v)[:: self.block(k)]


# ---------------------------------------------------------------------------
# conditional expectation engines


def _monomials(F: np.ndarray, degree: int) -> np.ndarray:
    M, q = F.shape
    cols = [np.ones(M)]
    for deg in range(1, degree + 1):
        for combo in itertools.combinations_with_replacement(range(q), deg):
            c = F[:, combo[0]].copy()
            for j in combo[1:]:
                c *= F[:, j]
            cols.append(c)
    return np.column_stack(cols)


class RegressionEstimator:
    """Least-squares conditional expectations on polynomial path features.

    ``features='path'`` uses, per coordinate, the current value, the running
    (left-sum) integral, the running max and the running min; ``'markov'``
    uses the current value only.  Constant features are dropped, so at the
    root of a batch the regression is the plain sample mean.
    """

    def __init__(self, batch: BrownianBatch, features: str = "path", degree: int = 2):
        if features not in ("path", "markov"):
            raise ValueError("features must be 'path' or 'markov'")
        self.batch = batch
        self.features = features
        self.degree = degree
        self.grid = batch.grid
        p = batch.paths
        self._x = p
        if features == "path":
            dt = self.grid.dt
            integ = np.zeros_like(p)
            integ[:, 1:] = np.cumsum(p[:, :-1], axis=1) * dt
            self._integ = integ
            self._max = np.maximum.accumulate(p, axis=1)
            self._min = np.minimum.accumulate(p, axis=1)
        self.r2: dict[int, float] = {}
        self._warned = batch.kind != "gaussian"
        self._cache: dict[int, np.ndarray] = {}

    def design(self, k: int) -> np.ndarray:
        if k in self._cache:
            return self._cache[k]
        if self.features == "path":
            F = np.concatenate([self._x[:, k], self._integ[:, k], self._max[:, k], self._min[:, k]], axis=1)
        else:
            F = self._x[:, k]
        mu = F.mean(axis=0)
        sd = F.std(axis=0)
        keep = sd > 1e-10 * (1.0 + np.abs(mu))
        if not keep.any():
            X = np.ones((F.shape[0], 1))
        else:
            X = _monomials((F[:, keep] - mu[keep]) / sd[keep], self.degree)
        if len(self._cache) > 4:
            self._cache.clear()
        self._cache[k] = X
        return X

    def cond(self, k: int, v: np.ndarray) -> np.ndarray:
        X = self.design(k)
        if X.shape[1] == 1:
            return np.broadcast_to(np.mean(v, axis=0), np.shape(v)).copy()
        coef, _, rank, _ = np.linalg.lstsq(X, v, rcond=None)
        if rank < X.shape[1]:
            # lstsq returns the minimum-norm fit, which drops the redundant directions;
            # with three nodes or fewer the path features are tied to each other anyway
            (log.debug if self._warned or k <= 2 else log.warning)(
                "regression at k=%d is rank deficient (%d of %d columns); basis reduced", k, rank, X.shape[1])
            self._warned = True
        fit = X @ coef
        if np.ndim(v) == 1:
            var = np.var(v)
            self.r2[k] = float(1 - np.var(v - fit) / var) if var > 0 else 1.0
        return fit

    def z(self, k: int, v: np.ndarray, ev: Optional[np.ndarray] = None) -> np.ndarray:
        """``E[v dB_k | F_k] / dt`` with ``E[v|F_k]`` as control variate; ``(M, d)``."""
        if ev is None:
            ev = self.cond(k, v)
        dB = self.batch.paths[:, k + 1] - self.batch.paths[:, k]
        target = (v - ev)[:, None] * dB / self.grid.dt
        return self.cond(k, target)

    def one_step_lower(self, k: int, v: np.ndarray, L: float):
        """``inf_beta E^beta[v | F_k]`` over ``|beta_i| <= L`` and the minimizing vertex."""
        ev = self.cond(k, v)
        z = self.z(k, v, ev)
        val = ev - L * self.grid.dt * np.sum(np.abs(z), axis=1)
        # round-off gradients of a locally constant v must not switch the drift on
        dead = np.abs(z) <= 1e-10 * (1.0 + np.max(np.abs(v)))
        return val, z, np.where(dead, 0.0, -L * np.sign(z))


class TreeEstimator:
    """Exact conditional expectations on a :class:`TreeBatch`."""

    def __init__(self, batch: TreeBatch):
        self.batch = batch
        self.grid = batch.grid

    def cond(self, k: int, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        b = self.batch.block(k)
        shp = v.shape
        g = v.reshape((shp[0] // b, b) + shp[1:]).mean(axis=1)
        return np.repeat(g, b, axis=0)

    def children(self, k: int, v: np.ndarray) -> np.ndarray:
        """``(nodes, branch, ...)`` values of the children of each level-``k`` node."""
        v = np.asarray(v, dtype=float)
        b = self.batch.block(k)
        br = self.batch.branch
        return v.reshape((v.shape[0] // b, br, b // br) + v.shape[1:])[:, :, 0]

    def z(self, k: int, v: np.ndarray, ev=None) -> np.ndarray:
        ch = self.children(k, v)  # (nodes, branch)
        s = self.batch.signs  # (branch, d)
        z = np.einsum("nb,bd->nd", ch, s) / self.batch.branch / np.sqrt(self.grid.dt)
        return np.repeat(z, self.batch.block(k), axis=0)

    def one_step_lower(self, k: int, v: np.ndarray, L: float):
        """Vertex enumeration of the tilted one-step expectation.

        A tilt ``beta`` reweights child ``s`` by ``prod_i (1 + beta_i s_i sqrt(dt)) / 2``;
        the weights are multilinear in ``beta`` so the infimum sits on a vertex.
        """
        sq = np.sqrt(self.grid.dt)
        if L * sq > 1:
            raise ValueError("L*sqrt(dt) must not exceed 1 for the tilted tree weights to be positive")
        ch = self.children(k, v)
        s = self.batch.signs
        d = self.batch.d
        best = None
        best_beta = None
        for vert in itertools.product((-1.0, 1.0), repeat=d):
            beta = L * np.asarray(vert)
            w = np.prod(0.5 * (1.0 + beta[None, :] * s * sq), axis=1)  # (branch,)
            val = ch @ w
            if best is None:
                best, best_beta = val, np.broadcast_to(beta, (val.size, d)).copy()
            else:
                better = val < best
                best = np.where(better, val, best)
                best_beta[better] = beta
        b = self.batch.block(k)
        return np.repeat(best, b), self.z(k, v), np.repeat(best_beta, b, axis=0)


# ---------------------------------------------------------------------------
# Girsanov


@dataclass
class DriftControl:
    """Feedback drift ``beta(k, prefix, grid) -> (M, d)`` with components in ``[-L, L]``."""

    beta: Callable[[int, np.ndarray, TimeGrid], np.ndarray]
    L: float

    def __call__(self, k: int, prefix: np.ndarray, grid: TimeGrid) -> np.ndarray:
        b = np.asarray(self.beta(k, prefix, grid), dtype=float)
        b = np.broadcast_to(b, (prefix.shape[0], prefix.shape[-1]))
        if np.any(np.abs(b) > self.L * (1 + 1e-12) + 1e-15):
            raise ValueError(f"drift control leaves the box [-{self.L}, {self.L}]")
        return b

    @classmethod
    def constant(cls, b, L: Optional[float] = None) -> "DriftControl":
        b = np.atleast_1d(np.asarray(b, dtype=float))
        return cls(lambda k, x, g: b, float(np.max(np.abs(b))) if L is None else L)


@dataclass
class GirsanovWeight:
    values: np.ndarray  # (M, n+1), density process on [t_start, T]

    @property
    def terminal(self) -> np.ndarray:
        return self.values[:, -1]


def _betas(batch, control: DriftControl, paths=None) -> np.ndarray:
    p = batch.paths if paths is None else paths
    s = batch.start
    return np.stack([control(k, p[:, : k + 1], batch.grid) for k in range(s, batch.grid.N)], axis=1)


def girsanov_weight(batch, control: DriftControl) -> GirsanovWeight:
    """Discrete exponential ``exp(sum beta.dB - 0.5 sum |beta|^2 dt)``."""
    beta = _betas(batch, control)
    logm = np.sum(beta * batch.increments, axis=2) - 0.5 * np.sum(beta**2, axis=2) * batch.grid.dt
    vals = np.concatenate([np.zeros((batch.M, 1)), np.cumsum(logm, axis=1)], axis=1)
    return GirsanovWeight(np.exp(vals))


def _terminal_values(xi, batch) -> np.ndarray:
    if isinstance(xi, PathFunctional):
        return xi(batch.paths, batch.grid)
    return np.asarray(xi, dtype=float)


def tilted_expectation(xi, batch, control: DriftControl, method: str = "weight") -> Estimate:
    """``E^{P^beta}[xi]`` by likelihood-ratio weighting or by drift re-simulation."""
    if method == "weight":
        vals = _terminal_values(xi, batch)
        if isinstance(xi, PathFunctional) and not np.isfinite(xi.bound):
            log.info("tilted expectation of a functional without a declared bound")
        w = girsanov_weight(batch, control).terminal
        m, se = _mean_se(w * vals)
        return Estimate(m, se, "weight")
    if method == "resimulate":
        if not isinstance(xi, PathFunctional):
            raise TypeError("re-simulation needs xi as a PathFunctional")
        p = batch.paths.copy()
        s, dt = batch.start, batch.grid.dt
        for k in range(s, batch.grid.N):
            b = control(k, p[:, : k + 1], batch.grid)
            p[:, k + 1] = p[:, k] + b * dt + batch.increments[:, k - s]
        m, se = _mean_se(xi(p, batch.grid))
        return Estimate(m, se, "resimulate")
    raise ValueError(f"unknown method {method!r}")


# ---------------------------------------------------------------------------
# nonlinear expectations


def stopped_lower_expectation(values: np.ndarray, stop: np.ndarray, batch, L: float,
                              estimator=None) -> np.ndarray:
    """Lower nonlinear expectation of ``values[m, stop[m]]`` seen from every node.

    ``values`` is ``(M, N+1)``; returns ``(M, N+1)`` with ``W_k = values_stop``
    for ``k >= stop`` and ``W_k = inf_beta E^beta[W_{k+1} | F_k]`` before.
    """
    est = estimator or batch.estimator()
    N, s = batch.grid.N, batch.start
    rows = np.arange(batch.M)
    frozen = values[rows, stop]
    W = np.empty_like(values)
    W[:, N] = frozen
    for k in range(N - 1, s - 1, -1):
        cont, _, _ = est.one_step_lower(k, W[:, k + 1], L)
        W[:, k] = np.where(k >= stop, frozen, cont)
    W[:, :s] = W[:, s: s + 1]
    return W


def lower_expectation(xi, L: float, batch, method: str = "bsde", features: str = "path",
                      degree: int = 2) -> Estimate:
    """``inf_beta E^beta[xi]`` over drifts with components bounded by ``L``.

    ``method='bsde'`` solves the BSDE with driver ``-L |z|_1`` backward;
    ``method='control_search'`` builds the greedy bang-bang feedback control
    ``beta_k = -L sign(Z_k)`` from the regressed continuation gradient and
    evaluates it by Girsanov weighting (on a tree: exact vertex DP).
    """
    if L < 0:
        raise ValueError("L must be non-negative")
    vals = _terminal_values(xi, batch)
    N, s, dt = batch.grid.N, batch.start, batch.grid.dt
    est = batch.estimator(features=features, degree=degree)
    Y = vals.copy()
    drift = np.zeros(batch.M)
    betas = np.zeros((batch.M, N - s, batch.d))
    for k in range(N - 1, s - 1, -1):
        Yk, z, beta = est.one_step_lower(k, Y, L)
        drift += L * dt * np.sum(np.abs(z), axis=1)
        betas[:, k - s] = beta
        Y = Yk
    if method == "bsde":
        if batch.exact:
            return Estimate(float(Y[0]), 0.0, "bsde")
        m, se = _mean_se(vals - drift)
        return Estimate(m, se, "bsde")
    if method == "control_search":
        if batch.exact:
            # beta_i s_i sqrt(dt) equals beta_i dB_i on the tree
            w = np.prod(0.5 * (1 + betas * batch.increments), axis=2)
            w = np.prod(w * batch.branch, axis=1)
            return Estimate(float(np.mean(w * vals)), 0.0, "control_search")
        logm = np.sum(betas * batch.increments, axis=2) - 0.5 * np.sum(betas**2, axis=2) * dt
        m, se = _mean_se(np.exp(np.sum(logm, axis=1)) * vals)
        return Estimate(m, se, "control_search")
    raise ValueError(f"unknown method {method!r}")


def upper_expectation(xi, L: float, batch, method: str = "bsde", **kw) -> Estimate:
    vals = _terminal_values(xi, batch)
    e = lower_expectation(-vals, L, batch, method=method, **kw)
    return Estimate(-e.value, e.se, e.method)


# ---------------------------------------------------------------------------
# optimal stopping


@dataclass
class StoppingValue:
    """Lower optimal stopping value ``Y``, payoff ``X`` (stopped at the bound),
    optimal rule ``tau_star`` and compensator ``K``, all per path and node."""

    Y: np.ndarray
    X: np.ndarray
    tau_star: np.ndarray
    tau_bound: np.ndarray
    K: np.ndarray
    start: int = 0

    @property
    def value(self) -> float:
        return float(self.Y[0, self.start])

    def invariant_violations(self, tol: float = 1e-10) -> dict:
        s = self.start
        Y, X, K = self.Y[:, s:], self.X[:, s:], self.K[:, s:]
        rows = np.arange(Y.shape[0])
        dK = np.diff(K, axis=1)
        gap = (X - Y)[:, :-1]
        return {
            "Y_above_X": float(np.max(Y - X)),
            "contact_gap": float(np.max(np.abs(self.Y[rows, self.tau_star] - self.X[rows, self.tau_star]))),
            "K_decrease": float(max(0.0, -np.min(dK))) if dK.size else 0.0,
            "complementarity": float(np.max(np.abs(gap * dK))) if dK.size else 0.0,
        }


def _payoff_matrix(X, batch) -> np.ndarray:
    if isinstance(X, PathFunctional):
        return X.on_batch(batch.paths, batch.grid)
    return np.asarray(X, dtype=float)


def optimal_stop_lower(X, batch, L: float = 0.0, tau_bound=None, estimator=None) -> StoppingValue:
    """``Y_t = inf_tau E_lower^L[X_{tau ^ tau_bound}]`` by backward dynamic programming."""
    Xm = _payoff_matrix(X, batch)
    if not np.all(np.isfinite(Xm)):
        raise ValueError("payoff must be bounded (finite on the batch)")
    N, s = batch.grid.N, batch.start
    M = Xm.shape[0]
    if tau_bound is None:
        bound = np.full(M, N, dtype=int)
    elif isinstance(tau_bound, GridStoppingTime):
        bound = tau_bound(batch.paths, batch.grid)
    else:
        bound = np.broadcast_to(np.asarray(tau_bound, dtype=int), (M,)).copy()
    bound = np.clip(bound, s, N)
    rows = np.arange(M)
    cols = np.arange(N + 1)[None, :]
    Xs = np.where(cols <= bound[:, None], Xm, Xm[rows, bound][:, None])
    est = estimator or batch.estimator()
    Y = np.empty_like(Xs)
    dK = np.zeros_like(Xs)
    Y[:, N] = Xs[:, N]
    for k in range(N - 1, s - 1, -1):
        cont, _, _ = est.one_step_lower(k, Y[:, k + 1], L)
        live = k < bound
        Y[:, k] = np.where(live, np.minimum(Xs[:, k], cont), Xs[:, k])
        dK[:, k] = np.where(live, np.maximum(cont - Y[:, k], 0.0), 0.0)
    Y[:, :s] = Y[:, s: s + 1]
    K = np.zeros_like(Xs)
    K[:, s + 1:] = np.cumsum(dK[:, s:-1], axis=1)
    hit = (Y == Xs) & (cols >= s)
    hit |= cols >= bound[:, None]
    tau = np.argmax(hit, axis=1)
    return StoppingValue(Y, Xs, tau, bound, K, s)


def optimal_stop_upper(X, batch, L: float = 0.0, tau_bound=None, estimator=None) -> StoppingValue:
    """``sup_tau E_upper^L[X]`` via ``-inf_tau E_lower^L[-X]``; ``Y >= X`` here."""
    Xm = _payoff_matrix(X, batch)
    sv = optimal_stop_lower(-Xm, batch, L, tau_bound, estimator)
    return StoppingValue(-sv.Y, -sv.X, sv.tau_star, sv.tau_bound, sv.K, sv.start)


@dataclass
class SubmartingaleReport:
    y0: float
    lower_values: list
    martingale_value: float
    tol: float

    @property
    def submartingale(self) -> bool:
        return all(v >= self.y0 - self.tol for v in self.lower_values)

    @property
    def martingale_to_tau_star(self) -> bool:
        return abs(self.martingale_value - self.y0) <= self.tol


def submartingale_check(sv: StoppingValue, batch, L: float, stopping_times, tol: Optional[float] = None,
                        estimator=None) -> SubmartingaleReport:
    """Check ``E_lower[Y_{tau ^ bound}] >= Y_0`` for sampled ``tau`` and
    equality up to ``tau_star``."""
    est = estimator or batch.estimator()
    if tol is None:
        tol = 1e-10 if batch.exact else 1e-2
    vals = []
    for tau in stopping_times:
        if isinstance(tau, GridStoppingTime):
            idx = tau(batch.paths, batch.grid)
        else:
            idx = np.broadcast_to(np.asarray(tau, dtype=int), (batch.M,))
        idx = np.minimum(np.maximum(idx, sv.start), sv.tau_bound)
        W = stopped_lower_expectation(sv.Y, idx, batch, L, est)
        vals.append(float(np.mean(W[:, sv.start])))
    W = stopped_lower_expectation(sv.Y, sv.tau_star, batch, L, est)
    return SubmartingaleReport(sv.value, vals, float(np.mean(W[:, sv.start])), tol)
