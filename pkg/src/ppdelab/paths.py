"""Discretized canonical path space.

Paths live on a uniform grid ``t_k = k T / N``.  A batch of paths is a plain
array of shape ``(..., N+1, d)``; :class:`DiscretePath` wraps a single path
together with its grid, flavor and an optional bump marker.

A path functional receives the *prefix* ``x[..., :k+1, :]`` and the grid it
lives on, so progressive measurability holds by construction: the current
time is ``(x.shape[-2] - 1) * grid.dt``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

__all__ = [
    "TimeGrid",
    "DiscretePath",
    "PathPoint",
    "PathFunctional",
    "GridStoppingTime",
    "uniform_norm",
    "dist_inf",
    "concat",
    "freeze",
    "bump",
    "extend_frozen",
    "shift_functional",
    "first_hitting",
    "first_exit",
    "write_path_batch",
    "read_path_batch",
]


@dataclass(frozen=True)
class TimeGrid:
    T: float
    N: int

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError("horizon T must be positive")
        if int(self.N) != self.N or self.N < 1:
            raise ValueError("number of steps N must be an integer >= 1")

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.N + 1) * self.dt

    def time(self, k: int) -> float:
        return k * self.dt

    def index(self, t: float, tol: float = 1e-9) -> int:
        """Grid index of time ``t``; raises if ``t`` is not a node."""
        k = int(round(t / self.dt))
        if abs(k * self.dt - t) > tol * max(1.0, self.T) or not 0 <= k <= self.N:
            raise ValueError(f"time {t} is not a node of {self}")
        return k

    def sub(self, k: int) -> "TimeGrid":
        """The shifted grid on ``[t_k, T]`` re-anchored at 0."""
        if not 0 <= k < self.N:
            raise ValueError("shift index must satisfy 0 <= k < N")
        return TimeGrid(self.T - k * self.dt, self.N - k)


@dataclass(frozen=True)
class DiscretePath:
    grid: TimeGrid
    values: np.ndarray
    flavor: str = "continuous"
    bump: Optional[tuple] = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.shape[0] != self.grid.N + 1:
            raise ValueError("values must have N+1 rows")
        object.__setattr__(self, "values", v)
        if self.flavor not in ("continuous", "cadlag"):
            raise ValueError("flavor must be 'continuous' or 'cadlag'")
        if self.flavor == "continuous":
            if self.bump is not None:
                raise ValueError("a bump requires the cadlag flavor")
            if np.any(v[0] != 0.0):
                raise ValueError("continuous paths start at 0")

    @property
    def d(self) -> int:
        return self.values.shape[1]

    @classmethod
    def zero(cls, grid: TimeGrid, d: int = 1) -> "DiscretePath":
        return cls(grid, np.zeros((grid.N + 1, d)))

    @classmethod
    def from_function(cls, grid: TimeGrid, fn: Callable[[np.ndarray], np.ndarray]) -> "DiscretePath":
        return cls(grid, np.asarray(fn(grid.nodes), dtype=float))

    def prefix(self, k: int) -> np.ndarray:
        return self.values[: k + 1]


@dataclass(frozen=True)
class PathPoint:
    k: int
    path: DiscretePath

    def __post_init__(self):
        if not 0 <= self.k <= self.path.grid.N:
            raise IndexError(f"index {self.k} outside 0..{self.path.grid.N}")

    @property
    def t(self) -> float:
        return self.path.grid.time(self.k)

    @property
    def prefix(self) -> np.ndarray:
        return self.path.prefix(self.k)


@dataclass
class PathFunctional:
    """A progressively measurable map ``(t, path) -> value``.

    ``func(x, grid)`` takes a prefix of shape ``(..., k+1, d)`` and returns an
    array of shape ``(...)``.  Optional analytic derivatives share the same
    signature and return ``(...)``, ``(..., d)`` and ``(..., d, d)``.
    """

    func: Callable[[np.ndarray, TimeGrid], np.ndarray]
    name: str = "functional"
    cadlag: bool = True
    dt: Optional[Callable] = None
    dx: Optional[Callable] = None
    dxx: Optional[Callable] = None
    markovian: bool = False
    bound: float = np.inf

    def __call__(self, x: np.ndarray, grid: TimeGrid) -> np.ndarray:
        return np.asarray(self.func(np.asarray(x, dtype=float), grid), dtype=float)

    def at(self, p: PathPoint) -> float:
        return float(self(p.prefix, p.path.grid))

    @property
    def has_derivatives(self) -> bool:
        return self.dt is not None and self.dx is not None and self.dxx is not None

    def on_batch(self, paths: np.ndarray, grid: TimeGrid) -> np.ndarray:
        """Evaluate along every node of a batch ``(M, N+1, d)`` -> ``(M, N+1)``."""
        return np.stack([self(paths[:, : k + 1], grid) for k in range(paths.shape[1])], axis=1)


@dataclass
class GridStoppingTime:
    """Non-anticipative rule mapping a batch of paths to grid indices."""

    rule: Callable[[np.ndarray, TimeGrid], np.ndarray]
    description: str = ""

    def __call__(self, paths: np.ndarray, grid: TimeGrid) -> np.ndarray:
        paths = np.asarray(paths, dtype=float)
        single = paths.ndim == 2
        if single:
            paths = paths[None]
        out = np.asarray(self.rule(paths, grid), dtype=int)
        return out[0] if single else out

    @classmethod
    def constant(cls, k: int) -> "GridStoppingTime":
        return cls(lambda p, g: np.full(p.shape[0], min(k, g.N), dtype=int), f"k={k}")


def uniform_norm(path: DiscretePath, k: int) -> float:
    if not 0 <= k <= path.grid.N:
        raise IndexError(f"index {k} outside 0..{path.grid.N}")
    return float(np.max(np.linalg.norm(path.values[: k + 1], axis=1)))


def _frozen_full(path: DiscretePath, k: int) -> np.ndarray:
    v = path.values.copy()
    v[k + 1:] = v[k]
    return v


def dist_inf(p: PathPoint, q: PathPoint) -> float:
    gp, gq = p.path.grid, q.path.grid
    if not np.isclose(gp.T, gq.T) or gp.N != gq.N:
        raise ValueError("points live on incompatible grids")
    gap = np.linalg.norm(_frozen_full(p.path, p.k) - _frozen_full(q.path, q.k), axis=1)
    return abs(p.t - q.t) + float(gap.max())


def extend_frozen(x: np.ndarray, steps: int) -> np.ndarray:
    """Append ``steps`` copies of the last node of a prefix (batch-aware)."""
    if steps == 0:
        return x
    tail = np.repeat(x[..., -1:, :], steps, axis=-2)
    return np.concatenate([x, tail], axis=-2)


def freeze(path: DiscretePath, k: int) -> DiscretePath:
    return replace(path, values=_frozen_full(path, k))


def bump(path: DiscretePath, k: int, i: int, h: float) -> DiscretePath:
    if not 0 <= i < path.d:
        raise IndexError(f"coordinate {i} outside 0..{path.d - 1}")
    if not 0 <= k <= path.grid.N:
        raise IndexError(f"index {k} outside 0..{path.grid.N}")
    v = path.values.copy()
    v[k, i] += h
    vec = np.zeros(path.d)
    vec[i] = h
    return DiscretePath(path.grid, v, flavor="cadlag", bump=(k, vec))


def concat(omega: np.ndarray, omega2: np.ndarray) -> np.ndarray:
    """``omega`` on ``[0, t_k]`` joined with a shifted path ``omega2`` on ``[t_k, T]``.

    Shapes ``(..., k+1, d)`` and ``(..., j+1, d)`` give ``(..., k+j+1, d)``;
    leading dimensions broadcast.  ``omega2`` must start at 0.
    """
    omega = np.asarray(omega, dtype=float)
    omega2 = np.asarray(omega2, dtype=float)
    if np.any(omega2[..., 0, :] != 0.0):
        raise ValueError("the shifted path must start at 0")
    lead = np.broadcast_shapes(omega.shape[:-2], omega2.shape[:-2])
    a = np.broadcast_to(omega, lead + omega.shape[-2:])
    b = np.broadcast_to(omega2, lead + omega2.shape[-2:])
    return np.concatenate([a, a[..., -1:, :] + b[..., 1:, :]], axis=-2)


def concat_paths(omega: DiscretePath, k: int, omega2: DiscretePath) -> DiscretePath:
    """Path-object form of :func:`concat`; ``omega2`` lives on ``grid.sub(k)``."""
    grid = omega.grid
    if omega2.grid.N != grid.N - k or not np.isclose(omega2.grid.T, grid.T - grid.time(k)):
        raise ValueError("the shifted path does not start at node k")
    return DiscretePath(grid, concat(omega.prefix(k), omega2.values), flavor=omega.flavor)


def shift_functional(xi: PathFunctional, k: int, omega: np.ndarray, grid: TimeGrid) -> PathFunctional:
    """``xi^{t,omega}(omega') = xi(omega ⊗_t omega')`` on the shifted grid."""
    prefix = np.asarray(omega, dtype=float)[..., : k + 1, :]
    if k == 0:
        return xi

    def func(x, sub):
        return xi(concat(prefix, x), grid)

    out = PathFunctional(func, name=f"{xi.name}^(t={grid.time(k):g})", cadlag=xi.cadlag,
                         markovian=False, bound=xi.bound)
    if xi.has_derivatives:
        out.dt = lambda x, sub: xi.dt(concat(prefix, x), grid)
        out.dx = lambda x, sub: xi.dx(concat(prefix, x), grid)
        out.dxx = lambda x, sub: xi.dxx(concat(prefix, x), grid)
    return out


def first_hitting(u: PathFunctional, c: float) -> GridStoppingTime:
    """Smallest index with ``u(t_k, path) >= c``, else ``N``."""

    def rule(paths, grid):
        M, n = paths.shape[0], paths.shape[1]
        out = np.full(M, grid.N, dtype=int)
        open_ = np.ones(M, dtype=bool)
        for k in range(n):
            hit = open_ & (u(paths[:, : k + 1], grid) >= c)
            out[hit] = k
            open_ &= ~hit
            if not open_.any():
                break
        return out

    return GridStoppingTime(rule, f"inf{{t: {u.name} >= {c}}} ^ T")


def first_exit(radius: float, horizon: float) -> GridStoppingTime:
    """``inf{s: |B_s| >= radius} ^ horizon`` on a shifted grid."""

    def rule(paths, grid):
        kmax = min(grid.N, int(np.floor(horizon / grid.dt + 1e-9)))
        norms = np.linalg.norm(paths[:, : kmax + 1], axis=-1)
        hit = norms >= radius
        hit[:, 0] = False
        hit[:, kmax] = True
        return np.argmax(hit, axis=1)

    return GridStoppingTime(rule, f"exit |B|>={radius} ^ {horizon}")


def write_path_batch(path: str, paths: np.ndarray, grid: TimeGrid) -> None:
    """CSV ``path_id,k,t,x_1..x_d`` ordered by ``(path_id, k)``."""
    paths = np.asarray(paths, dtype=float)
    M, n, d = paths.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path_id", "k", "t"] + [f"x_{i + 1}" for i in range(d)])
        for m in range(M):
            for k in range(n):
                w.writerow([m, k, repr(grid.time(k))] + [repr(float(v)) for v in paths[m, k]])


def read_path_batch(path: str) -> tuple[np.ndarray, TimeGrid]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    d = len(header) - 3
    ids = sorted({int(r[0]) for r in body})
    n = max(int(r[1]) for r in body) + 1
    out = np.zeros((len(ids), n, d))
    T = 0.0
    for r in body:
        out[int(r[0]), int(r[1])] = [float(v) for v in r[3:]]
        T = max(T, float(r[2]))
    return out, TimeGrid(T, n - 1)
