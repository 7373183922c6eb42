"""Dupire derivatives by finite differences and a functional Itô residual check."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .paths import PathFunctional, PathPoint, TimeGrid, extend_frozen

__all__ = [
    "DerivativeError",
    "DerivativeReport",
    "ItoResidual",
    "vertical_derivative",
    "vertical_hessian",
    "horizontal_derivative",
    "derivatives",
    "ito_residual",
]


class DerivativeError(ValueError):
    """Raised when a functional cannot be differentiated as requested."""


@dataclass
class DerivativeReport:
    dt: np.ndarray
    dx: np.ndarray
    dxx: np.ndarray
    h: np.ndarray
    delta: float
    richardson_gap: float


@dataclass
class ItoResidual:
    residuals: np.ndarray  # (M, N)
    max_residual: np.ndarray  # (M,)
    rms: float

    def rows(self):
        for m, v in enumerate(self.max_residual):
            yield m, float(v), float(np.sqrt(np.mean(self.residuals[m] ** 2)))


def _prefix(p, grid):
    if isinstance(p, PathPoint):
        return p.prefix, p.path.grid
    if grid is None:
        raise TypeError("a grid is required when passing a raw prefix array")
    return np.asarray(p, dtype=float), grid


def _default_h(x: np.ndarray, scale: float) -> np.ndarray:
    return scale * (1.0 + np.max(np.linalg.norm(x, axis=-1), axis=-1))


def _bumped(x: np.ndarray, i: int, h) -> np.ndarray:
    y = np.array(x, dtype=float, copy=True)
    y[..., -1, i] += h
    return y


def _check_cadlag(u: PathFunctional):
    if not u.cadlag:
        raise DerivativeError(f"{u.name} declares no cadlag extension; vertical bumps are undefined")


def _vertical(u, x, grid, h):
    d = x.shape[-1]
    cols = []
    for i in range(d):
        up = u(_bumped(x, i, h), grid)
        dn = u(_bumped(x, i, -h), grid)
        cols.append((up - dn) / (2 * h))
    return np.stack(cols, axis=-1)


def vertical_derivative(u: PathFunctional, p, h=None, grid: TimeGrid | None = None) -> np.ndarray:
    """Central difference of ``u`` under a bump of the current value.

    ``p`` is a :class:`PathPoint` or a prefix array ``(..., k+1, d)``.
    Returns ``(..., d)``.
    """
    _check_cadlag(u)
    x, grid = _prefix(p, grid)
    if h is None:
        h = _default_h(x, 1e-4)
    h = np.asarray(h, dtype=float)
    if np.any(h <= 0):
        raise ValueError("bump size must be positive")
    out = _vertical(u, x, grid, h)
    if not np.all(np.isfinite(out)):
        raise DerivativeError(f"{u.name} failed on bumped paths")
    return out


def _hessian(u, x, grid, h):
    d = x.shape[-1]
    base = u(x, grid)
    H = np.empty(base.shape + (d, d))
    for i in range(d):
        up = u(_bumped(x, i, h), grid)
        dn = u(_bumped(x, i, -h), grid)
        H[..., i, i] = (up - 2 * base + dn) / h**2
        for j in range(i + 1, d):
            pp = u(_bumped(_bumped(x, i, h), j, h), grid)
            pm = u(_bumped(_bumped(x, i, h), j, -h), grid)
            mp = u(_bumped(_bumped(x, i, -h), j, h), grid)
            mm = u(_bumped(_bumped(x, i, -h), j, -h), grid)
            H[..., i, j] = H[..., j, i] = (pp - pm - mp + mm) / (4 * h**2)
    return H


def vertical_hessian(u: PathFunctional, p, h=None, grid: TimeGrid | None = None) -> np.ndarray:
    """Second vertical derivatives, symmetrized; returns ``(..., d, d)``."""
    _check_cadlag(u)
    x, grid = _prefix(p, grid)
    if h is None:
        h = _default_h(x, 1e-3)
    H = _hessian(u, x, grid, np.asarray(h, dtype=float))
    return 0.5 * (H + np.swapaxes(H, -1, -2))


def horizontal_derivative(u: PathFunctional, p, delta=None, grid: TimeGrid | None = None) -> np.ndarray:
    """Forward difference along the path frozen at the current time.

    At ``t = T`` the left-limit convention applies: the derivative at the last
    interior node ``t_{N-1}`` is returned.
    """
    x, grid = _prefix(p, grid)
    k = x.shape[-2] - 1
    if delta is None:
        steps = 1
    else:
        steps = delta / grid.dt
        if steps < 1 - 1e-9 or abs(steps - round(steps)) > 1e-9:
            raise ValueError(f"delta={delta} is not a positive multiple of the grid step {grid.dt}")
        steps = int(round(steps))
    if k >= grid.N:
        return horizontal_derivative(u, x[..., :-1, :], steps * grid.dt, grid)
    steps = min(steps, grid.N - k)
    return (u(extend_frozen(x, steps), grid) - u(x, grid)) / (steps * grid.dt)


def derivatives(u: PathFunctional, p, grid: TimeGrid | None = None, h=None, delta=None) -> DerivativeReport:
    """All Dupire derivatives at ``p`` with a step-halving gap."""
    x, grid = _prefix(p, grid)
    if h is None:
        h = _default_h(x, 1e-4)
    h = np.asarray(h, dtype=float)
    dt = horizontal_derivative(u, x, delta, grid)
    dx = vertical_derivative(u, x, h, grid)
    dxx = vertical_hessian(u, x, None, grid)
    dx_half = vertical_derivative(u, x, h / 2, grid)
    gap = float(np.max(np.abs(dx - dx_half)))
    # the horizontal step cannot be halved below the grid; compare against 2*delta instead
    if x.shape[-2] + 1 <= grid.N:
        dt2 = horizontal_derivative(u, x, 2 * (grid.dt if delta is None else delta), grid)
        gap = max(gap, float(np.max(np.abs(dt - dt2))))
    return DerivativeReport(dt=dt, dx=dx, dxx=dxx, h=h,
                            delta=grid.dt if delta is None else delta, richardson_gap=gap)


def ito_residual(u: PathFunctional, paths: np.ndarray, grid: TimeGrid, analytic: bool = False) -> ItoResidual:
    """Per-step functional Itô residual along each path of a batch.

    ``residual_k = u_{k+1} - u_k - (dt u + tr(dxx u)/2) dt - dx u . dB_k``.
    With ``analytic=True`` the functional's own derivatives are used.
    """
    paths = np.asarray(paths, dtype=float)
    if analytic and not u.has_derivatives:
        raise DerivativeError(f"{u.name} has no analytic derivatives")
    M, n, d = paths.shape
    res = np.empty((M, n - 1))
    cur = u(paths[:, :1], grid)
    for k in range(n - 1):
        x = paths[:, : k + 1]
        nxt = u(paths[:, : k + 2], grid)
        if analytic:
            dt, dx, dxx = u.dt(x, grid), u.dx(x, grid), u.dxx(x, grid)
        else:
            dt = horizontal_derivative(u, x, None, grid)
            dx = vertical_derivative(u, x, None, grid)
            dxx = vertical_hessian(u, x, None, grid)
        dB = paths[:, k + 1] - paths[:, k]
        tr = np.trace(dxx, axis1=-2, axis2=-1)
        res[:, k] = nxt - cur - (dt + 0.5 * tr) * grid.dt - np.sum(dx * dB, axis=-1)
        cur = nxt
    return ItoResidual(res, np.max(np.abs(res), axis=1), float(np.sqrt(np.mean(res**2))))
