"""Named path functionals used by the tests, the acceptance suite and the CLI.

Every entry is a factory ``(**params) -> PathFunctional``.  Integrals are
left-endpoint sums, so the node being bumped never enters them.
"""
from __future__ import annotations

import numpy as np

from .paths import PathFunctional

__all__ = ["FUNCTIONALS", "get_functional", "time_of"]


def time_of(x: np.ndarray, grid) -> float:
    return (x.shape[-2] - 1) * grid.dt


def _last(x):
    return x[..., -1, 0]


def _zeros_like_last(x):
    return np.zeros(x.shape[:-2])


def _dx_first(x, val):
    out = np.zeros(x.shape[:-2] + (x.shape[-1],))
    out[..., 0] = val
    return out


def _dxx_first(x, val):
    d = x.shape[-1]
    out = np.zeros(x.shape[:-2] + (d, d))
    out[..., 0, 0] = val
    return out


def identity() -> PathFunctional:
    return PathFunctional(
        lambda x, g: _last(x), "identity", markovian=True,
        dt=lambda x, g: _zeros_like_last(x),
        dx=lambda x, g: _dx_first(x, 1.0),
        dxx=lambda x, g: _dxx_first(x, 0.0),
    )


def time_functional() -> PathFunctional:
    return PathFunctional(
        lambda x, g: np.full(x.shape[:-2], time_of(x, g)), "time", markovian=True,
        dt=lambda x, g: np.ones(x.shape[:-2]),
        dx=lambda x, g: np.zeros(x.shape[:-2] + (x.shape[-1],)),
        dxx=lambda x, g: np.zeros(x.shape[:-2] + (x.shape[-1],) * 2),
    )


def square() -> PathFunctional:
    """|omega_t|^2 over all coordinates."""
    d_ = lambda x: x.shape[-1]
    return PathFunctional(
        lambda x, g: np.sum(x[..., -1, :] ** 2, axis=-1), "square", markovian=True,
        dt=lambda x, g: _zeros_like_last(x),
        dx=lambda x, g: 2 * x[..., -1, :],
        dxx=lambda x, g: 2 * np.broadcast_to(np.eye(d_(x)), x.shape[:-2] + (d_(x), d_(x))).copy(),
    )


def square_minus_t() -> PathFunctional:
    """|omega_t|^2 - d t, a martingale functional (``omega_t^2 - t`` for d=1)."""
    sq = square()
    return PathFunctional(
        lambda x, g: np.sum(x[..., -1, :] ** 2, axis=-1) - x.shape[-1] * time_of(x, g),
        "square_minus_t", markovian=True,
        dt=lambda x, g: np.full(x.shape[:-2], -float(x.shape[-1])),
        dx=sq.dx, dxx=sq.dxx,
    )


def integral() -> PathFunctional:
    """Left Riemann sum of the first coordinate up to the current time."""
    return PathFunctional(
        lambda x, g: np.sum(x[..., :-1, 0], axis=-1) * g.dt, "integral",
        dt=lambda x, g: _last(x),
        dx=lambda x, g: _dx_first(x, 0.0),
        dxx=lambda x, g: _dxx_first(x, 0.0),
    )


def running_max(cap: float = np.inf) -> PathFunctional:
    name = "running_max" if not np.isfinite(cap) else f"running_max_clipped({cap:g})"
    return PathFunctional(lambda x, g: np.minimum(np.max(x[..., 0], axis=-1), cap), name, bound=cap)


def running_min() -> PathFunctional:
    return PathFunctional(lambda x, g: np.min(x[..., 0], axis=-1), "running_min")


def clipped(level: float = 2.0) -> PathFunctional:
    return PathFunctional(lambda x, g: np.clip(_last(x), -level, level), f"clipped({level:g})",
                          markovian=True, bound=level)


def cosine() -> PathFunctional:
    return PathFunctional(
        lambda x, g: np.cos(_last(x)), "cos", markovian=True, bound=1.0,
        dt=lambda x, g: _zeros_like_last(x),
        dx=lambda x, g: _dx_first(x, -np.sin(_last(x))),
        dxx=lambda x, g: _dxx_first(x, -np.cos(_last(x))),
    )


def heat_cos(shift: float = 0.0) -> PathFunctional:
    """``exp(-(T-t)/2) cos(omega_t) + shift (T-t)``: the heat solution with cos data.

    ``shift = 0`` gives the classical solution of the heat PPDE with terminal
    value ``cos(omega_T)``; ``shift != 0`` adds ``shift`` to its operator value.
    """

    def tau(x, g):
        return g.T - time_of(x, g)

    def v(x, g):
        return np.exp(-tau(x, g) / 2) * np.cos(_last(x)) + shift * tau(x, g)

    return PathFunctional(
        v, "heat_cos" if shift == 0 else f"heat_cos{shift:+g}(T-t)", markovian=True, bound=1.0 + abs(shift),
        dt=lambda x, g: 0.5 * np.exp(-tau(x, g) / 2) * np.cos(_last(x)) - shift,
        dx=lambda x, g: _dx_first(x, -np.exp(-tau(x, g) / 2) * np.sin(_last(x))),
        dxx=lambda x, g: _dxx_first(x, -np.exp(-tau(x, g) / 2) * np.cos(_last(x))),
    )


def absolute() -> PathFunctional:
    return PathFunctional(lambda x, g: np.abs(_last(x)), "abs", markovian=True)


def put_payoff(strike: float = 0.0) -> PathFunctional:
    return PathFunctional(lambda x, g: np.maximum(strike - _last(x), 0.0), f"put({strike:g})", markovian=True)


def constant(c: float = 1.0) -> PathFunctional:
    return PathFunctional(
        lambda x, g: np.full(x.shape[:-2], float(c)), f"const({c:g})", markovian=True, bound=abs(c),
        dt=lambda x, g: np.zeros(x.shape[:-2]),
        dx=lambda x, g: np.zeros(x.shape[:-2] + (x.shape[-1],)),
        dxx=lambda x, g: np.zeros(x.shape[:-2] + (x.shape[-1],) * 2),
    )


def continuous_only_square() -> PathFunctional:
    """Same values as ``square`` but declares no cadlag extension."""
    f = square()
    f.cadlag = False
    f.name = "square_continuous_only"
    return f


FUNCTIONALS = {
    "identity": identity,
    "time": time_functional,
    "square": square,
    "square_minus_t": square_minus_t,
    "integral": integral,
    "running_max": running_max,
    "running_max_clipped": lambda cap=2.0: running_max(cap),
    "running_min": running_min,
    "clipped": clipped,
    "cos": cosine,
    "heat_cos": heat_cos,
    "abs": absolute,
    "put": put_payoff,
    "constant": constant,
}


def get_functional(name: str, **params) -> PathFunctional:
    try:
        factory = FUNCTIONALS[name]
    except KeyError:
        raise KeyError(f"unknown functional {name!r}; known: {sorted(FUNCTIONALS)}") from None
    return factory(**params)
