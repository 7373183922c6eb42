import numpy as np
import pytest
from hypothesis import given, strategies as st

from ppdelab import catalog
from ppdelab.bsde import (GENERATORS, comparison_linearization, comparison_test, constant_generator, drift_down,
                          f_martingale_check, get_generator, lattice_functional, linear_generator, modulus_probe,
                          nonlinear_generator, solve_bsde, solve_bsde_lattice, solve_bsde_regression,
                          solve_bsde_tree, stability_experiment, u0_value, write_solution_csv, zero_generator)
from ppdelab.paths import DiscretePath, PathFunctional, PathPoint, TimeGrid
from ppdelab.stochastics import TreeBatch, sample_brownian

G = TimeGrid(1.0, 20)


@pytest.fixture(scope="module")
def batch():
    return sample_brownian(G, 1, 20_000, seed=2024)


def test_generator_catalog_checks():
    for name, factory in GENERATORS.items():
        f = factory()
        rep = f.check()
        assert rep["lipschitz"] <= f.L0 * (1 + 1e-6) + 1e-12, name
        if np.isfinite(f.bound):
            assert rep["max_abs"] <= f.bound + 1e-12, name
    with pytest.raises(KeyError):
        get_generator("nope")
    assert zero_generator().plus(0.3)(0.0, np.zeros((2, 1, 1)), np.zeros(2), np.zeros((2, 1))).tolist() == [0.3, 0.3]


def test_regression_examples(batch):
    s = solve_bsde_regression(zero_generator(), catalog.identity(), batch)
    assert abs(s.y0) < 5 * s.se
    s = solve_bsde_regression(zero_generator(), catalog.cosine(), batch)
    assert s.y0 == pytest.approx(np.exp(-0.5), rel=0.01)
    s = solve_bsde_regression(linear_generator(0.1), catalog.constant(1.0), batch)
    assert s.y0 == pytest.approx(np.exp(-0.1), rel=0.01)
    assert "r2" in s.diagnostics and s.estimate.se == s.se


def test_terminal_and_bounds(batch):
    g = catalog.cosine()
    f = nonlinear_generator()
    s = solve_bsde_regression(f, g, batch)
    np.testing.assert_array_equal(s.Y[:, -1], g(batch.paths, G))
    assert np.max(np.abs(s.Y)) <= g.bound + G.T * f.bound + 1e-9


def test_tree_examples():
    grid = TimeGrid(1.0, 10)
    assert abs(solve_bsde_tree(zero_generator(), catalog.identity(), grid).y0) < 1e-14
    assert abs(solve_bsde_tree(zero_generator(), catalog.integral(), grid).y0) < 1e-14
    assert solve_bsde_tree(drift_down(0.5), catalog.identity(), grid).y0 == pytest.approx(-0.5, abs=1e-12)
    with pytest.raises(ValueError):
        solve_bsde_tree(zero_generator(), catalog.identity(), TimeGrid(1.0, 17))


def test_tree_matches_lattice_markovian():
    grid = TimeGrid(1.0, 10)
    for f in (zero_generator(), nonlinear_generator(), linear_generator(0.3), drift_down(0.4)):
        tree = solve_bsde_tree(f, catalog.cosine(), grid)
        lat = solve_bsde_lattice(f, catalog.cosine(), grid)
        assert tree.y0 == pytest.approx(lat.y0, abs=1e-12)
        Y, Z = lat.along(tree.diagnostics["batch"].paths)
        np.testing.assert_allclose(Y, tree.Y, atol=1e-12)


def test_lattice_requires_markovian():
    with pytest.raises(ValueError):
        solve_bsde_lattice(zero_generator(), catalog.integral(), G)


def test_tree_regression_agreement_small():
    grid = TimeGrid(1.0, 6)
    b = sample_brownian(grid, 1, 40_000, seed=5, kind="rademacher")
    for f in (nonlinear_generator(), drift_down(0.5)):
        for g in (catalog.cosine(), catalog.running_max(), catalog.integral()):
            tree = solve_bsde_tree(f, g, grid).y0
            reg = solve_bsde_regression(f, g, b)
            assert abs(reg.y0 - tree) <= 3 * reg.se + 0.01


def test_u0_value_examples(batch):
    base = solve_bsde_regression(zero_generator(), catalog.cosine(), sample_brownian(G, 1, 5000, seed=1))
    at0 = u0_value(0, np.zeros((1, 1)), zero_generator(), catalog.cosine(), G, M=5000, seed=1)
    assert at0.value == pytest.approx(base.y0, abs=1e-12)
    omega = np.r_[0.0, np.cumsum(np.full(8, 0.05))][:, None]
    k = 8
    est = u0_value(k, omega, zero_generator(), catalog.integral(), G, M=20_000, seed=3)
    exact = np.sum(omega[:k, 0]) * G.dt + omega[k, 0] * (G.T - G.time(k))
    assert abs(est.value - exact) <= 5 * est.se + 1e-9
    est = u0_value(k, omega, zero_generator(), catalog.cosine(), G, M=20_000, seed=4)
    assert est.value == pytest.approx(np.exp(-(G.T - G.time(k)) / 2) * np.cos(omega[k, 0]), rel=0.01)
    lat = u0_value(k, omega, zero_generator(), catalog.cosine(), G, method="lattice")
    assert lat.value == pytest.approx(np.exp(-(G.T - G.time(k)) / 2) * np.cos(omega[k, 0]), rel=0.01)
    assert u0_value(G.N, np.zeros((21, 1)), zero_generator(), catalog.cosine(), G).value == 1.0


def test_markovian_reduction():
    k = 10
    a = np.r_[np.linspace(0, 0.8, 6), np.linspace(0.8, 0.3, 6)[1:]][:, None]
    b = np.r_[np.linspace(0, -0.5, 6), np.linspace(-0.5, 0.3, 6)[1:]][:, None]
    f = nonlinear_generator()
    ua = u0_value(k, a, f, catalog.cosine(), G, M=10_000, seed=7)
    ub = u0_value(k, b, f, catalog.cosine(), G, M=10_000, seed=8)
    assert abs(ua.value - ub.value) < 3 * np.hypot(ua.se, ub.se) + 2e-3


def test_modulus_probe():
    path = DiscretePath.from_function(G, lambda t: 0.5 * t)
    same = modulus_probe(zero_generator(), catalog.cosine(), [(PathPoint(5, path), PathPoint(5, path))], M=2000)
    assert same.differences[0] == 0.0 and same.ok
    other = DiscretePath.from_function(G, lambda t: 0.5 * t + 0.2 * t)
    rep = modulus_probe(zero_generator(), catalog.cosine(),
                        [(PathPoint(10, path), PathPoint(10, other)), (PathPoint(4, path), PathPoint(6, path))],
                        M=4000)
    assert rep.ok and rep.C >= 0


def test_comparison_examples(batch):
    grid = TimeGrid(1.0, 10)
    t = TreeBatch(grid)
    g = catalog.cosine()
    assert comparison_test(nonlinear_generator(), g, g, t).ok
    g_hi = PathFunctional(lambda x, gr: np.cos(x[..., -1, 0]) + 0.1 * np.maximum(x[..., -1, 0], 0), "hi")
    v = comparison_test(nonlinear_generator(), g, g_hi, t)
    assert v.ok and v.max_violation == 0.0
    r = 0.4
    g1 = catalog.cosine()(batch.paths, G)
    s1 = solve_bsde(linear_generator(r), g1, batch)
    s2 = solve_bsde(linear_generator(r), g1 + 1, batch)
    gap = s2.y0 - s1.y0
    assert np.exp(-r) - 1e-9 <= gap <= np.exp(r) + 1e-9
    assert comparison_test(nonlinear_generator(), g1, g1 + 0.05, batch).ok
    with pytest.raises(ValueError):
        comparison_test(zero_generator(), g1 + 1, g1, batch)


@given(st.floats(0.0, 0.5), st.floats(-0.3, 0.3))
def test_comparison_tree_every_node(shift, c):
    grid = TimeGrid(1.0, 8)
    t = TreeBatch(grid)
    g1 = catalog.running_max()(t.paths, grid) - 0.5 * t.paths[:, -1, 0] ** 2
    f = nonlinear_generator()
    v = comparison_test(f, g1, g1 + shift, t, f2=constant_generator(0).plus(0) if False else None)
    assert v.ok
    # a larger driver also dominates
    assert comparison_test(f, g1, g1, t, f2=f.plus(abs(c))).ok


def test_comparison_linearization(batch):
    f = nonlinear_generator()
    g1 = catalog.cosine()(batch.paths, G)
    s1, s2 = solve_bsde(f, g1, batch), solve_bsde(f, g1 + 0.2, batch)
    lin = comparison_linearization(f, s1, s2, batch)
    assert np.all(lin.Gamma > 0)
    assert np.all(np.abs(lin.alpha) <= f.L0 + 1e-9) and np.all(np.abs(lin.beta) <= f.L0 + 1e-9)


def test_f_martingale_examples():
    grid = TimeGrid(1.0, 10)
    t = TreeBatch(grid)
    zero = zero_generator()
    assert f_martingale_check(catalog.constant(1.0), zero, t, 0, 10).verdict == "martingale"
    lat = solve_bsde_lattice(nonlinear_generator(), catalog.cosine(), grid)
    u = lattice_functional(lat)
    assert f_martingale_check(u, nonlinear_generator(), t, 0, 10).verdict == "martingale"
    assert f_martingale_check(u, nonlinear_generator(), t, 3, 7).verdict == "martingale"
    heat = solve_bsde_lattice(zero, catalog.cosine(), grid)
    bumped = PathFunctional(lambda x, gr: lattice_functional(heat)(x, gr) + 0.3 * (gr.T - (x.shape[-2] - 1) * gr.dt),
                            "u+c(T-t)")
    assert f_martingale_check(bumped, zero, t, 0, 10).verdict == "supermartingale"
    with pytest.raises(ValueError):
        f_martingale_check(u, zero, t, 5, 3)


def test_stability_examples(batch):
    rows = stability_experiment(nonlinear_generator(), catalog.cosine(), batch, [0.0, 0.05, 0.1])
    assert rows[0].gap == pytest.approx(0.0, abs=1e-12)
    assert all(r.within for r in rows[1:])
    assert all(r.gap <= np.exp(0.5) * r.eps + 3 * r.se for r in rows)
    grid = TimeGrid(1.0, 10)
    a = solve_bsde_tree(drift_down(0.3), catalog.identity(), grid).y0
    b = solve_bsde_tree(drift_down(0.35), catalog.identity(), grid).y0
    assert a - b == pytest.approx(0.05, abs=1e-12)


def test_solution_csv(tmp_path):
    s = solve_bsde_tree(zero_generator(), catalog.cosine(), TimeGrid(1.0, 4))
    p = tmp_path / "sol.csv"
    write_solution_csv(str(p), s)
    lines = p.read_text().splitlines()
    assert lines[0] == "k,t,Y_mean,Y_se,Z_mean_1" and len(lines) == 6
