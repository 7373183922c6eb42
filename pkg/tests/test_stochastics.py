import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ppdelab import catalog
from ppdelab.paths import GridStoppingTime, PathFunctional, TimeGrid, first_exit
from ppdelab.stochastics import (DriftControl, TreeBatch, girsanov_weight, lower_expectation, optimal_stop_lower,
                                 optimal_stop_upper, sample_brownian, submartingale_check, tilted_expectation,
                                 upper_expectation)

G = TimeGrid(1.0, 10)


def within(est, target, k=5.0, floor=0.0):
    return abs(est.value - target) <= k * est.se + floor


def test_sample_reproducible_and_shapes():
    a = sample_brownian(G, 2, 100, seed=7)
    b = sample_brownian(G, 2, 100, seed=7)
    np.testing.assert_array_equal(a.increments, b.increments)
    assert a.paths.shape == (100, 11, 2)
    assert np.all(a.paths[:, 0] == 0)
    one = sample_brownian(TimeGrid(0.25, 1), 1, 1, seed=0)
    assert one.increments.shape == (1, 1, 1)
    assert not np.array_equal(sample_brownian(G, 1, 5, seed=1).increments, sample_brownian(G, 1, 5, seed=2).increments)


def test_increment_moments():
    b = sample_brownian(G, 1, 100_000, seed=11)
    BT = b.paths[:, -1, 0]
    var = np.var(BT)
    se_var = np.std(BT**2) / np.sqrt(BT.size)
    assert abs(var - 1.0) < 5 * se_var
    inc = b.increments.ravel()
    assert abs(inc.mean()) < 5 * inc.std() / np.sqrt(inc.size)


def test_rademacher_and_antithetic():
    r = sample_brownian(G, 1, 64, seed=0, kind="rademacher")
    np.testing.assert_allclose(np.abs(r.increments), np.sqrt(G.dt))
    a = sample_brownian(G, 1, 64, seed=0, antithetic=True)
    np.testing.assert_allclose(a.increments[:32], -a.increments[32:])


def test_tree_batch_structure():
    t = TreeBatch(TimeGrid(1.0, 4))
    assert t.M == 16 and t.exact
    assert len({tuple(p) for p in t.paths[..., 0]}) == 16


def test_girsanov_weight_properties():
    b = sample_brownian(G, 1, 50_000, seed=5)
    w0 = girsanov_weight(b, DriftControl.constant(0.0))
    np.testing.assert_array_equal(w0.values, 1.0)
    w = girsanov_weight(b, DriftControl.constant(0.7)).terminal
    assert np.all(w > 0)
    assert abs(w.mean() - 1) < 5 * w.std() / np.sqrt(w.size)


def test_drift_control_box():
    bad = DriftControl(lambda k, x, g: np.full((x.shape[0], 1), 2.0), 1.0)
    with pytest.raises(ValueError):
        bad(0, np.zeros((3, 1, 1)), G)


def test_tilted_expectation_examples():
    b = sample_brownian(G, 1, 50_000, seed=9)
    last = catalog.identity()
    wt = tilted_expectation(last, b, DriftControl.constant(0.4))
    rs = tilted_expectation(last, b, DriftControl.constant(0.4), method="resimulate")
    assert within(wt, 0.4) and within(rs, 0.4)
    assert abs(wt.value - rs.value) <= 5 * np.hypot(wt.se, rs.se)
    plain = tilted_expectation(last, b, DriftControl.constant(0.0))
    assert plain.value == pytest.approx(b.paths[:, -1, 0].mean())
    c = tilted_expectation(catalog.constant(2.5), b, DriftControl.constant(0.3))
    assert abs(c.value - 2.5) < 5 * c.se + 1e-12
    # a state-dependent control agrees across both methods
    fb = DriftControl(lambda k, x, g: 0.5 * np.tanh(x[:, -1]), 0.5)
    cosf = catalog.cosine()
    a, r = tilted_expectation(cosf, b, fb), tilted_expectation(cosf, b, fb, method="resimulate")
    assert abs(a.value - r.value) <= 5 * np.hypot(a.se, r.se)


@pytest.mark.parametrize("method", ["bsde", "control_search"])
def test_lower_expectation_closed_form(method):
    b = sample_brownian(G, 1, 40_000, seed=21)
    last = catalog.identity()
    lo = lower_expectation(last, 0.5, b, method=method)
    up = upper_expectation(last, 0.5, b, method=method)
    assert within(lo, -0.5, floor=0.02) and within(up, 0.5, floor=0.02)
    plain = lower_expectation(last, 0.0, b, method=method)
    assert plain.value == pytest.approx(b.paths[:, -1, 0].mean(), abs=1e-9)
    c = lower_expectation(catalog.constant(1.3), 0.8, b, method=method)
    assert c.value == pytest.approx(1.3, abs=1e-9)


def test_lower_expectation_negative_L():
    with pytest.raises(ValueError):
        lower_expectation(catalog.identity(), -0.1, TreeBatch(TimeGrid(1.0, 3)))


def test_tree_closed_form_and_methods_agree():
    t = TreeBatch(TimeGrid(1.0, 10))
    last = catalog.identity()
    a = lower_expectation(last, 0.5, t, method="bsde").value
    c = lower_expectation(last, 0.5, t, method="control_search").value
    assert a == pytest.approx(-0.5, abs=1e-10)
    assert c == pytest.approx(a, abs=1e-10)


payoffs = st.sampled_from(["cos", "square", "abs", "integral", "running_max", "put"])


@given(payoffs, st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.floats(-2, 2), st.floats(0.1, 3))
def test_tree_expectation_properties(name, L1, L2, c, lam):
    t = TreeBatch(TimeGrid(1.0, 6))
    xi = catalog.get_functional(name)(t.paths, t.grid)
    lo, hi = sorted((L1, L2))
    E = lambda v, L: lower_expectation(v, L, t).value  # noqa: E731
    U = lambda v, L: upper_expectation(v, L, t).value  # noqa: E731
    assert E(xi, hi) <= E(xi, lo) + 1e-10
    assert U(xi, hi) >= U(xi, lo) - 1e-10
    assert E(xi, hi) <= xi.mean() + 1e-10 <= U(xi, hi) + 2e-10
    assert E(xi, hi) == pytest.approx(-U(-xi, hi), abs=1e-12)
    assert E(xi + c, hi) == pytest.approx(E(xi, hi) + c, abs=1e-9)
    assert E(lam * xi, hi) == pytest.approx(lam * E(xi, hi), abs=1e-9)


def test_mc_duality_and_ordering():
    b = sample_brownian(G, 1, 20_000, seed=33)
    xi = catalog.cosine()(b.paths, G)
    lo = lower_expectation(xi, 0.4, b)
    up = upper_expectation(xi, 0.4, b)
    assert lo.value == pytest.approx(-upper_expectation(-xi, 0.4, b).value, abs=1e-12)
    assert lo.value <= xi.mean() <= up.value
    cs = lower_expectation(xi, 0.4, b, method="control_search")
    assert abs(cs.value - lo.value) < 5 * np.hypot(cs.se, lo.se) + 0.01


def snell_bruteforce(X, t):
    """min over every stopping rule on the binary tree with L = 0."""
    N = t.grid.N
    signs = np.sign(np.diff(t.paths[..., 0], axis=1)).astype(int)
    nodes = sorted({(k, tuple(s[:k])) for s in signs for k in range(N)})
    best = np.inf
    for choice in itertools.product((False, True), repeat=len(nodes)):
        rule = dict(zip(nodes, choice))
        total = 0.0
        for m, s in enumerate(signs):
            k = next((k for k in range(N) if rule[(k, tuple(s[:k]))]), N)
            total += X[m, k]
        best = min(best, total / len(signs))
    return best


def test_snell_envelope_matches_bruteforce():
    t = TreeBatch(TimeGrid(1.0, 3))
    put = catalog.put_payoff(0.2)
    X = put.on_batch(t.paths, t.grid)
    sv = optimal_stop_lower(X, t, 0.0)
    assert sv.value == pytest.approx(snell_bruteforce(X, t), abs=1e-12)
    up = optimal_stop_upper(X, t, 0.0)
    assert up.value == pytest.approx(-snell_bruteforce(-X, t), abs=1e-12)


def test_stopping_examples():
    t = TreeBatch(TimeGrid(1.0, 6))
    dec = PathFunctional(lambda x, g: 1.0 - (x.shape[-2] - 1) * g.dt + 0 * x[..., 0, 0], "1-t")
    sv = optimal_stop_lower(dec, t, 0.5, tau_bound=GridStoppingTime.constant(4))
    assert sv.value == pytest.approx(1 - 4 / 6)
    assert np.all(sv.tau_star == 4)
    cst = optimal_stop_lower(catalog.constant(0.7), t, 0.3)
    np.testing.assert_allclose(cst.Y, 0.7)
    np.testing.assert_array_equal(cst.K, 0.0)
    with pytest.raises(ValueError):
        optimal_stop_lower(np.full((t.M, 7), np.inf), t, 0.1)


@pytest.mark.parametrize("L", [0.0, 0.5])
def test_stopping_invariants_and_submartingale(L):
    t = TreeBatch(TimeGrid(1.0, 8))
    X = catalog.cosine().on_batch(t.paths, t.grid) + 0.3 * t.paths[..., 0]
    sv = optimal_stop_lower(X, t, L, tau_bound=first_exit(1.0, 1.0))
    v = sv.invariant_violations()
    assert v["Y_above_X"] <= 1e-12 and v["contact_gap"] <= 1e-12
    assert v["K_decrease"] <= 1e-12 and v["complementarity"] <= 1e-12
    taus = [GridStoppingTime.constant(k) for k in (0, 2, 5, 8)] + [first_exit(0.5, 1.0)]
    rep = submartingale_check(sv, t, L, taus)
    assert rep.submartingale and rep.martingale_to_tau_star


def test_submartingale_examples():
    t = TreeBatch(TimeGrid(1.0, 5))
    inc = PathFunctional(lambda x, g: (x.shape[-2] - 1) * g.dt + 0 * x[..., 0, 0], "t")
    sv = optimal_stop_upper(inc, t, 0.2)  # Y equals X for an increasing payoff only at the end
    rep = submartingale_check(optimal_stop_lower(inc, t, 0.2), t, 0.2, [GridStoppingTime.constant(3)])
    assert rep.lower_values[0] > rep.y0
    assert sv.value == pytest.approx(1.0)
    cst = optimal_stop_lower(catalog.constant(1.0), t, 0.2)
    rep = submartingale_check(cst, t, 0.2, [GridStoppingTime.constant(2)])
    assert rep.lower_values[0] == pytest.approx(rep.y0)


def test_mc_stopping_invariants():
    b = sample_brownian(G, 1, 4000, seed=3)
    sv = optimal_stop_lower(catalog.put_payoff(0.0), b, 0.3)
    v = sv.invariant_violations()
    assert v["Y_above_X"] <= 1e-12 and v["contact_gap"] <= 1e-12 and v["K_decrease"] <= 1e-12
