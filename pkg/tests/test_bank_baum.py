import numpy as np
import pytest

from ppdelab import catalog
from ppdelab.bank_baum import (ProjectionError, SmoothSolutionSegment, default_nodes, forward_ode, mollify,
                               perron_gap, reference_solution, segment_from_stitch, smooth_basis_projection,
                               smooth_segment_check, stitch, write_stitch_csv)
from ppdelab.bsde import linear_generator, nonlinear_generator, zero_generator
from ppdelab.functional_calculus import ito_residual
from ppdelab.paths import TimeGrid
from ppdelab.stochastics import sample_brownian

G = TimeGrid(1.0, 50)


@pytest.fixture(scope="module")
def batch():
    return sample_brownian(G, 1, 2000, seed=8)


@pytest.fixture(scope="module")
def cos_ref():
    return reference_solution(zero_generator(), catalog.cosine(), G, M=2000, seed=3)


@pytest.fixture(scope="module")
def cos_stitch(cos_ref):
    return stitch(cos_ref, 0.1)


def test_default_nodes():
    assert default_nodes(G) == (25, 50)
    assert default_nodes(G, 3) == (12, 25, 50)


def test_projection_examples(batch):
    p = batch.paths
    proj, Zt = smooth_basis_projection(np.full((2000, 50), 0.7), p, G, degrees=(2,))
    assert proj.error < 1e-20
    np.testing.assert_allclose(Zt, 0.7, atol=1e-10)
    proj, Zt = smooth_basis_projection(p[:, :-1, 0], p, G, degrees=(2,))
    assert proj.error < 1e-20
    jump = np.broadcast_to(np.sign(p[:, 25:26, 0]), (2000, 50)) * (np.arange(50) >= 25)
    proj, _ = smooth_basis_projection(jump, p, G, degrees=(2, 4), strict=False, target_h=1e-6)
    assert proj.error > 1e-3
    with pytest.raises(ProjectionError):
        smooth_basis_projection(jump, p, G, degrees=(2,), target_h=1e-6)


def test_mollify_examples():
    grid = TimeGrid(1.0, 100)
    const = mollify(np.full((3, 100), 2.0), grid, 0.05)
    np.testing.assert_allclose(const.Z_eps, 2.0)
    np.testing.assert_allclose(const.theta, 0.0, atol=1e-12)
    ramp = np.tile(grid.nodes[:-1], (2, 1))
    w = 0.1
    m = mollify(ramp, grid, w)
    k = np.arange(100)
    tail = k * grid.dt >= w - 1e-12
    np.testing.assert_allclose(m.Z_eps[:, tail], np.tile((k * grid.dt - w / 2)[tail], (2, 1)), atol=1e-12)
    rng = np.random.default_rng(0)
    Zr = rng.uniform(-1, 1, (4, 100))
    mr = mollify(Zr, grid, 0.03)
    assert np.max(np.abs(mr.theta)) <= 2 * np.max(np.abs(Zr)) / 0.03 + 1e-12
    # windows below one step are exact integrals of the interpolant and shrink to the input
    np.testing.assert_allclose(mollify(Zr, grid, 1e-9).Z_eps, Zr, atol=1e-6)
    with pytest.raises(ValueError):
        mollify(Zr, grid, 0.0)


def test_mollify_respects_segment_start():
    grid = TimeGrid(1.0, 20)
    Z = np.tile(np.arange(20.0), (1, 1))
    m = mollify(Z, grid, 0.2, tau=np.array([10]))
    # inside the first window after tau only Z~_{tau v s} = Z~_tau counts for s < tau
    assert m.Z_eps[0, 10] == pytest.approx(10.0)
    assert m.Z_eps[0, 15] > 10.0


def test_forward_ode_examples(batch):
    p = batch.paths
    X = forward_ode(1.5, zero_generator(), np.zeros((2000, 50)), p, G)
    np.testing.assert_array_equal(X, 1.5)
    X = forward_ode(1.5, zero_generator(), np.ones((2000, 50)), p, G)
    np.testing.assert_allclose(X, 1.5 + p[..., 0], atol=1e-12)
    X = forward_ode(2.0, linear_generator(1.0), np.zeros((2000, 50)), p, G)
    assert X[0, -1] == pytest.approx(2.0 * np.e, rel=2 * G.dt)


def test_reference_is_exact_solution(cos_ref):
    np.testing.assert_allclose(cos_ref.X[:, -1], catalog.cosine()(cos_ref.paths, G), atol=1e-12)
    X = forward_ode(cos_ref.X[:, 0], cos_ref.f, cos_ref.Z, cos_ref.paths, G)
    np.testing.assert_allclose(X, cos_ref.X, atol=1e-10)


def test_stitch_invariants(cos_ref, cos_stitch):
    a = cos_stitch
    assert a.unfinished == 0
    assert a.fraction_within() >= 0.99
    assert np.all(np.diff(a.taus, axis=1) >= 0)
    total, budget, se3 = a.budget_check()
    assert total <= budget + se3
    assert sum(a.eps_budget) <= 0.5 * np.exp(-a.L0 * G.T) * a.eps + 1e-15
    for i, e in enumerate(a.eps_budget):
        assert e == pytest.approx(2.0 ** (-i - 2) * a.eps)
    disc = np.exp(-a.L0 * G.nodes)
    rows = np.arange(a.X.shape[0])
    for i in range(a.n_segments):
        t1 = a.taus[:, i + 1]
        crossed = t1 < G.N
        if crossed.any():
            t0 = a.taus[:, i]
            lvl = a.eps_budget[i] + disc[t0] * np.abs(a.start_values[i] - a.X[rows, t0])
            dev = disc[t1] * np.abs(a.X_eps[rows, t1] - a.X[rows, t1])
            assert np.all(dev[crossed] >= lvl[crossed])


def test_stitch_huge_eps_single_segment(cos_ref):
    a = stitch(cos_ref, 100.0)
    assert a.n_segments == 1 and np.all(a.taus[:, 1] == G.N)


def test_stitch_csv(tmp_path, cos_stitch):
    out = tmp_path / "s.csv"
    write_stitch_csv(str(out), cos_stitch)
    lines = out.read_text().splitlines()
    assert lines[0] == "path_id,i,tau_i,eps_i,seg_error"
    assert len(lines) >= 1 + cos_stitch.X.shape[0]


def test_segment_constant_control():
    seg = SmoothSolutionSegment(5, np.zeros((6, 1)), G, 0.4, 0.3,
                                lambda full, g: np.full(full.shape[:-2] + (full.shape[-2] - 5,), 0.3),
                                zero_generator())
    u = seg.functional()
    sub = G.sub(5)
    x = np.linspace(0, 0.2, 8)[:, None]
    assert u(x, sub) == pytest.approx(0.4 + 0.3 * 0.2)
    prefixes = [np.linspace(0, v, n)[:, None] for v, n in ((0.1, 3), (-0.3, 6), (0.5, 10))]
    rep = smooth_segment_check(seg, prefixes, tol=1e-8)
    assert rep.ok


def test_segment_ramp_control():
    dt = G.dt
    seg = SmoothSolutionSegment(0, np.zeros((1, 1)), G, 0.0, 0.0,
                                lambda full, g: np.broadcast_to((np.arange(full.shape[-2]) + 1) * dt,
                                                                full.shape[:-2] + (full.shape[-2],)),
                                zero_generator())
    prefixes = [sample_brownian(G, 1, 1, seed=s).paths[0, : 5 + 3 * s] for s in range(4)]
    rep = smooth_segment_check(seg, prefixes, tol=1e-6)
    assert rep.ok
    u = seg.functional()
    # the discrete increment is Zhat_{k+1} dB_k while the vertical derivative is Zhat_k,
    # so the Ito residual is exactly (Zhat_{k+1} - Zhat_k) dB_k = dt dB_k
    paths = sample_brownian(G, 1, 20, seed=9).paths[:, :20]
    res = ito_residual(u, paths, G)
    np.testing.assert_allclose(res.residuals, dt * np.diff(paths[..., 0], axis=1), atol=1e-6)


def test_segment_from_stitch(cos_ref, cos_stitch):
    seg = segment_from_stitch(cos_stitch, cos_ref, 0, 0)
    rng = np.random.default_rng(1)
    prefixes = [np.r_[0.0, np.cumsum(rng.normal(0, np.sqrt(G.dt), n))][:, None] for n in (2, 7, 20)]
    assert smooth_segment_check(seg, prefixes).ok
    u = seg.functional()
    tail = cos_ref.paths[0] - cos_ref.paths[0, :1]
    assert u(tail[:11], G) == pytest.approx(cos_stitch.X_eps[0, 10], abs=1e-10)


def test_perron_gap_cos(cos_ref, cos_stitch):
    pg = perron_gap(cos_ref, catalog.cosine(), 0.1, approx=cos_stitch)
    assert pg.ok
    assert pg.u_eps_0 - pg.u0_0 <= 0.1 + 0.1 + 3 * pg.u0_se + 1e-12
    assert pg.certified_gap == pytest.approx(0.2)
    assert pg.sup_gap <= pg.gap_bound + 1e-12
    assert len(pg.summary_row()) == 4


def test_perron_gap_scales_with_eps(cos_ref):
    a = perron_gap(cos_ref, catalog.cosine(), 0.1)
    b = perron_gap(cos_ref, catalog.cosine(), 0.05)
    assert b.certified_gap == pytest.approx(a.certified_gap / 2)


def test_perron_gap_constant_terminal():
    ref = reference_solution(zero_generator(), catalog.constant(0.8), G, M=500, seed=1)
    pg = perron_gap(ref, catalog.constant(0.8), 0.05)
    assert pg.u_eps_0 == pytest.approx(0.8 + 0.05, abs=1e-12)
    assert pg.certified_bound == pytest.approx(0.8 + 0.1, abs=1e-12)
    assert pg.ok


def test_perron_gap_nonlinear():
    f = nonlinear_generator()
    ref = reference_solution(f, catalog.cosine(), G, M=1000, seed=2)
    pg = perron_gap(ref, catalog.cosine(), 0.1)
    assert pg.ok
    assert pg.u_eps_0 <= pg.certified_bound + 1e-12


def test_stitch_multiple_segments_kinked_payoff():
    ref = reference_solution(zero_generator(), catalog.put_payoff(0.0), G, M=1000, seed=1)
    a = stitch(ref, 0.05)
    assert a.n_segments > 1 and a.unfinished == 0
    assert np.all(np.diff(a.taus, axis=1) >= 0)
    assert all(x > y for x, y in zip(a.eps_budget, a.eps_budget[1:]))
    rows = np.arange(ref.X.shape[0])
    for i in range(a.n_segments):
        t0, t1 = a.taus[:, i], a.taus[:, i + 1]
        live = t0 < G.N
        # segment i starts where segment i-1 stopped, from the stitched value there
        np.testing.assert_allclose(a.start_values[i][live], a.X_eps[rows, t0][live], atol=1e-12)
        crossed = live & (t1 < G.N)
        lvl = a.eps_budget[i] + np.abs(a.start_values[i] - a.X[rows, t0])
        assert np.all(np.abs(a.X_eps[rows, t1] - a.X[rows, t1])[crossed] >= lvl[crossed])
        # before the crossing the deviation stays under the level
        for m in np.nonzero(live)[0][:50]:
            seg = np.abs(a.X_eps[m, t0[m]: t1[m]] - a.X[m, t0[m]: t1[m]])
            assert np.all(seg < lvl[m] + 1e-12)
