import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ppdelab import catalog
from ppdelab.bsde import drift_down, nonlinear_generator, zero_generator
from ppdelab.paths import PathFunctional, PathPoint, DiscretePath, TimeGrid, shift_functional
from ppdelab.viscosity import (TestFunction, classical_check, generator_transform, membership_test, paraboloid,
                               ppde_operator, random_anchors, transform_functional, viscosity_falsifier,
                               write_reports_csv)

G = TimeGrid(1.0, 100)
ZERO = zero_generator()


def anchor(k=30, slope=0.4):
    return np.linspace(0, slope * G.time(k), k + 1)[:, None]


def test_operator_examples():
    x = anchor()
    assert ppde_operator(catalog.square_minus_t(), x, ZERO, G) == pytest.approx(0.0, abs=1e-12)
    assert ppde_operator(catalog.time_functional(), x, ZERO, G) == pytest.approx(-1.0)
    assert ppde_operator(catalog.heat_cos(), x, ZERO, G) == pytest.approx(0.0, abs=1e-12)
    # numerical derivatives agree with the analytic route up to the forward-difference bias in time
    assert ppde_operator(catalog.heat_cos(), x, ZERO, G, analytic=False) == pytest.approx(0.0, abs=0.01)
    path = DiscretePath(G, np.r_[x[:, 0], np.zeros(G.N - 30) + x[-1, 0]])
    assert ppde_operator(catalog.heat_cos(), PathPoint(30, path), ZERO) == pytest.approx(0.0, abs=1e-12)


def test_classical_check_examples():
    pts = [p for _, p in random_anchors(G, 8, seed=1)]
    assert classical_check(catalog.heat_cos(), ZERO, pts, grid=G).classification == "solution"
    assert classical_check(catalog.heat_cos(-0.2), ZERO, pts, grid=G).classification == "subsolution"
    assert classical_check(catalog.heat_cos(0.2), ZERO, pts, grid=G).classification == "supersolution"
    kink = [np.zeros((5, 1))]
    rep = classical_check(catalog.absolute(), ZERO, kink, grid=G)
    assert rep.classification == "neither" and rep.failures


def shifted_plus_time(u, k, omega, c):
    s = shift_functional(u, k, omega, G)
    tt = lambda x, g: (x.shape[-2] - 1) * g.dt  # noqa: E731
    return PathFunctional(lambda x, g: s(x, g) + c * tt(x, g), "self+c(s-t)",
                          dt=lambda x, g: s.dt(x, g) + c, dx=s.dx, dxx=s.dxx)


def test_membership_examples():
    u = catalog.heat_cos()
    k, omega = 30, anchor()
    self_tf = TestFunction(shift_functional(u, k, omega, G), k, omega, G)
    for side in ("lower", "upper"):
        m = membership_test(self_tf, u, 0.5, side)
        assert m.status == "member" and m.value == pytest.approx(0.0, abs=1e-12)
    up = TestFunction(shifted_plus_time(u, k, omega, 1.0), k, omega, G)
    assert membership_test(up, u, 0.5, "lower").status == "member"
    dn = TestFunction(shifted_plus_time(u, k, omega, -1.0), k, omega, G)
    m = membership_test(dn, u, 0.5, "lower")
    assert m.status == "non-member" and m.value < 0
    assert membership_test(dn, u, 0.5, "upper").status == "member"
    mc = membership_test(dn, u, 0.5, "lower", engine="mc", M=4000)
    assert mc.status == "non-member"


def test_membership_errors():
    u = catalog.heat_cos()
    k, omega = 30, anchor()
    wrong = TestFunction(paraboloid(5.0, 0, 0, 0), k, omega, G)
    with pytest.raises(ValueError):
        membership_test(wrong, u, 0.5)
    tf = TestFunction(shift_functional(u, k, omega, G), k, omega, G)
    with pytest.raises(ValueError):
        membership_test(tf, u, 0.5, side="middle")
    with pytest.raises(ValueError):
        TestFunction(catalog.running_max(), k, omega, G)


@settings(max_examples=25)
@given(st.floats(-3, 3), st.floats(-1, 1), st.floats(-3, 3), st.floats(0, 1), st.floats(0, 1))
def test_membership_nesting(a, b, q, L1, L2):
    u = catalog.heat_cos()
    k, omega = 30, anchor()
    lo, hi = sorted((L1, L2))
    tf = TestFunction(paraboloid(float(u(omega, G)), a, b, q), k, omega, G)
    for side in ("lower", "upper"):
        if membership_test(tf, u, hi, side).status == "member":
            assert membership_test(tf, u, lo, side).status == "member"


def test_falsifier_clean_and_corrupted(tmp_path):
    anchors = random_anchors(G, 4, seed=3, t_max=0.8)
    clean = viscosity_falsifier(catalog.heat_cos(), ZERO, 0.5, anchors, G)
    assert not any(r.verdict == "violation" for r in clean)
    bad = viscosity_falsifier(catalog.heat_cos(0.2), ZERO, 0.5, anchors, G)
    sub = [r for r in bad if r.verdict == "violation"]
    assert sub and all(r.side == "sub" for r in sub)
    bad2 = viscosity_falsifier(catalog.heat_cos(-0.2), ZERO, 0.5, anchors, G)
    assert any(r.verdict == "violation" and r.side == "super" for r in bad2)
    out = tmp_path / "v.csv"
    write_reports_csv(str(out), bad)
    assert out.read_text().splitlines()[0] == "anchor_id,phi_id,side,membership,L_phi,verdict"


def test_falsifier_vacuous_report():
    # a test family that never touches u from either side
    far = lambda u, k, w, g: [("far", paraboloid(float(u(w[: k + 1], g)), -50.0, 0.0, 0.0))]  # noqa: E731
    reps = viscosity_falsifier(catalog.heat_cos(), ZERO, 0.5, random_anchors(G, 1, seed=0, t_max=0.5), G,
                               family=far, include_self=False, sides=("super",))
    assert all(r.verdict != "violation" for r in reps)


def test_transform_examples():
    f = nonlinear_generator()
    assert generator_transform(f, 0.0) is f
    heat = catalog.heat_cos()
    ft = generator_transform(ZERO, 1.0)
    ut = transform_functional(heat, 1.0)
    for _, x in random_anchors(G, 5, seed=4):
        assert ppde_operator(ut, x, ft, G) == pytest.approx(0.0, abs=1e-12)


@given(st.floats(-2, 2), st.floats(0.1, 2), st.floats(-3, 3), st.floats(-3, 3), st.floats(0, 1))
def test_transform_monotone_and_roundtrip(lam, lam_pos, y, z, t):
    f = nonlinear_generator()
    x = np.zeros((1, 2, 1))
    ft = generator_transform(f, lam_pos)
    h = 1e-6
    dfty = (ft(t, x, np.array([y + h]), np.array([[z]])) - ft(t, x, np.array([y - h]), np.array([[z]]))) / (2 * h)
    # d/dy of the transformed driver is the original slope (at most L0) minus lam
    assert dfty[0] <= f.L0 - lam_pos + 1e-6
    back = generator_transform(generator_transform(f, lam), -lam)
    yy, zz = np.array([y]), np.array([[z]])
    assert back(t, x, yy, zz)[0] == pytest.approx(f(t, x, yy, zz)[0], abs=1e-10)
    down = drift_down(0.5)
    assert generator_transform(down, lam).L0 == pytest.approx(0.5 + abs(lam))
