import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, linalg, optimize

from hypspec import hyp_core as hc
from hypspec.config import ValidationError

lengths = st.floats(min_value=1e-3, max_value=30.0, allow_nan=False)


@given(lengths)
def test_halfwidth_identity(l):
    m = hc.collar_halfwidth(l)
    assert math.sinh(m) * math.sinh(l / 2) == pytest.approx(1.0, rel=1e-12)


@given(lengths, lengths)
def test_halfwidth_decreasing(a, b):
    if a < b:
        assert hc.collar_halfwidth(a) >= hc.collar_halfwidth(b)


def test_halfwidth_examples():
    assert hc.collar_halfwidth(2 * math.asinh(1.0)) == pytest.approx(math.asinh(1.0), abs=1e-14)
    assert hc.collar_halfwidth(1.0) == pytest.approx(1.40683, abs=1e-5)
    assert hc.collar_halfwidth(10) < hc.collar_halfwidth(5) < hc.collar_halfwidth(1)


def test_halfwidth_large_length_branch():
    # both sides of the switch agree with 2 e^{-l/2} asymptotics
    for l in (39.999, 40.001, 60.0):
        assert hc.collar_halfwidth(l) == pytest.approx(2 * math.exp(-l / 2), rel=1e-9)


@pytest.mark.parametrize("l", [0.0, -1.0])
def test_halfwidth_rejects_nonpositive(l):
    with pytest.raises(ValidationError):
        hc.collar_halfwidth(l)


def test_collar_area():
    c = hc.FermiCollar(1.0)
    assert c.area() == pytest.approx(2 * math.sinh(c.halfwidth), rel=1e-14)
    assert c.area(0, 1) == pytest.approx(math.sinh(1.0))


def test_gauss_bonnet():
    assert hc.gauss_bonnet_volume(0, 3, 0) == pytest.approx(2 * math.pi)
    assert hc.gauss_bonnet_volume(1, 2, 0) == pytest.approx(4 * math.pi)
    assert hc.gauss_bonnet_volume(0, 2, 1) == pytest.approx(2 * math.pi)
    with pytest.raises(ValidationError):
        hc.gauss_bonnet_volume(1, 0, 0)
    with pytest.raises(ValidationError):
        hc.gauss_bonnet_volume(0, 2, 0)


@given(st.integers(0, 4), st.integers(0, 6), st.integers(0, 4))
def test_gauss_bonnet_additive(g, b, c):
    chi = 2 - 2 * g - b - c
    if chi < 0:
        assert hc.gauss_bonnet_volume(g, b, c) == pytest.approx(-2 * math.pi * chi)


def test_cellspec_properties_and_roundtrip():
    s = hc.CellSpec(v=3, cuff_length=1.0)
    assert (s.genus, s.euler_characteristic, s.pants_count) == (0, -1, 1)
    assert s.area == pytest.approx(2 * math.pi)
    t = hc.CellSpec(v=4, cuff_length=0.5, topology="torus_with_v_holes")
    assert (t.genus, t.euler_characteristic) == (1, -4)
    assert t.area == pytest.approx(8 * math.pi)
    assert hc.CellSpec.from_json(t.to_json()) == t


@pytest.mark.parametrize("kw", [
    dict(v=2, cuff_length=1.0),
    dict(v=3, cuff_length=0.0),
    dict(v=3, cuff_length=1.0, topology="genus_two"),
    dict(v=3, cuff_length=1.0, funnels=(True,)),
])
def test_cellspec_rejects(kw):
    with pytest.raises(ValidationError):
        hc.CellSpec(**kw)


def test_cellspec_from_json_rejects_unknown_keys():
    with pytest.raises(ValidationError):
        hc.CellSpec.from_json({"v": 3, "cuff_length": 1.0, "twist": 0.0})


def test_one_holed_torus_area():
    assert hc.gauss_bonnet_volume(1, 1, 0) == pytest.approx(2 * math.pi)
    with pytest.raises(ValidationError):
        hc.gauss_bonnet_volume(0, 0, 0)


def test_hexagon_symmetric_and_degenerate():
    sides = hc.hexagon_from_cuffs(1.3, 1.3, 1.3)
    assert sides[3] == pytest.approx(sides[1], rel=1e-12)
    assert sides[5] == pytest.approx(sides[1], rel=1e-12)
    # the two sides meeting a shrinking cuff grow without bound
    small, larger = hc.hexagon_from_cuffs(1e-3, 1, 1), hc.hexagon_from_cuffs(1e-2, 1, 1)
    assert small[1] > larger[1] and small[5] > larger[5]
    assert small[1] > 7.0


def test_regular_hexagon():
    # equal sides force cosh(side) = 2
    assert hc.regular_hexagon_cuff() == pytest.approx(2 * math.acosh(2.0), abs=1e-12)


@settings(max_examples=50)
@given(lengths.filter(lambda x: x < 10), lengths.filter(lambda x: x < 10),
       lengths.filter(lambda x: x < 10))
def test_hexagon_law_of_sines(l1, l2, l3):
    a1, c3, a2, c1, a3, c2 = hc.hexagon_from_cuffs(l1, l2, l3)
    r = [math.sinh(a) / math.sinh(c) for a, c in ((a1, c1), (a2, c2), (a3, c3))]
    assert r[1] == pytest.approx(r[0], rel=1e-8)
    assert r[2] == pytest.approx(r[0], rel=1e-8)


def test_lambert_degenerate_limit():
    a, g, phi = hc.lambert_sides(0.7, 1e-12)
    assert a == pytest.approx(0.0, abs=1e-11)
    assert g == pytest.approx(0.7)
    assert phi == pytest.approx(math.pi / 2)


def test_fermi_laplacian_of_harmonic_and_radial_functions():
    r = np.linspace(-1, 1, 7)
    th = np.linspace(0, 6, 7)
    harm = hc.fermi_laplacian_apply(lambda r, t: hc.gudermannian(r), 1.0, r, th)
    assert np.max(np.abs(harm)) < 1e-6
    ones = hc.fermi_laplacian_apply(lambda r, t: np.ones_like(r), 1.0, r, th)
    assert np.max(np.abs(ones)) == 0.0
    lin = hc.fermi_laplacian_apply(lambda r, t: r, 1.0, r, th)
    assert np.allclose(lin, -np.tanh(r), atol=1e-8)
    # sinh r has (positive) Laplacian -2 sinh r
    out = hc.fermi_laplacian_apply(lambda r, t: np.sinh(r), 1.0, r, th)
    assert np.allclose(out, -2 * np.sinh(r), atol=1e-6)


def _collar_shoot(l):
    """Even ground state of F'' + tanh(r) F' + lam F = 0 vanishing at the collar edge."""
    m = hc.collar_halfwidth(l)

    def end(lam):
        sol = integrate.solve_ivp(lambda r, y: [y[1], -math.tanh(r) * y[1] - lam * y[0]],
                                  (0, m), [1.0, 0.0], rtol=1e-12, atol=1e-14)
        return sol.y[0, -1]
    return optimize.brentq(end, 0.3, 5.0, xtol=1e-14)


def test_collar_oracle_matches_shooting():
    lam = hc.collar_sturm_liouville(1.0)
    assert lam == pytest.approx(_collar_shoot(1.0), rel=1e-9)
    assert lam == pytest.approx(1.7000394950, rel=1e-9)


def test_collar_oracle_angular_mode_exceeds_ground_mode():
    assert hc.collar_sturm_liouville(1.0, k=1) > hc.collar_sturm_liouville(1.0, k=0)


def test_collar_oracle_neumann_is_zero():
    assert abs(hc.collar_sturm_liouville(1.0, bc=("neumann", "neumann"))) < 1e-8


def test_collar_oracle_rejects():
    with pytest.raises(ValidationError):
        hc.collar_sturm_liouville(1.0, k=-1)
    with pytest.raises(ValidationError):
        hc.collar_sturm_liouville(1.0, bc=("robin", "dirichlet"))


def _disk_fd(R, n):
    # vertex-centred finite volumes with weight sinh r, origin as a free node
    x = np.linspace(0, R, n + 1)
    h = x[1] - x[0]
    mid = 0.5 * (x[:-1] + x[1:])
    flux = np.sinh(mid) / h
    w = np.sinh(x) * h
    w[0] = h * h / 8
    A = np.zeros((n + 1, n + 1))
    for i in range(n):
        A[i, i] += flux[i]
        A[i + 1, i + 1] += flux[i]
        A[i, i + 1] -= flux[i]
        A[i + 1, i] -= flux[i]
    A, w = A[:-1, :-1], w[:-1]
    return linalg.eigh(A, np.diag(w), eigvals_only=True, subset_by_index=[0, 0])[0]


def test_disk_shooting_matches_finite_volume():
    R = 1.0
    lam = [_disk_fd(R, n) for n in (200, 400, 800)]
    rich = [(4 * lam[i + 1] - lam[i]) / 3 for i in range(2)]
    assert hc.disk_dirichlet_shooting(R) == pytest.approx(rich[1], rel=1e-5)


def test_disk_shooting_above_quarter_and_decreasing():
    vals = [hc.disk_dirichlet_shooting(R) for R in (0.5, 1.0, 2.0, 4.0)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    assert vals[-1] > 0.25


@given(st.floats(0.0, 0.25))
def test_critical_exponent_inverts(lam):
    d = hc.critical_exponent(lam)
    assert 0.5 <= d <= 1.0
    assert d * (1 - d) == pytest.approx(lam, abs=1e-12)


def test_critical_exponent_rejects():
    with pytest.raises(ValidationError):
        hc.critical_exponent(0.3)


zs = st.complex_numbers(max_magnitude=0.95, allow_nan=False, allow_infinity=False)


@given(zs, zs)
def test_disk_and_hyperboloid_distances_agree(z, w):
    d1 = hc.disk_distance(z, w)
    d2 = hc.hyp_distance(hc.from_disk(z), hc.from_disk(w))
    assert d1 == pytest.approx(d2, abs=1e-6)
    assert hc.to_disk(hc.from_disk(z)) == pytest.approx(z, abs=1e-12)


@given(zs, zs, zs)
def test_mobius_is_isometry(z, w, c):
    d = hc.disk_distance(z, w)
    d2 = hc.disk_distance(hc.mobius_to_origin(z, c), hc.mobius_to_origin(w, c))
    assert d2 == pytest.approx(d, abs=1e-6)


@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(0, 1))
def test_geodesic_between_splits_distance(x, r, t):
    X = hc.fermi_point(0.0, 0.0)
    Y = hc.fermi_point(x, r)
    P = hc.geodesic_between(X, Y, t)
    d = hc.hyp_distance(X, Y)
    assert hc.hyp_distance(X, P) == pytest.approx(t * d, abs=1e-6)
    assert hc.lorentz(P, P) == pytest.approx(-1.0, abs=1e-9)


def test_fermi_point_distance_to_axis():
    X = hc.fermi_point(0.3, 0.8)
    foot = hc.fermi_point(0.3, 0.0)
    assert hc.hyp_distance(X, foot) == pytest.approx(0.8, abs=1e-12)
