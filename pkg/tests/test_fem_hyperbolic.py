import json
import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from hypspec import fem_hyperbolic as fem
from hypspec import hyp_core as hc
from hypspec.config import ValidationError

COLLAR_L1 = 1.7000394950  # radial oracle, see test_hyp_core


@pytest.fixture(scope="module")
def pants():
    return fem.mesh_cell(hc.CellSpec(3, 1.0), 0.1)


@pytest.fixture(scope="module")
def pants_pencil(pants):
    return fem.assemble(pants)


@pytest.fixture(scope="module")
def torus():
    return fem.mesh_cell(hc.CellSpec(2, 1.0, "torus_with_v_holes"), 0.1)


def test_pants_mesh_invariants(pants):
    assert abs(pants.hyperbolic_area - 2 * math.pi) / (2 * math.pi) < 5e-3
    assert pants.euler_characteristic() == -1
    assert sorted(pants.loops) == ["cuff0", "cuff1", "cuff2"]
    assert all(loop.kind == "geodesic" for loop in pants.loops.values())
    J = pants.symmetry
    for p in range(3):
        assert np.array_equal(J[pants.loops[f"cuff{p}"].nodes], pants.loops[f"cuff{(p + 1) % 3}"].nodes)
    for loop in pants.loops.values():
        assert loop.length == pytest.approx(1.0, rel=1e-9)
        for seg in loop.segments:
            assert fem.geodesic_defect(seg) <= 1e-9


def test_area_error_shrinks_under_refinement():
    errs = [abs(fem.mesh_cell(hc.CellSpec(3, 1.0), h).hyperbolic_area - 2 * math.pi)
            for h in (0.2, 0.1, 0.05)]
    assert errs[0] > errs[1] > errs[2]


def test_torus_mesh(torus):
    assert torus.euler_characteristic() == -2
    assert abs(torus.hyperbolic_area - 4 * math.pi) / (4 * math.pi) < 5e-3


def test_collar_area():
    l = 1.0
    m = hc.collar_halfwidth(l)
    mesh = fem.collar_mesh(l, 0.05)
    assert abs(mesh.hyperbolic_area - 2 * l * math.sinh(m)) / (2 * l * math.sinh(m)) < 5e-3


def test_short_cuff_needs_graded_flag():
    with pytest.raises(ValidationError):
        fem.mesh_cell(hc.CellSpec(3, 0.005), 0.1)


def test_validate_rejects_degenerate_triangle():
    z = np.array([0.0, 0.1, 0.2]) + 0j
    mesh = fem.DiskMesh(points=z, triangles=np.array([[0, 1, 2]]), corners=z[None, :], loops={})
    with pytest.raises(ValidationError):
        mesh.validate()


def test_validate_rejects_point_outside_disk():
    z = np.array([0.0, 1.2, 0.5j])
    mesh = fem.DiskMesh(points=z, triangles=np.array([[0, 1, 2]]), corners=z[None, :], loops={})
    with pytest.raises(ValidationError):
        mesh.validate()


def textbook_p1(p):
    # gradients of barycentric coordinates from the inverse of [1 x y]
    A = np.column_stack([np.ones(3), p])
    G = np.linalg.inv(A)[1:]
    area = 0.5 * abs(np.linalg.det(A))
    return area * G.T @ G


def test_flat_stiffness_of_centred_triangle():
    z = 0.2 * np.exp(2j * np.pi * np.arange(3) / 3) * np.exp(0.3j)
    Ke, _ = fem.element_matrices(z)
    p = np.column_stack([z.real, z.imag])
    assert np.allclose(Ke[0], textbook_p1(p), atol=1e-14)


tri_pts = st.complex_numbers(max_magnitude=0.6, allow_nan=False, allow_infinity=False)


@settings(max_examples=60, deadline=None)
@given(tri_pts, tri_pts, tri_pts, tri_pts)
def test_element_matrices_are_isometry_invariant(a, b, c, shift):
    z = np.array([a, b, c])
    area = 0.5 * np.imag(np.conj(b - a) * (c - a))
    if abs(area) < 1e-3:
        return
    w = hc.mobius_to_origin(z, shift)
    K1, M1 = fem.element_matrices(z)
    K2, M2 = fem.element_matrices(w)
    assert np.allclose(K1, K2, atol=1e-9 * np.abs(K1).max())
    assert np.allclose(M1, M2, rtol=1e-9)


def test_assembly_constants(pants, pants_pencil):
    K, M = pants_pencil
    u = np.ones(pants.n)
    assert abs(u @ K @ u) < 1e-12
    assert u @ M @ u == pytest.approx(pants.hyperbolic_area, rel=1e-12)
    assert abs(K - K.T).max() == 0 and abs(M - M.T).max() == 0


def test_neumann_cell(pants):
    res = fem.solve_mesh(pants, (), count=3)
    assert res.lambda0 <= 1e-6
    psi = res.psi0
    assert np.ptp(psi) <= 1e-6
    assert np.all(res.residuals <= 1e-8)
    eta = fem.spectral_gap(res)
    assert eta == pytest.approx(res.eigenvalues[1]) and eta > 0
    # frozen regression value of the first nonzero eigenvalue (doubly degenerate)
    assert res.eigenvalues[1] == pytest.approx(1.43713163, rel=1e-7)
    assert res.eigenvalues[2] == pytest.approx(res.eigenvalues[1], rel=1e-8)


def test_dirichlet_on_one_cuff_regression(pants):
    lam = fem.solve_mesh(pants, ("cuff0",), count=1).lambda0
    assert lam == pytest.approx(0.15440632867, rel=1e-8)


def test_spectral_gap_needs_two_pairs(pants):
    with pytest.raises(ValidationError):
        fem.spectral_gap(fem.solve_mesh(pants, ("cuff0",), count=1))


def test_solve_rejects_zero_count(pants_pencil):
    K, M = pants_pencil
    with pytest.raises(ValidationError):
        fem.solve_low_spectrum(K, M, count=0)


def collar_error(h):
    mesh = fem.collar_mesh(1.0, h)
    lam = fem.solve_mesh(mesh, ("inner", "outer"), count=1).lambda0
    return abs(lam - COLLAR_L1) / COLLAR_L1


def test_collar_matches_radial_oracle():
    e1, e2 = collar_error(0.05), collar_error(0.025)
    assert e1 < 1e-2
    assert e2 < 3e-3
    assert e1 / e2 > 3 * 0.7


def test_disk_matches_shooting():
    mesh = fem.disk_mesh(1.0, 0.05)
    lam = fem.solve_mesh(mesh, ("rim",), count=1).lambda0
    exact = hc.disk_dirichlet_shooting(1.0)
    assert abs(lam - exact) / exact < 1e-2


def test_symmetry_pants(pants, pants_pencil):
    K, M = pants_pencil
    res = fem.solve_mesh(pants, ("cuff0", "cuff1", "cuff2"), count=1)
    assert fem.symmetry_check(res, pants.symmetry, K, M) <= 1e-8
    const = fem.solve_mesh(pants, (), count=1)
    assert fem.symmetry_check(const, pants.symmetry, K, M) <= 1e-12


def test_symmetry_rejects_non_automorphism(pants, pants_pencil):
    K, M = pants_pencil
    res = fem.solve_mesh(pants, (), count=1)
    # refine one side: scale the entries of a single node
    D = np.ones(pants.n)
    D[0] = 1.5
    Kb = sp.diags(D) @ K @ sp.diags(D)
    with pytest.raises(ValidationError):
        fem.symmetry_check(res, pants.symmetry, Kb, M)
    # one-sided Dirichlet data is not preserved either
    one = fem.solve_mesh(pants, ("cuff0",), count=1)
    with pytest.raises(ValidationError):
        fem.symmetry_check(one, pants.symmetry, K, M)


def test_collar_mode_separation():
    l = 2.0
    mesh = fem.collar_mesh(l, 0.05)
    res = fem.solve_mesh(mesh, ("inner", "outer"), count=2)
    gap = res.eigenvalues[1] - res.eigenvalues[0]
    oracle = hc.collar_sturm_liouville(l, k=1) - hc.collar_sturm_liouville(l, k=0)
    assert abs(gap - oracle) / oracle < 2e-2


@pytest.mark.parametrize("which", ["collar", "pants", "torus"])
def test_split_monotonicity(which, pants, torus):
    mesh = {"collar": lambda: fem.collar_mesh(1.0, 0.05), "pants": lambda: pants,
            "torus": lambda: torus}[which]()
    out = fem.split_check(mesh, mesh.piece == 1)
    assert out["slack"] >= -1e-8


def test_split_rejects_trivial_piece(pants):
    with pytest.raises(ValidationError):
        fem.split_check(pants, np.ones(len(pants.triangles), dtype=bool))


def test_domain_monotonicity_on_widening_collar():
    m = hc.collar_halfwidth(1.0)
    lams = [fem.solve_mesh(fem.collar_mesh(1.0, 0.05, (-a, a)), ("inner", "outer"), 1).lambda0
            for a in (0.4, 0.8, m)]
    assert lams[0] >= lams[1] >= lams[2]


@pytest.mark.parametrize("R", [3.0, 4.0])
def test_funnel_strip_has_no_low_spectrum(R):
    assert fem.funnel_strip_lambda0(1.0, 0.1, R) >= 0.25 - 0.02


def test_funnel_cell_tags():
    mesh = fem.mesh_cell(hc.CellSpec(3, 1.0, funnels=(True, True, True)), 0.2)
    assert sorted(mesh.loops) == ["funnel0", "funnel1", "funnel2"]


def test_exports(tmp_path, pants):
    res = fem.solve_mesh(pants, (), count=2)
    fem.write_spectrum_csv(tmp_path / "s.csv", res)
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "index,eigenvalue,residual" and len(lines) == 3
    fem.write_mesh(tmp_path / "m.json", pants)
    data = json.loads((tmp_path / "m.json").read_text())
    assert len(data["vertices"]) == pants.n
    assert set(data["boundary"]) == {"cuff0", "cuff1", "cuff2"}
