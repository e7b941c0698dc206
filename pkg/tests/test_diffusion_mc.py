import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from hypspec import diffusion_mc as mc
from hypspec import fem_hyperbolic as fem
from hypspec import graph_spectra as gs
from hypspec.config import NumericalError, ValidationError


def single_state():
    return mc.build_walk(sp.csr_matrix([[1.0]]), sp.csr_matrix([[1.0]]))


def path_walk(seed=0):
    g = gs.lattice(1, 2)
    return g, mc.build_walk(gs.combinatorial_laplacian(g), sp.identity(g.n, format="csr"),
                            g.boundary, seed=seed)


@pytest.fixture(scope="module")
def collar_walk():
    mesh = fem.collar_mesh(1.0, 0.3)
    K, M = fem.assemble(mesh)
    d = mesh.loop_nodes(["inner", "outer"])
    return mesh, K, M, d, mc.build_walk(K, M, d)


def test_single_state_survival_is_exponential():
    model = single_state()
    assert model.kill[0] == 1.0 and model.rates.nnz == 0
    c = mc.survival_curve(model, 3.0, 20000, seed=1)
    exact = np.exp(-c.times)
    assert np.all(np.abs(c.survival - exact) <= 4 * np.sqrt(exact * (1 - exact) / c.n_paths) + 1e-12)
    assert abs(c.fitted_rate - 1.0) <= 3 * c.rate_se


def test_path_rate():
    _, model = path_walk()
    assert model.lambda0() == pytest.approx(2 - math.sqrt(2), abs=1e-12)
    c = mc.survival_curve(model, 8.0, 20000, seed=3)
    assert abs(c.fitted_rate - (2 - math.sqrt(2))) <= 3 * c.rate_se


def test_lumped_generator_close_to_pencil(collar_walk):
    _, K, M, d, model = collar_walk
    exact = fem.solve_low_spectrum(K, M, d, count=1).lambda0
    assert model.clipped == 0
    assert abs(model.lambda0() - exact) / exact < 0.05


def test_ci_shrinks_like_root_two():
    model = single_state()
    a = mc.survival_curve(model, 3.0, 8000, seed=5)
    b = mc.survival_curve(model, 3.0, 16000, seed=5)
    assert (a.rate_se / b.rate_se) == pytest.approx(math.sqrt(2), rel=0.3)
    assert a.ci[1] - a.ci[0] == pytest.approx(2 * 1.96 * a.rate_se)


def test_fixed_seed_is_bit_reproducible():
    _, model = path_walk()
    a = mc.survival_curve(model, 5.0, 4000, seed=11)
    b = mc.survival_curve(model, 5.0, 4000, seed=11)
    assert np.array_equal(a.survival, b.survival)
    assert a.fitted_rate == b.fitted_rate and a.rate_se == b.rate_se
    assert a.csv() == b.csv()
    c = mc.survival_curve(model, 5.0, 4000, seed=12)
    assert not np.array_equal(a.survival, c.survival)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_survival_is_a_probability_and_monotone(seed):
    _, model = path_walk()
    c = mc.survival_curve(model, 4.0, 2000, seed=seed)
    assert np.all((0 <= c.survival) & (c.survival <= 1))
    assert np.all(np.diff(c.survival) <= 0)
    assert c.survival[0] == 1.0


def test_insufficient_tail():
    _, model = path_walk()
    with pytest.raises(NumericalError, match="insufficient tail"):
        mc.survival_curve(model, 30.0, 2000, seed=0)


@pytest.mark.parametrize("kw", [dict(n_paths=999), dict(n_batches=8), dict(t_max=0.0),
                                dict(start=17)])
def test_survival_rejects(kw):
    _, model = path_walk()
    args = dict(t_max=4.0, n_paths=2000)
    args.update(kw)
    with pytest.raises(ValidationError):
        mc.survival_curve(model, **args)


def test_output_formats():
    c = mc.survival_curve(single_state(), 2.0, 2000, seed=0, n_grid=11)
    lines = c.csv().splitlines()
    assert lines[0] == "t,survival,stderr" and len(lines) == 12
    assert set(c.summary()) == {"rate", "ci_low", "ci_high", "n_paths", "seed"}


def test_harmonic_path_is_linear():
    g, model = path_walk()
    # ends are vertices 3 (left) and 4 (right); free states are 0, 1, 2
    values = np.zeros(g.n)
    values[4] = 1.0
    est = mc.lambda_harmonic_extend(model, 0.0, values, n_paths=4000, seed=2)
    oracle = mc.harmonic_oracle(model, 0.0, values)
    assert oracle == pytest.approx([0.5, 0.25, 0.75], abs=1e-12)
    assert np.all(np.abs(est.values - oracle) <= 3 * est.stderr)


def test_harmonic_collar_zero(collar_walk):
    mesh, _, _, d, model = collar_walk
    g = np.zeros(mesh.n)
    g[mesh.loops["outer"].nodes] = 1.0
    starts = np.linspace(0, model.n_free - 1, 6).astype(int)
    est = mc.lambda_harmonic_extend(model, 0.0, g, starts=starts, n_paths=4000, seed=4)
    oracle = mc.harmonic_oracle(model, 0.0, g)[starts]
    assert np.all(np.abs(est.values - oracle) <= 3 * est.stderr)


def test_harmonic_collar_positive_lambda(collar_walk):
    mesh, _, _, _, model = collar_walk
    curve = mc.survival_curve(model, 2.5, 20000, seed=6)
    lam = 0.5 * curve.fitted_rate
    g = np.ones(mesh.n)
    starts = np.linspace(0, model.n_free - 1, 5).astype(int)
    est = mc.lambda_harmonic_extend(model, lam, g, starts=starts, n_paths=4000, seed=7, curve=curve)
    oracle = mc.harmonic_oracle(model, lam, g)[starts]
    assert np.all(est.values > 0)
    assert np.all(np.abs(est.values - oracle) <= 3 * est.stderr)


def test_harmonic_guards():
    g, model = path_walk()
    values = np.ones(g.n)
    curve = mc.survival_curve(model, 6.0, 4000, seed=0)
    with pytest.raises(ValidationError):
        mc.lambda_harmonic_extend(model, -0.1, values)
    with pytest.raises(ValidationError):
        mc.lambda_harmonic_extend(model, 0.1, values)
    with pytest.raises(ValidationError):
        mc.lambda_harmonic_extend(model, curve.fitted_rate, values, curve=curve)
    with pytest.raises(ValidationError):
        mc.lambda_harmonic_extend(model, 0.0, np.ones(2))


def test_harmonic_weight_overflow():
    model = single_state()
    fake = mc.SurvivalCurve(times=np.zeros(1), survival=np.ones(1), stderr=np.zeros(1),
                            n_paths=1000, fitted_rate=1e4, rate_se=0.0, ci=(1e4, 1e4), seed=0,
                            window=(0, 1))
    with pytest.raises(NumericalError, match="overflow"):
        mc.lambda_harmonic_extend(model, 800.0, np.zeros(1), curve=fake)


def obtuse_pencil():
    K = sp.csr_matrix([[1.0, 0.2, -1.2], [0.2, 1.0, -1.2], [-1.2, -1.2, 2.4]])
    return K, sp.identity(3, format="csr")


def test_positive_off_diagonal_is_flagged():
    K, M = obtuse_pencil()
    with pytest.raises(NumericalError, match="non-Delaunay"):
        mc.build_walk(K, M)
    with pytest.warns(RuntimeWarning):
        model = mc.build_walk(K, M, clip=True)
    assert model.clipped == 1
    # the removed pair moves onto the diagonal: rows still sum to zero, nothing is killed
    assert np.allclose(model.kill, 0.0)
    assert model.rates[0, 2] == pytest.approx(1.2) and model.rates[0, 1] == 0
    assert np.allclose(model.K.sum(axis=1), 0.0)
    assert model.lambda0() == pytest.approx(0.0, abs=1e-12)


def test_build_walk_rejects_all_absorbing():
    g = gs.lattice(1, 1)
    with pytest.raises(ValidationError):
        mc.build_walk(gs.combinatorial_laplacian(g), sp.identity(g.n), np.ones(g.n, dtype=bool))
