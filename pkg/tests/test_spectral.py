import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from boussinesq_stab.geometry import build_grid
from boussinesq_stab.operators import BlockOperator, layout_for
from boussinesq_stab.spectral import (
    NonSemisimpleError,
    SpectralGapError,
    eig_unstable,
    project,
    projector,
)
from conftest import FIXTURE_FIRST_STABLE, FIXTURE_UNSTABLE

SMALL = build_grid(8, 8)
LAY = layout_for(SMALL)


def _synthetic(top, seed=0):
    """Operator ``A = S D S^{-1}`` with prescribed leading block ``top`` and a stable tail."""
    n = LAY.size
    a = np.diag(-1.0 - 0.1 * np.arange(n))
    k = top.shape[0]
    a[:k, :k] = top
    rng = np.random.default_rng(seed)
    s = np.eye(n) + 0.3 * rng.standard_normal((n, n)) / np.sqrt(n)
    a = s @ a @ np.linalg.inv(s)
    return BlockOperator(SMALL, sp.csr_matrix(LAY.weight @ a), {}, 1.0, 1.0, 1.0,
                         np.zeros(SMALL.n_vel), np.zeros(SMALL.n_scalar))


ROT = np.array([[1.0, 2.0], [-2.0, 1.0]])


def test_fixture_spectrum_frozen(model):
    # Frozen values cross-checked against plain eigvals of the dense generator.
    oracle = np.sort(np.linalg.eigvals(model.op.dense).real)[::-1]
    assert np.allclose(oracle[:2], FIXTURE_UNSTABLE, rtol=1e-8)
    assert oracle[2] == pytest.approx(FIXTURE_FIRST_STABLE, rel=1e-8)
    dec = model.dec
    assert dec.N == 2 and dec.multiplicities == (1, 1)
    assert np.allclose(dec.unstable.real, FIXTURE_UNSTABLE, rtol=1e-8)
    assert dec.first_stable.real == pytest.approx(FIXTURE_FIRST_STABLE, rel=1e-8)


def test_fixture_quality(model):
    dec = model.dec
    res = dec.residuals()
    assert max(res.values()) <= 1e-8
    assert np.abs(dec.gram() - np.eye(dec.N)).max() <= 1e-8
    R, L, Lam = dec.real_form
    A = model.op.dense
    assert np.abs(A @ R - R @ Lam).max() <= 1e-8 * dec.norm_A
    assert np.abs(L.T @ (model.op.W @ R) - np.eye(dec.N)).max() <= 1e-8


def test_complex_pairs_in_real_form():
    top = np.zeros((4, 4))
    top[:2, :2] = ROT
    top[2:, 2:] = ROT
    dec = eig_unstable(_synthetic(top))
    assert dec.N == 4 and dec.multiplicities == (2, 2)
    assert np.allclose(dec.unstable, [1 + 2j, 1 + 2j, 1 - 2j, 1 - 2j])
    assert np.abs(dec.gram() - np.eye(4)).max() <= 1e-10
    R, L, Lam = dec.real_form
    assert np.isrealobj(R) and np.isrealobj(L)
    assert np.abs(dec.op.dense @ R - R @ Lam).max() <= 1e-9 * dec.norm_A
    assert np.allclose(np.sort_complex(np.linalg.eigvals(Lam)), np.sort_complex(dec.unstable))


def test_semisimple_double_eigenvalue_is_one_cluster():
    dec = eig_unstable(_synthetic(np.eye(2) * 1.5))
    assert dec.multiplicities == (2,)
    assert np.abs(dec.gram() - np.eye(2)).max() <= 1e-10


def test_jordan_block_refused():
    with pytest.raises(NonSemisimpleError):
        eig_unstable(_synthetic(np.array([[1.0, 1.0], [0.0, 1.0]])))


def test_gap_violation_refused():
    with pytest.raises(SpectralGapError):
        eig_unstable(_synthetic(np.eye(1) * 0.5), threshold=0.5)


def test_negative_threshold_enhances_stable_system():
    dec = eig_unstable(_synthetic(np.eye(1) * -0.5), threshold=-0.75)
    assert dec.N == 1 and dec.unstable[0].real == pytest.approx(-0.5)
    assert dec.first_stable.real == pytest.approx(-1.1)


def test_nothing_unstable():
    dec = eig_unstable(_synthetic(np.eye(1) * -0.5))
    assert dec.N == 0
    assert projector(dec).rank == 0


def test_dense_and_iterative_agree(model, model_iterative):
    a, b = model.dec, model_iterative.dec
    assert b.method == "iterative"
    assert a.N == b.N
    assert np.allclose(a.unstable, b.unstable, rtol=1e-8)
    assert max(b.residuals().values()) <= 1e-8


def test_projector_identities(model):
    pn = model.pn
    P = pn.dense()
    A = model.op.dense
    assert np.abs(P @ P - P).max() <= 1e-8
    assert np.abs(A @ P - P @ A).max() <= 1e-8 * model.dec.norm_A


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_projection_splits_state(seed):
    from conftest import _model

    m = _model()
    w = np.random.default_rng(seed).standard_normal(m.op.size)
    xi, rest = project(m.pn, w)
    assert np.allclose(m.pn.lift(xi) + rest, w)
    assert np.abs(m.pn.coords(rest)).max() <= 1e-9 * np.abs(w).max()


def test_unknown_method():
    with pytest.raises(ValueError):
        eig_unstable(_synthetic(np.eye(1)), method="qr")


def test_self_adjoint_case_left_equals_right():
    from boussinesq_stab.equilibrium import manufactured_equilibrium
    from boussinesq_stab.operators import assemble_generator

    eq = manufactured_equilibrium("thermal", 0.0, SMALL, gamma=0.0)
    op = assemble_generator(eq, eq.forcing, SMALL)
    dec = eig_unstable(op, threshold=-40.0, biorthonormal=False)
    assert dec.N >= 1
    for k in range(dec.N):
        x, y = dec.right[:, k], dec.left[:, k]
        assert abs(abs(LAY.inner(x, y)) - 1.0) < 1e-8


def test_conjugate_closure():
    top = np.zeros((2, 2))
    top[:] = ROT
    dec = eig_unstable(_synthetic(top))
    a, b = dec.clusters
    assert dec.unstable[a[0]] == np.conj(dec.unstable[b[0]])
    assert np.array_equal(dec.right[:, b], dec.right[:, a].conj())
    assert np.array_equal(dec.left[:, b], dec.left[:, a].conj())


def test_coordinates_of_basis_vector(model):
    R, _, _ = model.dec.real_form
    xi, rest = project(model.pn, R[:, 0])
    assert np.allclose(xi, np.eye(model.dec.N)[0], atol=1e-10)
    assert model.op.layout.norm(rest) < 1e-9


def test_projected_dynamics_follow_lambda(model, unstable_start):
    # One free implicit-Euler step: coordinates evolve by (I - dt Lambda)^{-1}.
    from boussinesq_stab.closedloop import open_loop, propagate_linear

    dt = 1e-3
    w1 = propagate_linear(open_loop(model.op), unstable_start, dt, dt,
                          scheme="implicit_euler").final_state
    _, _, Lam = model.dec.real_form
    expect = np.linalg.solve(np.eye(model.dec.N) - dt * Lam, model.pn.coords(unstable_start))
    assert np.allclose(model.pn.coords(w1), expect, atol=1e-6)
