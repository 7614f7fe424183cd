import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from boussinesq_stab.geometry import (
    assemble_diff_ops,
    boundary_lifting,
    build_grid,
    build_regions,
    divfree_basis,
    leray_project,
    normal_derivative,
    solve_pressure,
)

GRID = build_grid(12, 10, 1.2, 1.0)
seeds = st.integers(0, 2**32 - 1)


def test_unknown_counts():
    g = build_grid(8, 9)
    assert (g.n_u, g.n_v, g.n_scalar, g.n_stream) == (7 * 9, 8 * 8, 72, 7 * 8)
    assert g.n_boundary == 2 * (8 + 9)
    assert g.boundary_weights().sum() == pytest.approx(2 * (g.lx + g.ly))


@pytest.mark.parametrize("bad", [(4, 16), (16, 7)])
def test_too_few_cells_rejected(bad):
    with pytest.raises(ValueError):
        build_grid(*bad)


def test_stream_basis_is_divergence_free():
    ops = assemble_diff_ops(GRID)
    assert abs(ops.div @ divfree_basis(GRID)).max() < 1e-12


@pytest.mark.parametrize("n", [16, 32])
def test_cell_laplacian_matches_analytic(n):
    # sin(pi x) sin(pi y) vanishes on the walls, so Lap f = -2 pi^2 f to O(h^2).
    g = build_grid(n, n)
    f = g.sample_scalar(lambda x, y: np.sin(np.pi * x) * np.sin(np.pi * y))
    err = np.abs(assemble_diff_ops(g).lap_s @ f + 2 * np.pi**2 * f).max()
    assert err < 40 / n**2


def test_normal_derivative_second_order():
    errs = []
    for n in (16, 32):
        g = build_grid(n, n)
        f = g.sample_scalar(lambda x, y: np.sin(np.pi * x) * np.sin(np.pi * y))
        bx, by = g.boundary_points()
        exact = -np.pi * np.where(np.isclose(bx, 0) | np.isclose(bx, 1),
                                  np.sin(np.pi * by), np.sin(np.pi * bx))
        errs.append(np.abs(normal_derivative(g, f) - exact).max())
    assert errs[0] / errs[1] > 3.5


def test_lifting_rows():
    s = boundary_lifting(GRID)
    assert s.shape == (GRID.n_scalar, GRID.n_boundary)
    assert np.all(s.getnnz(axis=0) == 1)


@settings(max_examples=25, deadline=None)
@given(seeds)
def test_leray_properties(seed):
    rng = np.random.default_rng(seed)
    ops = assemble_diff_ops(GRID)
    u = rng.standard_normal(GRID.n_vel)
    pu = leray_project(GRID, u)
    scale = np.linalg.norm(u)
    assert np.linalg.norm(ops.div @ pu) <= 1e-9 * scale / GRID.hx
    assert np.linalg.norm(leray_project(GRID, pu) - pu) <= 1e-10 * scale
    # the removed part is a gradient, hence orthogonal to solenoidal fields
    assert abs(pu @ (u - pu)) <= 1e-9 * scale**2
    phi = rng.standard_normal(GRID.n_scalar)
    g = ops.grad @ phi
    assert np.linalg.norm(leray_project(GRID, g)) <= 1e-9 * np.linalg.norm(g)


@settings(max_examples=20, deadline=None)
@given(seeds)
def test_advection_is_skew_for_solenoidal_transport(seed):
    rng = np.random.default_rng(seed)
    ops = assemble_diff_ops(GRID)
    b = divfree_basis(GRID) @ rng.standard_normal(GRID.n_stream)
    theta = rng.standard_normal(GRID.n_scalar)
    a = ops.adv(b)
    assert abs(theta @ (a @ theta)) <= 1e-10 * np.linalg.norm(theta) ** 2 * abs(a).max()
    y = divfree_basis(GRID) @ rng.standard_normal(GRID.n_stream)
    # (b.grad) y is energy neutral for solenoidal b
    assert abs(y @ ops.convect(b, y)) <= 1e-9 * np.linalg.norm(y) ** 2 * np.abs(b).max() / GRID.hx


def test_pressure_solver_rejects_nothing_for_compatible_rhs(rng):
    rhs = rng.standard_normal(GRID.n_scalar)
    rhs -= rhs.mean()
    p = solve_pressure(GRID, rhs)
    assert abs(p.mean()) < 1e-12


def test_leray_rejects_bad_shape():
    with pytest.raises(ValueError):
        leray_project(GRID, np.zeros(3))
    with pytest.raises(ValueError):
        leray_project(GRID, np.full(GRID.n_vel, np.nan))


@pytest.mark.parametrize("side", ["bottom", "top", "left", "right"])
def test_regions_segment_and_collar(side):
    g = build_grid(16, 12)
    r = build_regions(g, side, 0.5, 3)
    n_side = 16 if side in ("bottom", "top") else 12
    assert r.gamma_mask.sum() == n_side // 2
    assert r.cell_mask.sum() == 3 * (n_side // 2)
    assert r.gamma_mask[g.side_slice(side)].all() == (n_side // 2 == n_side)
    assert r.vel_mask.size == g.n_vel and r.vel_mask.any()


def test_regions_validation():
    g = build_grid(8, 8)
    for kw in (dict(side="front"), dict(frac_gamma=0), dict(d_collar=9), dict(offset=2)):
        with pytest.raises(ValueError):
            build_regions(g, **kw)


def test_spacing():
    assert build_grid(8, 8).hx == build_grid(8, 8).hy == 0.125
    g = build_grid(16, 8, 2.0, 1.0)
    assert g.hx == g.hy == 0.125


def test_divergence_of_constant_field_lives_at_walls():
    g = build_grid(8, 8)
    div = (assemble_diff_ops(g).div @ np.concatenate([np.ones(g.n_u), np.zeros(g.n_v)]))
    div = div.reshape(g.nx, g.ny)
    assert np.all(div[1:-1] == 0)
    assert np.all(div[0] != 0) and np.all(div[-1] != 0)


def test_zero_transport_gives_zero_matrix():
    assert assemble_diff_ops(GRID).adv(np.zeros(GRID.n_vel)).count_nonzero() == 0


def test_stream_basis_spans_divergence_kernel():
    # rank-nullity of the discrete divergence, by SVD
    g = build_grid(8, 8)
    div = assemble_diff_ops(g).div.toarray()
    sv = np.linalg.svd(div, compute_uv=False)
    kernel = g.n_vel - int(np.sum(sv > 1e-10 * sv[0]))
    z = divfree_basis(g).toarray()
    assert z.shape[1] == kernel == (g.nx - 1) * (g.ny - 1)
    assert np.linalg.svd(z, compute_uv=False)[-1] > 1e-8


def test_solenoidal_field_unchanged(rng):
    u = divfree_basis(GRID) @ rng.standard_normal(GRID.n_stream)
    assert np.linalg.norm(leray_project(GRID, u) - u) <= 1e-10 * np.linalg.norm(u)
