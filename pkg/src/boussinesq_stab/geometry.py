"""Staggered (MAC) discretization of a rectangle and its discrete Helmholtz machinery.

Layout on an ``nx x ny`` cell grid:

* ``u`` lives on interior vertical faces, ``(nx-1) * ny`` unknowns;
* ``v`` lives on interior horizontal faces, ``nx * (ny-1)`` unknowns;
* scalars (temperature, pressure) live at cell centres, ``nx * ny`` unknowns;
* stream functions live at interior nodes, ``(nx-1) * (ny-1)`` unknowns.

Every 2-d array uses C order with shape ``(n_x_index, n_y_index)``, so the
flat index of cell ``(i, j)`` is ``i * ny + j``. Velocity vectors are the
concatenation ``[u, v]``. Homogeneous Dirichlet data are eliminated: walls
carry zero velocity, scalars use the ghost value ``2 * wall - interior``.

The discrete inner product is the plain dot product times the cell area
``hx * hy`` for every unknown, which makes ``grad = -div.T`` and turns the
Leray projection into an orthogonal projector.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property, lru_cache

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from ._validation import check_int, check_positive

MIN_CELLS = 8
SIDES = ("bottom", "top", "left", "right")

# Type aliases: velocity fields are flat [u, v] arrays, scalar fields flat cell arrays.
VelocityField = np.ndarray
ScalarField = np.ndarray


class PoissonSolveError(RuntimeError):
    """Raised when the pressure Poisson solve misses its residual tolerance."""


@dataclass(frozen=True)
class Grid:
    nx: int
    ny: int
    lx: float = 1.0
    ly: float = 1.0

    @property
    def hx(self) -> float:
        return self.lx / self.nx

    @property
    def hy(self) -> float:
        return self.ly / self.ny

    @property
    def cell_area(self) -> float:
        return self.hx * self.hy

    @property
    def n_u(self) -> int:
        return (self.nx - 1) * self.ny

    @property
    def n_v(self) -> int:
        return self.nx * (self.ny - 1)

    @property
    def n_vel(self) -> int:
        return self.n_u + self.n_v

    @property
    def n_scalar(self) -> int:
        return self.nx * self.ny

    @property
    def n_stream(self) -> int:
        return (self.nx - 1) * (self.ny - 1)

    @property
    def n_boundary(self) -> int:
        return 2 * (self.nx + self.ny)

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        x = (np.arange(self.nx) + 0.5) * self.hx
        y = (np.arange(self.ny) + 0.5) * self.hy
        return np.meshgrid(x, y, indexing="ij")

    def u_points(self) -> tuple[np.ndarray, np.ndarray]:
        x = np.arange(1, self.nx) * self.hx
        y = (np.arange(self.ny) + 0.5) * self.hy
        return np.meshgrid(x, y, indexing="ij")

    def v_points(self) -> tuple[np.ndarray, np.ndarray]:
        x = (np.arange(self.nx) + 0.5) * self.hx
        y = np.arange(1, self.ny) * self.hy
        return np.meshgrid(x, y, indexing="ij")

    def nodes(self) -> tuple[np.ndarray, np.ndarray]:
        x = np.arange(1, self.nx) * self.hx
        y = np.arange(1, self.ny) * self.hy
        return np.meshgrid(x, y, indexing="ij")

    def split_velocity(self, vel: VelocityField) -> tuple[np.ndarray, np.ndarray]:
        vel = np.asarray(vel)
        return (
            vel[: self.n_u].reshape(self.nx - 1, self.ny),
            vel[self.n_u :].reshape(self.nx, self.ny - 1),
        )

    def sample_velocity(self, fu, fv) -> VelocityField:
        """Sample callables ``fu(x, y)``, ``fv(x, y)`` at the face locations."""
        return np.concatenate([np.ravel(fu(*self.u_points())), np.ravel(fv(*self.v_points()))])

    def sample_scalar(self, f) -> ScalarField:
        return np.ravel(f(*self.cell_centers())).astype(float)

    def boundary_faces(self) -> list[tuple[str, int]]:
        """Boundary faces in storage order: left, right, bottom, top."""
        faces = [("left", j) for j in range(self.ny)]
        faces += [("right", j) for j in range(self.ny)]
        faces += [("bottom", i) for i in range(self.nx)]
        faces += [("top", i) for i in range(self.nx)]
        return faces

    def side_slice(self, side: str) -> slice:
        nx, ny = self.nx, self.ny
        offsets = {"left": (0, ny), "right": (ny, 2 * ny), "bottom": (2 * ny, 2 * ny + nx),
                   "top": (2 * ny + nx, 2 * ny + 2 * nx)}
        start, stop = offsets[side]
        return slice(start, stop)

    def boundary_weights(self) -> np.ndarray:
        """Face lengths, the quadrature weights of the boundary inner product."""
        return np.concatenate([np.full(2 * self.ny, self.hy), np.full(2 * self.nx, self.hx)])

    def boundary_points(self) -> tuple[np.ndarray, np.ndarray]:
        yc = (np.arange(self.ny) + 0.5) * self.hy
        xc = (np.arange(self.nx) + 0.5) * self.hx
        x = np.concatenate([np.zeros(self.ny), np.full(self.ny, self.lx), xc, xc])
        y = np.concatenate([yc, yc, np.zeros(self.nx), np.full(self.nx, self.ly)])
        return x, y


def build_grid(nx: int, ny: int, lx: float = 1.0, ly: float = 1.0) -> Grid:
    """Create a grid, rejecting fewer than eight cells per axis.

    Examples
    --------
    >>> build_grid(16, 8, 2.0, 1.0).hx
    0.125
    """
    check_positive(lx, "lx")
    check_positive(ly, "ly")
    nx = check_int(nx, "nx", MIN_CELLS)
    ny = check_int(ny, "ny", MIN_CELLS)
    return Grid(nx, ny, float(lx), float(ly))


@dataclass(frozen=True, eq=False)
class ControlRegions:
    """The boundary control segment and the interior collar it supports.

    ``gamma_mask`` flags boundary faces (in :meth:`Grid.boundary_faces`
    order) belonging to the segment; ``cell_mask`` is the collar indicator
    ``m`` at cell centres; ``u_mask``/``v_mask`` flag interior faces touching
    a collar cell.
    """

    grid: Grid
    side: str
    frac_gamma: float
    d_collar: int
    gamma_mask: np.ndarray
    cell_mask: np.ndarray
    u_mask: np.ndarray
    v_mask: np.ndarray

    @property
    def vel_mask(self) -> np.ndarray:
        return np.concatenate([self.u_mask, self.v_mask])

    @property
    def gamma_indices(self) -> np.ndarray:
        return np.flatnonzero(self.gamma_mask)


def build_regions(grid: Grid, side: str = "bottom", frac_gamma: float = 0.5,
                  d_collar: int = 2, offset: float = 0.5) -> ControlRegions:
    """Select a contiguous boundary segment and a collar of ``d_collar`` cells behind it.

    ``offset`` in ``[0, 1]`` positions the segment along the side (0.5 centres it).
    """
    if side not in SIDES:
        raise ValueError(f"side must be one of {SIDES}, got {side!r}")
    if not 0 < frac_gamma <= 1:
        raise ValueError(f"frac_gamma must lie in (0, 1], got {frac_gamma}")
    if not 0 <= offset <= 1:
        raise ValueError(f"offset must lie in [0, 1], got {offset}")
    n_side = grid.nx if side in ("bottom", "top") else grid.ny
    depth_max = grid.ny if side in ("bottom", "top") else grid.nx
    d_collar = check_int(d_collar, "d_collar", 1)
    if d_collar > depth_max:
        raise ValueError(f"d_collar={d_collar} exceeds the grid depth {depth_max}")

    count = max(1, int(round(frac_gamma * n_side)))
    start = int(round(offset * (n_side - count)))
    along = np.arange(start, start + count)

    gamma_mask = np.zeros(grid.n_boundary, dtype=bool)
    gamma_mask[grid.side_slice(side)][along] = True

    cells = np.zeros((grid.nx, grid.ny), dtype=bool)
    depth = np.arange(d_collar)
    if side == "bottom":
        cells[np.ix_(along, depth)] = True
    elif side == "top":
        cells[np.ix_(along, grid.ny - 1 - depth)] = True
    elif side == "left":
        cells[np.ix_(depth, along)] = True
    else:
        cells[np.ix_(grid.nx - 1 - depth, along)] = True

    u_mask = (cells[:-1, :] | cells[1:, :]).ravel()
    v_mask = (cells[:, :-1] | cells[:, 1:]).ravel()
    return ControlRegions(grid, side, float(frac_gamma), d_collar, gamma_mask,
                          cells.ravel(), u_mask, v_mask)


def _diff_cells_from_faces(n: int, h: float) -> sp.csr_matrix:
    # (n, n-1): cell c <- (f[c+1] - f[c]) / h, wall faces are zero.
    return sp.diags([np.ones(n - 1), -np.ones(n - 1)], [0, -1], shape=(n, n - 1), format="csr") / h


def _avg_faces_from_cells(n: int) -> sp.csr_matrix:
    # (n-1, n): interior face k <- (c[k] + c[k+1]) / 2.
    return sp.diags([np.full(n - 1, 0.5), np.full(n - 1, 0.5)], [0, 1], shape=(n - 1, n), format="csr")


def _lap_dirichlet_faces(n: int, h: float) -> sp.csr_matrix:
    return sp.diags([np.ones(n - 2), -2 * np.ones(n - 1), np.ones(n - 2)], [-1, 0, 1], format="csr") / h**2


def _lap_dirichlet_cells(n: int, h: float) -> sp.csr_matrix:
    main = -2 * np.ones(n)
    main[[0, -1]] = -3.0
    return sp.diags([np.ones(n - 1), main, np.ones(n - 1)], [-1, 0, 1], format="csr") / h**2


@dataclass(frozen=True, eq=False)
class DiffOps:
    """Sparse difference, averaging and Laplacian operators on a :class:`Grid`.

    ``lap_u``/``lap_v``/``lap_s`` are Dirichlet Laplacians, ``div`` maps
    velocity to cells, ``grad = -div.T`` maps cells to interior faces.
    """

    grid: Grid
    lap_u: sp.csr_matrix
    lap_v: sp.csr_matrix
    lap_s: sp.csr_matrix
    div: sp.csr_matrix
    grad: sp.csr_matrix
    # building blocks for the convective terms
    dx_u2c: sp.csr_matrix = field(repr=False)  # u faces -> cells, x difference
    dy_v2c: sp.csr_matrix = field(repr=False)
    avx_c2u: sp.csr_matrix = field(repr=False)  # cells -> u faces, x average
    avy_c2v: sp.csr_matrix = field(repr=False)
    avx_u2c: sp.csr_matrix = field(repr=False)
    avy_v2c: sp.csr_matrix = field(repr=False)
    avy_u2n: sp.csr_matrix = field(repr=False)  # u faces -> nodes, y average
    avx_v2n: sp.csr_matrix = field(repr=False)  # v faces -> nodes, x average
    dy_n2u: sp.csr_matrix = field(repr=False)  # nodes -> u faces, y difference
    dx_n2v: sp.csr_matrix = field(repr=False)

    @cached_property
    def lap_vel(self) -> sp.csr_matrix:
        return sp.block_diag([self.lap_u, self.lap_v], format="csr")

    def adv(self, b: VelocityField) -> sp.csr_matrix:
        """Centred flux-form discretization of ``b . grad`` acting on scalars.

        Exactly skew-symmetric whenever ``div b = 0`` discretely.
        """
        bu, bv = np.asarray(b[: self.grid.n_u]), np.asarray(b[self.grid.n_u :])
        return (self.dx_u2c @ sp.diags(bu) @ self.avx_c2u
                + self.dy_v2c @ sp.diags(bv) @ self.avy_c2v).tocsr()

    def adv_by_velocity(self, theta: ScalarField) -> sp.csr_matrix:
        """Matrix of ``b -> adv(b) @ theta`` (the same bilinear form, linear in ``b``)."""
        return sp.hstack([self.dx_u2c @ sp.diags(self.avx_c2u @ theta),
                          self.dy_v2c @ sp.diags(self.avy_c2v @ theta)], format="csr")

    def convect(self, a: VelocityField, c: VelocityField) -> VelocityField:
        """Divergence-form convection ``div(a c)`` of velocity ``c`` by velocity ``a``."""
        return self.convect_transport(a) @ np.asarray(c)

    def convect_transport(self, a: VelocityField) -> sp.csr_matrix:
        """Matrix of ``c -> convect(a, c)``; skew-symmetric for discretely solenoidal ``a``."""
        nu = self.grid.n_u
        au, av = np.asarray(a[:nu]), np.asarray(a[nu:])
        uu = (-self.dx_u2c.T @ sp.diags(self.avx_u2c @ au) @ self.avx_u2c
              + self.dy_n2u @ sp.diags(self.avx_v2n @ av) @ self.avy_u2n)
        vv = (-self.dy_v2c.T @ sp.diags(self.avy_v2c @ av) @ self.avy_v2c
              + self.dx_n2v @ sp.diags(self.avy_u2n @ au) @ self.avx_v2n)
        return sp.block_diag([uu, vv], format="csr")

    def convect_convector(self, c: VelocityField) -> sp.csr_matrix:
        """Matrix of ``a -> convect(a, c)``."""
        nu = self.grid.n_u
        cu, cv = np.asarray(c[:nu]), np.asarray(c[nu:])
        uu = -self.dx_u2c.T @ sp.diags(self.avx_u2c @ cu) @ self.avx_u2c
        uv = self.dy_n2u @ sp.diags(self.avy_u2n @ cu) @ self.avx_v2n
        vu = self.dx_n2v @ sp.diags(self.avx_v2n @ cv) @ self.avy_u2n
        vv = -self.dy_v2c.T @ sp.diags(self.avy_v2c @ cv) @ self.avy_v2c
        return sp.bmat([[uu, uv], [vu, vv]], format="csr")


@lru_cache(maxsize=16)
def assemble_diff_ops(grid: Grid) -> DiffOps:
    """Assemble the second-order MAC operators for ``grid`` (cached per grid)."""
    nx, ny, hx, hy = grid.nx, grid.ny, grid.hx, grid.hy
    eye = sp.identity
    dx, dy = _diff_cells_from_faces(nx, hx), _diff_cells_from_faces(ny, hy)
    ax, ay = _avg_faces_from_cells(nx), _avg_faces_from_cells(ny)
    lxf, lyf = _lap_dirichlet_faces(nx, hx), _lap_dirichlet_faces(ny, hy)
    lxc, lyc = _lap_dirichlet_cells(nx, hx), _lap_dirichlet_cells(ny, hy)

    kron = lambda a, b: sp.kron(a, b, format="csr")  # noqa: E731
    lap_u = kron(lxf, eye(ny)) + kron(eye(nx - 1), lyc)
    lap_v = kron(lxc, eye(ny - 1)) + kron(eye(nx), lyf)
    lap_s = kron(lxc, eye(ny)) + kron(eye(nx), lyc)
    dx_u2c = kron(dx, eye(ny))
    dy_v2c = kron(eye(nx), dy)
    div = sp.hstack([dx_u2c, dy_v2c], format="csr")
    return DiffOps(
        grid=grid, lap_u=lap_u, lap_v=lap_v, lap_s=lap_s, div=div, grad=(-div.T).tocsr(),
        dx_u2c=dx_u2c, dy_v2c=dy_v2c,
        avx_c2u=kron(ax, eye(ny)), avy_c2v=kron(eye(nx), ay),
        avx_u2c=kron(ax.T, eye(ny)), avy_v2c=kron(eye(nx), ay.T),
        avy_u2n=kron(eye(nx - 1), ay), avx_v2n=kron(ax, eye(ny - 1)),
        dy_n2u=kron(eye(nx - 1), dy), dx_n2v=kron(dx, eye(ny - 1)),
    )


@lru_cache(maxsize=16)
def divfree_basis(grid: Grid) -> sp.csr_matrix:
    """Discrete curl of nodal stream functions: a full-rank basis of ``ker(div)``.

    Column ``k`` is the velocity of a unit stream-function value at interior
    node ``k``; ``u = d(psi)/dy``, ``v = -d(psi)/dx`` with ``psi = 0`` on the
    walls. ``div @ Z`` vanishes identically because each entry is a sum of
    equal and opposite products.
    """
    nx, ny = grid.nx, grid.ny
    dx, dy = _diff_cells_from_faces(nx, grid.hx), _diff_cells_from_faces(ny, grid.hy)
    zu = sp.kron(sp.identity(nx - 1), dy)
    zv = -sp.kron(dx, sp.identity(ny - 1))
    return sp.vstack([zu, zv], format="csr")


@lru_cache(maxsize=16)
def _pressure_solver(grid: Grid):
    ops = assemble_diff_ops(grid)
    lap = (ops.div @ ops.grad).tocsc()
    n = grid.n_scalar
    ones = sp.csc_matrix(np.ones((n, 1)) / n)
    # Bordered system pins the pressure mean to zero.
    bordered = sp.bmat([[lap, ones], [ones.T, None]], format="csc")
    return lap, spla.splu(bordered)


def solve_pressure(grid: Grid, rhs: ScalarField, rtol: float = 1e-10) -> ScalarField:
    """Solve ``div grad p = rhs`` with zero-mean ``p``; ``rhs`` must have zero sum."""
    lap, lu = _pressure_solver(grid)
    rhs = np.asarray(rhs, dtype=float)
    sol = lu.solve(np.concatenate([rhs, [0.0]]))
    p = sol[:-1]
    resid = np.linalg.norm(lap @ p - rhs)
    scale = max(np.linalg.norm(rhs), np.finfo(float).tiny)
    if resid > rtol * scale and resid > 1e-14:
        raise PoissonSolveError(f"pressure Poisson residual {resid:.3e} exceeds {rtol * scale:.3e}")
    return p


def leray_project(grid: Grid, u: VelocityField) -> VelocityField:
    """Helmholtz-Leray projection: remove the discrete gradient part of ``u``.

    Returns ``u - grad p`` where ``div grad p = div u``; the result is
    discretely divergence-free and fields already solenoidal are returned
    unchanged.
    """
    u = np.asarray(u, dtype=float)
    if u.shape != (grid.n_vel,):
        raise ValueError(f"velocity must have shape ({grid.n_vel},), got {u.shape}")
    if not np.all(np.isfinite(u)):
        raise ValueError("velocity has non-finite entries")
    ops = assemble_diff_ops(grid)
    p = solve_pressure(grid, ops.div @ u)
    return u - ops.grad @ p


@lru_cache(maxsize=16)
def boundary_lifting(grid: Grid) -> sp.csr_matrix:
    """Map boundary-face values to the ghost-cell contribution of the Laplacian.

    For a cell next to a wall carrying value ``v`` the ghost is ``2v - h_P``,
    so the Laplacian picks up ``2 v / h_n**2``. Shape ``(n_scalar, n_boundary)``.
    """
    nx, ny = grid.nx, grid.ny
    rows, vals = [], []
    for side, k in grid.boundary_faces():
        if side == "left":
            rows.append(0 * ny + k)
            vals.append(2 / grid.hx**2)
        elif side == "right":
            rows.append((nx - 1) * ny + k)
            vals.append(2 / grid.hx**2)
        elif side == "bottom":
            rows.append(k * ny)
            vals.append(2 / grid.hy**2)
        else:
            rows.append(k * ny + ny - 1)
            vals.append(2 / grid.hy**2)
    cols = np.arange(grid.n_boundary)
    return sp.csr_matrix((vals, (rows, cols)), shape=(grid.n_scalar, grid.n_boundary))


def normal_derivative(grid: Grid, f: ScalarField) -> np.ndarray:
    """Outward normal derivative on every boundary face of a zero-trace scalar.

    Second-order one-sided difference through the wall value 0 and the two
    nearest cell centres: ``-(9 f1 - f2) / (3 h)``.
    """
    a = np.asarray(f).reshape(grid.nx, grid.ny)
    out = np.empty(grid.n_boundary, dtype=a.dtype)
    out[grid.side_slice("left")] = -(9 * a[0, :] - a[1, :]) / (3 * grid.hx)
    out[grid.side_slice("right")] = -(9 * a[-1, :] - a[-2, :]) / (3 * grid.hx)
    out[grid.side_slice("bottom")] = -(9 * a[:, 0] - a[:, 1]) / (3 * grid.hy)
    out[grid.side_slice("top")] = -(9 * a[:, -1] - a[:, -2]) / (3 * grid.hy)
    return out
