"""Discrete translated Boussinesq model: generator, adjoint, Dirichlet lifting, nonlinearities.

A state ``w`` is the concatenation ``[c, h]`` where ``c`` holds stream-function
coordinates of the velocity perturbation (``z = Z @ c``, so ``div z = 0`` by
construction) and ``h`` the temperature perturbation at cell centres.

The weighted inner product on states is ``<w1, w2> = w1 @ W @ w2`` with
``W = blkdiag(hx*hy*Z.T@Z, hx*hy*I)``; it equals the discrete L2 pairing of
the underlying fields. The generator is stored as the pencil ``(K, W)``,
``A = W^{-1} K``, which keeps everything sparse. The adjoint with respect to
``W`` is ``A* = W^{-1} K.T``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import TYPE_CHECKING

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import (
    ControlRegions,
    Grid,
    assemble_diff_ops,
    boundary_lifting,
    divfree_basis,
    leray_project,
)

if TYPE_CHECKING:  # pragma: no cover
    from .equilibrium import EquilibriumState, Forcing
    from .synthesis import FeedbackLaw


# --------------------------------------------------------------------------
# state layout


def stream_gram(grid: Grid) -> sp.csc_matrix:
    """Mass matrix of the stream-function coordinates, ``hx*hy*Z.T@Z``."""
    z = divfree_basis(grid)
    return (grid.cell_area * (z.T @ z)).tocsc()


@dataclass(frozen=True, eq=False)
class StateLayout:
    """Split, join and convert state vectors for a given grid."""

    grid: Grid

    @property
    def n_fluid(self) -> int:
        return self.grid.n_stream

    @property
    def n_heat(self) -> int:
        return self.grid.n_scalar

    @property
    def size(self) -> int:
        return self.n_fluid + self.n_heat

    @cached_property
    def basis(self) -> sp.csr_matrix:
        return divfree_basis(self.grid)

    @cached_property
    def weight(self) -> sp.csc_matrix:
        """The inner-product matrix ``W`` on states."""
        return sp.block_diag(
            [stream_gram(self.grid), self.grid.cell_area * sp.identity(self.n_heat)], format="csc"
        )

    @cached_property
    def _gram_lu(self):
        return spla.splu(stream_gram(self.grid))

    def split(self, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        w = np.asarray(w)
        if w.shape[0] != self.size:
            raise ValueError(f"state must have length {self.size}, got {w.shape[0]}")
        return w[: self.n_fluid], w[self.n_fluid :]

    def join(self, c: np.ndarray, h: np.ndarray) -> np.ndarray:
        return np.concatenate([c, h])

    def velocity(self, w: np.ndarray) -> np.ndarray:
        return self.basis @ self.split(w)[0]

    def to_fields(self, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        c, h = self.split(w)
        return self.basis @ c, np.array(h)

    def fluid_coords(self, vel: np.ndarray) -> np.ndarray:
        """Coordinates of the Leray projection of ``vel``: ``G^{-1} Z.T M vel``."""
        rhs = self.grid.cell_area * (self.basis.T @ np.asarray(vel))
        return self.solve_gram(rhs)

    def solve_gram(self, rhs: np.ndarray) -> np.ndarray:
        rhs = np.asarray(rhs)
        if np.iscomplexobj(rhs):
            return self._gram_lu.solve(rhs.real) + 1j * self._gram_lu.solve(rhs.imag)
        return self._gram_lu.solve(rhs)

    def from_fields(self, vel: np.ndarray, theta: np.ndarray) -> np.ndarray:
        """Build a state from a (not necessarily solenoidal) velocity and a scalar field."""
        return self.join(self.fluid_coords(vel), np.asarray(theta, dtype=float))

    def solve_weight(self, rhs: np.ndarray) -> np.ndarray:
        c, h = self.split(rhs)
        return self.join(self.solve_gram(c), np.asarray(h) / self.grid.cell_area)

    def inner(self, w1: np.ndarray, w2: np.ndarray):
        """Weighted pairing ``w1^H W w2`` (conjugate-linear in the first slot)."""
        return np.vdot(w1, self.weight @ w2)

    def norm(self, w: np.ndarray) -> float:
        return float(np.sqrt(max(np.real(self.inner(w, w)), 0.0)))


@lru_cache(maxsize=16)
def layout_for(grid: Grid) -> StateLayout:
    """Shared (cached) layout per grid, so factorizations are reused."""
    return StateLayout(grid)


# --------------------------------------------------------------------------
# linearization kernels (shared with the steady solver)


def oseen_operator(grid: Grid, y_e: np.ndarray) -> sp.csr_matrix:
    """Velocity-space matrix of ``L_e(z) = (y_e . grad) z + (z . grad) y_e``."""
    ops = assemble_diff_ops(grid)
    return (ops.convect_transport(y_e) + ops.convect_convector(y_e)).tocsr()


def heat_operator(grid: Grid, y_e: np.ndarray, kappa: float) -> sp.csr_matrix:
    """Scalar matrix of ``kappa*Lap - y_e . grad`` (i.e. ``-B_q`` with Dirichlet elimination)."""
    ops = assemble_diff_ops(grid)
    return (kappa * ops.lap_s - ops.adv(y_e)).tocsr()


def linearization_blocks(grid: Grid, y: np.ndarray, theta: np.ndarray, nu: float, kappa: float,
                         gamma: float) -> dict[str, sp.csr_matrix]:
    """Weighted blocks of the linearization about ``(y, theta)``.

    Returned blocks satisfy ``W d/dt [c; h] = [[oseen, c_gamma], [c_thetae, heat]] [c; h]``.
    """
    ops = assemble_diff_ops(grid)
    z = divfree_basis(grid)
    area = grid.cell_area
    oseen = area * (z.T @ (nu * ops.lap_vel - oseen_operator(grid, y)) @ z)
    v_pick = sp.vstack([sp.csr_matrix((grid.n_u, grid.n_v)), sp.identity(grid.n_v)])
    c_gamma = area * gamma * (z.T @ v_pick @ ops.avy_c2v)
    c_thetae = -area * (ops.adv_by_velocity(theta) @ z)
    heat = area * heat_operator(grid, y, kappa)
    return {"oseen": oseen.tocsr(), "c_gamma": sp.csr_matrix(c_gamma),
            "c_thetae": sp.csr_matrix(c_thetae), "heat": heat.tocsr()}


def buoyancy_field(grid: Grid, theta: np.ndarray) -> np.ndarray:
    """Velocity field ``theta * e_d`` interpolated to the faces."""
    ops = assemble_diff_ops(grid)
    return np.concatenate([np.zeros(grid.n_u), ops.avy_c2v @ np.asarray(theta)])


# --------------------------------------------------------------------------
# generator and adjoint


@dataclass(frozen=True, eq=False)
class BlockOperator:
    """Generator of the linearized dynamics as the pencil ``(K, W)``.

    ``blocks`` holds the four weighted sub-blocks (``oseen``, ``c_gamma``,
    ``c_thetae``, ``heat``); the dense matrix ``A = W^{-1} K`` is formed on
    first access of :attr:`dense`.
    """

    grid: Grid
    K: sp.csr_matrix
    blocks: dict
    nu: float
    kappa: float
    gamma: float
    y_e: np.ndarray = field(repr=False)
    theta_e: np.ndarray = field(repr=False)
    is_adjoint: bool = False

    @cached_property
    def layout(self) -> StateLayout:
        return layout_for(self.grid)

    @property
    def W(self) -> sp.csc_matrix:
        return self.layout.weight

    @property
    def size(self) -> int:
        return self.layout.size

    def apply(self, w: np.ndarray) -> np.ndarray:
        return self.layout.solve_weight(self.K @ w)

    @cached_property
    def dense(self) -> np.ndarray:
        """Dense ``A = W^{-1} K`` (only sensible for moderate grids)."""
        n_f = self.layout.n_fluid
        kd = self.K.toarray()
        out = np.empty_like(kd)
        out[:n_f] = sla.cho_solve(sla.cho_factor(stream_gram(self.grid).toarray()), kd[:n_f])
        out[n_f:] = kd[n_f:] / self.grid.cell_area
        return out

    @cached_property
    def _weight_chol(self) -> np.ndarray:
        return np.linalg.cholesky(self.W.toarray())

    @cached_property
    def opnorm(self) -> float:
        """Operator 2-norm induced by the weighted inner product."""
        # ||A||_W = ||L^T A L^{-T}||_2 where W = L L^T.
        chol = self._weight_chol
        sym = chol.T @ sla.solve_triangular(chol, self.K.toarray(), lower=True).T
        return float(np.linalg.norm(sym.T, 2))


def assemble_generator(eq: "EquilibriumState", forcing: "Forcing", grid: Grid,
                       regions: ControlRegions | None = None) -> BlockOperator:
    """Linearize the Boussinesq system about ``eq``.

    ``regions`` is accepted for signature symmetry with the other stages and
    checked for grid consistency; the free generator does not depend on it.
    """
    _check_grid(eq.y_e, grid.n_vel, "y_e")
    _check_grid(eq.theta_e, grid.n_scalar, "theta_e")
    if regions is not None and regions.grid != grid:
        raise ValueError("regions were built on a different grid")
    blk = linearization_blocks(grid, eq.y_e, eq.theta_e, forcing.nu, forcing.kappa, forcing.gamma)
    big = sp.bmat([[blk["oseen"], blk["c_gamma"]], [blk["c_thetae"], blk["heat"]]], format="csr")
    return BlockOperator(grid, big, blk, forcing.nu, forcing.kappa, forcing.gamma,
                         np.asarray(eq.y_e), np.asarray(eq.theta_e))


def assemble_adjoint(op: BlockOperator) -> BlockOperator:
    """Adjoint generator, assembled from the adjoint pieces rather than by transposition.

    Fluid block: ``nu*Lap - L_e^*``; coupling into the fluid: ``-P(psi grad theta_e)``;
    coupling into the heat: ``gamma (P phi) . e_d``; heat block: ``kappa*Lap + y_e . grad``.
    Equality with ``K.T`` is a test, not an assumption.
    """
    if op.is_adjoint:
        raise ValueError("operator is already an adjoint")
    grid = op.grid
    ops = assemble_diff_ops(grid)
    z = divfree_basis(grid)
    area = grid.cell_area
    le_adj = oseen_operator(grid, op.y_e).T
    oseen = area * (z.T @ (op.nu * ops.lap_vel - le_adj) @ z)
    # P(psi grad theta_e): the transpose of the bilinear transport in its velocity slot.
    to_fluid = -area * (z.T @ ops.adv_by_velocity(op.theta_e).T)
    v_pick = sp.vstack([sp.csr_matrix((grid.n_u, grid.n_v)), sp.identity(grid.n_v)])
    to_heat = area * op.gamma * (ops.avy_c2v.T @ v_pick.T @ z)
    heat = area * (op.kappa * ops.lap_s + ops.adv(op.y_e))
    blk = {"oseen": sp.csr_matrix(oseen), "c_thetae": sp.csr_matrix(to_fluid),
           "c_gamma": sp.csr_matrix(to_heat), "heat": sp.csr_matrix(heat)}
    big = sp.bmat([[blk["oseen"], blk["c_thetae"]], [blk["c_gamma"], blk["heat"]]], format="csr")
    return BlockOperator(grid, big, blk, op.nu, op.kappa, op.gamma, op.y_e, op.theta_e,
                         is_adjoint=True)


def _check_grid(arr, size, name):
    if np.asarray(arr).shape != (size,):
        raise ValueError(f"{name} has shape {np.shape(arr)}, expected ({size},)")


# --------------------------------------------------------------------------
# Dirichlet map


@dataclass(frozen=True, eq=False)
class DirichletMapD:
    """Lifting of boundary temperatures: ``psi = D v`` solves ``kappa Lap psi - y_e.grad psi = 0``.

    Boundary vectors are full-length (all faces, see :meth:`Grid.boundary_faces`);
    use :meth:`extend` to build one from values on the control segment.
    """

    grid: Grid
    kappa: float
    regions: ControlRegions | None
    heat: sp.csc_matrix = field(repr=False)
    lifting: sp.csr_matrix = field(repr=False)

    @cached_property
    def _lu(self):
        return spla.splu(self.heat)

    def extend(self, v_gamma: np.ndarray) -> np.ndarray:
        if self.regions is None:
            raise ValueError("no control segment attached")
        idx = self.regions.gamma_indices
        v_gamma = np.asarray(v_gamma, dtype=float)
        if v_gamma.shape != idx.shape:
            raise ValueError(f"expected {idx.size} segment values, got {v_gamma.shape}")
        out = np.zeros(self.grid.n_boundary)
        out[idx] = v_gamma
        return out

    def forcing(self, v: np.ndarray) -> np.ndarray:
        """``B_q D v`` as a forcing on scalar unknowns (the lifting term)."""
        return self.kappa * (self.lifting @ np.asarray(v, dtype=float))

    def apply(self, v: np.ndarray, rtol: float = 1e-10) -> np.ndarray:
        rhs = -self.forcing(v)
        psi = self._lu.solve(rhs)
        resid = np.linalg.norm(self.heat @ psi - rhs)
        if resid > rtol * max(np.linalg.norm(rhs), 1e-300) and resid > 1e-13:
            raise RuntimeError(f"Dirichlet-map solve residual {resid:.3e}")
        return psi

    def apply_operator_to_lift(self, v: np.ndarray) -> np.ndarray:
        """``B_q`` applied to ``D v`` through the eliminated operator (second route to :meth:`forcing`)."""
        return -(self.heat @ self.apply(v))

    def adjoint_boundary_flux(self, f: np.ndarray) -> np.ndarray:
        """Discrete ``D* B* f`` for a zero-trace scalar ``f``, one value per boundary face.

        Defined by ``<B D v, f>_Omega = <v, D* B* f>_Gamma``; this is a first-order
        approximation of ``-kappa df/dnu``.
        """
        weights = self.grid.boundary_weights()
        return self.grid.cell_area * (self.forcing_matrix.T @ np.asarray(f)) / weights

    @cached_property
    def forcing_matrix(self) -> sp.csr_matrix:
        return (self.kappa * self.lifting).tocsr()


def dirichlet_map(eq: "EquilibriumState", grid: Grid, regions: ControlRegions | None = None,
                  kappa: float | None = None) -> DirichletMapD:
    """Build the Dirichlet map about ``eq``; ``kappa`` defaults to ``eq.forcing.kappa``."""
    if kappa is None:
        kappa = eq.forcing.kappa
    if not kappa > 0:
        raise ValueError(f"kappa must be positive, got {kappa}")
    return DirichletMapD(grid, float(kappa), regions,
                         heat_operator(grid, eq.y_e, kappa).tocsc(), boundary_lifting(grid))


# --------------------------------------------------------------------------
# nonlinearity and control forcing


def eval_nonlinear(grid: Grid, w: np.ndarray) -> np.ndarray:
    """Quadratic terms ``(P[(z.grad)z], z.grad h)`` in state layout.

    They enter the dynamics with a minus sign: ``w' = A w - eval_nonlinear(w) + ...``.
    """
    layout = layout_for(grid)
    ops = assemble_diff_ops(grid)
    c, h = layout.split(w)
    z = layout.basis @ c
    return layout.join(layout.fluid_coords(ops.convect(z, z)), ops.adv(z) @ h)


def eval_nonlinear_weighted(grid: Grid, w: np.ndarray) -> np.ndarray:
    """``W @ eval_nonlinear(grid, w)`` without the Gram solve."""
    layout = layout_for(grid)
    ops = assemble_diff_ops(grid)
    c, h = layout.split(w)
    z = layout.basis @ c
    area = grid.cell_area
    return layout.join(area * (layout.basis.T @ ops.convect(z, z)), area * (ops.adv(z) @ h))


def control_injection(mu: np.ndarray, nu_bdry: np.ndarray, law: "FeedbackLaw") -> np.ndarray:
    """State forcing ``P(m sum mu_k u_k)  (+)  B_q D(sum nu_k f_k)``."""
    mu = np.asarray(mu, dtype=float)
    nu_bdry = np.asarray(nu_bdry, dtype=float)
    if mu.shape != (law.K,) or nu_bdry.shape != (law.K,):
        raise ValueError(f"expected {law.K} coefficients, got {mu.shape} and {nu_bdry.shape}")
    return law.input_matrix @ np.concatenate([nu_bdry, mu])


def control_input_matrix(grid: Grid, regions: ControlRegions, dmap: DirichletMapD,
                         shapes: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    """Columns ``[B_q D f_1 .. B_q D f_K, P(m u_1) .. P(m u_K)]`` in state layout.

    ``shapes`` is ``(n_boundary, K)``, ``vectors`` is ``(n_vel, K)``.
    """
    layout = layout_for(grid)
    k = shapes.shape[1]
    masked = regions.vel_mask[:, None] * vectors
    cols = np.zeros((layout.size, 2 * k))
    for j in range(k):
        cols[layout.n_fluid :, j] = dmap.forcing(shapes[:, j])
        cols[: layout.n_fluid, k + j] = layout.fluid_coords(masked[:, j])
    return cols


def project_velocity(grid: Grid, vel: np.ndarray) -> np.ndarray:
    """Convenience wrapper returning the solenoidal part of ``vel``."""
    return leray_project(grid, vel)
