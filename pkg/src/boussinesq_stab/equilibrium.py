"""Steady states of the forced Boussinesq system.

Two routes: :func:`solve_steady` runs a damped Newton iteration for given
forcing, :func:`manufactured_equilibrium` prescribes the state and
back-computes the forcing so that the discrete steady equations hold to
round-off.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from ._validation import check_int, check_positive, check_vector
from .geometry import ControlRegions, Grid, assemble_diff_ops, divfree_basis, solve_pressure
from .operators import StateLayout, buoyancy_field, layout_for, linearization_blocks

PROFILES = ("vortex", "thermal", "convection")


@dataclass(frozen=True, eq=False)
class Forcing:
    """Body force ``f`` (face velocity layout), heat source ``g`` and physical constants."""

    f: np.ndarray
    g: np.ndarray
    nu: float = 1.0
    kappa: float = 1.0
    gamma: float = 1.0
    theta_bar: float = 0.0

    def __post_init__(self):
        check_positive(self.nu, "nu")
        check_positive(self.kappa, "kappa")
        check_positive(self.gamma, "gamma", strict=False)
        check_positive(self.theta_bar, "theta_bar", strict=False)
        if not (np.all(np.isfinite(self.f)) and np.all(np.isfinite(self.g))):
            raise ValueError("forcing has non-finite entries")

    @classmethod
    def zero(cls, grid: Grid, **params) -> "Forcing":
        return cls(np.zeros(grid.n_vel), np.zeros(grid.n_scalar), **params)


@dataclass(frozen=True, eq=False)
class EquilibriumState:
    y_e: np.ndarray
    theta_e: np.ndarray
    pi_e: np.ndarray
    residual_norm: float
    forcing: Forcing = field(repr=False)
    converged: bool = True
    iterations: int = 0


def steady_residual(grid: Grid, forcing: Forcing, y: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Weighted residual ``[Z^T M r_mom, M r_heat]`` of the steady equations.

    ``r_mom = f + nu Lap y - (y.grad)y + gamma (theta - theta_bar) e_d`` (the
    pressure gradient is annihilated by ``Z^T M``) and
    ``r_heat = g + kappa Lap theta - y.grad theta``.
    """
    ops = assemble_diff_ops(grid)
    z = divfree_basis(grid)
    area = grid.cell_area
    mom = (forcing.f + forcing.nu * (ops.lap_vel @ y) - ops.convect(y, y)
           + forcing.gamma * buoyancy_field(grid, theta - forcing.theta_bar))
    heat = forcing.g + forcing.kappa * (ops.lap_s @ theta) - ops.adv(y) @ theta
    return np.concatenate([area * (z.T @ mom), area * heat])


def _residual_norm(layout: StateLayout, r: np.ndarray) -> float:
    # Discrete L2 norm of the projected residual field: sqrt(r^T W^{-1} r).
    return float(np.sqrt(max(r @ layout.solve_weight(r), 0.0)))


def _recover_pressure(grid: Grid, forcing: Forcing, y: np.ndarray, theta: np.ndarray) -> np.ndarray:
    ops = assemble_diff_ops(grid)
    mom = (forcing.f + forcing.nu * (ops.lap_vel @ y) - ops.convect(y, y)
           + forcing.gamma * buoyancy_field(grid, theta - forcing.theta_bar))
    # grad pi is the gradient part of the momentum balance.
    return solve_pressure(grid, ops.div @ mom)


def solve_steady(forcing: Forcing, grid: Grid, regions: ControlRegions | None = None,
                 tol: float = 1e-10, max_iter: int = 50, initial=None) -> EquilibriumState:
    """Damped Newton iteration for the steady Boussinesq equations.

    Parameters
    ----------
    forcing : Forcing
    grid : Grid
    regions : ControlRegions, optional
        Only checked for grid consistency.
    tol : float
        Target for the discrete L2 norm of the projected residual.
    max_iter : int
    initial : tuple of (velocity, temperature), optional
        Starting guess; defaults to zero, which fixes the branch deterministically.

    Returns
    -------
    EquilibriumState
        ``converged`` is False if ``max_iter`` was exhausted; the last iterate is returned.
    """
    check_positive(tol, "tol")
    max_iter = check_int(max_iter, "max_iter", 1)
    check_vector(forcing.f, grid.n_vel, "f")
    check_vector(forcing.g, grid.n_scalar, "g")
    if regions is not None and regions.grid != grid:
        raise ValueError("regions were built on a different grid")
    layout = layout_for(grid)
    z = layout.basis

    if initial is None:
        w = np.zeros(layout.size)
    else:
        w = layout.from_fields(*initial)

    def residual(state):
        c, h = layout.split(state)
        return steady_residual(grid, forcing, z @ c, h)

    r = residual(w)
    rnorm = _residual_norm(layout, r)
    it = 0
    while rnorm > tol and it < max_iter:
        c, h = layout.split(w)
        blk = linearization_blocks(grid, z @ c, h, forcing.nu, forcing.kappa, forcing.gamma)
        jac = sp.bmat([[blk["oseen"], blk["c_gamma"]], [blk["c_thetae"], blk["heat"]]], format="csc")
        try:
            step = spla.spsolve(jac, -r)
        except RuntimeError as exc:  # pragma: no cover - exact singularity
            raise np.linalg.LinAlgError(f"singular Jacobian at Newton step {it}") from exc
        if not np.all(np.isfinite(step)):
            raise np.linalg.LinAlgError(f"singular Jacobian at Newton step {it}")
        alpha = 1.0
        for _ in range(21):
            trial = w + alpha * step
            r_trial = residual(trial)
            n_trial = _residual_norm(layout, r_trial)
            if n_trial < rnorm:
                break
            alpha *= 0.5
        w, r, rnorm = trial, r_trial, n_trial
        it += 1

    y, theta = layout.to_fields(w)
    return EquilibriumState(y, theta, _recover_pressure(grid, forcing, y, theta), rnorm,
                            forcing, converged=rnorm <= tol, iterations=it)


def manufactured_equilibrium(profile_id: str, amplitude: float, grid: Grid, *, nu: float = 1.0,
                             kappa: float = 1.0, gamma: float = 1.0, theta_bar: float = 0.0,
                             thermal_amplitude: float | None = None) -> EquilibriumState:
    """Prescribe an equilibrium and back-compute the forcing that makes it exact.

    Profiles
    --------
    ``vortex``
        ``y_e = curl psi`` with nodal ``psi = A sin^2(pi x/lx) sin^2(pi y/ly)``, ``theta_e = 0``.
    ``thermal``
        ``y_e = 0``, ``theta_e = A sin(pi x/lx) sin(pi y/ly)`` (internally heated layer).
    ``convection``
        Both of the above; ``thermal_amplitude`` sets the temperature amplitude
        (defaults to ``amplitude``).
    """
    if profile_id not in PROFILES:
        raise ValueError(f"unknown profile {profile_id!r}; choose from {PROFILES}")
    if not np.isfinite(amplitude):
        raise ValueError("amplitude must be finite")
    y = np.zeros(grid.n_vel)
    theta = np.zeros(grid.n_scalar)
    if profile_id in ("vortex", "convection"):
        xn, yn = grid.nodes()
        psi = amplitude * np.sin(np.pi * xn / grid.lx) ** 2 * np.sin(np.pi * yn / grid.ly) ** 2
        y = divfree_basis(grid) @ psi.ravel()
    if profile_id in ("thermal", "convection"):
        amp_t = amplitude if thermal_amplitude is None else thermal_amplitude
        theta = grid.sample_scalar(lambda x, yy: amp_t * np.sin(np.pi * x / grid.lx)
                                   * np.sin(np.pi * yy / grid.ly))

    ops = assemble_diff_ops(grid)
    f = (-nu * (ops.lap_vel @ y) + ops.convect(y, y)
         - gamma * buoyancy_field(grid, theta - theta_bar))
    g = -kappa * (ops.lap_s @ theta) + ops.adv(y) @ theta
    forcing = Forcing(f, g, nu, kappa, gamma, theta_bar)
    layout = layout_for(grid)
    r = steady_residual(grid, forcing, y, theta)
    return EquilibriumState(y, theta, np.zeros(grid.n_scalar), _residual_norm(layout, r), forcing)


def with_forcing(eq: EquilibriumState, forcing: Forcing) -> EquilibriumState:
    return replace(eq, forcing=forcing)
