"""Finite-dimensional feedback synthesis on the unstable eigenspace.

Inputs are ``K`` boundary temperature shapes ``f_k`` on the control segment
and ``K`` interior velocity vectors ``u_k`` supported in the collar, where
``K`` is the largest geometric multiplicity among unstable eigenvalues. The
projected control system in real coordinates is ``xi' = Lam xi + B c`` with
``c = [nu_1..nu_K, mu_1..mu_K]``; a gain ``Q`` places the spectrum of
``Lam + B Q`` and the feedback acts through ``c = Q L^T W w``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.signal

from .geometry import ControlRegions, leray_project, normal_derivative
from .operators import DirichletMapD, control_input_matrix, dirichlet_map
from .spectral import ProjectorPN, SpectralDecomposition

MODES = ("full", "reduced_d2", "reduced_13", "reduced_23")


class PlacementError(RuntimeError):
    """Pole placement missed its targets."""


class RankCheckFailure(RuntimeError):
    """The controllability rank test failed after all resampling attempts."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


# --------------------------------------------------------------------------
# boundary shapes


@dataclass(frozen=True, eq=False)
class BoundaryPool:
    """Orthonormal (on the control segment) span of adjoint normal-derivative traces.

    ``shapes`` is ``(n_gamma, P)``: segment values of each pool member;
    ``raw_norms`` and ``degenerate`` describe the traces before orthonormalization.
    """

    regions: ControlRegions
    shapes: np.ndarray
    raw_norms: np.ndarray
    degenerate: np.ndarray

    @property
    def size(self) -> int:
        return self.shapes.shape[1]

    def full(self, k: int | None = None) -> np.ndarray:
        """Members extended by zero to every boundary face."""
        cols = self.shapes if k is None else self.shapes[:, :k]
        out = np.zeros((self.regions.grid.n_boundary, cols.shape[1]))
        out[self.regions.gamma_indices] = cols
        return out


def _adjoint_heat_traces(dec: SpectralDecomposition, regions: ControlRegions) -> np.ndarray:
    """Real and imaginary parts of ``d psi*/d nu`` on the segment for each unstable left vector."""
    lay = dec.layout
    idx = regions.gamma_indices
    traces = []
    for k in range(dec.N):
        psi = dec.left[lay.n_fluid :, k]
        scale = np.sqrt(lay.grid.cell_area) * np.linalg.norm(psi)
        psi = psi / scale if scale > 0 else psi
        t = normal_derivative(lay.grid, psi)[idx]
        traces.append(t.real)
        if np.any(psi.imag != 0):
            traces.append(t.imag)
    return np.array(traces).T if traces else np.zeros((idx.size, 0))


def boundary_shape_pool(dec: SpectralDecomposition, regions: ControlRegions,
                        degenerate_tol: float = 1e-12) -> BoundaryPool:
    """Gram-Schmidt the normal-derivative traces of the adjoint temperature components.

    Raises
    ------
    ValueError
        When every trace is degenerate (no boundary authority over the unstable space).
    """
    traces = _adjoint_heat_traces(dec, regions)
    wts = regions.grid.boundary_weights()[regions.gamma_indices]
    norms = np.sqrt(wts @ traces**2) if traces.size else np.zeros(0)
    degenerate = norms <= degenerate_tol
    if dec.N and np.all(degenerate):
        raise ValueError("all adjoint traces vanish on the control segment")
    basis = []
    for j in np.argsort(-norms, kind="stable"):
        if degenerate[j]:
            continue
        v = traces[:, j].copy()
        for _ in range(2):  # re-orthogonalize once for stability
            for b in basis:
                v -= (wts @ (b * v)) * b
        nv = np.sqrt(wts @ v**2)
        if nv > 1e-10 * norms[j]:
            basis.append(v / nv)
    shapes = np.array(basis).T if basis else np.zeros((regions.gamma_indices.size, 0))
    return BoundaryPool(regions, shapes, norms, degenerate)


# --------------------------------------------------------------------------
# interior vectors


def _component_keep(mode: str, grid) -> np.ndarray:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if mode in ("reduced_13", "reduced_23"):
        raise ValueError(f"mode {mode!r} needs a three-dimensional grid")
    keep = np.ones(grid.n_vel, dtype=bool)
    if mode == "reduced_d2":
        keep[: grid.n_u] = False
    return keep


def candidate_vectors(regions: ControlRegions, K: int, mode: str = "full",
                      seed: int = 0, n_bumps: int = 2) -> np.ndarray:
    """Seeded random smooth bumps centred in the collar; ``(n_vel, K)``.

    Each vector is a sum of Gaussian bumps with random amplitudes in each
    component, Leray-projected, then restricted to the collar faces and to
    the components allowed by ``mode``.
    """
    grid = regions.grid
    keep = _component_keep(mode, grid) & regions.vel_mask
    rng = np.random.default_rng(seed)
    xc, yc = grid.cell_centers()
    centres = np.column_stack([xc.ravel()[regions.cell_mask], yc.ravel()[regions.cell_mask]])
    width = max(regions.d_collar * min(grid.hx, grid.hy), 2 * max(grid.hx, grid.hy))
    xu, yu = (a.ravel() for a in grid.u_points())
    xv, yv = (a.ravel() for a in grid.v_points())
    out = np.zeros((grid.n_vel, K))
    for k in range(K):
        field_ = np.zeros(grid.n_vel)
        for _ in range(n_bumps):
            x0, y0 = centres[rng.integers(len(centres))]
            au, av = rng.standard_normal(2)
            field_[: grid.n_u] += au * np.exp(-((xu - x0) ** 2 + (yu - y0) ** 2) / (2 * width**2))
            field_[grid.n_u :] += av * np.exp(-((xv - x0) ** 2 + (yv - y0) ** 2) / (2 * width**2))
        out[:, k] = np.where(keep, leray_project(grid, field_), 0.0)
    return out


# --------------------------------------------------------------------------
# control matrices and rank tests


@dataclass(frozen=True, eq=False)
class ControlMatrices:
    """Pairings of the inputs with the unstable adjoint eigenvectors.

    ``W[a, k] = <B_q D f_k, Phi*_a>`` (a boundary pairing equal to
    ``<f_k, D* B* psi*_a>_Gamma``) and ``U[a, k] = <P(m u_k), Phi*_a>`` (an
    interior pairing over the collar). ``B_real`` is the real-coordinate
    input matrix ``L^T W_state G``.
    """

    W: np.ndarray
    U: np.ndarray
    clusters: list
    mode: str
    B_real: np.ndarray | None = None
    input_matrix: np.ndarray | None = field(default=None, repr=False)
    shapes: np.ndarray | None = field(default=None, repr=False)
    vectors: np.ndarray | None = field(default=None, repr=False)
    seed: int | None = None

    @property
    def K(self) -> int:
        return self.W.shape[1]

    @property
    def B(self) -> np.ndarray:
        return np.hstack([self.W, self.U])


def build_control_matrices(dec: SpectralDecomposition, pool: BoundaryPool, regions: ControlRegions,
                           mode: str = "full", *, vectors: np.ndarray | None = None, seed: int = 0,
                           dmap: DirichletMapD | None = None) -> ControlMatrices:
    """Assemble ``W``, ``U`` and the real input matrix for ``K = max multiplicity`` inputs."""
    keep = _component_keep(mode, regions.grid)
    K = max(dec.multiplicities) if dec.N else 0
    if K > pool.size:
        raise ValueError(f"need K={K} boundary shapes but the pool has {pool.size}")
    if vectors is None:
        vectors = candidate_vectors(regions, K, mode, seed)
    vectors = np.where(keep[:, None], np.asarray(vectors, dtype=float), 0.0)
    if vectors.shape != (regions.grid.n_vel, K):
        raise ValueError(f"vectors must have shape ({regions.grid.n_vel}, {K})")
    if dmap is None:
        dmap = dirichlet_map(_EqView(dec.op), regions.grid, regions, kappa=dec.op.kappa)
    shapes = pool.full(K)
    G = control_input_matrix(regions.grid, regions, dmap, shapes, vectors)
    pair = dec.left.conj().T @ (dec.op.W @ G)
    R, L, _ = dec.real_form
    B_real = L.T @ (dec.op.W @ G)
    return ControlMatrices(pair[:, :K], pair[:, K:], dec.clusters, mode, B_real, G, shapes,
                           vectors, seed)


class _EqView:
    def __init__(self, op):
        self.y_e = op.y_e
        self.theta_e = op.theta_e


@dataclass(frozen=True)
class RankReport:
    passed: bool
    mode: str
    multiplicities: list
    ranks: list
    singular_values: list
    rank_tol: float
    attempts: int = 1
    seeds: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"passed": self.passed, "mode": self.mode, "multiplicities": self.multiplicities,
                "ranks": self.ranks, "singular_values": self.singular_values,
                "rank_tol": self.rank_tol, "attempts": self.attempts, "seeds": self.seeds}


def kalman_rank_check(cm: ControlMatrices, rank_tol: float = 1e-8) -> RankReport:
    """Per distinct eigenvalue, test ``rank [W_i, U_i] == ell_i`` by SVD."""
    ranks, svals, ells = [], [], []
    B = cm.B
    for c in cm.clusters:
        blk = B[c]
        sv = np.linalg.svd(blk, compute_uv=False) if blk.size else np.zeros(0)
        smax = sv[0] if sv.size else 0.0
        ranks.append(int(np.sum(sv > rank_tol * smax)) if smax > 0 else 0)
        svals.append([float(s) for s in sv])
        ells.append(int(c.size))
    passed = all(r == e for r, e in zip(ranks, ells))
    return RankReport(passed, cm.mode, ells, ranks, svals, rank_tol,
                      seeds=[] if cm.seed is None else [cm.seed])


@dataclass(frozen=True)
class WitnessReport:
    passed: bool
    mode: str
    smallest_singular_values: list
    ucp_tol: float

    def to_dict(self) -> dict:
        return {"passed": self.passed, "mode": self.mode,
                "smallest_singular_values": self.smallest_singular_values, "ucp_tol": self.ucp_tol}


def witness_rows(dec: SpectralDecomposition, regions: ControlRegions, mode: str = "full") -> list:
    """Per cluster, rows ``[d psi*/d nu on the segment | admissible phi* on the collar]``."""
    grid = regions.grid
    lay = dec.layout
    keep = _component_keep(mode, grid) & regions.vel_mask
    idx = regions.gamma_indices
    out = []
    for c in dec.clusters:
        rows = []
        for k in c:
            fl, ht = lay.split(dec.left[:, k])
            trace = normal_derivative(grid, ht)[idx]
            vel = (lay.basis @ fl)[keep]
            rows.append(np.concatenate([trace, vel]))
        out.append(np.array(rows))
    return out


def ucp_witness_check(dec: SpectralDecomposition, regions: ControlRegions, mode: str = "full",
                      ucp_tol: float = 1e-10, rows: list | None = None) -> WitnessReport:
    """Smallest singular value of each cluster's witness matrix must exceed ``ucp_tol``.

    A vanishing value means some adjoint eigenvector has zero boundary flux on
    the segment and zero admissible velocity in the collar simultaneously.
    """
    rows = witness_rows(dec, regions, mode) if rows is None else rows
    smin = []
    for r in rows:
        sv = np.linalg.svd(r, compute_uv=False)
        smin.append(float(sv[min(r.shape) - 1]) if r.shape[0] <= r.shape[1] else 0.0)
    return WitnessReport(all(s > ucp_tol for s in smin), mode, smin, ucp_tol)


def synthesize_inputs(dec, pool, regions, mode="full", *, seed=0, max_resample=10,
                      rank_tol=1e-8, dmap=None):
    """Build control matrices, resampling the interior vectors until the rank test passes.

    Returns
    -------
    (ControlMatrices, RankReport)
        The report's ``attempts``/``seeds`` record the resampling history; on
        failure the last attempt is returned with ``passed=False``.
    """
    seeds = []
    for attempt in range(max_resample + 1):
        s = seed + attempt
        seeds.append(s)
        cm = build_control_matrices(dec, pool, regions, mode, seed=s, dmap=dmap)
        rep = kalman_rank_check(cm, rank_tol)
        if rep.passed:
            break
    return cm, replace(rep, attempts=len(seeds), seeds=seeds)


# --------------------------------------------------------------------------
# pole placement and feedback law


def target_spectrum(N: int, gamma1: float, spread: float = 0.5) -> np.ndarray:
    return -gamma1 - spread * np.arange(N)


def place_gain(Lam: np.ndarray, B: np.ndarray, targets: np.ndarray, place_tol: float = 1e-6):
    """Real gain ``Q`` with ``eig(Lam + B Q) = targets``, minimal in norm over the input space.

    The input matrix is first compressed to its range (``B = B1 V1^T``), so the
    gain never excites input directions the projected system cannot see.
    """
    N = Lam.shape[0]
    Umat, s, Vt = np.linalg.svd(B, full_matrices=False)
    r = int(np.sum(s > 1e-12 * (s[0] if s.size else 0.0)))
    if r == 0:
        raise PlacementError("input matrix is zero on the unstable space")
    B1 = Umat[:, :r] * s[:r]
    V1 = Vt[:r].T
    if r == N:
        T = np.diag(targets)
        Q1 = np.linalg.solve(B1, T - Lam)
    else:
        res = scipy.signal.place_poles(Lam, B1, targets, method="YT", maxiter=100)
        Q1 = -res.gain_matrix
    Q = V1 @ Q1
    closed = np.linalg.eigvals(Lam + B @ Q)
    err = _match_error(closed, targets)
    if err > place_tol:
        vecs = np.linalg.eig(Lam + B @ Q)[1]
        raise PlacementError(f"placement error {err:.3e} > {place_tol:.1e}; "
                             f"closed-loop eigenvector condition {np.linalg.cond(vecs):.3e}")
    return Q, err


def _match_error(vals, targets) -> float:
    vals = list(vals)
    err = 0.0
    for t in sorted(targets, key=lambda z: -np.real(z)):
        j = int(np.argmin([abs(v - t) for v in vals]))
        err = max(err, abs(vals[j] - t) / max(1.0, abs(t)))
        vals.pop(j)
    return float(err)


@dataclass(frozen=True, eq=False)
class FeedbackLaw:
    """Closed-form finite-dimensional feedback.

    ``coefficients(w)`` gives ``nu_k = <w, p_k>`` and ``mu_k = <w, q_k>``;
    ``forcing(w)`` the resulting state forcing. ``input_matrix`` columns are
    ``[B_q D f_1..f_K, P(m u_1)..P(m u_K)]``.
    """

    K: int
    Q: np.ndarray
    gamma1: float
    targets: np.ndarray
    mode: str
    shapes: np.ndarray = field(repr=False)
    vectors: np.ndarray = field(repr=False)
    input_matrix: np.ndarray = field(repr=False)
    placement_error: float = 0.0
    p: np.ndarray | None = field(default=None, repr=False)
    q: np.ndarray | None = field(default=None, repr=False)
    weight: object = field(default=None, repr=False)

    def coefficients(self, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.p is None:
            raise ValueError("feedback not packaged; call package_feedback first")
        Ww = self.weight @ w
        return self.p.T @ Ww, self.q.T @ Ww

    def forcing(self, w: np.ndarray) -> np.ndarray:
        nu, mu = self.coefficients(w)
        return self.input_matrix @ np.concatenate([nu, mu])

    def gain_factors(self) -> tuple[np.ndarray, np.ndarray]:
        """``(G, H)`` with the feedback map equal to ``G @ H.T @ W``; rank at most ``2K``."""
        return self.input_matrix, np.hstack([self.p, self.q])

    def to_dict(self) -> dict:
        return {"K": self.K, "mode": self.mode, "gamma1": self.gamma1,
                "targets": [float(t) for t in np.real(self.targets)],
                "Q": np.asarray(self.Q).tolist(), "placement_error": self.placement_error,
                "boundary_shapes": np.asarray(self.shapes).tolist()}


def pole_place(dec: SpectralDecomposition, cm: ControlMatrices, gamma1: float, spread: float = 0.5,
               place_tol: float = 1e-6) -> FeedbackLaw:
    """Place ``eig(Lam + B Q)`` at ``-gamma1 - j*spread``, ``j = 0..N-1``."""
    if not gamma1 > 0:
        raise ValueError(f"gamma1 must be positive, got {gamma1}")
    _, _, Lam = dec.real_form
    targets = target_spectrum(dec.N, gamma1, spread)
    Q, err = place_gain(Lam, cm.B_real, targets, place_tol)
    return FeedbackLaw(cm.K, Q, float(gamma1), targets, cm.mode, cm.shapes, cm.vectors,
                       cm.input_matrix, err)


def package_feedback(law: FeedbackLaw, pn: ProjectorPN) -> FeedbackLaw:
    """Attach the dual vectors ``p_k = L Q_nu^T`` and ``q_k = L Q_mu^T``."""
    K = law.K
    p = pn.L @ law.Q[:K].T
    q = pn.L @ law.Q[K:].T
    return replace(law, p=p, q=q, weight=pn.W)


def feedback_to_json(law: FeedbackLaw) -> str:
    return json.dumps(law.to_dict(), sort_keys=True)
