"""Unstable eigenspace of the linearized generator and its spectral projector.

Eigenvectors are computed for the pencil ``K x = lambda W x``; left
eigenvectors of the pencil are exactly the adjoint eigenvectors with respect
to the weighted inner product, so the pairing ``<x, y> = y^H W x`` makes
right and left bases dual to each other.

Complex-conjugate pairs are handled in real arithmetic downstream: a pair
``lambda = a + ib`` with right vector ``phi = r + i s`` and left vector
``phi* = c + i d`` contributes the real columns ``[r, s]`` to the right basis,
``[2c, 2d]`` to the left basis and the block ``[[a, b], [-b, a]]`` to the
projected generator.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .operators import BlockOperator, StateLayout

DENSE_LIMIT = 5000
# Relative singular-value floor below which eigenvectors count as dependent;
# a numerically split Jordan pair sits near sqrt(eps).
SEMISIMPLE_TOL = 1e-6


class SpectralError(RuntimeError):
    """Base class for refusals of the eigen-decomposition stage."""


class SpectralGapError(SpectralError):
    """An eigenvalue sits on the threshold strip."""


class NonSemisimpleError(SpectralError):
    """A cluster lacks a full set of eigenvectors or has a singular left-right Gram matrix."""


@dataclass(frozen=True, eq=False)
class SpectralDecomposition:
    """Unstable eigen-data of a generator.

    Attributes
    ----------
    eigenvalues : ndarray
        All computed eigenvalues, sorted by descending real part.
    unstable : ndarray
        The ``N`` eigenvalues with real part above ``threshold`` (conjugates listed separately).
    clusters : list of ndarray
        Index arrays into ``unstable``, one per distinct eigenvalue.
    right, left : ndarray
        ``(n, N)`` complex right and left eigenvectors.
    """

    op: BlockOperator = field(repr=False)
    eigenvalues: np.ndarray
    threshold: float
    unstable: np.ndarray
    clusters: list
    right: np.ndarray = field(repr=False)
    left: np.ndarray = field(repr=False)
    biorthonormalized: bool = False
    method: str = "dense"
    norm_A: float = 1.0
    cluster_tol: float = 0.0

    @property
    def N(self) -> int:
        return int(self.unstable.size)

    @property
    def M(self) -> int:
        return len(self.clusters)

    @property
    def multiplicities(self) -> tuple[int, ...]:
        return tuple(int(c.size) for c in self.clusters)

    @property
    def layout(self) -> StateLayout:
        return self.op.layout

    @property
    def first_stable(self) -> complex | None:
        """``lambda_{N+1}``, the leading eigenvalue left of the threshold (if computed)."""
        rest = self.eigenvalues[self.eigenvalues.real <= self.threshold]
        return complex(rest[0]) if rest.size else None

    def gram(self) -> np.ndarray:
        """``G[a, b] = <Phi_b, Phi*_a> = Phi*_a^H W Phi_b``."""
        return self.left.conj().T @ (self.op.W @ self.right)

    def residuals(self) -> dict[str, float]:
        """Largest relative eigen-residuals, in the weighted norm, for both bases."""
        lay = self.layout
        res_r, res_l = 0.0, 0.0
        for k, lam in enumerate(self.unstable):
            phi, phis = self.right[:, k], self.left[:, k]
            r = lay.solve_weight(self.op.K @ phi) - lam * phi
            res_r = max(res_r, lay.norm(r) / lay.norm(phi))
            rs = lay.solve_weight(self.op.K.T @ phis) - np.conj(lam) * phis
            res_l = max(res_l, lay.norm(rs) / lay.norm(phis))
        return {"right": res_r, "left": res_l}

    @cached_property
    def real_form(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Real bases ``(R, L, Lambda)`` with ``A R = R Lambda`` and ``L^T W R = I``."""
        n, nn = self.right.shape[0], self.N
        R = np.zeros((n, nn))
        L = np.zeros((n, nn))
        Lam = np.zeros((nn, nn))
        k = 0
        while k < nn:
            lam = self.unstable[k]
            if lam.imag == 0.0:
                R[:, k] = self.right[:, k].real
                L[:, k] = self.left[:, k].real
                Lam[k, k] = lam.real
                k += 1
                continue
            # Clusters are stored as (lambda, conj(lambda)) consecutive groups of equal size.
            ell = _cluster_size_at(self.clusters, k)
            for j in range(ell):
                a, b = k + j, k + ell + j
                phi, phis = self.right[:, a], self.left[:, a]
                R[:, a], R[:, b] = phi.real, phi.imag
                L[:, a], L[:, b] = 2 * phis.real, 2 * phis.imag
                Lam[a, a] = Lam[b, b] = lam.real
                Lam[a, b], Lam[b, a] = lam.imag, -lam.imag
            k += 2 * ell
        return R, L, Lam

    def to_report(self, n_extra: int = 10) -> dict:
        lead = self.eigenvalues[: self.N + n_extra]
        res = self.residuals() if self.N else {"right": 0.0, "left": 0.0}
        gram_err = (float(np.abs(self.gram() - np.eye(self.N)).max()) if self.N else 0.0)
        return {
            "method": self.method,
            "threshold": self.threshold,
            "N": self.N,
            "M": self.M,
            "multiplicities": list(self.multiplicities),
            "unstable": [[float(z.real), float(z.imag)] for z in self.unstable],
            "leading_eigenvalues": [[float(z.real), float(z.imag)] for z in lead],
            "first_stable": (None if self.first_stable is None
                             else [self.first_stable.real, self.first_stable.imag]),
            "residuals": res,
            "gram_error": gram_err,
            "biorthonormalized": self.biorthonormalized,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_report(), indent=2, sort_keys=True)


def _cluster_size_at(clusters, k) -> int:
    for c in clusters:
        if c[0] == k:
            return int(c.size)
    raise ValueError(f"no cluster starts at index {k}")


@dataclass(frozen=True, eq=False)
class ProjectorPN:
    """Factored spectral projector ``P_N = R L^T W`` in real arithmetic."""

    R: np.ndarray
    L: np.ndarray
    Lam: np.ndarray
    W: sp.spmatrix = field(repr=False)

    @property
    def rank(self) -> int:
        return self.R.shape[1]

    def coords(self, w: np.ndarray) -> np.ndarray:
        return self.L.T @ (self.W @ w)

    def lift(self, xi: np.ndarray) -> np.ndarray:
        return self.R @ xi

    def apply(self, w: np.ndarray) -> np.ndarray:
        return self.lift(self.coords(w))

    def dense(self) -> np.ndarray:
        return self.R @ (self.W.T @ self.L).T


def projector(dec: SpectralDecomposition) -> ProjectorPN:
    if dec.N and not dec.biorthonormalized:
        raise ValueError("decomposition must be biorthonormalized first")
    R, L, Lam = dec.real_form
    return ProjectorPN(R, L, Lam, dec.op.W)


def project(pn: ProjectorPN, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split ``w`` into unstable coordinates and the stable-complement remainder."""
    xi = pn.coords(w)
    return xi, np.asarray(w) - pn.lift(xi)


# --------------------------------------------------------------------------
# eigen-solvers


def _dense_eig(op: BlockOperator):
    K = op.K.toarray()
    W = op.W.toarray()
    vals, vl, vr = sla.eig(K, W, left=True, right=True)
    ok = np.isfinite(vals)
    return vals[ok], vr[:, ok], vl[:, ok]


def _numerical_range_box(op: BlockOperator) -> tuple[float, float]:
    """Bounds ``max Re`` and ``max |Im|`` of the weighted numerical range of ``A``."""
    K = op.K.tocsc()
    W = op.W.tocsc()
    H = ((K + K.T) / 2).tocsc()
    S = ((K - K.T) / 2).tocsc()
    re_max = spla.eigsh(H, k=1, M=W, which="LA", return_eigenvectors=False)[0]
    lu = spla.splu(W)
    n = W.shape[0]
    sws = spla.LinearOperator((n, n), matvec=lambda x: S.T @ lu.solve(S @ x), dtype=float)
    im2 = spla.eigsh(sws, k=1, M=W, which="LA", return_eigenvectors=False)[0]
    return float(re_max), float(np.sqrt(max(im2, 0.0)))


def _iterative_eig(op: BlockOperator, threshold: float, k0: int = 8):
    """Shift-invert Arnoldi on the pencil, enlarging the subspace until every
    eigenvalue right of ``threshold`` is provably inside the computed disk."""
    n = op.size
    re_max, im_max = _numerical_range_box(op)
    sigma = max(threshold, 0.5 * (threshold + re_max))
    radius_needed = np.hypot(max(re_max - threshold, 0.0), im_max) if re_max > threshold else 0.0
    K = op.K.tocsc()
    W = op.W.tocsc()
    k = min(k0, n - 2)
    while True:
        vals, vr = spla.eigs(K, k=k, M=W, sigma=sigma, which="LM", tol=1e-14)
        dmax = np.abs(vals - sigma).max()
        if dmax >= radius_needed or k >= n - 2:
            break
        k = min(2 * k, n - 2)
    # Left vectors: the same shift-invert on the transposed pencil.
    vals_l, vl = spla.eigs(K.T.tocsc(), k=k, M=W, sigma=sigma, which="LM", tol=1e-14)
    order_l = np.empty(vals.size, dtype=int)
    used = np.zeros(vals_l.size, dtype=bool)
    for i, lam in enumerate(vals):
        d = np.abs(vals_l - np.conj(lam))
        d[used] = np.inf
        j = int(np.argmin(d))
        order_l[i] = j
        used[j] = True
    # eigs on K^T returns conj(lambda) with vector y solving K^T y = conj(lam) W y.
    return vals, vr, vl[:, order_l]


def _refine(op, lam, X, Y, clusters, norm_a, steps=2):
    """Polish eigenvectors by inverse iteration at a slightly perturbed shift."""
    K = op.K.tocsc().astype(complex)
    W = op.W.tocsc().astype(complex)
    for c in clusters:
        if c.size > 1:
            continue  # block inverse iteration would mix the cluster; keep solver output
        i = int(c[0])
        shift = lam[i] + 1e-9 * norm_a
        lu = spla.splu((K - shift * W).tocsc())
        lu_t = spla.splu((K.T - np.conj(shift) * W).tocsc())
        x, y = X[:, i].astype(complex), Y[:, i].astype(complex)
        for _ in range(steps):
            x = lu.solve(W @ x)
            x /= np.linalg.norm(x)
            y = lu_t.solve(W @ y)
            y /= np.linalg.norm(y)
        X[:, i], Y[:, i] = x, y


def _real_span(V: np.ndarray) -> np.ndarray:
    """Real orthonormal basis of a real eigenspace handed back as complex combinations."""
    u, _, _ = np.linalg.svd(np.hstack([V.real, V.imag]), full_matrices=False)
    return u[:, : V.shape[1]].astype(complex)


def _normalize_phase(v: np.ndarray) -> np.ndarray:
    j = int(np.argmax(np.abs(v)))
    return v * (np.abs(v[j]) / v[j])


def eig_unstable(op: BlockOperator, threshold: float = 0.0, *, gap_tol: float = 1e-6,
                 cluster_tol: float | None = None, method: str = "auto",
                 biorthonormal: bool = True) -> SpectralDecomposition:
    """Eigenvalues right of ``threshold`` with right and adjoint eigenvectors.

    Parameters
    ----------
    op : BlockOperator
    threshold : float
        Split point; a negative value requests decay enhancement of a stable system.
    gap_tol : float
        Refuse when an eigenvalue's real part lies within this distance of ``threshold``.
    cluster_tol : float, optional
        Eigenvalues closer than this are one cluster; default ``1e-6 * ||A||``.
    method : {"auto", "dense", "iterative"}
        ``auto`` picks dense up to 5000 unknowns.
    biorthonormal : bool
        Apply :func:`biorthonormalize` before returning.

    Raises
    ------
    SpectralGapError, NonSemisimpleError
    """
    if method == "auto":
        method = "dense" if op.size <= DENSE_LIMIT else "iterative"
    if method == "dense":
        vals, vr, vl = _dense_eig(op)
        norm_a = float(np.linalg.norm(op.dense, 2)) if op.size <= 2500 else _onenorm(op)
    elif method == "iterative":
        vals, vr, vl = _iterative_eig(op, threshold)
        norm_a = _onenorm(op)
    else:
        raise ValueError(f"unknown method {method!r}")
    if cluster_tol is None:
        cluster_tol = 1e-6 * norm_a

    order = np.argsort(-vals.real, kind="stable")
    vals, vr, vl = vals[order], vr[:, order], vl[:, order]
    near = np.abs(vals.real - threshold) <= gap_tol
    if np.any(near):
        raise SpectralGapError(
            f"eigenvalue(s) {vals[near]} within gap_tol={gap_tol} of threshold {threshold}")

    sel = vals.real > threshold
    lam, X, Y = vals[sel], vr[:, sel], vl[:, sel]
    lam = np.where(np.abs(lam.imag) <= cluster_tol, lam.real + 0j, lam)
    lam, X, Y, clusters = _arrange_clusters(lam, X, Y, cluster_tol)

    lay = op.layout
    _refine(op, lam, X, Y, clusters, norm_a)
    for c in clusters:
        cols = np.column_stack([X[:, i] / lay.norm(X[:, i]) for i in c])
        sv = np.linalg.svd(cols, compute_uv=False)
        if sv[-1] <= SEMISIMPLE_TOL * sv[0]:
            raise NonSemisimpleError(
                f"eigenvalue {lam[c[0]]:.6g}: cluster of size {c.size} has only "
                f"{int(np.sum(sv > SEMISIMPLE_TOL * sv[0]))} independent eigenvectors")
    for c in clusters:
        if c.size > 1 and lam[c[0]].imag == 0.0:
            X[:, c], Y[:, c] = _real_span(X[:, c]), _real_span(Y[:, c])
    for i in range(lam.size):
        X[:, i] = _normalize_phase(X[:, i]) / lay.norm(X[:, i])
        Y[:, i] = _normalize_phase(Y[:, i]) / lay.norm(Y[:, i])
        if lam[i].imag == 0.0:
            X[:, i], Y[:, i] = X[:, i].real, Y[:, i].real
    _close_conjugates(lam, X, Y, clusters)

    dec = SpectralDecomposition(op, vals, float(threshold), lam, clusters, X, Y,
                                method=method, norm_A=norm_a, cluster_tol=float(cluster_tol))
    return biorthonormalize(dec) if biorthonormal else dec


def _onenorm(op: BlockOperator) -> float:
    n = op.size
    lin = spla.LinearOperator((n, n), matvec=op.apply,
                              rmatvec=lambda y: op.K.T @ op.layout.solve_weight(y), dtype=float)
    return float(spla.onenormest(lin))


def _arrange_clusters(lam, X, Y, tol):
    """Group equal eigenvalues and order them so each complex cluster with
    positive imaginary part is immediately followed by its conjugate cluster."""
    remaining = list(range(lam.size))
    groups = []
    while remaining:
        i = remaining[0]
        members = [j for j in remaining if abs(lam[j] - lam[i]) <= tol]
        remaining = [j for j in remaining if j not in members]
        groups.append(members)
    done = set()
    ordered = []
    for gi, g in enumerate(groups):
        if gi in done:
            continue
        done.add(gi)
        z = lam[g[0]]
        if z.imag == 0:
            ordered.append(g)
            continue
        partner = None
        for gj, h in enumerate(groups):
            if gj not in done and abs(lam[h[0]] - np.conj(z)) <= tol:
                partner = gj
                break
        if partner is None:
            raise SpectralError(f"eigenvalue {z} has no conjugate partner in the unstable set")
        done.add(partner)
        h = groups[partner]
        if len(h) != len(g):
            raise NonSemisimpleError(f"conjugate clusters of {z} have unequal sizes")
        pos, neg = (g, h) if z.imag > 0 else (h, g)
        ordered.extend([pos, neg])
    idx = np.concatenate([np.asarray(g, dtype=int) for g in ordered]) if ordered else np.zeros(0, int)
    clusters, start = [], 0
    for g in ordered:
        clusters.append(np.arange(start, start + len(g)))
        start += len(g)
    lam = lam[idx].copy()
    # Use a representative value per cluster so exact equality holds inside it.
    for c in clusters:
        lam[c] = lam[c].mean()
    return lam, X[:, idx].astype(complex), Y[:, idx].astype(complex), clusters


def _close_conjugates(lam, X, Y, clusters):
    for a, b in zip(clusters[:-1], clusters[1:]):
        if lam[a[0]].imag > 0 and np.isclose(lam[b[0]], np.conj(lam[a[0]])):
            lam[b] = np.conj(lam[a])
            X[:, b] = X[:, a].conj()
            Y[:, b] = Y[:, a].conj()


def biorthonormalize(dec: SpectralDecomposition) -> SpectralDecomposition:
    """Rescale the left vectors cluster by cluster so that ``<Phi_a, Phi*_b> = delta_ab``.

    Raises
    ------
    NonSemisimpleError
        If a cluster's left-right Gram matrix is numerically singular.
    """
    if dec.N == 0:
        return replace(dec, biorthonormalized=True)
    W = dec.op.W
    Y = dec.left.copy()
    X = dec.right
    for c in dec.clusters:
        G = Y[:, c].conj().T @ (W @ X[:, c])
        scale = np.outer(np.sqrt(np.real(np.sum(Y[:, c].conj() * (W @ Y[:, c]), axis=0))),
                         np.sqrt(np.real(np.sum(X[:, c].conj() * (W @ X[:, c]), axis=0))))
        # Left and right eigenvectors of a Jordan chain are W-orthogonal.
        if np.linalg.svd(G / scale, compute_uv=False)[-1] <= SEMISIMPLE_TOL:
            raise NonSemisimpleError(
                f"singular left-right Gram matrix for eigenvalue {dec.unstable[c[0]]:.6g}")
        Y[:, c] = Y[:, c] @ np.linalg.inv(G).conj().T
    # Conjugate clusters stay conjugate because G for the partner is conj(G).
    for c in dec.clusters:
        if np.all(dec.unstable[c].imag == 0):
            Y[:, c] = Y[:, c].real
    return replace(dec, left=Y, biorthonormalized=True)
