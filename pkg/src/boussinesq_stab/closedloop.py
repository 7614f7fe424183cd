"""Closed-loop generator, time propagation, Picard iteration, norm proxies and decay fits.

All propagators work on the weighted pencil form ``W w' = K_F w - W N(w)``
with ``K_F = K + (W G)(W H)^T``, the finite-rank feedback term written via
the factors of :meth:`FeedbackLaw.gain_factors`. The one-step solve uses a
sparse LU of ``W - a K`` and the Woodbury identity for the rank-``2K`` update.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg as sla
import scipy.sparse.linalg as spla

from ._validation import check_besov_indices, check_int, check_positive
from .operators import BlockOperator, eval_nonlinear_weighted
from .spectral import ProjectorPN
from .synthesis import FeedbackLaw

SCHEMES = ("trapezoid", "implicit_euler")
BLOWUP_FACTOR = 1e6


# --------------------------------------------------------------------------
# operator


@dataclass(frozen=True, eq=False)
class ClosedLoopOperator:
    """``A_F = A + G H^T W`` stored as the pencil data ``(K, W)`` plus low-rank factors.

    ``U = W G`` and ``V = W H`` give ``K_F = K + U V^T``. With no feedback
    (``law is None``) the factors are empty and ``A_F = A``.
    """

    op: BlockOperator
    law: FeedbackLaw | None
    pn: ProjectorPN | None
    U: np.ndarray = field(repr=False)
    V: np.ndarray = field(repr=False)

    @property
    def size(self) -> int:
        return self.op.size

    @property
    def feedback_rank_bound(self) -> int:
        return self.U.shape[1]

    def apply(self, w: np.ndarray) -> np.ndarray:
        return self.op.layout.solve_weight(self.op.K @ w + self.U @ (self.V.T @ w))

    @cached_property
    def dense(self) -> np.ndarray:
        layout = self.op.layout
        pert = np.column_stack([layout.solve_weight(u) for u in self.U.T]) if self.U.size else None
        out = self.op.dense.copy()
        if pert is not None:
            out += pert @ self.V.T
        return out

    def feedback(self, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.law is None:
            return np.zeros(0), np.zeros(0)
        return self.law.coefficients(w)


def assemble_closed_loop(op: BlockOperator, law: FeedbackLaw | None,
                         pn: ProjectorPN | None = None) -> ClosedLoopOperator:
    """Attach the feedback ``w -> G Q L^T W w`` to the free generator."""
    n = op.size
    if law is None:
        return ClosedLoopOperator(op, None, pn, np.zeros((n, 0)), np.zeros((n, 0)))
    if law.p is None:
        raise ValueError("feedback law must be packaged before closing the loop")
    G, H = law.gain_factors()
    if G.shape[0] != n or H.shape[0] != n:
        raise ValueError(f"feedback factors do not match state size {n}")
    W = op.W
    return ClosedLoopOperator(op, law, pn, np.asarray(W @ G), np.asarray(W @ H))


def open_loop(op: BlockOperator) -> ClosedLoopOperator:
    return assemble_closed_loop(op, None)


# --------------------------------------------------------------------------
# one-step propagator


class _Stepper:
    """Solves ``(W - a K_F) x = rhs`` and forms ``(W + b K_F) w``."""

    def __init__(self, clo: ClosedLoopOperator, dt: float, scheme: str):
        if scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}, got {scheme!r}")
        self.clo = clo
        self.a = 0.5 * dt if scheme == "trapezoid" else dt
        self.b = 0.5 * dt if scheme == "trapezoid" else 0.0
        op = clo.op
        self.W = op.W
        self.K = op.K
        try:
            self.lu = spla.splu((self.W - self.a * self.K).tocsc())
        except RuntimeError as exc:
            raise np.linalg.LinAlgError(f"one-step matrix is singular: {exc}") from exc
        U, V = clo.U, clo.V
        if U.shape[1]:
            self.Y = self.lu.solve(self.a * U)  # M0^{-1} (a U)
            cap = np.eye(U.shape[1]) - V.T @ self.Y
            self.cap_lu = sla.lu_factor(cap)
        else:
            self.Y = None

    def kf(self, w: np.ndarray) -> np.ndarray:
        return self.K @ w + self.clo.U @ (self.clo.V.T @ w)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        x = self.lu.solve(rhs)
        if self.Y is not None:
            x = x + self.Y @ sla.lu_solve(self.cap_lu, self.clo.V.T @ x)
        return x

    def explicit(self, w: np.ndarray) -> np.ndarray:
        out = self.W @ w
        if self.b:
            out = out + self.b * self.kf(w)
        return out

    def step(self, w: np.ndarray, weighted_source: np.ndarray | None = None, dt: float = 0.0):
        rhs = self.explicit(w)
        if weighted_source is not None:
            rhs = rhs - dt * weighted_source
        return self.solve(rhs)


# --------------------------------------------------------------------------
# norm proxies


@dataclass(frozen=True, eq=False)
class SymmetricBasis:
    """Eigen-decomposition of the weighted symmetric part of the generator.

    ``mu`` and ``X`` solve ``((K + K^T)/2) X = W X diag(mu)`` with ``X^T W X = I``;
    ``delta = 1 + max(0, max mu)`` makes ``delta - mu >= 1``.
    """

    op: BlockOperator = field(repr=False)
    mu: np.ndarray
    X: np.ndarray = field(repr=False)
    delta: float

    def fractional(self, s: float) -> np.ndarray:
        """Dense ``(delta I - A_sym)^s``."""
        scale = (self.delta - self.mu) ** s
        return (self.X * scale) @ (self.W @ self.X).T

    @cached_property
    def W(self):
        return self.op.W


def symmetric_eigenbasis(op: BlockOperator) -> SymmetricBasis:
    K = op.K.toarray()
    H = 0.5 * (K + K.T)
    mu, X = sla.eigh(H, op.W.toarray())
    delta = 1.0 + max(0.0, float(mu.max()))
    return SymmetricBasis(op, mu, X, delta)


def lq_norm(op: BlockOperator, w: np.ndarray, q: float) -> float:
    """Pointwise L^q proxy: every velocity face value and cell temperature weighted by the cell area."""
    vel, h = op.layout.to_fields(w)
    area = op.grid.cell_area
    total = area * (np.sum(np.abs(vel) ** q) + np.sum(np.abs(h) ** q))
    return float(total ** (1.0 / q))


@dataclass(frozen=True, eq=False)
class NormProxy:
    """Evaluate the three reported norms of a state."""

    op: BlockOperator = field(repr=False)
    q: float = 4.0
    p: float = 1.1
    basis: SymmetricBasis | None = field(default=None, repr=False)

    def __post_init__(self):
        check_besov_indices(self.q, self.p)

    @cached_property
    def frac(self) -> np.ndarray:
        basis = self.basis if self.basis is not None else symmetric_eigenbasis(self.op)
        return basis.fractional(1.0 - 1.0 / self.p)

    def l2(self, w) -> float:
        return self.op.layout.norm(w)

    def lq(self, w) -> float:
        return lq_norm(self.op, w, self.q)

    def besov(self, w) -> float:
        return lq_norm(self.op, self.frac @ w, self.q)

    def all(self, w) -> tuple[float, float, float]:
        return self.l2(w), self.lq(w), self.besov(w)


def norm_proxy(w: np.ndarray, basis: SymmetricBasis, q: float = 4.0, p: float = 1.1) -> float:
    """Besov-type proxy ``|| (delta - A_sym)^{1 - 1/p} w ||_{L^q}``.

    The real-interpolation norm is not computed; this is a fractional-power
    surrogate on the eigenbasis of the symmetric part. As ``p -> 1`` it
    reduces to the plain L^q proxy.
    """
    check_besov_indices(q, p)
    return lq_norm(basis.op, basis.fractional(1.0 - 1.0 / p) @ np.asarray(w), q)


# --------------------------------------------------------------------------
# traces


@dataclass(eq=False)
class SimulationTrace:
    times: np.ndarray
    norm_L2: np.ndarray
    norm_Lq: np.ndarray
    norm_besov: np.ndarray
    nu: np.ndarray
    mu: np.ndarray
    final_state: np.ndarray = field(repr=False)
    states: np.ndarray | None = field(default=None, repr=False)
    status: str = "ok"
    message: str = ""

    @property
    def K(self) -> int:
        return self.nu.shape[1]

    def columns(self) -> list[str]:
        return (["t", "norm_L2", "norm_Lq", "norm_besov"]
                + [f"nu_{k + 1}" for k in range(self.K)] + [f"mu_{k + 1}" for k in range(self.K)])

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.columns())
        for i, t in enumerate(self.times):
            row = [t, self.norm_L2[i], self.norm_Lq[i], self.norm_besov[i], *np.abs(self.nu[i]),
                   *np.abs(self.mu[i])]
            writer.writerow([f"{float(v):.17g}" for v in row])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, path) -> "SimulationTrace":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, data = rows[0], np.array(rows[1:], dtype=float).reshape(-1, len(rows[0]))
        K = sum(1 for h in header if h.startswith("nu_"))
        return cls(data[:, 0], data[:, 1], data[:, 2], data[:, 3], data[:, 4 : 4 + K],
                   data[:, 4 + K : 4 + 2 * K], np.zeros(0))


class _Recorder:
    def __init__(self, clo, norms: NormProxy | None, keep_states: bool):
        self.clo, self.norms, self.keep = clo, norms, keep_states
        self.t, self.l2, self.lq, self.bs, self.nu, self.mu, self.states = ([] for _ in range(7))

    def __call__(self, t, w):
        self.t.append(t)
        if self.norms is not None:
            a, b, c = self.norms.all(w)
        else:
            a, b, c = self.clo.op.layout.norm(w), np.nan, np.nan
        self.l2.append(a)
        self.lq.append(b)
        self.bs.append(c)
        nu, mu = self.clo.feedback(w)
        self.nu.append(nu)
        self.mu.append(mu)
        if self.keep:
            self.states.append(np.array(w))

    def trace(self, w, status="ok", message="") -> SimulationTrace:
        k = len(self.nu[0]) if self.nu else 0
        n = len(self.t)
        return SimulationTrace(np.array(self.t), np.array(self.l2), np.array(self.lq),
                               np.array(self.bs), np.array(self.nu).reshape(n, k),
                               np.array(self.mu).reshape(n, k), np.array(w),
                               np.array(self.states) if self.keep else None, status, message)


def _time_grid(t_end: float, dt: float) -> tuple[int, float]:
    check_positive(t_end, "t_end")
    check_positive(dt, "dt")
    n = max(1, int(round(t_end / dt)))
    return n, t_end / n


def propagate_linear(clo: ClosedLoopOperator, w0: np.ndarray, t_end: float, dt: float, *,
                     scheme: str = "trapezoid", norms: NormProxy | None = None,
                     keep_states: bool = False) -> SimulationTrace:
    """Integrate ``w' = A_F w`` with an implicit one-step scheme."""
    n_steps, dt = _time_grid(t_end, dt)
    stepper = _Stepper(clo, dt, scheme)
    w = np.array(w0, dtype=float)
    rec = _Recorder(clo, norms, keep_states)
    rec(0.0, w)
    for i in range(n_steps):
        w = stepper.step(w)
        if not np.all(np.isfinite(w)):
            raise np.linalg.LinAlgError(f"non-finite state at step {i + 1}")
        rec((i + 1) * dt, w)
    return rec.trace(w)


def propagate_nonlinear(clo: ClosedLoopOperator, w0: np.ndarray, t_end: float, dt: float, *,
                        scheme: str = "trapezoid", norms: NormProxy | None = None,
                        keep_states: bool = False, blowup: float = BLOWUP_FACTOR) -> SimulationTrace:
    """IMEX integration of ``w' = A_F w - N(w)``: linear part implicit, quadratic part explicit.

    Stops early with ``status="basin_exit"`` if the norm exceeds ``blowup``
    times its initial value.
    """
    n_steps, dt = _time_grid(t_end, dt)
    stepper = _Stepper(clo, dt, scheme)
    grid = clo.op.grid
    layout = clo.op.layout
    w = np.array(w0, dtype=float)
    n0 = layout.norm(w)
    rec = _Recorder(clo, norms, keep_states)
    rec(0.0, w)
    for i in range(n_steps):
        w = stepper.step(w, eval_nonlinear_weighted(grid, w), dt)
        nw = layout.norm(w) if np.all(np.isfinite(w)) else np.inf
        if nw > blowup * max(n0, np.finfo(float).tiny):
            msg = (f"norm {nw:.3e} exceeded {blowup:.0e} x initial {n0:.3e} at t={(i + 1) * dt:.4g}"
                   "; left the local basin")
            return rec.trace(w, "basin_exit", msg)
        rec((i + 1) * dt, w)
    return rec.trace(w)


@dataclass
class PicardResult:
    trace: SimulationTrace
    iterations: int
    contraction_ratios: list
    distances: list
    converged: bool


def picard_solve(clo: ClosedLoopOperator, w0: np.ndarray, t_end: float, dt: float,
                 max_iters: int = 50, tol: float = 1e-10, *, scheme: str = "trapezoid",
                 norms: NormProxy | None = None) -> PicardResult:
    """Fixed-point iteration on the discrete Duhamel formula.

    Iterate ``f^{m+1} = F(w0, f^m)`` where ``F`` steps the linear closed loop
    from ``w0`` with the nonlinear source evaluated on the previous trajectory
    ``f^m`` (the same one-step propagator as :func:`propagate_nonlinear`, so the
    fixed point is exactly the IMEX trajectory). Starts from ``f^0 = 0``;
    converges when the sup-in-time weighted distance between iterates is at most
    ``tol * ||w0||``.
    """
    max_iters = check_int(max_iters, "max_iters", 1)
    n_steps, dt = _time_grid(t_end, dt)
    stepper = _Stepper(clo, dt, scheme)
    grid = clo.op.grid
    layout = clo.op.layout
    w0 = np.array(w0, dtype=float)
    scale = layout.norm(w0)
    prev = np.zeros((n_steps + 1, w0.size))
    dists, ratios = [], []
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        src = [eval_nonlinear_weighted(grid, prev[i]) for i in range(n_steps)]
        cur = np.empty_like(prev)
        cur[0] = w0
        for i in range(n_steps):
            cur[i + 1] = stepper.step(cur[i], src[i], dt)
        d = max(layout.norm(cur[i] - prev[i]) for i in range(n_steps + 1))
        if dists and dists[-1] > 0:
            ratios.append(d / dists[-1])
        dists.append(d)
        prev = cur
        if d <= tol * scale:
            converged = True
            break
        if not np.isfinite(d):
            break
    rec = _Recorder(clo, norms, keep_states=True)
    for i in range(n_steps + 1):
        rec(i * dt, prev[i])
    status = "ok" if converged else "no_contraction"
    return PicardResult(rec.trace(prev[-1], status), it, ratios, dists, converged)


# --------------------------------------------------------------------------
# decay estimation


@dataclass(frozen=True)
class DecayReport:
    gamma_fit: float
    M_fit: float
    r2: float
    window: tuple
    n_samples: int
    metric: str

    def to_dict(self) -> dict:
        return {"gamma_fit": self.gamma_fit, "M_fit": self.M_fit, "r2": self.r2,
                "window": list(self.window), "n_samples": self.n_samples, "metric": self.metric}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def estimate_decay(trace: SimulationTrace, window: tuple | None = None,
                   metric: str = "norm_L2") -> DecayReport:
    """Least-squares fit ``log ||w(t)|| = log(M ||w(0)||) - gamma t`` over ``window``.

    The default window is the last half of the trace. A growing trace gives
    a negative ``gamma_fit``.
    """
    t = np.asarray(trace.times)
    y = np.asarray(getattr(trace, metric))
    if window is None:
        window = (t[0] + 0.5 * (t[-1] - t[0]), t[-1])
    t0, t1 = window
    if t0 < t[0] - 1e-12 or t1 > t[-1] + 1e-12 or t1 <= t0:
        raise ValueError(f"window {window} outside trace span [{t[0]}, {t[-1]}]")
    sel = (t >= t0 - 1e-12) & (t <= t1 + 1e-12)
    if sel.sum() < 10:
        raise ValueError(f"window holds only {int(sel.sum())} samples; need at least 10")
    ys = y[sel]
    if np.any(~(ys > 0)):
        raise ValueError("non-positive norms in the fit window")
    ts = t[sel]
    logy = np.log(ys)
    slope, intercept = np.polyfit(ts, logy, 1)
    fit = intercept + slope * ts
    ss_res = float(np.sum((logy - fit) ** 2))
    ss_tot = float(np.sum((logy - logy.mean()) ** 2))
    r2 = 1.0 if ss_tot <= 1e-300 or ss_res <= 1e-28 * max(ss_tot, 1.0) else 1.0 - ss_res / ss_tot
    y0 = y[0] if y[0] > 0 else 1.0
    return DecayReport(float(-slope), float(np.exp(intercept) / y0), float(r2),
                       (float(t0), float(t1)), int(sel.sum()), metric)
