"""End-to-end orchestration: equilibrium, linearization, spectrum, synthesis, simulation, reports."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .closedloop import (
    NormProxy,
    assemble_closed_loop,
    estimate_decay,
    open_loop,
    propagate_linear,
    propagate_nonlinear,
    symmetric_eigenbasis,
)
from .config import ScenarioConfig
from .equilibrium import Forcing, manufactured_equilibrium, solve_steady
from .geometry import build_grid, build_regions
from .operators import assemble_generator
from .spectral import SpectralError, eig_unstable, projector
from .synthesis import (
    PlacementError,
    boundary_shape_pool,
    package_feedback,
    pole_place,
    synthesize_inputs,
    ucp_witness_check,
)

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3
EXIT_RANK = 4
OUTPUT_ENV = "BSTAB_OUTPUT_DIR"


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass
class PipelineResult:
    status: str
    exit_code: int
    message: str = ""
    stage: str | None = None
    out_dir: Path | None = None
    artifacts: dict = field(default_factory=dict)
    reports: dict = field(default_factory=dict)


def dumps(obj) -> str:
    """Canonical JSON used for every report (sorted keys, fixed layout)."""
    return json.dumps(_plain(obj), indent=2, sort_keys=True, allow_nan=True) + "\n"


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    return obj


def smooth_forcing(grid, amplitude: float, **physics) -> Forcing:
    """Small smooth body force and heat source used by ``equilibrium.mode = solve``."""
    fu = lambda x, y: amplitude * np.sin(np.pi * y / grid.ly) * np.sin(np.pi * x / grid.lx) ** 2  # noqa: E731
    fv = lambda x, y: -amplitude * np.sin(np.pi * x / grid.lx) * np.sin(np.pi * y / grid.ly) ** 2  # noqa: E731
    f = grid.sample_velocity(fu, fv)
    g = grid.sample_scalar(lambda x, y: amplitude * np.sin(np.pi * x / grid.lx)
                           * np.sin(np.pi * y / grid.ly))
    return Forcing(f, g, **physics)


def build_model(cfg: ScenarioConfig):
    """Grid, regions, equilibrium and free generator for a scenario."""
    g = cfg.grid
    grid = build_grid(g.nx, g.ny, g.lx, g.ly)
    r = cfg.regions
    regions = build_regions(grid, r.side, r.frac_gamma, r.d_collar, r.offset)
    ph = cfg.physics
    params = dict(nu=ph.nu, kappa=ph.kappa, gamma=ph.gamma, theta_bar=ph.theta_bar)
    e = cfg.equilibrium
    if e.mode == "manufactured":
        eq = manufactured_equilibrium(e.profile, e.amplitude, grid, **params)
    else:
        eq = solve_steady(smooth_forcing(grid, e.amplitude, **params), grid, regions,
                          tol=e.tol, max_iter=e.max_iter)
        if not eq.converged:
            raise StageError("equilibrium", f"Newton did not converge: residual {eq.residual_norm:.3e} "
                                            f"after {eq.iterations} iterations")
    op = assemble_generator(eq, eq.forcing, grid, regions)
    return grid, regions, eq, op


def initial_state(cfg: ScenarioConfig, op, dec) -> np.ndarray:
    """Unit-norm initial perturbation."""
    lay = op.layout
    if cfg.sim.initial == "unstable" and dec.N:
        R, _, _ = dec.real_form
        w = R.sum(axis=1)
    else:
        rng = np.random.default_rng(cfg.sim.initial_seed)
        vel = rng.standard_normal(op.grid.n_vel)
        w = lay.from_fields(vel, rng.standard_normal(op.grid.n_scalar))
    return w / lay.norm(w)


def run_pipeline(cfg: ScenarioConfig, out_dir=None) -> PipelineResult:
    """Run every stage and write the reports; never raises for stage failures."""
    out = Path(out_dir or os.environ.get(OUTPUT_ENV) or cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    res = PipelineResult("running", EXIT_OK, out_dir=out)

    def write(name, text):
        path = out / name
        path.write_text(text)
        res.artifacts[name] = str(path)

    def fail(stage, message, code=EXIT_STAGE):
        res.status, res.exit_code, res.stage, res.message = "failed", code, stage, message
        write("summary.json", dumps({"status": res.status, "stage": stage, "message": message,
                                     "exit_code": code}))
        log.error("[%s] %s", stage, message)
        return res

    write("config.json", dumps(cfg.to_dict()))
    try:
        grid, regions, eq, op = build_model(cfg)
    except StageError as exc:
        return fail(exc.stage, str(exc))
    except (ValueError, np.linalg.LinAlgError, RuntimeError) as exc:
        return fail("equilibrium", str(exc))
    eq_report = {"residual_norm": eq.residual_norm, "converged": eq.converged,
                 "iterations": eq.iterations, "mode": cfg.equilibrium.mode}

    sp = cfg.spectral
    try:
        dec = eig_unstable(op, sp.threshold, gap_tol=sp.gap_tol, cluster_tol=sp.cluster_tol,
                           method=sp.method)
    except (SpectralError, np.linalg.LinAlgError) as exc:
        return fail("spectral", str(exc))
    spectral_report = dec.to_report()
    res.reports["spectral"] = spectral_report
    write("spectral.json", dumps(spectral_report))
    if dec.N == 0:
        res.status, res.message = "nothing_to_stabilize", "N = 0, nothing to stabilize"
        write("summary.json", dumps({"status": res.status, "message": res.message,
                                     "equilibrium": eq_report, "exit_code": EXIT_OK}))
        log.info(res.message)
        return res

    sy = cfg.synthesis
    pn = projector(dec)
    try:
        pool = boundary_shape_pool(dec, regions)
        cm, rank = synthesize_inputs(dec, pool, regions, sy.mode, seed=sy.seed,
                                     max_resample=sy.max_resample, rank_tol=sy.rank_tol)
    except ValueError as exc:
        return fail("synthesis", str(exc))
    witness = ucp_witness_check(dec, regions, sy.mode, sy.ucp_tol)
    rank_report = {"kalman": rank.to_dict(), "witness": witness.to_dict(),
                   "pool": {"size": pool.size, "raw_norms": pool.raw_norms,
                            "degenerate": pool.degenerate}}
    res.reports["rank"] = rank_report
    write("rank.json", dumps(rank_report))
    if not rank.passed:
        return fail("synthesis", f"Kalman rank test failed after {rank.attempts} attempts "
                                 f"(ranks {rank.ranks}, need {rank.multiplicities})", EXIT_RANK)
    try:
        law = package_feedback(pole_place(dec, cm, sy.gamma1, sy.spread, sy.place_tol), pn)
    except PlacementError as exc:
        return fail("synthesis", str(exc))
    res.reports["feedback"] = law.to_dict()
    write("feedback.json", dumps(law.to_dict()))

    sim = cfg.sim
    clo = assemble_closed_loop(op, law, pn)
    norms = NormProxy(op, sim.q, sim.p, symmetric_eigenbasis(op))
    w0 = initial_state(cfg, op, dec)
    t_end, dt = cfg.t_end(), cfg.dt()
    try:
        tr_open = propagate_linear(open_loop(op), w0, sim.open_loop_t_end, dt, scheme=sim.scheme,
                                   norms=norms)
        tr_closed = propagate_linear(clo, w0, t_end, dt, scheme=sim.scheme, norms=norms)
        tr_nl = (propagate_nonlinear(clo, sim.initial_amplitude * w0, t_end, dt, scheme=sim.scheme,
                                     norms=norms) if sim.nonlinear else None)
    except (np.linalg.LinAlgError, ValueError) as exc:
        return fail("simulate", str(exc))
    write("trace_open_loop.csv", tr_open.to_csv())
    write("trace_closed_loop.csv", tr_closed.to_csv())
    if tr_nl is not None:
        write("trace_nonlinear.csv", tr_nl.to_csv())

    first = dec.first_stable
    bound = min(sy.gamma1, abs(first.real)) if first is not None else sy.gamma1
    d_open = estimate_decay(tr_open)
    d_closed = estimate_decay(tr_closed)
    decay = {
        "gamma1": sy.gamma1,
        "target_rate": bound,
        "open_loop": d_open.to_dict(),
        "closed_loop_linear": d_closed.to_dict(),
        "closed_loop_linear_pass": bool(d_closed.gamma_fit >= 0.9 * bound and d_closed.r2 >= 0.99),
        "leading_eigenvalue": [float(dec.unstable[0].real), float(dec.unstable[0].imag)],
    }
    if tr_nl is not None:
        decay["nonlinear_status"] = tr_nl.status
        if tr_nl.status == "ok":
            d_nl = estimate_decay(tr_nl)
            decay["nonlinear"] = d_nl.to_dict()
        else:
            decay["nonlinear_message"] = tr_nl.message
    res.reports["decay"] = decay
    write("decay.json", dumps(decay))
    res.status = "ok"
    write("summary.json", dumps({"status": "ok", "N": dec.N, "K": law.K, "mode": sy.mode,
                                 "equilibrium": eq_report, "rank_attempts": rank.attempts,
                                 "exit_code": EXIT_OK,
                                 "closed_loop_linear_pass": decay["closed_loop_linear_pass"]}))
    return res
