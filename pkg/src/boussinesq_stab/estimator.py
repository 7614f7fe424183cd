"""Scikit-learn style facade over the pipeline stages.

``fit`` builds the model and synthesizes the feedback; ``transform`` maps
states (rows) to feedback coefficients ``[nu_1..nu_K, mu_1..mu_K]``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .closedloop import assemble_closed_loop, propagate_linear, propagate_nonlinear
from .equilibrium import manufactured_equilibrium
from .geometry import build_grid, build_regions
from .operators import assemble_generator
from .spectral import eig_unstable, projector
from .synthesis import (
    RankCheckFailure,
    boundary_shape_pool,
    package_feedback,
    pole_place,
    synthesize_inputs,
)


class FeedbackStabilizer(TransformerMixin, BaseEstimator):
    """Synthesize a finite-dimensional stabilizing feedback for a manufactured equilibrium.

    Parameters mirror the scenario configuration (grid, physics, equilibrium
    profile, control regions, spectral threshold and synthesis settings).

    Attributes
    ----------
    decomposition_ : SpectralDecomposition
    law_ : FeedbackLaw or None
        None when nothing is unstable.
    closed_loop_ : ClosedLoopOperator
    rank_report_ : RankReport or None
    n_unstable_ : int
    n_features_in_ : int
        State dimension expected by :meth:`transform`.
    """

    def __init__(self, nx=16, ny=16, lx=1.0, ly=1.0, nu=1.0, kappa=1.0, gamma=125.0,
                 theta_bar=0.0, profile="thermal", amplitude=128.0, side="top", frac_gamma=0.5,
                 d_collar=2, offset=0.5, threshold=0.0, mode="full", gamma1=2.0, spread=0.5,
                 seed=0, max_resample=10, rank_tol=1e-8):
        self.nx = nx
        self.ny = ny
        self.lx = lx
        self.ly = ly
        self.nu = nu
        self.kappa = kappa
        self.gamma = gamma
        self.theta_bar = theta_bar
        self.profile = profile
        self.amplitude = amplitude
        self.side = side
        self.frac_gamma = frac_gamma
        self.d_collar = d_collar
        self.offset = offset
        self.threshold = threshold
        self.mode = mode
        self.gamma1 = gamma1
        self.spread = spread
        self.seed = seed
        self.max_resample = max_resample
        self.rank_tol = rank_tol

    def fit(self, X=None, y=None):
        """Build the model; ``X`` and ``y`` are ignored (the data is the PDE itself)."""
        grid = build_grid(self.nx, self.ny, self.lx, self.ly)
        regions = build_regions(grid, self.side, self.frac_gamma, self.d_collar, self.offset)
        eq = manufactured_equilibrium(self.profile, self.amplitude, grid, nu=self.nu,
                                      kappa=self.kappa, gamma=self.gamma, theta_bar=self.theta_bar)
        op = assemble_generator(eq, eq.forcing, grid, regions)
        dec = eig_unstable(op, self.threshold)
        self.grid_, self.regions_, self.equilibrium_, self.generator_ = grid, regions, eq, op
        self.decomposition_ = dec
        self.projector_ = projector(dec)
        self.n_unstable_ = dec.N
        self.n_features_in_ = op.size
        self.law_ = None
        self.rank_report_ = None
        if dec.N:
            pool = boundary_shape_pool(dec, regions)
            cm, rep = synthesize_inputs(dec, pool, regions, self.mode, seed=self.seed,
                                        max_resample=self.max_resample, rank_tol=self.rank_tol)
            self.rank_report_ = rep
            if not rep.passed:
                raise RankCheckFailure("rank condition failed after resampling", rep)
            law = pole_place(dec, cm, self.gamma1, self.spread)
            self.law_ = package_feedback(law, self.projector_)
        self.closed_loop_ = assemble_closed_loop(op, self.law_, self.projector_)
        return self

    def transform(self, X):
        check_is_fitted(self, "closed_loop_")
        X = check_array(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} columns, expected {self.n_features_in_}")
        if self.law_ is None:
            return np.zeros((X.shape[0], 0))
        return np.array([np.concatenate(self.law_.coefficients(w)) for w in X])

    def simulate(self, w0, t_end, dt, nonlinear=False, **kwargs):
        check_is_fitted(self, "closed_loop_")
        run = propagate_nonlinear if nonlinear else propagate_linear
        return run(self.closed_loop_, w0, t_end, dt, **kwargs)
