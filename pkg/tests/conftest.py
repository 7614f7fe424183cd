from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import pytest

from boussinesq_stab import (
    assemble_closed_loop,
    assemble_generator,
    boundary_shape_pool,
    build_grid,
    build_regions,
    eig_unstable,
    manufactured_equilibrium,
    package_feedback,
    pole_place,
    projector,
)
from boussinesq_stab.synthesis import synthesize_inputs

# Destabilized fixture: internally heated layer above the instability threshold
# (amplitude ~97.5 at gamma = 125 on 16x16); frozen unstable spectrum below.
FIXTURE = dict(n=16, gamma=125.0, amplitude=128.0, side="top")
FIXTURE_UNSTABLE = (14.11011482, 5.72329668)
FIXTURE_FIRST_STABLE = -19.67587287


@dataclass
class Model:
    grid: object
    regions: object
    eq: object
    op: object
    dec: object
    pn: object


@lru_cache(maxsize=None)
def _model(method="dense"):
    grid = build_grid(FIXTURE["n"], FIXTURE["n"])
    regions = build_regions(grid, FIXTURE["side"], 0.5, 2, 0.5)
    eq = manufactured_equilibrium("thermal", FIXTURE["amplitude"], grid, gamma=FIXTURE["gamma"])
    op = assemble_generator(eq, eq.forcing, grid, regions)
    dec = eig_unstable(op, 0.0, method=method)
    return Model(grid, regions, eq, op, dec, projector(dec))


@lru_cache(maxsize=None)
def _loop(mode="full", gamma1=2.0):
    m = _model()
    pool = boundary_shape_pool(m.dec, m.regions)
    cm, report = synthesize_inputs(m.dec, pool, m.regions, mode, seed=0)
    law = package_feedback(pole_place(m.dec, cm, gamma1), m.pn)
    return cm, report, law, assemble_closed_loop(m.op, law, m.pn)


@pytest.fixture(scope="session")
def model():
    return _model()


@pytest.fixture(scope="session")
def model_iterative():
    return _model("iterative")


@pytest.fixture(scope="session")
def loop():
    return _loop


@pytest.fixture(scope="session")
def unstable_start(model):
    R, _, _ = model.dec.real_form
    w = R.sum(axis=1)
    return w / model.op.layout.norm(w)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
