"""Scenario configuration: a nested key-value tree read from YAML."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from ._validation import check_besov_indices
from .equilibrium import PROFILES
from .geometry import MIN_CELLS, SIDES
from .synthesis import MODES


class ConfigError(ValueError):
    """Invalid scenario configuration."""


@dataclass
class GridConfig:
    nx: int = 16
    ny: int = 16
    lx: float = 1.0
    ly: float = 1.0


@dataclass
class PhysicsConfig:
    nu: float = 1.0
    kappa: float = 1.0
    gamma: float = 125.0
    theta_bar: float = 0.0


@dataclass
class EquilibriumConfig:
    mode: str = "manufactured"  # or "solve"
    profile: str = "thermal"
    amplitude: float = 128.0
    tol: float = 1e-10
    max_iter: int = 50


@dataclass
class RegionsConfig:
    side: str = "top"
    frac_gamma: float = 0.5
    d_collar: int = 2
    offset: float = 0.5


@dataclass
class SpectralConfig:
    threshold: float = 0.0
    gap_tol: float = 1e-6
    cluster_tol: float | None = None
    method: str = "auto"


@dataclass
class SynthesisConfig:
    mode: str = "full"
    gamma1: float = 2.0
    spread: float = 0.5
    seed: int = 0
    max_resample: int = 10
    rank_tol: float = 1e-8
    ucp_tol: float = 1e-10
    place_tol: float = 1e-6


@dataclass
class SimConfig:
    t_end: float | None = None  # default 10 / gamma1
    dt: float | None = None  # default 0.01 / gamma1
    open_loop_t_end: float = 1.0
    initial_amplitude: float = 1e-3
    initial: str = "unstable"  # or "random"
    initial_seed: int = 0
    scheme: str = "trapezoid"
    q: float = 4.0
    p: float = 1.1
    nonlinear: bool = True


@dataclass
class OutputConfig:
    dir: str = "bstab_out"


@dataclass
class ScenarioConfig:
    grid: GridConfig = field(default_factory=GridConfig)
    physics: PhysicsConfig = field(default_factory=PhysicsConfig)
    equilibrium: EquilibriumConfig = field(default_factory=EquilibriumConfig)
    regions: RegionsConfig = field(default_factory=RegionsConfig)
    spectral: SpectralConfig = field(default_factory=SpectralConfig)
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def t_end(self) -> float:
        return self.sim.t_end if self.sim.t_end is not None else 10.0 / self.synthesis.gamma1

    def dt(self) -> float:
        return self.sim.dt if self.sim.dt is not None else 0.01 / self.synthesis.gamma1

    def replace_value(self, key: str, value) -> "ScenarioConfig":
        """Copy with one entry changed; ``key`` is ``section.name`` or an unambiguous ``name``."""
        out = copy.deepcopy(self)
        section, name = _resolve_key(out, key)
        setattr(getattr(out, section), name, _coerce(getattr(getattr(out, section), name), value, key))
        validate(out)
        return out


def _resolve_key(cfg: ScenarioConfig, key: str) -> tuple[str, str]:
    if "." in key:
        section, name = key.split(".", 1)
        if not hasattr(cfg, section) or name not in _field_names(getattr(cfg, section)):
            raise ConfigError(f"unknown configuration key {key!r}")
        return section, name
    hits = [f.name for f in fields(cfg) if key in _field_names(getattr(cfg, f.name))]
    if len(hits) != 1:
        raise ConfigError(f"key {key!r} is {'ambiguous' if hits else 'unknown'}; use section.name")
    return hits[0], key


def _field_names(obj) -> set[str]:
    return {f.name for f in fields(obj)}


def _coerce(current, value, key):
    if isinstance(value, str) and not isinstance(current, str):
        try:
            value = yaml.safe_load(value)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse value for {key!r}: {value!r}") from exc
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be a boolean")
        return value
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{key} must be an integer, got {value!r}")
        return value
    if isinstance(current, float) or current is None:
        if value is None:
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}")
        return float(value)
    if isinstance(current, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key} must be a string, got {value!r}")
        return value
    return value


def from_dict(data: dict | None) -> ScenarioConfig:
    cfg = ScenarioConfig()
    data = data or {}
    if not isinstance(data, dict):
        raise ConfigError("configuration root must be a mapping")
    for section, values in data.items():
        if section not in _field_names(cfg):
            raise ConfigError(f"unknown section {section!r}")
        if values is None:
            continue
        if not isinstance(values, dict):
            raise ConfigError(f"section {section!r} must be a mapping")
        target = getattr(cfg, section)
        for name, value in values.items():
            if name not in _field_names(target):
                raise ConfigError(f"unknown key {section}.{name}")
            setattr(target, name, _coerce(getattr(target, name), value, f"{section}.{name}"))
    validate(cfg)
    return cfg


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    return from_dict(data)


def dump_config(cfg: ScenarioConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)


def _positive(value, name):
    if value is None or not value > 0:
        raise ConfigError(f"{name} must be positive, got {value!r}")


def validate(cfg: ScenarioConfig) -> None:
    """Range checks run before any computation."""
    g = cfg.grid
    if g.nx < MIN_CELLS or g.ny < MIN_CELLS:
        raise ConfigError(f"grid needs at least {MIN_CELLS} cells per axis, got {g.nx}x{g.ny}")
    _positive(g.lx, "grid.lx")
    _positive(g.ly, "grid.ly")
    ph = cfg.physics
    _positive(ph.nu, "physics.nu")
    _positive(ph.kappa, "physics.kappa")
    if ph.gamma < 0 or ph.theta_bar < 0:
        raise ConfigError("physics.gamma and physics.theta_bar must be non-negative")
    eq = cfg.equilibrium
    if eq.mode not in ("manufactured", "solve"):
        raise ConfigError(f"equilibrium.mode must be 'manufactured' or 'solve', got {eq.mode!r}")
    if eq.mode == "manufactured" and eq.profile not in PROFILES:
        raise ConfigError(f"equilibrium.profile must be one of {PROFILES}, got {eq.profile!r}")
    _positive(eq.tol, "equilibrium.tol")
    if eq.max_iter < 1:
        raise ConfigError("equilibrium.max_iter must be >= 1")
    r = cfg.regions
    if r.side not in SIDES:
        raise ConfigError(f"regions.side must be one of {SIDES}, got {r.side!r}")
    if not 0 < r.frac_gamma <= 1:
        raise ConfigError("regions.frac_gamma must lie in (0, 1]")
    if not 0 <= r.offset <= 1:
        raise ConfigError("regions.offset must lie in [0, 1]")
    if r.d_collar < 1:
        raise ConfigError("regions.d_collar must be >= 1")
    sp_ = cfg.spectral
    _positive(sp_.gap_tol, "spectral.gap_tol")
    if sp_.cluster_tol is not None:
        _positive(sp_.cluster_tol, "spectral.cluster_tol")
    if sp_.method not in ("auto", "dense", "iterative"):
        raise ConfigError(f"spectral.method must be auto, dense or iterative, got {sp_.method!r}")
    sy = cfg.synthesis
    if sy.mode not in MODES[:2]:
        raise ConfigError(f"synthesis.mode must be 'full' or 'reduced_d2' on a 2-d grid, got {sy.mode!r}")
    for name in ("gamma1", "spread", "rank_tol", "ucp_tol", "place_tol"):
        _positive(getattr(sy, name), f"synthesis.{name}")
    if sy.max_resample < 0:
        raise ConfigError("synthesis.max_resample must be >= 0")
    sim = cfg.sim
    for name in ("t_end", "dt"):
        value = getattr(sim, name)
        if value is not None:
            _positive(value, f"sim.{name}")
    _positive(sim.open_loop_t_end, "sim.open_loop_t_end")
    _positive(sim.initial_amplitude, "sim.initial_amplitude")
    if sim.initial not in ("unstable", "random"):
        raise ConfigError("sim.initial must be 'unstable' or 'random'")
    if sim.scheme not in ("trapezoid", "implicit_euler"):
        raise ConfigError("sim.scheme must be 'trapezoid' or 'implicit_euler'")
    try:
        check_besov_indices(sim.q, sim.p)
    except ValueError as exc:
        raise ConfigError(f"sim.q/sim.p: {exc}") from exc
