"""
Run configuration: defaults from data/defaults.json, a JSON config file,
dotted --set overrides, then --seed / --out. Validated by pydantic.
"""
import copy
import hashlib
import json
import logging
from fractions import Fraction
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from chain.errors import ConfigError
from chain.model import Forcing, Potential, fourier_potential, harmonic_potential, standard_potential
from data.config_loader import default_config

logger = logging.getLogger(__name__)

# Fixed spawn keys of the per-component random streams
STREAM_LABELS: Dict[str, Tuple[int, ...]] = {
    "lattice": (1,),
    "pairs": (2,),
    "ensemble": (3,),
    "subsample": (4,),
    "residence": (5,),
    "spot_check": (6,),
}


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PotentialConfig(_Section):
    family: Literal["standard", "harmonic", "fourier"] = "standard"
    K: float = Field(1.0, ge=0.0)
    site_harmonics: List[Tuple[int, float, float]] = []
    coupling_harmonics: List[Tuple[int, float]] = []

    def build(self) -> Potential:
        if self.family == "harmonic":
            return harmonic_potential()
        if self.family == "fourier":
            return fourier_potential(self.site_harmonics, self.coupling_harmonics)
        return standard_potential(self.K)


class ForcingConfig(_Section):
    kind: Literal["DC", "AC"] = "DC"
    dc_value: float = 0.0
    harmonics: List[Tuple[int, float, float]] = []

    def build(self) -> Forcing:
        if self.kind == "AC":
            return Forcing.ac(self.dc_value, self.harmonics)
        return Forcing.dc(self.dc_value)


class LatticeConfig(_Section):
    N: int = Field(1, ge=1)
    M: int = 0
    amplitude: float = Field(0.0, ge=0.0)


class IntegratorConfig(_Section):
    dt: float = Field(1e-3, gt=0.0)
    dt_out: float = Field(1e-2, gt=0.0)
    horizon: float = Field(50.0, gt=0.0)
    max_horizon: float = Field(1600.0, gt=0.0)
    transient: float = Field(0.5, ge=0.0, lt=1.0)

    @model_validator(mode="after")
    def check_steps(self):
        if not self.dt < self.dt_out:
            raise ValueError(f"dt ({self.dt}) must be smaller than dt_out ({self.dt_out})")
        if self.max_horizon < self.horizon:
            raise ValueError("max_horizon must be >= horizon")
        return self


class TolerancesConfig(_Section):
    tol_zero: float = 1e-10
    tol_tangency: float = 1e-8
    tol_event: float = 1e-9
    tol_quotient: float = 1e-8
    tol_Z: float = 1e-9
    tol_eq: float = 1e-8
    tol_per: float = 1e-6
    tol_v: float = 1e-6
    tol_m: float = 1e-4
    tol_width: float = 1e-8
    tol_spacing: float = 1e-7
    eps_c: float = 1e-4
    eps_pi: float = 1e-6

    @field_validator("*")
    @classmethod
    def positive(cls, v: float) -> float:
        if not v > 0:
            raise ValueError(f"tolerance must be positive, got {v}")
        return v


class SweepConfig(_Section):
    F_grid: List[float] = [0.0]
    blocks: int = Field(1, ge=1)
    p: int = 0
    q: int = Field(1, ge=1)

    @field_validator("F_grid")
    @classmethod
    def ascending(cls, grid: List[float]) -> List[float]:
        if not grid:
            raise ValueError("F_grid is empty")
        if any(b < a for a, b in zip(grid, grid[1:])):
            raise ValueError("F_grid must be ascending")
        return grid

    @property
    def rho(self) -> Fraction:
        return Fraction(self.p, self.q)


class EnsembleConfig(_Section):
    size: int = Field(16, ge=1)
    pairs: int = Field(4, ge=1)
    pairing_cutoff: Optional[int] = Field(64, ge=1)
    mc_pairs: int = Field(4096, ge=2)
    n_avg: int = Field(64, ge=1)
    t_quad: int = Field(20, ge=1)
    workers: int = Field(1, ge=1)


class AubryMatherConfig(_Section):
    p: int = 1
    q: int = Field(3, ge=1)
    target: Optional[float] = None
    q_max: int = Field(128, ge=1)
    dc_dt: float = Field(1.0, gt=0.0)


class ResidenceConfig(_Section):
    horizons: List[float] = [20.0, 200.0]
    eps: float = Field(1e-2, gt=0.0)
    n_times: int = Field(100, ge=1)

    @field_validator("horizons")
    @classmethod
    def positive_horizons(cls, hs: List[float]) -> List[float]:
        if not hs or any(h <= 0 for h in hs):
            raise ValueError("residence horizons must be positive")
        return hs


class LoggingConfig(_Section):
    level: Literal["DEBUG", "INFO", "WARNING", "ERROR"] = "INFO"


class RunConfig(_Section):
    potential: PotentialConfig = PotentialConfig()
    forcing: ForcingConfig = ForcingConfig()
    lattice: LatticeConfig = LatticeConfig()
    integrator: IntegratorConfig = IntegratorConfig()
    tolerances: TolerancesConfig = TolerancesConfig()
    sweep: SweepConfig = SweepConfig()
    ensemble: EnsembleConfig = EnsembleConfig()
    aubry_mather: AubryMatherConfig = AubryMatherConfig()
    residence: ResidenceConfig = ResidenceConfig()
    logging: LoggingConfig = LoggingConfig()
    seed: int = Field(0, ge=0, lt=2 ** 64)
    output_dir: str = "out"

    @property
    def output_path(self) -> Path:
        return Path(self.output_dir)

    def classify_settings(self) -> Dict[str, float]:
        """Keyword arguments for sliding.classify_asymptotics."""
        return {
            "horizon": self.integrator.horizon,
            "max_horizon": self.integrator.max_horizon,
            "dt": self.integrator.dt,
            "dt_out": self.integrator.dt_out,
            "tol_eq": self.tolerances.tol_eq,
            "tol_per": self.tolerances.tol_per,
            "transient": self.integrator.transient,
        }

    def hash(self) -> str:
        return config_hash(self)


# ============================================================================
# Loading
# ============================================================================

def deep_merge(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    """Recursively merge `update` over `base`; nested dicts merge, everything else replaces."""
    out = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def parse_override(item: str) -> Tuple[List[str], Any]:
    """'a.b.c=value' -> (['a', 'b', 'c'], value); values are JSON when they parse, else strings."""
    if "=" not in item:
        raise ConfigError(f"override '{item}' is not of the form key=value", key=item)
    key, raw = item.split("=", 1)
    path = [part for part in key.strip().split(".") if part]
    if not path:
        raise ConfigError(f"override '{item}' has an empty key", key=key)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return path, value


def apply_overrides(raw: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    out = copy.deepcopy(raw)
    for item in overrides:
        path, value = parse_override(item)
        node = out
        for part in path[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigError(f"unknown configuration section '{'.'.join(path[:-1])}'", key=".".join(path))
            node = node[part]
        node[path[-1]] = value
    return out


def validate_config(raw: Dict[str, Any]) -> RunConfig:
    """
    Build a RunConfig from a merged dict.

    Raises:
        ConfigError: with the dotted key of the first offending field
    """
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as e:
        first = e.errors()[0]
        key = ".".join(str(part) for part in first["loc"])
        raise ConfigError(f"invalid configuration at '{key}': {first['msg']}", key=key) from e


def load_run_config(path: Optional[str] = None, overrides: Sequence[str] = (),
                    seed: Optional[int] = None, out: Optional[str] = None) -> RunConfig:
    """
    Defaults <- config file <- --set overrides <- --seed / --out.

    Raises:
        ConfigError: unreadable file, malformed override or failed validation
    """
    raw = default_config()
    if path:
        try:
            with open(path, 'r', encoding='utf-8') as f:
                user = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config file {path}: {e}", key="--config") from e
        if not isinstance(user, dict):
            raise ConfigError(f"config file {path} must hold a JSON object", key="--config")
        raw = deep_merge(raw, user.get("config", user))
    raw = apply_overrides(raw, overrides)
    if seed is not None:
        raw["seed"] = seed
    if out is not None:
        raw["output_dir"] = out
    config = validate_config(raw)
    logger.debug(f"Loaded run configuration {config_hash(config)[:12]} (seed {config.seed})")
    return config


def config_hash(config: RunConfig) -> str:
    """SHA-256 of the merged configuration serialised with sorted keys; output_dir is not hashed."""
    payload = json.dumps(config.model_dump(mode="json", exclude={"output_dir"}), sort_keys=True,
                         separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def seed_stream(master: int, label: str) -> np.random.Generator:
    """Independent generator for one component, derived from the master seed by a fixed label."""
    if label not in STREAM_LABELS:
        raise ConfigError(f"unknown random stream '{label}'", key="seed")
    return np.random.default_rng(np.random.SeedSequence(master, spawn_key=STREAM_LABELS[label]))


def stream_seed(master: int, label: str) -> int:
    """A plain integer seed for library calls that take one."""
    return int(seed_stream(master, label).integers(0, 2 ** 63 - 1))
