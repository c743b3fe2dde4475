"""Configuration module for imexode."""

import copy
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .errors import ConfigError

# Load environment variables
load_dotenv()


class Config:
    """Process-wide defaults, overridable through the environment or a .env file."""

    # Logging
    LOG_LEVEL = os.getenv("IMEXODE_LOG_LEVEL", "INFO")
    LOG_DIR = os.getenv("IMEXODE_LOG_DIR", "logs")

    # Integration safeguards
    BLOWUP_LIMIT = float(os.getenv("IMEXODE_BLOWUP_LIMIT", "1e10"))

    # Krylov defaults; kept tight so finite-difference gradient checks stay clean
    KRYLOV_TOL = float(os.getenv("IMEXODE_KRYLOV_TOL", "1e-10"))
    KRYLOV_MAXIT = int(os.getenv("IMEXODE_KRYLOV_MAXIT", "200"))
    KRYLOV_RESTART = int(os.getenv("IMEXODE_KRYLOV_RESTART", "30"))

    # Full-scale experiment presets; desk-scale runs override width/depth
    EXPERIMENTS: Dict[str, Dict[str, Any]] = {
        "ks64": {
            "kind": "ks", "grid": 64, "length": 22.0, "nu": None,
            "dims": [64, 200, 200, 200, 200, 64], "sigma": 0.01,
            "dt": 0.2, "sample_interval": 0.2, "n_traj": 1, "n_train": 1,
        },
        "ks512": {
            "kind": "ks", "grid": 512, "length": 22.0, "nu": None,
            "dims": [512, 1600, 1600, 1600, 1600, 512], "sigma": 0.01,
            "dt": 0.2, "sample_interval": 0.2, "n_traj": 1, "n_train": 1,
        },
        "burgers512": {
            "kind": "burgers", "grid": 512, "length": 1.0, "nu": 8e-4,
            "dims": [512, 576, 576, 576, 576, 512], "sigma": 0.1,
            "dt": 0.05, "sample_interval": 0.1, "n_traj": 100, "n_train": 80,
        },
        "burgers1024": {
            "kind": "burgers", "grid": 1024, "length": 1.0, "nu": 8e-4,
            "dims": [1024, 1152, 1152, 1152, 1152, 1024], "sigma": 0.1,
            "dt": 0.05, "sample_interval": 0.1, "n_traj": 100, "n_train": 80,
        },
    }

    @classmethod
    def log_level(cls) -> int:
        """Numeric logging level for LOG_LEVEL, INFO when unrecognised."""
        level = logging.getLevelName(cls.LOG_LEVEL.upper())
        return level if isinstance(level, int) else logging.INFO

    @classmethod
    def get_experiment(cls, name: str) -> Dict[str, Any]:
        """Get a copy of the preset for an experiment id."""
        if name not in cls.EXPERIMENTS:
            raise ConfigError(
                f"Unknown experiment '{name}' (expected one of {sorted(cls.EXPERIMENTS)} or 'custom')"
            )
        return copy.deepcopy(cls.EXPERIMENTS[name])


class RunConfig(BaseModel):
    """Resolved configuration of one CLI run, parsed from a key=value file."""

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    experiment: Literal["ks64", "ks512", "burgers512", "burgers1024", "custom"] = "ks64"
    scheme: str = "imex-rk3"
    dt: Optional[float] = Field(default=None, gt=0)
    epochs: int = Field(default=10, ge=0)
    batch_size: int = Field(default=16, ge=1)
    lr: float = Field(default=1e-3, ge=0)
    seed: int = Field(default=0, ge=0)

    solver_kind: Literal["direct", "krylov"] = Field(default="direct", alias="solver.kind")
    solver_tol: float = Field(default=Config.KRYLOV_TOL, gt=0, alias="solver.tol")
    solver_maxit: int = Field(default=Config.KRYLOV_MAXIT, ge=1, alias="solver.maxit")
    solver_restart: int = Field(default=Config.KRYLOV_RESTART, ge=1, alias="solver.restart")

    # Desk-scale overrides
    width: Optional[int] = Field(default=None, ge=1)
    depth: Optional[int] = Field(default=None, ge=0)
    n_traj: Optional[int] = Field(default=None, ge=1)
    max_pairs: Optional[int] = Field(default=None, ge=1)
    steps_per_sample: Optional[int] = Field(default=None, ge=1)

    # Only read for experiment=custom
    kind: Optional[Literal["ks", "burgers"]] = None
    grid: Optional[int] = Field(default=None, ge=3)
    length: Optional[float] = Field(default=None, gt=0)
    nu: Optional[float] = Field(default=None, gt=0)
    sigma: Optional[float] = Field(default=None, gt=0)
    sample_interval: Optional[float] = Field(default=None, gt=0)

    # Paths
    dataset: Optional[str] = None
    model: Optional[str] = None
    metrics: Optional[str] = None

    @classmethod
    def from_mapping(cls, values: Dict[str, Any]) -> "RunConfig":
        """Validate a flat mapping, turning pydantic failures into ConfigError."""
        try:
            return cls.model_validate(values)
        except ValidationError as e:
            raise ConfigError(f"Invalid run configuration: {e}") from e

    @classmethod
    def load(cls, path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> "RunConfig":
        """
        Load a run configuration file and apply command-line overrides.

        Args:
            path: Path to a key=value file, or None for defaults only
            overrides: Values that win over the file (None entries are ignored)

        Returns:
            Validated RunConfig
        """
        values: Dict[str, Any] = parse_key_value_file(path) if path else {}
        for key, value in (overrides or {}).items():
            if value is not None:
                values[key] = value
        return cls.from_mapping(values)

    def preset(self) -> Dict[str, Any]:
        """Experiment preset with custom keys and width/depth overrides applied."""
        if self.experiment == "custom":
            missing = [k for k in ("kind", "grid", "length") if getattr(self, k) is None]
            if missing:
                raise ConfigError(f"experiment=custom requires keys: {', '.join(missing)}")
            grid = self.grid
            preset: Dict[str, Any] = {
                "kind": self.kind, "grid": grid, "length": self.length,
                "nu": self.nu if self.nu is not None else (8e-4 if self.kind == "burgers" else None),
                "dims": [grid, 4 * grid, 4 * grid, grid],
                "sigma": 0.1 if self.kind == "burgers" else 0.01,
                "dt": 0.05 if self.kind == "burgers" else 0.2,
                "sample_interval": 0.1 if self.kind == "burgers" else 0.2,
                "n_traj": 100 if self.kind == "burgers" else 1,
                "n_train": 80 if self.kind == "burgers" else 1,
            }
        else:
            preset = Config.get_experiment(self.experiment)

        for key in ("sigma", "sample_interval", "dt"):
            value = getattr(self, key)
            if value is not None:
                preset[key] = value
        if self.n_traj is not None:
            preset["n_traj"] = self.n_traj
            preset["n_train"] = max(1, (4 * self.n_traj) // 5) if self.n_traj > 1 else 1

        dims = preset["dims"]
        width = self.width if self.width is not None else dims[1]
        depth = self.depth if self.depth is not None else len(dims) - 2
        preset["dims"] = [dims[0]] + [width] * depth + [dims[-1]]
        return preset

    def provenance(self) -> List[str]:
        """Resolved configuration as key=value lines for file headers."""
        dumped = self.model_dump(by_alias=True)
        return [f"{key}={value}" for key, value in dumped.items() if value is not None]


def parse_key_value_file(path: str) -> Dict[str, str]:
    """
    Parse a plain-text configuration file.

    One ``key=value`` pair per line; ``#`` starts a comment, blank lines are ignored.
    """
    file_path = Path(path)
    if not file_path.exists():
        raise ConfigError(f"Configuration file not found: {path}")

    values: Dict[str, str] = {}
    for lineno, raw in enumerate(file_path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got '{raw.strip()}'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        values[key] = value
    return values
