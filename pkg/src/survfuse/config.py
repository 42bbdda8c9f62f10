"""Run configuration: a flat JSON object with validated keys."""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, fields

from .errors import InvalidInputError

COMMANDS = ("fit", "simulate", "grid", "certify")
CASES = ("1", "2", "3", "S1", "S2", "S3")
METHODS = ("integrative", "rct", "rwd")
WORKERS_ENV = "SURVFUSE_WORKERS"


def default_workers():
    raw = os.environ.get(WORKERS_ENV)
    if raw is None:
        return 1
    try:
        value = int(raw)
    except ValueError:
        raise InvalidInputError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    if value < 1:
        raise InvalidInputError(f"{WORKERS_ENV} must be >= 1")
    return value


@dataclass
class FitConfig:
    """Settings shared by every estimator.

    ``propensity`` is either a number in (0, 1), used as a known constant
    trial propensity, or the string ``"estimate"`` for a logistic fit.
    ``knots`` is the number of interior knots per dimension (``None`` picks
    it from the sample size).  ``basis_covariates`` restricts the spline
    bases to the named covariates.
    """

    horizon: float = 3.0
    degree: int = 3
    m: int = 2
    knots: int | None = None
    gamma_grid: int = 15
    gamma_range: tuple = (1e-8, 1e2)
    propensity: float | str = 0.5
    interactions: bool = True
    basis_covariates: tuple | None = None

    def validate(self):
        if not (isinstance(self.horizon, (int, float)) and math.isfinite(self.horizon)
                and self.horizon > 0):
            raise InvalidInputError("horizon must be a finite number > 0")
        if not isinstance(self.degree, int) or not 1 <= self.degree <= 5:
            raise InvalidInputError("degree must be an integer in [1, 5]")
        if not isinstance(self.m, int) or not 1 <= self.m <= self.degree:
            raise InvalidInputError("m must be an integer in [1, degree]")
        if self.knots is not None and (not isinstance(self.knots, int) or not 0 <= self.knots <= 50):
            raise InvalidInputError("knots must be null or an integer in [0, 50]")
        if not isinstance(self.gamma_grid, int) or not 1 <= self.gamma_grid <= 100:
            raise InvalidInputError("gamma_grid must be an integer in [1, 100]")
        lo, hi = self.gamma_range
        if not (0 < lo <= hi):
            raise InvalidInputError("gamma_range must satisfy 0 < lo <= hi")
        if isinstance(self.propensity, str):
            if self.propensity != "estimate":
                raise InvalidInputError("propensity must be a number in (0, 1) or 'estimate'")
        elif not 0 < self.propensity < 1:
            raise InvalidInputError("propensity must lie in (0, 1)")
        if not isinstance(self.interactions, bool):
            raise InvalidInputError("interactions must be true or false")
        return self

    @property
    def known_propensity(self):
        return None if self.propensity == "estimate" else float(self.propensity)


@dataclass
class RunConfig(FitConfig):
    """Everything a CLI command needs; unknown keys are rejected."""

    command: str = "fit"
    data: str | None = None
    covariates: tuple | None = None
    out: str = "out"
    seed: int = 0
    workers: int = field(default_factory=default_workers)
    case: str = "1"
    n1: int = 500
    n0: int = 1000
    reps: int = 200
    methods: tuple = METHODS
    grid_points: int = 7
    fit_file: str | None = None
    oracle_draws: int = 100000

    def validate(self):
        super().validate()
        if self.command not in COMMANDS:
            raise InvalidInputError(f"command must be one of {COMMANDS}")
        if str(self.case) not in CASES:
            raise InvalidInputError(f"case must be one of {CASES}")
        self.case = str(self.case)
        for name in ("n1", "n0", "reps", "grid_points", "oracle_draws", "workers"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < (0 if name == "n0" else 1):
                raise InvalidInputError(f"{name} must be a positive integer")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise InvalidInputError("seed must be a nonnegative integer")
        bad = [m for m in self.methods if m not in METHODS]
        if bad or not self.methods:
            raise InvalidInputError(f"methods must be a non-empty subset of {METHODS}")
        return self

    def fit_config(self) -> FitConfig:
        return FitConfig(**{f.name: getattr(self, f.name) for f in fields(FitConfig)})

    def to_dict(self):
        out = asdict(self)
        for k, v in out.items():
            if isinstance(v, tuple):
                out[k] = list(v)
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise InvalidInputError(f"unknown config keys: {unknown}")
        clean = {}
        for k, v in raw.items():
            clean[k] = tuple(v) if isinstance(v, list) else v
        if "horizon" in clean and isinstance(clean["horizon"], int):
            clean["horizon"] = float(clean["horizon"])
        return cls(**clean).validate()

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise InvalidInputError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise InvalidInputError("config must be a JSON object")
    return raw
