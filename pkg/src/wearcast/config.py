"""Pipeline configuration: dataclass defaults, TOML files with dotted sections, env overrides."""

from __future__ import annotations

import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .calibration import ONSET_GRID, TAU_GRID
from .constants import BASELINE_MINUTES, CONTEXT_MINUTES, EPSILON, METRICS, WINDOWS
from .model import ModelConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

ENV_PREFIX = "WEARCAST_"


class ConfigError(ValueError):
    """A configuration value violates an invariant."""


@dataclass
class SplitConfig:
    test_fraction: float = 0.20
    val_fraction: float = 0.15
    min_examples: int = 3


@dataclass
class CalibrationConfig:
    onset_max: int = ONSET_GRID[-1]
    tau_min: float = TAU_GRID[0]
    tau_max: float = TAU_GRID[-1]
    tau_step: float = 0.1

    @property
    def onset_grid(self):
        return tuple(range(self.onset_max + 1))

    @property
    def tau_grid(self):
        n = int(round((self.tau_max - self.tau_min) / self.tau_step))
        return tuple(round(self.tau_min + k * self.tau_step, 10) for k in range(n + 1))


@dataclass
class SynthConfig:
    n_users: int = 8
    days: int = 28
    noise_scale: float = 1.0
    gap_rate: float = 0.2
    start_date: str = "2024-03-04"


@dataclass
class PipelineConfig:
    data_root: str = "data"  # relative paths resolve against the output directory
    out: str = "runs/default"
    tz: str = "UTC"
    windows: tuple = WINDOWS
    epsilon: dict = field(default_factory=lambda: dict(EPSILON))
    context_minutes: int = CONTEXT_MINUTES
    baseline_minutes: int = BASELINE_MINUTES
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def validate(self):
        w = [tuple(int(x) for x in pair) for pair in self.windows]
        if not w or w[0][0] != 0 or any(a >= b for a, b in w) or any(
                p[1] != q[0] for p, q in zip(w, w[1:])):
            raise ConfigError(f"windows must be contiguous and start at 0: {self.windows}")
        self.windows = tuple(w)
        for m in METRICS:
            if m not in self.epsilon:
                raise ConfigError(f"missing epsilon.{m}")
            if not float(self.epsilon[m]) > 0:
                raise ConfigError(f"epsilon.{m} must be positive, got {self.epsilon[m]}")
        if self.context_minutes != CONTEXT_MINUTES or self.baseline_minutes != BASELINE_MINUTES:
            raise ConfigError("context_minutes and baseline_minutes are fixed by the feature layout")
        if self.model.context_minutes != self.context_minutes:
            raise ConfigError("model.context_minutes must equal context_minutes")
        if self.model.horizon != self.windows[-1][1]:
            raise ConfigError("model.horizon must equal the end of the last window")
        s = self.split
        if not (0 <= s.test_fraction < 1 and 0 <= s.val_fraction < 1
                and s.test_fraction + s.val_fraction < 1):
            raise ConfigError("split fractions must lie in [0, 1) and sum below 1")
        c = self.calibration
        if c.onset_max < 0 or not 0 < c.tau_min <= c.tau_max or c.tau_step <= 0:
            raise ConfigError("calibration grids must be non-empty and positive")
        if self.synth.n_users < 1 or self.synth.days < 2:
            raise ConfigError("synthetic cohort needs at least one user and two days")
        self.model.epsilon = {m: float(self.epsilon[m]) for m in METRICS}
        self.model.seed = self.seed
        return self

    def to_dict(self):
        d = asdict(self)
        d["windows"] = [list(x) for x in self.windows]
        return d

    def hash(self) -> str:
        """Digest of everything except the output location."""
        d = self.to_dict()
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def out_dir(self) -> Path:
        return Path(self.out)

    def data_dir(self) -> Path:
        p = Path(self.data_root)
        return p if p.is_absolute() else self.out_dir() / p


def _flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flatten(v, f"{prefix}{k}."))
        else:
            out[f"{prefix}{k}"] = v
    return out


def _set(cfg, dotted: str, value):
    parts = dotted.split(".")
    if parts[0] == "epsilon":
        if len(parts) != 2 or parts[1] not in METRICS:
            raise ConfigError(f"unknown config key {dotted!r}")
        if not isinstance(value, (int, float)):
            raise ConfigError(f"{dotted} expects a number, got {value!r}")
        cfg.epsilon[parts[1]] = float(value)
        return
    obj = cfg
    for p in parts[:-1]:
        if not is_dataclass(obj) or p not in {f.name for f in fields(obj)}:
            raise ConfigError(f"unknown config key {dotted!r}")
        obj = getattr(obj, p)
    name = parts[-1]
    if not is_dataclass(obj) or name not in {f.name for f in fields(obj)}:
        raise ConfigError(f"unknown config key {dotted!r}")
    current = getattr(obj, name)
    if isinstance(current, tuple):
        value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
    elif isinstance(current, bool):
        value = bool(value)
    elif isinstance(current, (int, float)) and (isinstance(value, bool)
                                                 or not isinstance(value, (int, float))):
        raise ConfigError(f"{dotted} expects a number, got {value!r}")
    elif isinstance(current, float):
        value = float(value)
    setattr(obj, name, value)


def _env_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def load_config(path=None, overrides: dict | None = None, environ=None) -> PipelineConfig:
    """Defaults, then the TOML file, then ``WEARCAST_SECTION__KEY`` variables, then ``overrides``."""
    cfg = PipelineConfig()
    if path is not None:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
        for k, v in _flatten(raw).items():
            _set(cfg, k, v)
    environ = os.environ if environ is None else environ
    for k in sorted(environ):
        if k.startswith(ENV_PREFIX):
            _set(cfg, k[len(ENV_PREFIX):].lower().replace("__", "."), _env_value(environ[k]))
    for k, v in (overrides or {}).items():
        if v is not None:
            _set(cfg, k, v)
    try:
        cfg.model.__post_init__()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg.validate()
