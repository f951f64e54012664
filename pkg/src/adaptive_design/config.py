"""Flat ``key = value`` run configuration with command-line overrides."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Mapping, Optional, Union

from adaptive_design.model import DoseInterval, ModelParams, ParameterBox
from adaptive_design.simulation import Scenario


class ConfigError(ValueError):
    """Malformed configuration file or value."""


@dataclass(frozen=True)
class RunConfig:
    theta0: float = 2.0
    theta1: float = 0.467
    theta2: float = 25.0
    theta2_guess: float = 50.0
    sigma: float = 0.1
    stage1_sigma: Optional[float] = None
    n1: int = 27
    n2: int = 270
    a: float = 0.0
    b: float = 150.0
    replications: int = 10_000
    seed: int = 0
    theta2_min: float = 0.015
    theta2_max: float = 1500.0
    curve: Optional[str] = None
    drop_boundary: bool = False
    draws: int = 10_000
    threads: Optional[int] = None
    out_dir: str = "."
    format: str = "csv"

    def __post_init__(self) -> None:
        if self.format not in ("csv", "json"):
            raise ConfigError(f"format must be csv or json, got {self.format!r}")

    def theta_true(self) -> ModelParams:
        return ModelParams(self.theta0, self.theta1, self.theta2)

    def dose_interval(self) -> DoseInterval:
        return DoseInterval(self.a, self.b)

    def box(self) -> ParameterBox:
        return ParameterBox(self.theta2_min, self.theta2_max)

    def scenario(self) -> Scenario:
        return Scenario(
            theta_true=self.theta_true(),
            theta2_guess=self.theta2_guess,
            sigma=self.sigma,
            n1=self.n1,
            n2=self.n2,
            dose_interval=self.dose_interval(),
            replications=self.replications,
            master_seed=self.seed,
            stage1_sigma=self.stage1_sigma,
            box=self.box(),
        )

    def provenance(self) -> dict[str, Any]:
        """Resolved settings that determine results.

        Thread count, output directory and report format are left out so
        that output files do not depend on how a run was executed.
        """
        skip = {"threads", "out_dir", "format"}
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name not in skip}

    def with_overrides(self, overrides: Mapping[str, Any]) -> "RunConfig":
        known = {f.name for f in fields(self)}
        unknown = set(overrides) - known
        if unknown:
            raise ConfigError(f"unknown configuration keys: {', '.join(sorted(unknown))}")
        clean = {k: v for k, v in overrides.items() if v is not None}
        return replace(self, **clean)


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, text: str) -> Any:
    kind = _TYPES[key]
    value = text.strip()
    if "Optional" in kind and value.lower() in ("", "none"):
        return None
    try:
        if "bool" in kind:
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if "int" in kind:
            return int(value)
        if "float" in kind:
            out = float(value)
            if not math.isfinite(out):
                raise ValueError(value)
            return out
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text.strip()!r} as {kind}") from None
    return value


def parse_config_text(text: str) -> dict[str, Any]:
    values: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, value)
    return values


def load_config(path: Union[str, Path, None], overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Defaults, then the file at ``path`` (if any), then ``overrides``."""
    cfg = RunConfig()
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        cfg = cfg.with_overrides(parse_config_text(text))
    return cfg.with_overrides(overrides or {})


def format_config(values: Mapping[str, Any]) -> str:
    return "".join(f"{k} = {_render(v)}\n" for k, v in values.items())


def _render(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return f"{value:.17g}"
    return str(value)
