"""Run configuration: flat ``key = value`` files with two built-in presets.

Blank lines and ``#`` comments are ignored. Unknown keys are an error so
that typos do not silently fall back to defaults.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .mesh import parse_length


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    h: float = 0.5
    x_interface: float = 9.0
    U_min: float = 0.5
    U_max: float = 4.5
    nu_min: float = 0.4
    nu_max: float = 2.0
    n_train: int = 8
    seed: int = 20240917
    dt: float = 0.01
    T: float = 0.2
    modes_u1: int = 30
    modes_u2: int = 12
    modes_p1: int = 5
    modes_p2: int = 5
    modes_g: int = 10
    test_U: float = 4.5
    test_nu: float = 0.4
    mode: str = "FFF"
    out: str = "runs/desk"
    gradient: str = "riesz"
    gtol: float = 1e-8
    ftol: float = 1e-12
    maxiter: int = 200
    memory: int = 10
    c1: float = 1e-4
    c2: float = 0.9
    max_linesearch: int = 20
    newton_atol: float = 1e-10
    newton_rtol: float = 1e-12
    newton_maxiter: int = 25
    workers: int = 1
    max_fail_fraction: float = 0.2

    def __post_init__(self):
        self.validate()

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))

    @property
    def mode_counts(self) -> dict:
        return {"u1": self.modes_u1, "u2": self.modes_u2, "p1": self.modes_p1,
                "p2": self.modes_p2, "g": self.modes_g}

    @property
    def parameter_box(self):
        return (self.U_min, self.U_max), (self.nu_min, self.nu_max)

    def validate(self) -> None:
        if not (self.U_min < self.U_max and self.nu_min < self.nu_max):
            raise ConfigError("parameter box is empty")
        if self.nu_min <= 0:
            raise ConfigError("viscosity must be positive")
        if not self.dt > 0:
            raise ConfigError("dt must be positive")
        if self.T < self.dt:
            raise ConfigError("T must be at least dt")
        if abs(self.T / self.dt - self.n_steps) > 1e-9 * max(1.0, self.T / self.dt):
            raise ConfigError("T must be a multiple of dt")
        if min(self.mode_counts.values()) < 1:
            raise ConfigError("mode counts must be positive")
        if self.h <= 0 or self.n_train < 1 or self.workers < 1:
            raise ConfigError("h, n_train and workers must be positive")
        if self.mode not in ("FFF", "FRF", "FRR", "RRR"):
            raise ConfigError(f"unknown coupling mode {self.mode!r}")
        if self.gradient not in ("riesz", "raw"):
            raise ConfigError(f"gradient must be riesz or raw, got {self.gradient!r}")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))


PRESETS = {
    "desk": {},
    # full-scale setting: 64 training parameters, 100 steps, finer mesh
    "paper": {"h": 1.0 / 6.0, "n_train": 64, "T": 1.0, "out": "runs/paper"},
}


def _convert(name: str, typ, text: str):
    text = text.strip()
    try:
        if typ in (float, "float"):
            return float(parse_length(text)) if name in ("h", "x_interface") else float(text)
        if typ in (int, "int"):
            return int(text)
        return text
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"bad value for {name}: {text!r} ({exc})") from None


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    types = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key == "preset":
            if val not in PRESETS:
                raise ConfigError(f"line {lineno}: unknown preset {val!r}")
            values = {**PRESETS[val], **values}
            continue
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _convert(key, types[key], val)
    base = base or RunConfig()
    try:
        return base.replace(**values)
    except ConfigError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path_or_preset: str | None) -> RunConfig:
    """Read a config file, or return a named preset (``desk``/``paper``)."""
    if path_or_preset is None:
        return RunConfig()
    path = Path(path_or_preset)
    if path.is_file():
        return parse_config(path.read_text())
    if path_or_preset in PRESETS:
        return RunConfig().replace(**PRESETS[path_or_preset])
    raise ConfigError(f"config file not found: {path_or_preset}")
