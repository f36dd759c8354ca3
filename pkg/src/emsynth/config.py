"""Flat ``section.key = value`` dataset configuration files.

Example::

    # two conformations, four micrographs
    dataset.volumes = maps/state_a.mrc, maps/state_b.mrc
    dataset.count = 4
    placement.mu_n = 80
    ctf.defocus_mean = 15000

Blank lines and ``#`` comments are ignored. Unknown keys are errors.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

__all__ = ["ConfigError", "DatasetConfig", "parse_config", "config_keys", "WORKERS_ENV"]

WORKERS_ENV = "EMSYNTH_WORKERS"


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _paths(s: str) -> tuple[str, ...]:
    items = tuple(p.strip() for p in s.split(",") if p.strip())
    if not items:
        raise ValueError("empty path list")
    return items


def _strs(s: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in s.split(",") if p.strip())


def _opt_float(s: str) -> float | None:
    return None if s.strip().lower() in ("", "none", "auto") else float(s)


# key -> (attribute, parser, default); a default of ... marks a required key
_SCHEMA: dict[str, tuple[str, Callable[[str], Any], Any]] = {
    "dataset.volumes": ("volumes", _paths, ...),
    "dataset.count": ("count", int, ...),
    "dataset.height": ("height", int, 1024),
    "dataset.width": ("width", int, 1024),
    "dataset.seed": ("seed", int, 0),
    "dataset.workers": ("workers", int, None),
    "dataset.output": ("output", str, "dataset"),
    "placement.mu_n": ("mu_n", float, 100.0),
    "placement.sigma_n": ("sigma_n", float, 10.0),
    "placement.particle_radius": ("particle_radius", _opt_float, None),
    "placement.overlap_factor": ("overlap_factor", float, 1.0),
    "placement.margin": ("margin", float, 0.0),
    "placement.max_attempts": ("max_attempts", int, 1000),
    "ctf.voltage_kv": ("voltage_kv", float, 300.0),
    "ctf.cs": ("cs", float, 2.7e7),
    "ctf.amplitude_contrast": ("amplitude_contrast", float, 0.1),
    "ctf.phase_shift": ("phase_shift", float, 0.0),
    "ctf.defocus_mean": ("defocus_mean", float, 15000.0),
    "ctf.defocus_std": ("defocus_std", float, 3000.0),
    "ice.kinds": ("ice_kinds", _strs, ("linear", "radial")),
    "ice.min_weight_low": ("ice_min_weight_low", float, 0.5),
    "ice.min_weight_high": ("ice_min_weight_high", float, 1.0),
    "ice.blur_sigma": ("ice_blur_sigma", float, 32.0),
    "noise.model": ("noise_model", str, "gaussian"),
    "noise.snr": ("snr", float, 0.1),
    "noise.mix_ratio": ("mix_ratio", float, 0.5),
    "noise.baseline": ("write_baseline", _bool, True),
    "inter.noise_std_frac": ("noise_std_frac", float, 1.0),
    "inter.enabled": ("write_intermediate", _bool, True),
    "mask.threshold_frac": ("threshold_frac", float, 0.1),
    "loss.lambda": ("lam", float, 10.0),
    "loss.tau": ("tau", float, 0.07),
    "output.augment": ("augment", _bool, False),
    "output.normalize": ("normalize", _bool, False),
}


def config_keys() -> list[str]:
    return list(_SCHEMA)


@dataclass
class DatasetConfig:
    volumes: tuple[str, ...]
    count: int
    height: int = 1024
    width: int = 1024
    seed: int = 0
    workers: int | None = None
    output: str = "dataset"
    mu_n: float = 100.0
    sigma_n: float = 10.0
    particle_radius: float | None = None
    overlap_factor: float = 1.0
    margin: float = 0.0
    max_attempts: int = 1000
    voltage_kv: float = 300.0
    cs: float = 2.7e7
    amplitude_contrast: float = 0.1
    phase_shift: float = 0.0
    defocus_mean: float = 15000.0
    defocus_std: float = 3000.0
    ice_kinds: tuple[str, ...] = ("linear", "radial")
    ice_min_weight_low: float = 0.5
    ice_min_weight_high: float = 1.0
    ice_blur_sigma: float = 32.0
    noise_model: str = "gaussian"
    snr: float = 0.1
    mix_ratio: float = 0.5
    write_baseline: bool = True
    noise_std_frac: float = 1.0
    write_intermediate: bool = True
    threshold_frac: float = 0.1
    lam: float = 10.0
    tau: float = 0.07
    augment: bool = False
    normalize: bool = False
    source: str | None = field(default=None, compare=False)

    def resolved_workers(self) -> int:
        if self.workers is not None:
            return self.workers
        return int(os.environ.get(WORKERS_ENV, "1"))

    def validate(self) -> None:
        """Check cross-field constraints and that every volume file exists."""
        if self.count < 1:
            raise ConfigError("dataset.count must be >= 1")
        if min(self.height, self.width) < 64:
            raise ConfigError("dataset.height and dataset.width must be >= 64")
        if self.workers is not None and self.workers < 1:
            raise ConfigError("dataset.workers must be >= 1")
        for v in self.volumes:
            if not Path(v).is_file():
                raise ConfigError(f"dataset.volumes: file not found: {v}")
        if self.ice_min_weight_low > self.ice_min_weight_high:
            raise ConfigError("ice.min_weight_low must not exceed ice.min_weight_high")
        if not 0 < self.ice_min_weight_low <= 1 or not 0 < self.ice_min_weight_high <= 1:
            raise ConfigError("ice min weights must lie in (0, 1]")
        bad = set(self.ice_kinds) - {"linear", "radial"}
        if bad or not self.ice_kinds:
            raise ConfigError(f"ice.kinds: unsupported kinds {sorted(bad)}")
        if self.noise_model not in ("gaussian", "poisson", "poisson_gaussian"):
            raise ConfigError(f"noise.model: unknown model {self.noise_model!r}")
        if not 0 < self.threshold_frac < 1:
            raise ConfigError("mask.threshold_frac must lie in (0, 1)")


def parse_config(path: str | os.PathLike) -> DatasetConfig:
    """Parse a flat key-value dataset config; relative volume paths resolve against the file."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    values: dict[str, Any] = {}
    seen: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'section.key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _SCHEMA:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r} (first set on line {seen[key]})")
        attr, parser, _ = _SCHEMA[key]
        try:
            values[attr] = parser(value)
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key!r}: {exc}") from None
        seen[key] = lineno
    missing = [k for k, (attr, _, default) in _SCHEMA.items() if default is ... and attr not in values]
    if missing:
        raise ConfigError(f"{path}: missing required key(s): {', '.join(missing)}")
    base = path.parent
    values["volumes"] = tuple(
        str(p if Path(p).is_absolute() else base / p) for p in values["volumes"]
    )
    return DatasetConfig(source=str(path), **values)
