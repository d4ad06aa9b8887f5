"""INI run configuration: one section per component, CLI flags override."""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .cost import CostWeights
from .dynamics import VehicleParams
from .mppi import ControllerVariant, MppiConfig
from .sensor import SensorSpec
from .sim import EpisodeConfig
from .visibility import VisibilityConfig

VARIANT_CHOICES = ("prescient", "det", "va", "all")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    scenario: str = "offroad"
    variant: str = "va"
    n_reps: int = 1
    base_seed: int = 0
    out: str = "runs"
    init_variance: float = 3.0
    known_radius: float = 3.0
    timeout: float = 40.0
    mppi: MppiConfig = field(default_factory=MppiConfig)
    visibility: VisibilityConfig = field(default_factory=VisibilityConfig)
    cost: CostWeights = field(default_factory=CostWeights)
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    sensor: SensorSpec = field(default_factory=SensorSpec)

    def __post_init__(self):
        if self.variant not in VARIANT_CHOICES:
            raise ConfigError(f"run.variant must be one of {VARIANT_CHOICES}, got {self.variant!r}")
        if self.n_reps < 1:
            raise ConfigError("run.n_reps must be >= 1")
        if self.init_variance < 0 or self.known_radius < 0 or self.timeout <= 0:
            raise ConfigError("run.init_variance and run.known_radius must be >= 0, "
                              "run.timeout > 0")

    def variants(self) -> list[ControllerVariant]:
        if self.variant == "all":
            return list(ControllerVariant)
        return [ControllerVariant.parse(self.variant)]

    def episode(self) -> EpisodeConfig:
        return EpisodeConfig(mppi=self.mppi, weights=self.cost, vis=self.visibility,
                             params=self.vehicle, sensor=self.sensor,
                             init_variance=self.init_variance, known_radius=self.known_radius,
                             timeout=self.timeout)


SECTIONS = ("mppi", "visibility", "cost", "vehicle", "sensor")
RUN_KEYS = [f.name for f in fields(RunConfig) if f.name not in SECTIONS]


def _convert(section: str, key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if default is None:
            return None if raw.strip().lower() == "none" else int(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"[{section}] {key} = {raw!r}: expected {type(default).__name__}") from None


def _apply(section: str, obj, items: dict):
    names = {f.name: getattr(obj, f.name) for f in fields(obj)}
    updates = {}
    for key, raw in items.items():
        if key not in names:
            raise ConfigError(f"[{section}] unknown key {key!r}")
        updates[key] = _convert(section, key, raw, names[key])
    try:
        return replace(obj, **updates)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    unknown = set(cp.sections()) - set(SECTIONS) - {"run"}
    if unknown:
        raise ConfigError(f"{source}: unknown section(s) {sorted(unknown)}")
    cfg = RunConfig()
    subs = {s: getattr(cfg, s) for s in SECTIONS}
    for s in SECTIONS:
        if cp.has_section(s):
            subs[s] = _apply(s, subs[s], dict(cp.items(s)))
    run_items = dict(cp.items("run")) if cp.has_section("run") else {}
    base = {k: getattr(cfg, k) for k in RUN_KEYS}
    for key, raw in run_items.items():
        if key not in base:
            raise ConfigError(f"[run] unknown key {key!r}")
        base[key] = _convert("run", key, raw, base[key])
    return RunConfig(**base, **subs)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_config(path.read_text(), str(path))


def dump_config(cfg: RunConfig) -> str:
    """Every effective value, defaults included."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp["run"] = {k: str(getattr(cfg, k)) for k in RUN_KEYS}
    for s in SECTIONS:
        obj = getattr(cfg, s)
        cp[s] = {f.name: repr(v) if isinstance(v := getattr(obj, f.name), float) else str(v)
                 for f in fields(obj)}
    lines = []
    for s in cp.sections():
        lines.append(f"[{s}]")
        lines += [f"{k} = {v}" for k, v in cp[s].items()]
        lines.append("")
    return "\n".join(lines)


def with_overrides(cfg: RunConfig, **flags) -> RunConfig:
    """Apply CLI flags (``None`` means not given)."""
    run = {k: v for k, v in flags.items() if v is not None and k in RUN_KEYS}
    out = replace(cfg, **run)
    if flags.get("samples") is not None:
        try:
            out = replace(out, mppi=replace(out.mppi, J=int(flags["samples"])))
        except ValueError as exc:
            raise ConfigError(f"--samples: {exc}") from None
    return out
