"""Run configuration: TOML parsing, validation, and scenario presets.

A configuration file holds nested tables [run], [device], [source],
[model], [noise] (and optionally [scan]); every parameter that affects
the simulated bytes is echoed into the bundle manifest.
"""

from __future__ import annotations

import dataclasses
try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .acquisition import NoiseParams
from .device import DeviceParams
from .optics import SourceParams
from .stochastics import OffspringModel

__all__ = [
    "SimConfig",
    "ScanSettings",
    "ConfigError",
    "load_config",
    "save_config",
    "scenario_names",
    "load_scenario",
    "config_from_tables",
]

SCENARIOS = (
    "fig1d_saturation",
    "fig2_single_photon",
    "fig3_number_resolution",
    "fig4_slices",
)


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass(frozen=True)
class ScanSettings:
    """Grid geometry for the scanning-photocurrent commands."""

    image_half_span_um: float = 35.0
    image_step_um: float = 2.5
    edge_x_start_um: float = -32.0
    edge_x_stop_um: float = -18.0
    edge_step_um: float = 0.25


@dataclass(frozen=True)
class SimConfig:
    """Complete description of one simulation run."""

    device: DeviceParams = field(default_factory=DeviceParams)
    source: SourceParams = field(default_factory=SourceParams)
    model: OffspringModel = field(
        default_factory=lambda: OffspringModel("dead_space", dead_steps=14, p_post=0.5243)
    )
    noise: NoiseParams = field(default_factory=NoiseParams)
    scan: ScanSettings = field(default_factory=ScanSettings)
    n_gates: int = 1000
    master_seed: int = 1
    dt_ns: float = 0.01
    record_window_ns: tuple = (-0.1, 3.0)
    out: str = "out/run"

    def __post_init__(self):
        if self.n_gates < 1:
            raise ConfigError("run.n_gates must be >= 1")
        if self.dt_ns <= 0:
            raise ConfigError("run.dt_ns must be positive")
        w0, w1 = self.record_window_ns
        if not w0 < w1:
            raise ConfigError("run.record_window_ns must be increasing")
        if w1 > self.device.gate_width_ns:
            raise ConfigError("run.record_window_ns must end within the gate")
        if not 0.0 <= self.source.arrival_time_ns < self.device.gate_width_ns:
            raise ConfigError("source.arrival_time_ns must lie within the gate")

    def tables(self) -> dict:
        """Nested plain-dict echo of every parameter (manifest payload)."""
        return {
            "run": {
                "n_gates": self.n_gates,
                "master_seed": self.master_seed,
                "dt_ns": self.dt_ns,
                "record_window_ns": list(self.record_window_ns),
                "out": self.out,
            },
            "device": dataclasses.asdict(self.device),
            "source": {
                **dataclasses.asdict(self.source),
                "spot_center_um": list(self.source.spot_center_um),
            },
            "model": dataclasses.asdict(self.model),
            "noise": dataclasses.asdict(self.noise),
            "scan": dataclasses.asdict(self.scan),
        }


def _build_section(section: str, table: dict, cls, **extra):
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = dict(extra)
    for key, value in table.items():
        if key not in known:
            raise ConfigError(f"unknown field {section}.{key}")
        if isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"invalid [{section}] section: {err}") from err


def config_from_tables(tables: dict) -> SimConfig:
    """Build a validated SimConfig from nested plain dicts."""
    for section in tables:
        if section not in ("run", "device", "source", "model", "noise", "scan"):
            raise ConfigError(f"unknown section [{section}]")
    run = dict(tables.get("run", {}))
    known_run = {"n_gates", "master_seed", "dt_ns", "record_window_ns", "out"}
    for key in run:
        if key not in known_run:
            raise ConfigError(f"unknown field run.{key}")
    if "record_window_ns" in run:
        run["record_window_ns"] = tuple(run["record_window_ns"])
    sections = {
        "device": DeviceParams,
        "source": SourceParams,
        "model": OffspringModel,
        "noise": NoiseParams,
        "scan": ScanSettings,
    }
    kwargs = {
        name: _build_section(name, tables[name], cls)
        for name, cls in sections.items()
        if name in tables
    }
    try:
        return SimConfig(**kwargs, **run)
    except ConfigError:
        raise
    except (TypeError, ValueError) as err:
        raise ConfigError(f"invalid [run] section: {err}") from err


def load_config(path) -> SimConfig:
    """Parse and validate a TOML configuration file."""
    with open(path, "rb") as fh:
        try:
            tables = tomllib.load(fh)
        except tomllib.TOMLDecodeError as err:
            raise ConfigError(f"config does not parse: {err}") from err
    return config_from_tables(tables)


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    if isinstance(value, float):
        return repr(float(value))
    return str(value)


def save_config(config: SimConfig, path) -> None:
    """Write a configuration as TOML (round-trips through load_config)."""
    lines = []
    for section, table in config.tables().items():
        lines.append(f"[{section}]")
        for key, value in table.items():
            lines.append(f"{key} = {_toml_value(value)}")
        lines.append("")
    Path(path).write_text("\n".join(lines), encoding="utf-8")


def scenario_names() -> tuple:
    return SCENARIOS


def load_scenario(name: str) -> SimConfig:
    """Load one of the canned figure-reproduction scenarios."""
    if name not in SCENARIOS:
        raise ConfigError(f"unknown scenario {name!r}; choose from {SCENARIOS}")
    ref = resources.files("apdsim") / "scenarios" / f"{name}.toml"
    with ref.open("rb") as fh:
        return config_from_tables(tomllib.load(fh))
