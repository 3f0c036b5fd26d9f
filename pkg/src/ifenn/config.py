"""Run configuration: presets, sectioned key=value files and validation."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .constitutive import DamageParams, ElasticParams, Material, StrainMeasure
from .errors import ConfigError
from .mesh import Mesh, double_notch_mesh, generate_structured, l_shape_mesh, read_mesh
from .pinn import TrainConfig
from .solver import SolverConfig


@dataclass(frozen=True)
class GeometryConfig:
    preset: str = "single-notch"
    width: float = 20.0
    height: float = 20.0
    nx: int = 20
    ny: int = 20
    notch: float = 8.0
    element_size: float = 1.25  # double-notch and l-shape generators
    applied_displacement: float = 0.004


@dataclass(frozen=True)
class MaterialConfig:
    G: float = 125000.0
    nu: float = 0.2
    measure: str = "lemaitre"
    k: float = 10.0
    law: str = "mazars-original"
    alpha: float = 0.7
    beta: float = 1.0e4
    eps_D: float = 1.0e-4

    def build(self) -> Material:
        return Material(ElasticParams(self.G, self.nu), StrainMeasure(self.measure, self.k),
                        DamageParams(self.law, self.alpha, self.beta, self.eps_D))


@dataclass(frozen=True)
class PathConfig:
    mesh: str = ""
    weights: str = ""
    output_dir: str = "out"


@dataclass(frozen=True)
class RunConfig:
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    material: MaterialConfig = field(default_factory=MaterialConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: PathConfig = field(default_factory=PathConfig)
    use_lf: bool = False  # append the loadfactor as a fifth network input


PRESETS = {
    "single-notch": dict(
        geometry=dict(preset="single-notch", width=20.0, height=20.0, nx=20, ny=20, notch=8.0,
                      applied_displacement=0.004),
        material=dict(measure="lemaitre", law="mazars-original", alpha=0.7, beta=1.0e4, eps_D=1.0e-4),
        solver=dict(l_c=4.0, tol=1e-6),
    ),
    "double-notch": dict(
        geometry=dict(preset="double-notch", width=60.0, height=50.0, element_size=1.25, notch=5.0,
                      applied_displacement=0.02),
        material=dict(measure="modified-von-mises", k=10.0, law="mazars-modified", alpha=0.99, beta=400.0,
                      eps_D=1.0e-4),
        solver=dict(l_c=2.0, tol=1e-4),
    ),
    "l-shape": dict(
        geometry=dict(preset="l-shape", width=500.0, height=500.0, element_size=12.5, notch=250.0,
                      applied_displacement=0.5),
        material=dict(measure="modified-von-mises", k=10.0, law="mazars-modified", alpha=0.99, beta=350.0,
                      eps_D=1.0e-4),
        solver=dict(l_c=5.0, tol=1e-4),
    ),
}

SECTIONS = {
    "geometry": GeometryConfig,
    "material": MaterialConfig,
    "solver": SolverConfig,
    "train": TrainConfig,
    "paths": PathConfig,
}


def _coerce(cls, key, raw):
    """Convert a raw string to the type of ``cls``'s default for ``key``."""
    default = getattr(cls(), key)
    try:
        if isinstance(default, bool):
            low = str(raw).strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            text = str(raw).replace(",", " ").split()
            cast = int if key == "hidden" else float
            return tuple(cast(t) for t in text)
        return str(raw).strip()
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None


def _apply(cfg: RunConfig, section: str, values: dict) -> RunConfig:
    if section == "run":
        out = cfg
        for key, raw in values.items():
            if key != "use_lf":
                raise ConfigError(f"unknown key [run] {key}")
            out = replace(out, use_lf=_coerce(RunConfig, key, raw) if not isinstance(raw, bool) else raw)
        return out
    if section not in SECTIONS:
        raise ConfigError(f"unknown section [{section}]")
    cls = SECTIONS[section]
    allowed = {f.name for f in fields(cls)}
    current = getattr(cfg, section)
    updates = {}
    for key, raw in values.items():
        if key not in allowed:
            raise ConfigError(f"unknown key [{section}] {key}")
        updates[key] = raw if not isinstance(raw, str) else _coerce(cls, key, raw)
    try:
        return replace(cfg, **{section: replace(current, **updates)})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def preset_config(name: str = "single-notch") -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    cfg = RunConfig()
    for section, values in PRESETS[name].items():
        cfg = _apply(cfg, section, values)
    return cfg


def load_config(path=None, preset: Optional[str] = None, overrides: Optional[dict] = None) -> RunConfig:
    """Preset defaults, then file values, then ``overrides`` (``{section: {key: value}}``).

    A file may name its own preset with ``preset = ...`` under ``[geometry]``.
    """
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    parser.optionxform = str
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        try:
            parser.read_string(text, source=str(path))
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from None
    file_preset = parser.get("geometry", "preset", fallback=None) if parser.has_section("geometry") else None
    cfg = preset_config(preset or file_preset or "single-notch")
    for section in parser.sections():
        cfg = _apply(cfg, section, dict(parser.items(section)))
    for section, values in (overrides or {}).items():
        cfg = _apply(cfg, section, values)
    return cfg


def build_mesh_from_config(cfg: RunConfig) -> Mesh:
    if cfg.paths.mesh:
        return read_mesh(cfg.paths.mesh)
    g = cfg.geometry
    if g.preset == "single-notch":
        return generate_structured(g.width, g.height, g.nx, g.ny, g.notch, g.applied_displacement)
    if g.preset == "double-notch":
        return double_notch_mesh(g.width, g.height, g.element_size, g.notch, g.notch, g.applied_displacement)
    if g.preset == "l-shape":
        return l_shape_mesh(g.width, g.notch, g.element_size, g.applied_displacement)
    raise ConfigError(f"unknown geometry preset {g.preset!r}")
