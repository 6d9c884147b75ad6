"""Run configuration: one INI-style file covering every pipeline stage.

Every key of every section must be present and no other keys are allowed,
so a typo fails loudly instead of silently falling back to a default.
``template()`` produces a complete file with the desk-scale defaults.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, fields
from pathlib import Path

from .grid import SystemGeometry, desk_geometry, depth_plane_spacing, spacing_constant
from .solver import SolverConfig

__all__ = ["ConfigError", "GridParams", "DiffuserParams", "RunConfig", "load_config",
           "parse_config", "template"]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GridParams:
    z_min: float = 10.86  # mm
    z_max: float = 36.26  # mm
    n_planes: int = 16

    def planes(self) -> list[float]:
        if self.n_planes < 1:
            raise ConfigError("grid.n_planes must be at least 1")
        if self.n_planes == 1:
            return [float(self.z_min)]
        return depth_plane_spacing(self.z_min, self.z_max,
                                   spacing_constant(self.z_min, self.z_max, self.n_planes))


@dataclass(frozen=True)
class DiffuserParams:
    seed: int = 0
    feature_size: float = 140.0  # um
    slope: float = 0.7  # deg
    refractive_index_contrast: float = 0.5
    lattice_pitch: float = 5.0  # um
    n_rays: int = 10_000_000


@dataclass(frozen=True)
class RunConfig:
    geometry: SystemGeometry
    grid: GridParams
    diffuser: DiffuserParams
    solver: SolverConfig
    seed: int = 0
    noise: str = "none"


_SOLVER_KEYS = {
    "lambda": "lam",
    "regularizer": "psi_mode",
    "max_iters": "max_iters",
    "eps_abs": "eps_abs",
    "eps_rel": "eps_rel",
    "nonneg": "nonneg",
    "mu1": "mu1",
    "mu2": "mu2",
    "mu3": "mu3",
    "auto_tune": "auto_tune",
    "tune_factor": "tune_factor",
    "tune_ratio": "tune_ratio",
    "tune_until": "tune_until",
    "tune_normalized": "tune_normalized",
}
_SOLVER_TYPES = {
    "lam": float, "psi_mode": str, "max_iters": int, "eps_abs": float, "eps_rel": float,
    "nonneg": bool, "mu1": float, "mu2": float, "mu3": float, "auto_tune": bool,
    "tune_factor": float, "tune_ratio": float, "tune_until": int, "tune_normalized": bool,
}
_OPTIONAL = {"lam", "mu1", "mu2", "mu3", "tune_until"}  # "auto" maps to None


def _field_types(cls) -> dict[str, type]:
    defaults = cls()
    return {f.name: type(getattr(defaults, f.name)) for f in fields(cls)}


def _convert(section: str, key: str, text: str, kind, optional: bool):
    text = text.strip()
    if optional and text.lower() in ("auto", "none"):
        return None
    try:
        if kind is bool:
            low = text.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            value = float(text)
            if not math.isfinite(value):
                raise ValueError(text)
            return value
        return text
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot read {text!r} as {kind.__name__}") from None


def _read_section(parser, section: str, mapping: dict[str, str], types: dict[str, type]):
    if not parser.has_section(section):
        raise ConfigError(f"missing section [{section}]")
    present = dict(parser.items(section))
    unknown = sorted(set(present) - set(mapping))
    if unknown:
        raise ConfigError(f"[{section}] unknown key(s): {', '.join(unknown)}")
    missing = [k for k in mapping if k not in present]
    if missing:
        raise ConfigError(f"[{section}] missing required key(s): {', '.join(missing)}")
    out = {}
    for key, name in mapping.items():
        kind = types[name]
        out[name] = _convert(section, key, present[key], kind, name in _OPTIONAL)
    return out


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, strict=True)
    parser.optionxform = str  # keys are case sensitive
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed configuration: {exc}") from exc
    sections = {"run", "geometry", "grid", "diffuser", "solver"}
    extra = sorted(set(parser.sections()) - sections)
    if extra:
        raise ConfigError(f"unknown section(s): {', '.join(extra)}")

    run = _read_section(parser, "run", {"seed": "seed", "noise": "noise"},
                        {"seed": int, "noise": str})
    geo_types = _field_types(SystemGeometry)
    geo = _read_section(parser, "geometry", {n: n for n in geo_types}, geo_types)
    grid_types = _field_types(GridParams)
    grid = _read_section(parser, "grid", {n: n for n in grid_types}, grid_types)
    dif_types = _field_types(DiffuserParams)
    dif = _read_section(parser, "diffuser", {n: n for n in dif_types}, dif_types)
    sol = _read_section(parser, "solver", _SOLVER_KEYS, _SOLVER_TYPES)
    try:
        geometry = SystemGeometry(**geo)
        solver = SolverConfig(**sol)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    grid_params = GridParams(**grid)
    grid_params.planes()
    return RunConfig(geometry=geometry, grid=grid_params, diffuser=DiffuserParams(**dif),
                     solver=solver, seed=run["seed"], noise=run["noise"])


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise OSError(f"cannot read configuration {path}: {exc.strerror}") from exc
    return parse_config(text)


def _fmt(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def template(geometry: SystemGeometry | None = None) -> str:
    """Complete configuration text with desk-scale defaults."""
    geometry = geometry or desk_geometry()
    solver = SolverConfig()
    lines = [
        "# lensless3d run configuration. Every key is required; unknown keys are errors.",
        "# Lengths: mm unless the comment says um. Angles: degrees.",
        "",
        "[run]",
        "# master seed for noise and any randomized step",
        "seed = 0",
        "# none | gaussian:SIGMA | poisson:SCALE | snr:DB",
        "noise = none",
        "",
        "[geometry]",
    ]
    units = {"pixel_pitch": "um"}
    for f in fields(SystemGeometry):
        if f.name in units:
            lines.append(f"# {units[f.name]}")
        lines.append(f"{f.name} = {_fmt(getattr(geometry, f.name))}")
    lines += ["", "[grid]", "# depth planes are spaced uniformly in 1/z between z_min and z_max"]
    for f in fields(GridParams):
        lines.append(f"{f.name} = {_fmt(getattr(GridParams(), f.name))}")
    lines += ["", "[diffuser]", "# feature_size and lattice_pitch in um, slope in degrees"]
    for f in fields(DiffuserParams):
        lines.append(f"{f.name} = {_fmt(getattr(DiffuserParams(), f.name))}")
    lines += ["", "[solver]",
              "# lambda = auto uses 1e-3 * max(A^T b); mu* = auto derives penalties from the PSFs",
              "# regularizer: identity | tv3d | tv3d_aniso"]
    for key, name in _SOLVER_KEYS.items():
        lines.append(f"{key} = {_fmt(getattr(solver, name))}")
    return "\n".join(lines) + "\n"
