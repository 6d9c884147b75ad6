"""Command-line front end: ``lensless3d <verb> ...``.

Exit codes: 0 success, 2 invalid input or configuration, 3 numerical
failure, 4 file I/O error, 5 reconstruction hit ``--iters`` without meeting
the residual tolerances (the volume is still written).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from scipy import fft as sfft

from . import __version__
from .analysis import (
    AnalysisError,
    conditioning_sweep,
    multi_point_test,
    psf_similarity,
    two_point_test,
    write_conditioning_csv,
    write_resolvability_csv,
)
from .config import ConfigError, RunConfig, load_config, template
from .container import ArrayContainer, ContainerError, read_container, write_container, write_png
from .forward import ForwardModelError, build_operator
from .grid import GeometryError, SystemGeometry, build_grid, compute_fov
from .optics_sim import (
    DiffuserSurface,
    PointSource,
    PsfStack,
    SimulationError,
    calibrate,
    diffuser_lattice_for,
    generate_diffuser,
    render_psf,
    simulate_measurement,
)
from .solver import DivergenceError, SolverConfig, SolverError, SolverInputError, solve

log = logging.getLogger("lensless3d")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4
EXIT_NOT_CONVERGED = 5

_VALIDATION_ERRORS = (ConfigError, ContainerError, GeometryError, SimulationError,
                      ForwardModelError, AnalysisError, ValueError, KeyError)


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _config(args) -> RunConfig:
    if args.config is None:
        raise CliError("this command needs --config (create one with init-config)", EXIT_VALIDATION)
    return load_config(args.config)


def _seed(args, cfg: RunConfig | None = None) -> int:
    if args.seed is not None:
        return args.seed
    return cfg.seed if cfg is not None else 0


def _load_stack(path) -> tuple[PsfStack, SystemGeometry | None]:
    c = read_container(path, expect="psf_stack")
    return PsfStack(psfs=c.data.astype(np.float64), depth_planes=tuple(c.depth_planes)), c.geometry


def _geometry(stack_geom: SystemGeometry | None, cfg: RunConfig | None) -> SystemGeometry:
    if stack_geom is not None:
        return stack_geom
    if cfg is not None:
        return cfg.geometry
    raise CliError("no geometry available: the PSF stack has none and no --config was given",
                   EXIT_VALIDATION)


def _grid_for(stack: PsfStack, geom: SystemGeometry):
    return build_grid(geom, stack.depth_planes,
                      lateral_counts=(2 * stack.sensor_shape[1], 2 * stack.sensor_shape[0]))


def _read_scene(path):
    path = Path(path)
    if path.suffix == ".json":
        text = path.read_text()
        payload = json.loads(text)
        if isinstance(payload, dict) and "semantic" in payload:
            return read_container(path, expect="volume").data.astype(np.float64)
        if not isinstance(payload, list):
            raise CliError(f"{path}: scene must be a JSON list of point sources", EXIT_VALIDATION)
        sources = []
        for i, item in enumerate(payload):
            try:
                sources.append(PointSource(x=float(item["x"]), y=float(item["y"]),
                                           z=float(item["z"]),
                                           intensity=float(item.get("intensity", 1.0))))
            except (KeyError, TypeError, ValueError) as exc:
                raise CliError(f"{path}: source #{i} is malformed ({exc})", EXIT_VALIDATION)
        return sources
    raise CliError(f"{path}: scene must be a .json point list or volume container",
                   EXIT_VALIDATION)


def _ints(text: str) -> list[int]:
    """Parse ``1,2,5`` or ``1:10`` (inclusive) into a list of ints."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if ":" in part:
            lo, hi = part.split(":")
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    if not out:
        raise ValueError(f"empty integer list {text!r}")
    return out


def _write_text(path, text: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text)


# --------------------------------------------------------------------------
# verbs
# --------------------------------------------------------------------------

def cmd_init_config(args) -> int:
    out = Path(args.out)
    if out.exists() and not args.force:
        raise CliError(f"{out} exists; pass --force to overwrite", EXIT_VALIDATION)
    _write_text(out, template())
    print(f"wrote {out}")
    return EXIT_OK


def cmd_gen_diffuser(args) -> int:
    cfg = _config(args)
    d = cfg.diffuser
    seed = args.seed if args.seed is not None else d.seed
    lattice = diffuser_lattice_for(cfg.geometry, pitch=d.lattice_pitch)
    surface = generate_diffuser(seed, feature_size=d.feature_size, slope=d.slope,
                                lattice=lattice,
                                refractive_index_contrast=d.refractive_index_contrast)
    extra = {"pitch_um": surface.pitch, "feature_size_um": surface.feature_size,
             "slope_deg": surface.slope,
             "refractive_index_contrast": surface.refractive_index_contrast,
             "seed": surface.rng_seed}
    path = write_container(args.out, ArrayContainer(surface.heightmap, "heightmap", units="um",
                                                    geometry=cfg.geometry, extra=extra))
    print(f"wrote {path} {surface.heightmap.shape}")
    return EXIT_OK


def _surface_from(container: ArrayContainer) -> DiffuserSurface:
    e = container.extra
    try:
        return DiffuserSurface(heightmap=container.data.astype(np.float64), pitch=e["pitch_um"],
                               feature_size=e["feature_size_um"], slope=e["slope_deg"],
                               refractive_index_contrast=e["refractive_index_contrast"],
                               rng_seed=int(e["seed"]))
    except KeyError as exc:
        raise CliError(f"heightmap manifest lacks {exc}", EXIT_VALIDATION) from None


def cmd_calibrate(args) -> int:
    cfg = _config(args)
    surface = _surface_from(read_container(args.diffuser, expect="heightmap"))
    grid = build_grid(cfg.geometry, cfg.grid.planes())
    n_rays = args.rays if args.rays is not None else cfg.diffuser.n_rays

    def progress(k, n):
        log.info("calibrated plane %d/%d", k, n)

    stack = calibrate(surface, grid, cfg.geometry, n_rays=n_rays, progress=progress)
    stack.check_normalization()
    path = write_container(args.out, ArrayContainer(stack.psfs, "psf_stack", units="fraction",
                                                    depth_planes=list(stack.depth_planes),
                                                    geometry=cfg.geometry))
    print(f"wrote {path} {stack.psfs.shape}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = load_config(args.config) if args.config else None
    stack, geom = _load_stack(args.stack)
    geom = _geometry(geom, cfg)
    grid = _grid_for(stack, geom)
    scene = _read_scene(args.scene)
    noise = args.noise if args.noise is not None else (cfg.noise if cfg else "none")
    b = simulate_measurement(scene, stack, grid, noise=noise, geom=geom,
                             rng=np.random.default_rng(_seed(args, cfg)))
    path = write_container(args.out, ArrayContainer(b, "sensor_image", units="intensity",
                                                    geometry=geom, extra={"noise": noise}))
    print(f"wrote {path}")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    cfg = load_config(args.config) if args.config else None
    solver = cfg.solver if cfg else SolverConfig()
    updates = {}
    if args.iters is not None:
        updates["max_iters"] = args.iters
    if args.lam is not None:
        updates["lam"] = args.lam
    if args.no_nonneg:
        updates["nonneg"] = False
    if args.regularizer is not None:
        updates["psi_mode"] = args.regularizer
    if args.eps_abs is not None:
        updates["eps_abs"] = args.eps_abs
    if args.eps_rel is not None:
        updates["eps_rel"] = args.eps_rel
    solver = replace(solver, **updates)

    b = read_container(args.measurement, expect="sensor_image")
    stack, geom = _load_stack(args.stack)
    op = build_operator(stack, dtype=np.float64 if args.float64 else np.float32)
    volume, trace = solve(b.data, op, solver)

    out = Path(args.out)
    path = write_container(out, ArrayContainer(volume, "volume", units="intensity",
                                               depth_planes=list(stack.depth_planes),
                                               geometry=geom,
                                               extra={"iterations": len(trace),
                                                      "converged": trace.converged,
                                                      "lambda": trace.lam}))
    stem = path.with_suffix("")
    trace.to_csv(f"{stem}_trace.csv")
    write_png(f"{stem}_maxproj.png", np.max(volume, axis=0))
    print(f"wrote {path} after {len(trace)} iterations (converged={trace.converged})")
    return EXIT_OK if trace.converged else EXIT_NOT_CONVERGED


# -- analyze ---------------------------------------------------------------

def cmd_fov(args) -> int:
    cfg = load_config(args.config) if args.config else None
    geom = cfg.geometry if cfg else SystemGeometry()
    rep = compute_fov(geom)
    lines = ["axis,half_fov_deg,limiting_factor,geometric_cutoff_deg"]
    for name, ax in (("x", rep.x), ("y", rep.y)):
        lines.append(f"{name},{ax.half_fov:.6f},{ax.limiting_factor},{ax.geometric_cutoff:.6f}")
    lines.append(f"axial_min_mm,{rep.axial_range[0]:.6g},,")
    lines.append(f"axial_max_mm,{rep.axial_range[1]:.6g},,")
    text = "\n".join(lines) + "\n"
    if args.out:
        _write_text(args.out, text)
    print(text, end="")
    return EXIT_OK


def _analysis_inputs(args):
    cfg = load_config(args.config) if args.config else None
    stack, geom = _load_stack(args.stack)
    geom = _geometry(geom, cfg)
    grid = _grid_for(stack, geom)
    solver = cfg.solver if cfg else None
    if solver is not None and args.iters is not None:
        solver = replace(solver, max_iters=args.iters)
    elif args.iters is not None:
        solver = SolverConfig(psi_mode="identity", max_iters=args.iters)
    return cfg, stack, grid, solver


def cmd_two_point(args) -> int:
    cfg, stack, grid, solver = _analysis_inputs(args)
    op = build_operator(stack)
    results = [two_point_test(stack, grid, args.z, args.axis, s, solver, op=op,
                              noise=args.noise, rng=_seed(args, cfg))
               for s in _ints(args.separations)]
    write_resolvability_csv(args.out, results)
    for r in results:
        print(f"separation {r.separation[0]:g}: resolved={r.resolved} dip={r.dip_fraction}")
    return EXIT_OK


def cmd_multi_point(args) -> int:
    cfg, stack, grid, solver = _analysis_inputs(args)
    op = build_operator(stack)
    results = []
    for lateral, axial in zip(_ints(args.lateral), _ints(args.axial)):
        results.append(multi_point_test(stack, grid, args.z, args.n, (lateral, axial), solver,
                                        plane=args.plane, op=op, noise=args.noise,
                                        rng=_seed(args, cfg)))
    write_resolvability_csv(args.out, results)
    for r in results:
        print(f"spacing {r.separation}: resolved={r.resolved} dip={r.dip_fraction}")
    return EXIT_OK


def cmd_conditioning(args) -> int:
    stack, geom = _load_stack(args.stack)
    cfg = load_config(args.config) if args.config else None
    grid = _grid_for(stack, _geometry(geom, cfg))
    curves = conditioning_sweep(stack, grid, args.z, _ints(args.n_sources),
                                _ints(args.separations), plane=args.plane)
    write_conditioning_csv(args.out, curves)
    for c in curves:
        print(f"n={c.n_sources}: " + " ".join(f"{v:.4g}" for v in c.condition_numbers))
    return EXIT_OK


def cmd_psf_similarity(args) -> int:
    cfg = _config(args)
    surface = _surface_from(read_container(args.diffuser, expect="heightmap"))
    geom = cfg.geometry
    z = args.z
    ref = render_psf(surface, z, geom, n_rays=args.rays)
    fov = compute_fov(geom)
    rows = ["angle_deg,inner_product,spot_ratio"]
    angles = np.linspace(0.0, fov.x.half_fov, args.steps)
    for a in angles:
        x = z * math.tan(math.radians(a))
        shift = -x * geom.diffuser_to_sensor_d / z
        off = render_psf(surface, z, geom, n_rays=args.rays, source_xy=(x, 0.0),
                         window_center=(shift, 0.0))
        ip, ratio = psf_similarity(ref, off)
        rows.append(f"{a:.4f},{ip:.6f},{ratio:.6f}")
    text = "\n".join(rows) + "\n"
    _write_text(args.out, text)
    print(text, end="")
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration file")
    common.add_argument("--seed", type=int, default=None, help="override the configured seed")
    common.add_argument("--threads", type=int, default=None,
                        help="FFT worker threads (default: all cores)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="lensless3d", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("init-config", parents=[common], help="write a complete default config")
    s.add_argument("out")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_init_config)

    s = sub.add_parser("gen-diffuser", parents=[common], help="synthesize a diffuser heightmap")
    s.add_argument("out")
    s.set_defaults(func=cmd_gen_diffuser)

    s = sub.add_parser("calibrate", parents=[common], help="render the PSF stack")
    s.add_argument("diffuser")
    s.add_argument("out")
    s.add_argument("--rays", type=int, default=None)
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("simulate", parents=[common], help="simulate a sensor measurement")
    s.add_argument("scene", help="JSON list of {x, y, z, intensity} in mm, or a volume container")
    s.add_argument("stack")
    s.add_argument("out")
    s.add_argument("--noise", default=None, help="none | gaussian:S | poisson:S | snr:DB")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("reconstruct", parents=[common], help="ADMM reconstruction")
    s.add_argument("measurement")
    s.add_argument("stack")
    s.add_argument("out")
    s.add_argument("--iters", type=int, default=None, help="iterations (default 200)")
    s.add_argument("--lambda", dest="lam", type=float, default=None)
    s.add_argument("--no-nonneg", action="store_true")
    s.add_argument("--regularizer", choices=["identity", "tv3d", "tv3d_aniso"], default=None)
    s.add_argument("--eps-abs", type=float, default=None, help="absolute residual tolerance")
    s.add_argument("--eps-rel", type=float, default=None, help="relative residual tolerance")
    s.add_argument("--float64", action="store_true", help="double-precision operator")
    s.set_defaults(func=cmd_reconstruct)

    a = sub.add_parser("analyze", help="system analysis reports")
    asub = a.add_subparsers(dest="analysis", required=True)

    s = asub.add_parser("fov", parents=[common], help="angular and axial field of view")
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_fov)

    s = asub.add_parser("two-point", parents=[common], help="two-point resolvability sweep")
    s.add_argument("stack")
    s.add_argument("out")
    s.add_argument("--z", type=float, required=True)
    s.add_argument("--axis", choices=["x", "y", "z"], default="x")
    s.add_argument("--separations", default="0:10", help="e.g. 0:10 or 2,4,8")
    s.add_argument("--noise", default=None)
    s.add_argument("--iters", type=int, default=None)
    s.set_defaults(func=cmd_two_point)

    s = asub.add_parser("multi-point", parents=[common], help="n x n constellation test")
    s.add_argument("stack")
    s.add_argument("out")
    s.add_argument("--z", type=float, required=True)
    s.add_argument("--n", type=int, default=4)
    s.add_argument("--plane", choices=["xz", "xy"], default="xz")
    s.add_argument("--lateral", required=True, help="lateral spacings in voxels, e.g. 3,6")
    s.add_argument("--axial", required=True, help="matching second-axis spacings")
    s.add_argument("--noise", default=None)
    s.add_argument("--iters", type=int, default=None)
    s.set_defaults(func=cmd_multi_point)

    s = asub.add_parser("conditioning", parents=[common], help="local condition number sweep")
    s.add_argument("stack")
    s.add_argument("out")
    s.add_argument("--z", type=float, required=True)
    s.add_argument("--n-sources", default="4,9,16,25")
    s.add_argument("--separations", default="1:10")
    s.add_argument("--plane", choices=["xz", "xy"], default="xy")
    s.set_defaults(func=cmd_conditioning)

    s = asub.add_parser("psf-similarity", parents=[common],
                        help="off-axis PSF similarity across the field of view")
    s.add_argument("diffuser")
    s.add_argument("out")
    s.add_argument("--z", type=float, default=20.0)
    s.add_argument("--steps", type=int, default=7)
    s.add_argument("--rays", type=int, default=2_000_000)
    s.set_defaults(func=cmd_psf_similarity)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = args.threads if args.threads is not None else (os.cpu_count() or 1)
    if threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        with sfft.set_workers(threads):
            return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except SolverInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (DivergenceError, SolverError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except json.JSONDecodeError as exc:
        print(f"error: invalid JSON: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except _VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
