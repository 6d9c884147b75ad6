"""System characterization: resolvability, local conditioning, PSF similarity.

All positions here are lattice indices on the padded reconstruction grid
(``[k, iy, ix]``); physical separations are derived from the grid pitch.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import fft as sfft

from .forward import ConvOperator, build_operator
from .grid import VolumeGrid
from .optics_sim import NoiseModel, PsfStack, simulate_measurement
from .solver import SolverConfig, solve

log = logging.getLogger(__name__)

__all__ = [
    "AnalysisError",
    "DIP_THRESHOLD",
    "ResolvabilityResult",
    "dip_fraction",
    "two_point_test",
    "multi_point_test",
    "constellation",
    "local_condition_number",
    "condition_details",
    "ConditioningCurve",
    "conditioning_sweep",
    "psf_similarity",
    "write_resolvability_csv",
    "write_conditioning_csv",
]

DIP_THRESHOLD = 0.2


class AnalysisError(ValueError):
    pass


# --------------------------------------------------------------------------
# resolvability
# --------------------------------------------------------------------------

@dataclass
class ResolvabilityResult:
    separation: tuple[float, ...]  # voxels/planes along each tested axis
    physical_separation: tuple[float, ...]  # um laterally, mm axially
    axes: tuple[str, ...]
    n_sources: int
    resolved: bool
    dip_fraction: float | None  # smallest dip over adjacent pairs
    sources: list[tuple[int, int, int]] = field(default_factory=list)
    reconstruction: np.ndarray | None = field(default=None, repr=False)
    diagnostic: str = ""


def dip_fraction(volume: np.ndarray, a: Sequence[int], b: Sequence[int]) -> float | None:
    """Relative dip between two voxels that share two of their three indices.

    The peaks are read at ``a`` and ``b`` themselves; the dip is
    ``1 - min(between) / min(peak_a, peak_b)``. Returns ``None`` when a peak
    is not positive or when there is no voxel strictly between the two.
    """
    a, b = tuple(int(v) for v in a), tuple(int(v) for v in b)
    diff = [i for i in range(3) if a[i] != b[i]]
    if len(diff) != 1:
        raise AnalysisError(f"voxels {a} and {b} are not on a common lattice line")
    ax = diff[0]
    lo, hi = sorted((a[ax], b[ax]))
    if hi - lo < 2:
        return None
    pa, pb = float(volume[a]), float(volume[b])
    peak = min(pa, pb)
    if not peak > 0:
        return None
    idx = list(a)
    idx[ax] = slice(lo + 1, hi)
    between = float(np.min(volume[tuple(idx)]))
    return float(np.clip(1.0 - between / peak, 0.0, 1.0))


def _adjacent_pairs(layout: dict[tuple[int, int], tuple[int, int, int]]):
    for (i, j), voxel in layout.items():
        for di, dj in ((1, 0), (0, 1)):
            other = layout.get((i + di, j + dj))
            if other is not None:
                yield voxel, other


def _op_for(stack, op: ConvOperator | None) -> ConvOperator:
    if op is not None:
        return op
    return build_operator(stack, dtype=np.float32)


def _physical(grid: VolumeGrid, k: int, axis: str, sep: int) -> float:
    if axis in ("x", "y"):
        return float(sep * grid.lateral_pitch[k])
    top = min(k + sep, grid.nz - 1)
    return float(grid.depth_planes[top] - grid.depth_planes[k])


def _resolve(stack: PsfStack, grid: VolumeGrid, voxels, pairs, config: SolverConfig,
             op: ConvOperator | None, noise, rng):
    op = _op_for(stack, op)
    vol_shape = grid.shape
    for v in voxels:
        if not all(0 <= v[i] < vol_shape[i] for i in range(3)):
            raise AnalysisError(f"source voxel {v} lies outside the grid {vol_shape}")
    scene = np.zeros(vol_shape, dtype=np.float64)
    for v in voxels:
        scene[v] += 1.0
    b = simulate_measurement(scene, stack, grid, noise=noise, rng=rng)
    recon, _ = solve(b, op, config)
    dips = [dip_fraction(recon, p, q) for p, q in pairs]
    return recon, dips


def _lam0(config: SolverConfig | None) -> SolverConfig:
    return replace(config or SolverConfig(psi_mode="identity"), lam=0.0)


def two_point_test(stack: PsfStack, grid: VolumeGrid, z: float, axis: str,
                   separation: int, solver_config: SolverConfig | None = None,
                   op: ConvOperator | None = None, noise: NoiseModel | str | None = None,
                   rng=0, keep_reconstruction: bool = False) -> ResolvabilityResult:
    """Reconstruct two unit sources ``separation`` voxels apart and apply the dip rule.

    ``axis`` is ``"x"``/``"y"`` (lateral, voxels on plane ``z``) or ``"z"``
    (planes, starting at ``z``). The measurement is the sum of the two
    single-source images; the reconstruction uses no regularizer.
    """
    if axis not in ("x", "y", "z"):
        raise AnalysisError(f"axis must be x, y or z, got {axis!r}")
    sep = int(separation)
    if sep < 0:
        raise AnalysisError("separation must be nonnegative")
    k = grid.nearest_plane(z)
    cy, cx = grid.center
    if axis == "z":
        a, b = (k, cy, cx), (k + sep, cy, cx)
        if k + sep >= grid.nz:
            raise AnalysisError(f"axial separation {sep} runs past the last plane")
    else:
        lo = -(sep // 2)
        if axis == "x":
            a, b = (k, cy, cx + lo), (k, cy, cx + lo + sep)
        else:
            a, b = (k, cy + lo, cx), (k, cy + lo + sep, cx)
    phys = (_physical(grid, k, axis, sep),)
    if sep <= 1:
        why = "identical sources" if sep == 0 else "no voxel between the sources"
        return ResolvabilityResult((float(sep),), phys, (axis,), 2, False, None,
                                   [a, b], None, why)
    recon, dips = _resolve(stack, grid, [a, b], [(a, b)], _lam0(solver_config), op, noise, rng)
    dip = dips[0]
    if dip is None:
        return ResolvabilityResult((float(sep),), phys, (axis,), 2, False, None, [a, b],
                                   recon if keep_reconstruction else None,
                                   "no positive reconstruction at a source location")
    return ResolvabilityResult((float(sep),), phys, (axis,), 2, dip >= DIP_THRESHOLD, dip,
                               [a, b], recon if keep_reconstruction else None)


def constellation(grid: VolumeGrid, z: float, n: int, spacing: tuple[int, int],
                  plane: str = "xz") -> dict[tuple[int, int], tuple[int, int, int]]:
    """An ``n x n`` square of voxels centred laterally, starting at plane ``z``.

    ``plane="xz"`` steps ``spacing[0]`` voxels in x and ``spacing[1]`` planes
    in z; ``plane="xy"`` steps ``spacing[0]`` in x and ``spacing[1]`` in y on
    a single plane.
    """
    if plane not in ("xz", "xy"):
        raise AnalysisError(f"plane must be 'xz' or 'xy', got {plane!r}")
    if n < 1:
        raise AnalysisError("constellation size must be at least 1")
    s0, s1 = (int(v) for v in spacing)
    if n > 1 and (s0 < 1 or s1 < 1):
        raise AnalysisError("constellation spacing must be at least one voxel")
    k0 = grid.nearest_plane(z)
    cy, cx = grid.center
    off0 = -((n - 1) * s0) // 2
    layout = {}
    for i in range(n):
        for j in range(n):
            ix = cx + off0 + i * s0
            if plane == "xz":
                voxel = (k0 + j * s1, cy, ix)
            else:
                voxel = (k0, cy - ((n - 1) * s1) // 2 + j * s1, ix)
            layout[(i, j)] = voxel
    shape = grid.shape
    for v in layout.values():
        if not all(0 <= v[d] < shape[d] for d in range(3)):
            raise AnalysisError(f"constellation voxel {v} falls outside the grid {shape}")
    return layout


def multi_point_test(stack: PsfStack, grid: VolumeGrid, z: float, n: int,
                     spacing: tuple[int, int], solver_config: SolverConfig | None = None,
                     plane: str = "xz", op: ConvOperator | None = None,
                     noise: NoiseModel | str | None = None, rng=0,
                     keep_reconstruction: bool = False) -> ResolvabilityResult:
    """Dip test on an ``n x n`` constellation; every adjacent pair must pass."""
    layout = constellation(grid, z, n, spacing, plane)
    voxels = list(layout.values())
    axes = ("x", "z") if plane == "xz" else ("x", "y")
    k0 = grid.nearest_plane(z)
    phys = tuple(_physical(grid, k0, ax, s) for ax, s in zip(axes, spacing))
    sep = tuple(float(s) for s in spacing)
    if n == 1:
        return ResolvabilityResult(sep, phys, axes, 1, True, None, voxels, None,
                                   "single source")
    if min(spacing) <= 1:
        return ResolvabilityResult(sep, phys, axes, n * n, False, None, voxels, None,
                                   "no voxel between adjacent sources")
    pairs = list(_adjacent_pairs(layout))
    recon, dips = _resolve(stack, grid, voxels, pairs, _lam0(solver_config), op, noise, rng)
    keep = recon if keep_reconstruction else None
    if any(d is None for d in dips):
        return ResolvabilityResult(sep, phys, axes, n * n, False, None, voxels, keep,
                                   "no positive reconstruction at a source location")
    worst = min(dips)
    return ResolvabilityResult(sep, phys, axes, n * n, worst >= DIP_THRESHOLD, worst,
                               voxels, keep)


# --------------------------------------------------------------------------
# local conditioning
# --------------------------------------------------------------------------

def _columns(op: ConvOperator, voxels) -> np.ndarray:
    cols = [op.impulse_response(*v).astype(np.float64).ravel() for v in voxels]
    return np.stack(cols, axis=1)


def condition_details(stack, voxels, op: ConvOperator | None = None) -> tuple[float, bool]:
    """``(sigma_max / sigma_min, rank_deficient)`` of the sub-matrix of H.

    Columns are forward-model images of unit voxels, so the analysis sees
    exactly the operator being inverted. Computed in float64.
    """
    voxels = [tuple(int(i) for i in v) for v in voxels]
    if not voxels:
        raise AnalysisError("constellation is empty")
    if len(set(voxels)) != len(voxels):
        raise AnalysisError("constellation voxels must be distinct")
    if op is None:
        op = build_operator(stack, dtype=np.float64)
    A = _columns(op, voxels)
    sv = np.linalg.svd(A, compute_uv=False)
    smax = float(sv[0]) if sv.size else 0.0
    if smax == 0.0:
        return math.inf, True
    tol = smax * max(A.shape) * np.finfo(np.float64).eps
    smin = float(sv[-1])
    if len(voxels) > A.shape[0] or smin <= tol:
        return math.inf, True
    return smax / smin, False


def local_condition_number(stack, voxels, op: ConvOperator | None = None) -> float:
    """Condition number of the constellation sub-matrix; ``inf`` if rank deficient."""
    return condition_details(stack, voxels, op)[0]


@dataclass
class ConditioningCurve:
    n_sources: int
    z: float
    plane: str
    separations: list[int]
    condition_numbers: list[float]
    rank_deficient: list[bool]


def conditioning_sweep(stack, grid: VolumeGrid, z: float, n_sources: Sequence[int],
                       separations: Sequence[int], plane: str = "xy",
                       op: ConvOperator | None = None) -> list[ConditioningCurve]:
    """Condition numbers of square constellations at integer-voxel spacings.

    Each ``n`` must be a perfect square; the constellation is a
    ``sqrt(n) x sqrt(n)`` grid with the same step along both of its axes,
    on the plane nearest ``z`` by default (``plane="xz"`` steps in depth too).
    """
    if op is None:
        op = build_operator(stack, dtype=np.float64)
    curves = []
    for n in n_sources:
        side = math.isqrt(int(n))
        if side * side != n:
            raise AnalysisError(f"source count {n} is not a perfect square")
        values, flags = [], []
        for s in separations:
            layout = constellation(grid, z, side, (int(s), int(s)), plane)
            c, deficient = condition_details(stack, list(layout.values()), op)
            values.append(c)
            flags.append(deficient)
        curves.append(ConditioningCurve(int(n), float(z), plane, [int(s) for s in separations],
                                        values, flags))
    return curves


# --------------------------------------------------------------------------
# PSF similarity
# --------------------------------------------------------------------------

def _unit_energy(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    energy = math.sqrt(float(np.sum(p * p)))
    if not energy > 0 or not math.isfinite(energy):
        raise AnalysisError("PSF has zero (or non-finite) energy")
    return p / energy


def _xcorr(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Linear cross-correlation ``c[s] = sum_t a[t + s] b[t]``, zero lag at the centre."""
    shape = tuple(x + y - 1 for x, y in zip(a.shape, b.shape))
    fshape = tuple(sfft.next_fast_len(n, real=True) for n in shape)
    spec = sfft.rfftn(a, fshape) * np.conj(sfft.rfftn(b, fshape))
    full = sfft.irfftn(spec, fshape)
    # move lag 0 to index (b.shape - 1) so the array covers lags -(nb-1) .. na-1
    full = np.roll(full, (b.shape[0] - 1, b.shape[1] - 1), axis=(0, 1))
    return full[: shape[0], : shape[1]]


def _peak_width(c: np.ndarray) -> float:
    """Curvature width ``sqrt(-P / P'')`` at the maximum, averaged over rows and columns."""
    iy, ix = np.unravel_index(int(np.argmax(c)), c.shape)
    peak = float(c[iy, ix])
    widths = []
    for ax, i in ((0, iy), (1, ix)):
        if i == 0 or i == c.shape[ax] - 1:
            continue
        line = c[:, ix] if ax == 0 else c[iy, :]
        curv = float(line[i - 1] - 2 * line[i] + line[i + 1])
        if curv < 0:
            widths.append(math.sqrt(-peak / curv))
    if not widths:
        raise AnalysisError("correlation peak has no measurable curvature")
    return float(np.mean(widths))


def psf_similarity(reference, off_axis) -> tuple[float, float]:
    """``(inner_product, spot_ratio)`` between an on-axis and an off-axis PSF.

    Both inputs are normalized to unit energy and registered at the
    cross-correlation maximum; the inner product is the correlation value
    there, clipped to [0, 1]. ``spot_ratio`` divides the curvature width of
    the cross-correlation peak by that of the reference autocorrelation.
    """
    ref = _unit_energy(reference)
    off = _unit_energy(off_axis)
    cross = _xcorr(off, ref)
    auto = _xcorr(ref, ref)
    inner = float(np.clip(np.max(cross), 0.0, 1.0))
    ratio = _peak_width(cross) / _peak_width(auto)
    return inner, ratio


# --------------------------------------------------------------------------
# CSV export
# --------------------------------------------------------------------------

def write_resolvability_csv(path, results: Sequence[ResolvabilityResult]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["axes", "separation", "physical_separation", "n_sources",
                         "resolved", "dip_fraction", "diagnostic"])
        for r in results:
            writer.writerow([
                "/".join(r.axes), "/".join(f"{s:g}" for s in r.separation),
                "/".join(f"{s:.6g}" for s in r.physical_separation), r.n_sources,
                int(r.resolved), "" if r.dip_fraction is None else f"{r.dip_fraction:.6f}",
                r.diagnostic,
            ])


def write_conditioning_csv(path, curves: Sequence[ConditioningCurve]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["n_sources", "z_mm", "plane", "separation", "condition_number",
                         "rank_deficient"])
        for c in curves:
            for s, v, f in zip(c.separations, c.condition_numbers, c.rank_deficient):
                writer.writerow([c.n_sources, f"{c.z:.6g}", c.plane, s, repr(v), int(f)])
