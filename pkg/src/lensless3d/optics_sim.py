"""Synthetic diffusers and ray-traced caustic PSFs.

The diffuser is a thin refracting sheet with a flat input face and a smooth
random output face. Rays from a point source cross the aperture, pick up a
transverse direction change of ``(n - 1) * grad(h)`` (the thin phase-screen
law, applied to direction cosines so that oblique rays are handled without
the paraxial approximation), travel the diffuser-to-sensor gap and are
counted into sensor pixels. Counting with integers keeps renders bit-exact
for a fixed seed.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage, optimize

from .forward import ConvOperator
from .grid import SystemGeometry, VolumeGrid, compute_fov

log = logging.getLogger(__name__)

__all__ = [
    "SimulationError",
    "DiffuserSurface",
    "PsfStack",
    "PointSource",
    "NoiseModel",
    "generate_diffuser",
    "diffuser_lattice_for",
    "autocorrelation_width",
    "mean_slope_deg",
    "render_psf",
    "calibrate",
    "rasterize",
    "simulate_measurement",
    "bin_2x2",
]

# FWHM of the autocorrelation of white noise blurred by a Gaussian of width s
# is 2 sqrt(2 ln 2) * sqrt(2) * s.
_FWHM_PER_SIGMA = 4.0 * math.sqrt(math.log(2.0))


class SimulationError(ValueError):
    pass


@dataclass(frozen=True)
class DiffuserSurface:
    heightmap: np.ndarray  # um, indexed [row (y), col (x)]
    pitch: float  # um
    feature_size: float  # um
    slope: float  # deg, mean surface slope magnitude
    refractive_index_contrast: float = 0.5  # n - 1
    rng_seed: int = 0

    @property
    def extent_mm(self) -> tuple[float, float]:
        rows, cols = self.heightmap.shape
        return (rows * self.pitch * 1e-3, cols * self.pitch * 1e-3)

    def gradient(self) -> tuple[np.ndarray, np.ndarray]:
        """Dimensionless surface slopes (dh/dy, dh/dx)."""
        gy, gx = np.gradient(self.heightmap, self.pitch)
        return gy, gx


def diffuser_lattice_for(geom: SystemGeometry, pitch: float = 5.0,
                         margin: float = 0.2) -> tuple[tuple[int, int], float]:
    """Lattice covering the aperture plus a relative ``margin``."""
    rows = int(math.ceil(geom.aperture_height * 1e3 * (1 + margin) / pitch))
    cols = int(math.ceil(geom.aperture_width * 1e3 * (1 + margin) / pitch))
    return (rows, cols), pitch


def autocorrelation_width(heightmap: np.ndarray, pitch: float) -> float:
    """Full width at half maximum of the height autocorrelation, in um.

    Averaged over the x and y cuts through zero lag; the surface is treated
    as periodic, which is how it was generated.
    """
    h = heightmap - heightmap.mean()
    spec = np.fft.rfft2(h)
    ac = np.fft.irfft2(np.abs(spec) ** 2, s=h.shape)
    ac /= ac[0, 0]
    widths = []
    for profile in (ac[0, : h.shape[1] // 2], ac[: h.shape[0] // 2, 0]):
        below = np.nonzero(profile < 0.5)[0]
        if below.size == 0:
            raise SimulationError("autocorrelation never falls to half maximum")
        i = below[0]
        # linear interpolation between lags i-1 and i
        frac = (profile[i - 1] - 0.5) / (profile[i - 1] - profile[i])
        widths.append(2.0 * (i - 1 + frac) * pitch)
    return float(np.mean(widths))


def mean_slope_deg(surface: DiffuserSurface) -> float:
    gy, gx = surface.gradient()
    return float(np.degrees(np.mean(np.arctan(np.hypot(gx, gy)))))


def generate_diffuser(seed: int = 0, feature_size: float = 140.0, slope: float = 0.7,
                      lattice: tuple[tuple[int, int], float] = ((512, 512), 5.0),
                      refractive_index_contrast: float = 0.5) -> DiffuserSurface:
    """Gaussian low-pass filtered white noise with prescribed statistics.

    Parameters
    ----------
    seed : int
        Seed for the white noise.
    feature_size : float
        Target autocorrelation FWHM in um.
    slope : float
        Target mean surface slope magnitude in degrees.
    lattice : ((rows, cols), pitch_um)
        Sampling of the heightmap.
    refractive_index_contrast : float
        n - 1 of the diffuser material.
    """
    (rows, cols), pitch = lattice
    if pitch <= 0 or rows < 8 or cols < 8:
        raise SimulationError("diffuser lattice is too small")
    if feature_size <= 2 * pitch:
        raise SimulationError(
            f"feature_size {feature_size} um is not resolved by a {pitch} um lattice "
            "(needs more than two samples per feature)"
        )
    if not slope > 0:
        raise SimulationError("slope must be positive")
    if not refractive_index_contrast > 0:
        raise SimulationError("refractive_index_contrast must be positive")

    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((rows, cols))
    sigma_px = feature_size / _FWHM_PER_SIGMA / pitch
    base = ndimage.gaussian_filter(noise, sigma_px, mode="wrap")
    base -= base.mean()
    gy, gx = np.gradient(base, pitch)
    grad = np.hypot(gx, gy)

    target = math.radians(slope)

    def excess(scale):
        return float(np.mean(np.arctan(scale * grad))) - target

    guess = target / float(np.mean(grad))
    scale = optimize.brentq(excess, 0.5 * guess, 2.0 * guess, xtol=1e-14 * guess)
    return DiffuserSurface(
        heightmap=base * scale,
        pitch=float(pitch),
        feature_size=float(feature_size),
        slope=float(slope),
        refractive_index_contrast=float(refractive_index_contrast),
        rng_seed=int(seed),
    )


def _ray_grid(n_rays: int, width: float, height: float) -> tuple[int, int]:
    cols = max(1, int(round(math.sqrt(n_rays * width / height))))
    rows = max(1, int(round(n_rays / cols)))
    return rows, cols


def render_psf(surface: DiffuserSurface, z: float, geom: SystemGeometry,
               n_rays: int = 10_000_000, source_xy: tuple[float, float] = (0.0, 0.0),
               window_center: tuple[float, float] = (0.0, 0.0),
               sensor_shape: tuple[int, int] | None = None,
               chunk_rows: int | None = None, seed: int | None = None) -> np.ndarray:
    """Ray-trace the caustic of a point source at depth ``z`` (mm).

    Ray origins are stratified over the aperture with a seeded jitter.
    ``source_xy`` is the lateral source position in mm; ``window_center``
    moves the sensor window (mm) so oblique caustics can be captured in full.
    The optical axis passes through the centre of pixel ``(Ny//2, Nx//2)``.

    Returns the PSF as a float64 array normalised to unit sum.
    """
    if not z > 0:
        raise SimulationError(f"source depth must be positive, got {z}")
    if z < geom.min_object_distance:
        raise SimulationError(
            f"z={z} mm is closer than the minimum object distance {geom.min_object_distance} mm"
        )
    ny, nx = sensor_shape or geom.sensor_shape
    pitch_mm = geom.pixel_pitch * 1e-3
    d = geom.diffuser_to_sensor_d
    ap_w, ap_h = geom.aperture_width, geom.aperture_height
    ext_h, ext_w = surface.extent_mm
    if ext_w < ap_w or ext_h < ap_h:
        raise SimulationError("diffuser surface does not cover the aperture")

    gy, gx = surface.gradient()
    contrast = surface.refractive_index_contrast
    rows_d, cols_d = surface.heightmap.shape
    cy_d, cx_d = (rows_d - 1) / 2.0, (cols_d - 1) / 2.0

    ray_rows, ray_cols = _ray_grid(n_rays, ap_w, ap_h)
    cell_w, cell_h = ap_w / ray_cols, ap_h / ray_rows
    if chunk_rows is None:
        chunk_rows = max(1, (1 << 20) // ray_cols)
    rng = np.random.default_rng(surface.rng_seed if seed is None else seed)
    sx, sy = source_xy
    wx, wy = window_center
    counts = np.zeros(ny * nx, dtype=np.int64)
    base_x = -ap_w / 2.0 + (np.arange(ray_cols) + 0.0) * cell_w

    for r0 in range(0, ray_rows, chunk_rows):
        r1 = min(ray_rows, r0 + chunk_rows)
        n_r = r1 - r0
        jitter = rng.random((2, n_r, ray_cols))
        px = base_x[None, :] + jitter[0] * cell_w
        py = -ap_h / 2.0 + (np.arange(r0, r1)[:, None] + jitter[1]) * cell_h
        px = px.ravel()
        py = py.ravel()

        # incident direction cosines from the source at (sx, sy, -z)
        dx, dy = px - sx, py - sy
        norm = np.sqrt(dx * dx + dy * dy + z * z)
        kx, ky = dx / norm, dy / norm

        coords = np.stack([py * 1e3 / surface.pitch + cy_d, px * 1e3 / surface.pitch + cx_d])
        kx += contrast * ndimage.map_coordinates(gx, coords, order=1, mode="nearest")
        ky += contrast * ndimage.map_coordinates(gy, coords, order=1, mode="nearest")
        kt2 = kx * kx + ky * ky
        ok = kt2 < 1.0
        kz = np.sqrt(1.0 - kt2[ok])
        lx = px[ok] + d * kx[ok] / kz - wx
        ly = py[ok] + d * ky[ok] / kz - wy

        col = np.floor(lx / pitch_mm + nx // 2 + 0.5).astype(np.int64)
        row = np.floor(ly / pitch_mm + ny // 2 + 0.5).astype(np.int64)
        hit = (col >= 0) & (col < nx) & (row >= 0) & (row < ny)
        counts += np.bincount(row[hit] * nx + col[hit], minlength=ny * nx)

    total = counts.sum()
    if total == 0:
        raise SimulationError(f"no rays reached the sensor for a source at z={z} mm")
    return (counts / total).reshape(ny, nx)


@dataclass(frozen=True)
class PsfStack:
    psfs: np.ndarray  # (Nz, Ny, Nx), each slice sums to 1
    depth_planes: tuple[float, ...]

    def __post_init__(self):
        psfs = np.asarray(self.psfs)
        if psfs.ndim != 3:
            raise SimulationError("PSF stack must be three dimensional")
        if psfs.shape[0] != len(self.depth_planes):
            raise SimulationError(
                f"{psfs.shape[0]} slices but {len(self.depth_planes)} depth planes"
            )
        if np.any(psfs < 0) or not np.all(np.isfinite(psfs)):
            raise SimulationError("PSF values must be finite and nonnegative")

    @property
    def nz(self) -> int:
        return self.psfs.shape[0]

    @property
    def sensor_shape(self) -> tuple[int, int]:
        return self.psfs.shape[1:]

    def check_normalization(self, tol: float = 1e-6) -> None:
        sums = self.psfs.sum(axis=(1, 2), dtype=np.float64)
        bad = np.nonzero(np.abs(sums - 1.0) > tol)[0]
        if bad.size:
            raise SimulationError(f"slices {bad.tolist()} are not normalised to unit sum")


def calibrate(surface: DiffuserSurface, grid: VolumeGrid, geom: SystemGeometry,
              n_rays: int = 10_000_000, progress=None) -> PsfStack:
    """Render one on-axis PSF per depth plane of ``grid``."""
    slices = []
    for k, z in enumerate(grid.depth_planes):
        slices.append(render_psf(surface, z, geom, n_rays=n_rays))
        if progress is not None:
            progress(k + 1, grid.nz)
        log.debug("rendered plane %d/%d at z=%.3f mm", k + 1, grid.nz, z)
    return PsfStack(psfs=np.stack(slices), depth_planes=tuple(grid.depth_planes))


@dataclass(frozen=True)
class PointSource:
    x: float  # mm
    y: float  # mm
    z: float  # mm
    intensity: float = 1.0


def _voxel_weights(src: PointSource, grid: VolumeGrid):
    """Bilinear lateral splat on the nearest depth plane."""
    k = grid.nearest_plane(src.z)
    fy, fx = grid.voxel_index(src.x, src.y, k)
    iy0, ix0 = math.floor(fy), math.floor(fx)
    ty, tx = fy - iy0, fx - ix0
    out = []
    for iy, wy in ((iy0, 1.0 - ty), (iy0 + 1, ty)):
        for ix, wx in ((ix0, 1.0 - tx), (ix0 + 1, tx)):
            w = wy * wx
            if w != 0.0:
                out.append((k, iy, ix, w * src.intensity))
    return out


def _check_scene(sources: Sequence[PointSource], grid: VolumeGrid,
                 geom: SystemGeometry | None) -> None:
    z_lo, z_hi = grid.depth_planes[0], grid.depth_planes[-1]
    fov = compute_fov(geom) if geom is not None else None
    nz, ny, nx = grid.shape
    offending = []
    for i, s in enumerate(sources):
        reasons = []
        if s.intensity < 0 or not math.isfinite(s.intensity):
            reasons.append("negative intensity")
        slack = 1e-9 * max(1.0, z_hi)
        if not (z_lo - slack <= s.z <= z_hi + slack):
            reasons.append(f"z outside calibrated range [{z_lo:g}, {z_hi:g}] mm")
        else:
            k = grid.nearest_plane(s.z)
            fy, fx = grid.voxel_index(s.x, s.y, k)
            if not (0 <= fy <= ny - 1 and 0 <= fx <= nx - 1):
                reasons.append("outside the reconstruction lattice")
            if fov is not None:
                ax = math.degrees(math.atan2(abs(s.x), s.z))
                ay = math.degrees(math.atan2(abs(s.y), s.z))
                if ax > fov.x.half_fov or ay > fov.y.half_fov:
                    reasons.append("outside the angular field of view")
        if reasons:
            offending.append(f"#{i} ({s.x:g}, {s.y:g}, {s.z:g}): {'; '.join(reasons)}")
    if offending:
        raise SimulationError("scene outside the field of view:\n  " + "\n  ".join(offending))


def rasterize(sources: Iterable[PointSource], grid: VolumeGrid,
              geom: SystemGeometry | None = None, dtype=np.float64) -> np.ndarray:
    """Dense volume on ``grid`` holding the point sources."""
    sources = list(sources)
    _check_scene(sources, grid, geom)
    vol = np.zeros(grid.shape, dtype=dtype)
    for s in sources:
        for k, iy, ix, w in _voxel_weights(s, grid):
            vol[k, iy, ix] += w
    return vol


@dataclass(frozen=True)
class NoiseModel:
    kind: str = "none"  # none | gaussian | poisson | snr
    level: float = 0.0  # sigma, photons per unit intensity, or SNR in dB

    @classmethod
    def parse(cls, text: str | None) -> "NoiseModel":
        """Parse ``none``, ``gaussian:SIGMA``, ``poisson:SCALE`` or ``snr:DB``."""
        if text is None or text.strip().lower() in ("", "none"):
            return cls()
        kind, _, value = text.partition(":")
        kind = kind.strip().lower()
        if kind not in ("gaussian", "poisson", "snr") or not value:
            raise SimulationError(f"cannot parse noise setting {text!r}")
        level = float(value)
        if kind in ("gaussian", "poisson") and level < 0:
            raise SimulationError("noise level must be nonnegative")
        if kind == "poisson" and level == 0:
            raise SimulationError("poisson scale must be positive")
        return cls(kind, level)

    def __call__(self, b: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "none":
            return b
        if self.kind == "gaussian":
            if self.level == 0:
                return b
            noisy = b + rng.normal(0.0, self.level, size=b.shape)
        elif self.kind == "snr":
            rms = float(np.sqrt(np.mean(np.square(b, dtype=np.float64))))
            noisy = b + rng.normal(0.0, rms * 10.0 ** (-self.level / 20.0), size=b.shape)
        else:
            noisy = rng.poisson(np.maximum(b, 0) * self.level) / self.level
        return np.maximum(noisy, 0.0)


def simulate_measurement(scene, stack: PsfStack, grid: VolumeGrid,
                         noise: NoiseModel | str | None = None,
                         geom: SystemGeometry | None = None,
                         rng: np.random.Generator | int | None = None,
                         op: ConvOperator | None = None) -> np.ndarray:
    """Sensor image for a list of :class:`PointSource` or a dense volume.

    Point lists are summed as exact shifted PSF copies; dense volumes go
    through the FFT operator. Noise, if any, is added last and the result is
    clamped at zero.
    """
    if stack.nz != grid.nz:
        raise SimulationError("PSF stack and grid disagree on the number of planes")
    if op is None:
        op = ConvOperator(stack.psfs, dtype=np.float64)
    if grid.shape != op.volume_shape:
        raise SimulationError(
            f"grid shape {grid.shape} does not match the operator lattice {op.volume_shape}"
        )
    if isinstance(scene, np.ndarray):
        if np.any(scene < 0):
            raise SimulationError("volume intensities must be nonnegative")
        b = np.maximum(op.apply(scene).astype(np.float64), 0.0)
    else:
        sources = list(scene)
        _check_scene(sources, grid, geom)
        voxels = [v for s in sources for v in _voxel_weights(s, grid)]
        b = _sum_shifted(stack.psfs, op, voxels)
    if not isinstance(noise, NoiseModel):
        noise = NoiseModel.parse(noise)
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return noise(b, rng)


def _sum_shifted(psfs: np.ndarray, op: ConvOperator, voxels) -> np.ndarray:
    ny, nx = op.sensor_shape
    cy, cx = op.lateral_center
    b = np.zeros((ny, nx), dtype=np.float64)
    for k, iy, ix, w in voxels:
        dy, dx = iy - cy, ix - cx
        ys, yd = _overlap(dy, ny)
        xs, xd = _overlap(dx, nx)
        if ys is None or xs is None:
            continue
        b[yd, xd] += w * psfs[k][ys, xs]
    return b


def _overlap(shift: int, n: int):
    """Source/destination slices for shifting a length-n signal by ``shift``."""
    if abs(shift) >= n:
        return None, None
    if shift >= 0:
        return slice(0, n - shift), slice(shift, n)
    return slice(-shift, n), slice(0, n + shift)


def bin_2x2(image: np.ndarray) -> np.ndarray:
    """Sum 2x2 pixel blocks, dropping a trailing odd row or column."""
    image = np.asarray(image)
    ny, nx = image.shape[-2] // 2 * 2, image.shape[-1] // 2 * 2
    trimmed = image[..., :ny, :nx]
    return trimmed.reshape(image.shape[:-2] + (ny // 2, 2, nx // 2, 2)).sum(axis=(-3, -1))
