"""System geometry, field of view and the non-uniform reconstruction grid.

Lengths follow the units noted on each field: pixel pitch and voxel pitch in
micrometres, everything else in millimetres. Angles are in degrees.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

__all__ = [
    "GeometryError",
    "SystemGeometry",
    "AxisFov",
    "FovReport",
    "VolumeGrid",
    "compute_fov",
    "depth_plane_spacing",
    "spacing_constant",
    "magnification",
    "build_grid",
    "min_object_distance_for",
    "desk_geometry",
]


class GeometryError(ValueError):
    """Invalid geometry or grid parameters."""


@dataclass(frozen=True)
class SystemGeometry:
    """Physical layout of a diffuser-in-front-of-sensor camera.

    Defaults describe a full-size reference camera: a 2560x2160 sensor with
    6.5 um pixels, the diffuser 8.9 mm from the sensor, and a 7.5 x 5.5 mm
    aperture on the diffuser.
    """

    sensor_width_px: int = 2560
    sensor_height_px: int = 2160
    pixel_pitch: float = 6.5  # um
    diffuser_to_sensor_d: float = 8.9  # mm
    aperture_width: float = 7.5  # mm
    aperture_height: float = 5.5  # mm
    diffuser_max_deflection_beta: float = 0.5  # deg
    pixel_cutoff_alpha_c_x: float = 41.5  # deg
    pixel_cutoff_alpha_c_y: float = 30.0  # deg
    min_object_distance: float = 7.3  # mm
    hyperfocal_distance: float = 2300.0  # mm

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("sensor_width_px", "sensor_height_px"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise GeometryError(f"{name} must be a positive integer, got {value!r}")
        for name in (
            "pixel_pitch",
            "diffuser_to_sensor_d",
            "aperture_width",
            "aperture_height",
            "min_object_distance",
            "hyperfocal_distance",
        ):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise GeometryError(f"{name} must be a positive length, got {value!r}")
        # beta = 0 means a non-deflecting screen; alpha_c = 90 means no pixel cutoff.
        beta = self.diffuser_max_deflection_beta
        if not (0.0 <= beta < 90.0):
            raise GeometryError(
                f"diffuser_max_deflection_beta must lie in [0, 90) deg, got {beta!r}"
            )
        for name in ("pixel_cutoff_alpha_c_x", "pixel_cutoff_alpha_c_y"):
            value = getattr(self, name)
            if not (0.0 < value <= 90.0):
                raise GeometryError(f"{name} must lie in (0, 90] deg, got {value!r}")
        if self.min_object_distance >= self.hyperfocal_distance:
            raise GeometryError(
                "min_object_distance must be smaller than hyperfocal_distance "
                f"({self.min_object_distance} >= {self.hyperfocal_distance})"
            )

    @property
    def sensor_shape(self) -> tuple[int, int]:
        """(rows, cols) of the sensor lattice."""
        return (int(self.sensor_height_px), int(self.sensor_width_px))

    @property
    def sensor_width_mm(self) -> float:
        return self.sensor_width_px * self.pixel_pitch * 1e-3

    @property
    def sensor_height_mm(self) -> float:
        return self.sensor_height_px * self.pixel_pitch * 1e-3

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, values: dict) -> "SystemGeometry":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise GeometryError(f"unknown geometry keys: {', '.join(unknown)}")
        return cls(**values)


def desk_geometry(sensor_px: int = 256, pixel_pitch: float = 13.0,
                  z_min: float = 10.86, **overrides) -> SystemGeometry:
    """Square laptop-scale analogue of the reference camera.

    The pixel pitch matches the reference sensor after 2x2 binning. The
    aperture is shrunk so that an on-axis source at ``z_min`` just fills the
    sensor, which ties the aperture to the minimum calibration distance.
    """
    d = overrides.pop("diffuser_to_sensor_d", 8.9)
    beta = overrides.pop("diffuser_max_deflection_beta", 0.5)
    sensor_mm = sensor_px * pixel_pitch * 1e-3
    spread = 2.0 * d * math.tan(math.radians(beta))
    aperture = (sensor_mm - spread) / (1.0 + d / z_min)
    if aperture <= 0:
        raise GeometryError("sensor too small for the requested minimum distance")
    params = dict(
        sensor_width_px=sensor_px,
        sensor_height_px=sensor_px,
        pixel_pitch=pixel_pitch,
        diffuser_to_sensor_d=d,
        aperture_width=aperture,
        aperture_height=aperture,
        diffuser_max_deflection_beta=beta,
        min_object_distance=z_min,
    )
    params.update(overrides)
    return SystemGeometry(**params)


def min_object_distance_for(geom: SystemGeometry) -> float:
    """Closest depth whose on-axis caustic still fits on the sensor.

    The caustic footprint of an on-axis point at depth z is the aperture
    magnified by (1 + d/z) plus the deflection spread 2 d tan(beta). The
    result is the larger of the two per-axis limits, in mm.
    """
    d = geom.diffuser_to_sensor_d
    spread = 2.0 * d * math.tan(math.radians(geom.diffuser_max_deflection_beta))
    limits = []
    for l, w in ((geom.sensor_width_mm, geom.aperture_width),
                 (geom.sensor_height_mm, geom.aperture_height)):
        room = l - w - spread
        if room <= 0:
            return math.inf
        limits.append(d * w / room)
    return max(limits)


@dataclass(frozen=True)
class AxisFov:
    half_fov: float  # deg
    limiting_factor: str  # "geometric" | "pixel_response"
    geometric_cutoff: float  # deg, atan((l + w) / 2d)


@dataclass(frozen=True)
class FovReport:
    x: AxisFov
    y: AxisFov
    axial_range: tuple[float, float]  # mm

    @property
    def angular_half_fov_x(self) -> float:
        return self.x.half_fov

    @property
    def angular_half_fov_y(self) -> float:
        return self.y.half_fov


def compute_fov(geom: SystemGeometry) -> FovReport:
    """Angular half field of view per axis and the axial range.

    Each axis takes the deflection angle plus whichever is smaller of the
    pixel acceptance cutoff and the geometric cutoff ``atan((l + w) / 2d)``.
    """
    geom.validate()
    d = geom.diffuser_to_sensor_d
    beta = geom.diffuser_max_deflection_beta

    def axis(l: float, w: float, alpha_c: float) -> AxisFov:
        geometric = math.degrees(math.atan((l + w) / (2.0 * d)))
        if alpha_c < geometric:
            return AxisFov(beta + alpha_c, "pixel_response", geometric)
        return AxisFov(beta + geometric, "geometric", geometric)

    return FovReport(
        x=axis(geom.sensor_width_mm, geom.aperture_width, geom.pixel_cutoff_alpha_c_x),
        y=axis(geom.sensor_height_mm, geom.aperture_height, geom.pixel_cutoff_alpha_c_y),
        axial_range=(geom.min_object_distance, geom.hyperfocal_distance),
    )


def depth_plane_spacing(z_min: float, z_max: float, c: float) -> list[float]:
    """Depth planes equally spaced in inverse depth.

    Starting at ``z_min``, each next plane satisfies ``1/z_next = 1/z - c``;
    planes are emitted while they stay within ``z_max``. The k-th plane is
    evaluated directly as ``1 / (1/z_min - k c)`` so that rounding does not
    accumulate along the sequence.
    """
    if not (z_min > 0 and z_max > 0):
        raise GeometryError("depth range must be positive")
    if z_max < z_min:
        raise GeometryError(f"z_max ({z_max}) is smaller than z_min ({z_min})")
    if not c > 0:
        raise GeometryError(f"spacing constant c must be positive, got {c!r}")
    inv0 = 1.0 / z_min
    if c >= inv0:
        raise GeometryError(
            f"spacing constant c={c} >= 1/z_min={inv0}; the next plane would lie at infinity"
        )
    planes = [float(z_min)]
    # A relative slack of 1e-12 keeps the endpoint when c was derived from it.
    limit = z_max * (1.0 + 1e-12)
    k = 1
    while True:
        inv = inv0 - k * c
        if inv <= 0:
            break
        z = 1.0 / inv
        if z > limit:
            break
        planes.append(z)
        k += 1
    return planes


def spacing_constant(z_min: float, z_max: float, n_planes: int) -> float:
    """The c that yields exactly ``n_planes`` planes spanning [z_min, z_max]."""
    if n_planes < 2:
        raise GeometryError("need at least two planes to derive a spacing")
    return (1.0 / z_min - 1.0 / z_max) / (n_planes - 1)


def magnification(z, geom: SystemGeometry):
    """Lateral magnification d/z from object depth z (mm) onto the sensor."""
    z_arr = np.asarray(z, dtype=float)
    if np.any(~(z_arr > 0)):
        raise GeometryError(f"depth must be positive, got {z!r}")
    m = geom.diffuser_to_sensor_d / z_arr
    return float(m) if m.ndim == 0 else m


@dataclass(frozen=True)
class VolumeGrid:
    """Reconstruction lattice: shared lateral counts, per-plane voxel pitch.

    Arrays on this grid are indexed ``[iz, iy, ix]``. The on-axis voxel sits
    at lateral index ``center = (Ny // 2, Nx // 2)``. Because the camera
    inverts the scene, increasing column index corresponds to decreasing
    physical x; :meth:`lateral_coords` and :meth:`voxel_index` apply that
    sign so that callers can work in physical millimetres.
    """

    depth_planes: tuple[float, ...]  # mm
    lateral_counts: tuple[int, int]  # (Nx, Ny)
    pixel_pitch: float  # um, sensor pitch
    magnification_per_plane: tuple[float, ...] = field(default=())

    def __post_init__(self):
        z = np.asarray(self.depth_planes, dtype=float)
        if z.ndim != 1 or z.size == 0:
            raise GeometryError("grid needs at least one depth plane")
        if np.any(np.diff(z) <= 0):
            raise GeometryError("depth planes must be strictly increasing")
        nx, ny = self.lateral_counts
        if nx < 1 or ny < 1:
            raise GeometryError("lateral counts must be positive")
        if len(self.magnification_per_plane) != z.size:
            raise GeometryError("one magnification per depth plane is required")

    @property
    def nz(self) -> int:
        return len(self.depth_planes)

    @property
    def shape(self) -> tuple[int, int, int]:
        nx, ny = self.lateral_counts
        return (self.nz, ny, nx)

    @property
    def voxel_count(self) -> int:
        nz, ny, nx = self.shape
        return nz * ny * nx

    @property
    def center(self) -> tuple[int, int]:
        nx, ny = self.lateral_counts
        return (ny // 2, nx // 2)

    @property
    def lateral_pitch(self) -> np.ndarray:
        """Voxel pitch per plane in um (sensor pitch over magnification)."""
        return self.pixel_pitch / np.asarray(self.magnification_per_plane)

    def plane_index(self, z: float, atol: float = 1e-9) -> int:
        """Index of the plane at depth ``z``; raises if no plane is that close."""
        planes = np.asarray(self.depth_planes)
        k = int(np.argmin(np.abs(planes - z)))
        if abs(planes[k] - z) > atol * max(1.0, abs(z)):
            raise GeometryError(f"no calibrated plane at z={z} mm")
        return k

    def nearest_plane(self, z: float) -> int:
        return int(np.argmin(np.abs(np.asarray(self.depth_planes) - z)))

    def lateral_coords(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Physical (y, x) coordinates in mm of the voxel centres on plane k."""
        nz, ny, nx = self.shape
        cy, cx = self.center
        pitch_mm = self.lateral_pitch[k] * 1e-3
        y = -(np.arange(ny) - cy) * pitch_mm
        x = -(np.arange(nx) - cx) * pitch_mm
        return y, x

    def voxel_index(self, x: float, y: float, k: int) -> tuple[float, float]:
        """Fractional (row, col) on plane k for a physical lateral position."""
        cy, cx = self.center
        pitch_mm = self.lateral_pitch[k] * 1e-3
        return (cy - y / pitch_mm, cx - x / pitch_mm)


def build_grid(geom: SystemGeometry, z_planes: Sequence[float],
               lateral_counts: tuple[int, int] | None = None) -> VolumeGrid:
    """Assemble the reconstruction grid for the given depth planes.

    ``lateral_counts`` is ``(Nx, Ny)``; by default twice the sensor size in
    each direction, which is the lattice the padded convolution model
    reconstructs on.
    """
    z = np.asarray(list(z_planes), dtype=float)
    if z.size == 0:
        raise GeometryError("no depth planes given")
    lo, hi = geom.min_object_distance, geom.hyperfocal_distance
    bad = [float(v) for v in z if not (lo <= v <= hi)]
    if bad:
        raise GeometryError(
            f"depth planes outside the axial range [{lo}, {hi}] mm: {bad}"
        )
    if lateral_counts is None:
        lateral_counts = (2 * geom.sensor_width_px, 2 * geom.sensor_height_px)
    m = np.atleast_1d(magnification(z, geom))
    return VolumeGrid(
        depth_planes=tuple(float(v) for v in z),
        lateral_counts=(int(lateral_counts[0]), int(lateral_counts[1])),
        pixel_pitch=geom.pixel_pitch,
        magnification_per_plane=tuple(float(v) for v in m),
    )
