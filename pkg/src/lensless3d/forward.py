"""Cropped-convolution measurement operator and the sparsifying transform.

Volumes live on a lattice twice the sensor size laterally, shape
``(Nz, 2*Ny, 2*Nx)``. A voxel at the lattice centre ``(Ny, Nx)`` on plane k
images to PSF slice k exactly; a voxel displaced by ``(dy, dx)`` images to
that slice shifted by ``(dy, dx)`` sensor pixels. Doubling the lattice makes
the circular convolution behave like a linear one inside the sensor window,
so every voxel on the lattice maps to its (possibly clipped) shifted PSF.

Two equivalent factorizations are exposed:

* ``apply``/``adjoint``: ``b = C sum_z (x_z * h_z)``, computed as a sum of 2D
  spectral products and one inverse transform.
* ``M``/``Mt`` with ``D``: a circular 3D convolution over the volume lattice
  whose output plane 0 equals the depth sum above; ``D`` keeps the sensor
  window of that plane. This is the factorization the ADMM splitting uses,
  since ``M^T M`` is then diagonal in 3D frequency space.
"""

from __future__ import annotations

import numpy as np
from scipy import fft as sfft

__all__ = [
    "ForwardModelError",
    "ConvOperator",
    "build_operator",
    "apply",
    "adjoint",
    "psi_apply",
    "psi_adjoint",
    "psi_gram_eigs",
    "PSI_MODES",
]

PSI_MODES = ("identity", "tv3d", "tv3d_aniso")


class ForwardModelError(ValueError):
    pass


def _crop_start(n: int) -> int:
    # places the on-axis pixel n//2 of the sensor on lattice index n
    return n - n // 2


class ConvOperator:
    """Immutable measurement operator built from a PSF stack.

    Parameters
    ----------
    psfs : ndarray, shape (Nz, Ny, Nx)
        On-axis PSF for each depth plane, on the sensor lattice.
    dtype : numpy float dtype
        Working precision. float32 by default; float64 for oracle checks.
    """

    def __init__(self, psfs, dtype=np.float32):
        psfs = np.asarray(psfs)
        if psfs.ndim == 2:
            psfs = psfs[None]
        if psfs.ndim != 3 or psfs.shape[0] == 0:
            raise ForwardModelError("PSF stack must be a non-empty (Nz, Ny, Nx) array")
        if not np.all(np.isfinite(psfs)):
            raise ForwardModelError("PSF stack contains non-finite values")
        self.dtype = np.dtype(dtype)
        if self.dtype not in (np.float32, np.float64):
            raise ForwardModelError(f"unsupported dtype {self.dtype}")
        nz, ny, nx = psfs.shape
        self.nz = nz
        self.sensor_shape = (ny, nx)
        self.padded_shape = (nz, 2 * ny, 2 * nx)
        self.lateral_shape = (2 * ny, 2 * nx)
        sy, sx = _crop_start(ny), _crop_start(nx)
        self.crop = (slice(sy, sy + ny), slice(sx, sx + nx))

        kernel = np.zeros(self.padded_shape, dtype=self.dtype)
        kernel[(slice(None),) + self.crop] = psfs
        # Move the lattice centre (Ny, Nx) to the origin of the circular kernel.
        kernel = np.roll(kernel, (-ny, -nx), axis=(1, 2))
        otf2 = sfft.rfft2(kernel, axes=(1, 2))
        # 3D kernel g[z] = k[-z mod Nz]: plane 0 of x (*)_3 g is sum_z x_z (*) k_z.
        kernel3 = np.roll(kernel[::-1], 1, axis=0)
        otf3 = sfft.rfftn(kernel3, axes=(0, 1, 2))
        otf2.flags.writeable = False
        otf3.flags.writeable = False
        self.otf2 = otf2
        self.otf3 = otf3
        gram = (otf3.real ** 2 + otf3.imag ** 2).astype(self.dtype)
        gram.flags.writeable = False
        self.gram_eigs = gram

        mask = np.zeros(self.padded_shape, dtype=self.dtype)
        mask[(0,) + self.crop] = 1.0
        mask.flags.writeable = False
        self.mask = mask

    @property
    def volume_shape(self) -> tuple[int, int, int]:
        return self.padded_shape

    @property
    def lateral_center(self) -> tuple[int, int]:
        ny, nx = self.sensor_shape
        return (ny, nx)

    def _check_volume(self, x):
        x = np.asarray(x)
        if x.shape != self.padded_shape:
            raise ForwardModelError(
                f"volume shape {x.shape} does not match operator {self.padded_shape}"
            )
        return x.astype(self.dtype, copy=False)

    def _check_image(self, b):
        b = np.asarray(b)
        if b.shape != self.sensor_shape:
            raise ForwardModelError(
                f"image shape {b.shape} does not match sensor {self.sensor_shape}"
            )
        return b.astype(self.dtype, copy=False)

    # -- b = A x -----------------------------------------------------------
    def apply(self, x) -> np.ndarray:
        x = self._check_volume(x)
        spec = sfft.rfft2(x, axes=(1, 2))
        spec *= self.otf2
        total = spec.sum(axis=0)
        full = sfft.irfft2(total, s=self.lateral_shape)
        return np.ascontiguousarray(full[self.crop])

    def adjoint(self, b) -> np.ndarray:
        b = self._check_image(b)
        padded = np.zeros(self.lateral_shape, dtype=self.dtype)
        padded[self.crop] = b
        spec = sfft.rfft2(padded)
        return sfft.irfft2(np.conj(self.otf2) * spec, s=self.lateral_shape, axes=(1, 2))

    def impulse_response(self, k: int, iy: int, ix: int) -> np.ndarray:
        """``apply`` of a unit voxel at lattice index (k, iy, ix)."""
        py, px = self.lateral_shape
        if not (0 <= k < self.nz and 0 <= iy < py and 0 <= ix < px):
            raise ForwardModelError(f"voxel index {(k, iy, ix)} outside {self.padded_shape}")
        delta = np.zeros(self.lateral_shape, dtype=self.dtype)
        delta[iy, ix] = 1.0
        full = sfft.irfft2(sfft.rfft2(delta) * self.otf2[k], s=self.lateral_shape)
        return np.ascontiguousarray(full[self.crop])

    # -- A = D M factorization --------------------------------------------
    def rfft3(self, x) -> np.ndarray:
        return sfft.rfftn(np.asarray(x, dtype=self.dtype), axes=(0, 1, 2))

    def irfft3(self, spec) -> np.ndarray:
        return sfft.irfftn(spec, s=self.padded_shape, axes=(0, 1, 2))

    def M(self, x) -> np.ndarray:
        return self.irfft3(self.rfft3(self._check_volume(x)) * self.otf3)

    def Mt(self, v) -> np.ndarray:
        return self.irfft3(self.rfft3(self._check_volume(v)) * np.conj(self.otf3))

    def MtM(self, x) -> np.ndarray:
        return self.irfft3(self.rfft3(self._check_volume(x)) * self.gram_eigs)

    def D(self, v) -> np.ndarray:
        """Keep the sensor window of output plane 0."""
        v = self._check_volume(v)
        return np.ascontiguousarray(v[(0,) + self.crop])

    def Dt(self, b) -> np.ndarray:
        out = np.zeros(self.padded_shape, dtype=self.dtype)
        out[(0,) + self.crop] = self._check_image(b)
        return out


def build_operator(stack, dtype=np.float32) -> ConvOperator:
    """Operator from a :class:`~lensless3d.optics_sim.PsfStack` or a bare array."""
    psfs = getattr(stack, "psfs", stack)
    return ConvOperator(psfs, dtype=dtype)


def apply(op: ConvOperator, x) -> np.ndarray:
    return op.apply(x)


def adjoint(op: ConvOperator, b) -> np.ndarray:
    return op.adjoint(b)


def _check_mode(mode: str) -> None:
    if mode not in PSI_MODES:
        raise ForwardModelError(f"unknown regularizer mode {mode!r}; expected one of {PSI_MODES}")


def psi_apply(x, mode: str = "tv3d") -> np.ndarray:
    """Sparsifying transform.

    ``identity`` returns ``x``. The TV modes return circular forward
    differences along (z, y, x) stacked on a new leading axis of length 3.
    """
    _check_mode(mode)
    x = np.asarray(x)
    if mode == "identity":
        return x
    return np.stack([np.roll(x, -1, axis=a) - x for a in range(x.ndim)])


def psi_adjoint(g, mode: str = "tv3d") -> np.ndarray:
    """Adjoint of :func:`psi_apply` (negative circular divergence for TV)."""
    _check_mode(mode)
    g = np.asarray(g)
    if mode == "identity":
        return g
    out = np.zeros(g.shape[1:], dtype=g.dtype)
    for a in range(g.shape[0]):
        out += np.roll(g[a], 1, axis=a) - g[a]
    return out


def psi_gram_eigs(shape, mode: str, dtype=np.float64) -> np.ndarray:
    """Eigenvalues of Psi^T Psi on the rfftn frequency lattice of ``shape``."""
    _check_mode(mode)
    nz, ny, nx = shape
    rshape = (nz, ny, nx // 2 + 1)
    if mode == "identity":
        return np.ones(rshape, dtype=dtype)
    wz = 2 * np.pi * np.fft.fftfreq(nz)[:, None, None]
    wy = 2 * np.pi * np.fft.fftfreq(ny)[None, :, None]
    wx = 2 * np.pi * np.fft.rfftfreq(nx)[None, None, :]
    eig = (2 - 2 * np.cos(wz)) + (2 - 2 * np.cos(wy)) + (2 - 2 * np.cos(wx))
    return eig.astype(dtype)
