import numpy as np
import pytest

from lensless3d.forward import ConvOperator


def random_psfs(rng, nz, ny, nx):
    """Nonnegative random PSF slices with unit sum."""
    p = rng.random((nz, ny, nx)) ** 4
    return p / p.sum(axis=(1, 2), keepdims=True)


def dense_H(psfs):
    """Explicit forward matrix built by zero-filled shifting of each PSF slice.

    Column for lattice voxel (k, iy, ix) is slice k shifted by
    (iy - Ny, ix - Nx) with zero fill, which is the cropped linear
    convolution written out voxel by voxel.
    """
    nz, ny, nx = psfs.shape
    cols = []
    for k in range(nz):
        for iy in range(2 * ny):
            for ix in range(2 * nx):
                dy, dx = iy - ny, ix - nx
                img = np.zeros((ny, nx))
                ys = slice(max(0, -dy), min(ny, ny - dy))
                yd = slice(max(0, dy), min(ny, ny + dy))
                xs = slice(max(0, -dx), min(nx, nx - dx))
                xd = slice(max(0, dx), min(nx, nx + dx))
                if ys.start < ys.stop and xs.start < xs.stop:
                    img[yd, xd] = psfs[k][ys, xs]
                cols.append(img.ravel())
    return np.stack(cols, axis=1)


def dense_from_linear(fn, in_shape):
    """Materialize a linear map by applying it to every unit vector."""
    n = int(np.prod(in_shape))
    cols = []
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        cols.append(np.asarray(fn(e.reshape(in_shape)), dtype=np.float64).ravel())
    return np.stack(cols, axis=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_op64(rng):
    psfs = random_psfs(rng, 2, 4, 4)
    return ConvOperator(psfs, dtype=np.float64), psfs


# -- acceptance summary -------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_report():
    """Record one PASS/FAIL line for the terminal summary."""

    def report(number: int, passed: bool, detail: str) -> None:
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
