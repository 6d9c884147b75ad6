import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import dense_H, random_psfs
from lensless3d.analysis import (
    AnalysisError,
    condition_details,
    conditioning_sweep,
    constellation,
    dip_fraction,
    local_condition_number,
    multi_point_test,
    psf_similarity,
    two_point_test,
    write_conditioning_csv,
    write_resolvability_csv,
)
from lensless3d.forward import ConvOperator
from lensless3d.grid import build_grid, desk_geometry
from lensless3d.optics_sim import calibrate, diffuser_lattice_for, generate_diffuser

GEOM = desk_geometry(64)


@pytest.fixture(scope="module")
def system():
    surface = generate_diffuser(11, lattice=diffuser_lattice_for(GEOM))
    grid = build_grid(GEOM, [10.86, 12.5, 14.5, 17.0, 20.0])
    stack = calibrate(surface, grid, GEOM, n_rays=400_000)
    return surface, grid, stack


# -- dip criterion -------------------------------------------------------------

def test_dip_fraction_values():
    v = np.zeros((1, 1, 7))
    v[0, 0, [1, 5]] = 1.0
    v[0, 0, 2:5] = [0.5, 0.3, 0.6]
    assert dip_fraction(v, (0, 0, 1), (0, 0, 5)) == pytest.approx(0.7)
    assert dip_fraction(v, (0, 0, 1), (0, 0, 2)) is None  # nothing in between
    v2 = v.copy()
    v2[0, 0, 5] = 0.0
    assert dip_fraction(v2, (0, 0, 1), (0, 0, 5)) is None  # missing peak
    with pytest.raises(AnalysisError):
        dip_fraction(v, (0, 0, 1), (0, 1, 5))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=8, max_size=8), st.integers(0, 2), st.integers(5, 7))
def test_dip_symmetric(vals, a, b):
    v = np.asarray(vals).reshape(1, 1, 8)
    assert dip_fraction(v, (0, 0, a), (0, 0, b)) == dip_fraction(v, (0, 0, b), (0, 0, a))


# -- two-point and multi-point ---------------------------------------------------

def test_two_point_zero_separation_unresolved(system):
    _, grid, stack = system
    r = two_point_test(stack, grid, 14.5, "x", 0)
    assert not r.resolved and r.dip_fraction is None


def test_two_point_far_apart_resolved(system):
    _, grid, stack = system
    r = two_point_test(stack, grid, 14.5, "x", 30)
    assert r.resolved and r.dip_fraction > 0.9
    assert r.physical_separation[0] == pytest.approx(30 * grid.lateral_pitch[2])
    r = two_point_test(stack, grid, 10.86, "z", 3)
    assert r.resolved


def test_two_point_validation(system):
    _, grid, stack = system
    with pytest.raises(AnalysisError):
        two_point_test(stack, grid, 14.5, "w", 3)
    with pytest.raises(AnalysisError):
        two_point_test(stack, grid, 17.0, "z", 3)


def test_multi_point_single_source_trivial(system):
    _, grid, stack = system
    assert multi_point_test(stack, grid, 14.5, 1, (4, 4)).resolved


def test_multi_point_wide_constellation(system):
    _, grid, stack = system
    r = multi_point_test(stack, grid, 14.5, 2, (20, 20), plane="xy")
    assert r.resolved and r.n_sources == 4


def test_constellation_layout(system):
    _, grid, _ = system
    lay = constellation(grid, 10.86, 3, (4, 2), plane="xz")
    ks = sorted({v[0] for v in lay.values()})
    assert ks == [0, 2, 4]
    xs = sorted({v[2] for v in lay.values()})
    assert np.all(np.diff(xs) == 4)
    with pytest.raises(AnalysisError):
        constellation(grid, 10.86, 4, (4, 2), plane="xz")  # runs past the last plane


# -- conditioning ------------------------------------------------------------------

def test_condition_number_matches_dense_oracle(rng):
    psfs = random_psfs(rng, 3, 8, 8)
    H = dense_H(psfs)
    op = ConvOperator(psfs, dtype=np.float64)
    voxels = [(0, 8, 8), (0, 8, 9), (1, 9, 8), (2, 7, 7), (1, 8, 8)]
    shape = op.volume_shape
    cols = [np.ravel_multi_index(v, shape) for v in voxels]
    sv = np.linalg.svd(H[:, cols], compute_uv=False)
    assert local_condition_number(psfs, voxels) == pytest.approx(sv[0] / sv[-1], rel=1e-8)


def test_condition_number_trivial_cases(rng):
    psfs = random_psfs(rng, 1, 16, 16)
    assert local_condition_number(psfs, [(0, 16, 16)]) == pytest.approx(1.0)
    # two single-pixel PSFs far apart: orthogonal, equal-norm columns
    spot = np.zeros((1, 16, 16))
    spot[0, 8, 8] = 1.0
    assert local_condition_number(spot, [(0, 16, 10), (0, 16, 20)]) == pytest.approx(1.0)
    scaled = local_condition_number(7.5 * psfs, [(0, 16, 16), (0, 16, 18)])
    assert scaled == pytest.approx(local_condition_number(psfs, [(0, 16, 16), (0, 16, 18)]),
                                   rel=1e-12)


def test_condition_number_rank_deficient_and_invalid():
    flat = np.zeros((1, 4, 4))
    flat[0, 0, 0] = 1.0
    # both voxels shift the only bright pixel off the sensor -> zero columns
    value, deficient = condition_details(flat, [(0, 0, 0), (0, 1, 0)])
    assert deficient and math.isinf(value)
    with pytest.raises(AnalysisError):
        local_condition_number(flat, [(0, 4, 4), (0, 4, 4)])
    with pytest.raises(AnalysisError):
        local_condition_number(flat, [])


def test_conditioning_sweep_shape_and_determinism(system):
    _, grid, stack = system
    a = conditioning_sweep(stack, grid, 20.0, [4, 9], range(1, 6), plane="xy")
    b = conditioning_sweep(stack, grid, 20.0, [4, 9], range(1, 6), plane="xy")
    assert [c.condition_numbers for c in a] == [c.condition_numbers for c in b]
    assert len(a) == 2 and all(len(c.condition_numbers) == 5 for c in a)
    assert all(v >= 1.0 for c in a for v in c.condition_numbers)
    with pytest.raises(AnalysisError):
        conditioning_sweep(stack, grid, 20.0, [5], [1])


# -- PSF similarity ------------------------------------------------------------------

def test_psf_similarity_self_and_noise(system):
    _, _, stack = system
    p = stack.psfs[2]
    ip, ratio = psf_similarity(p, p)
    assert ip == pytest.approx(1.0, abs=1e-12) and ratio == pytest.approx(1.0, abs=1e-12)
    noise = np.random.default_rng(0).standard_normal((256, 256))
    big = np.zeros((256, 256))
    big[96:160, 96:160] = p
    ip, _ = psf_similarity(big, noise)
    assert ip < 0.1


def test_psf_similarity_shift_invariant(system):
    _, _, stack = system
    p = stack.psfs[2]
    shifted = np.roll(p, (3, -2), axis=(0, 1))
    ip, _ = psf_similarity(p, shifted)
    assert ip > 0.9


def test_psf_similarity_zero_energy():
    with pytest.raises(AnalysisError):
        psf_similarity(np.zeros((8, 8)), np.ones((8, 8)))


# -- CSV -------------------------------------------------------------------------

def test_csv_exports(tmp_path, system):
    _, grid, stack = system
    curves = conditioning_sweep(stack, grid, 20.0, [4], [1, 2, 3], plane="xy")
    write_conditioning_csv(tmp_path / "c.csv", curves)
    rows = (tmp_path / "c.csv").read_text().strip().splitlines()
    assert rows[0].startswith("n_sources") and len(rows) == 4
    res = [two_point_test(stack, grid, 14.5, "x", s) for s in (0, 1)]
    write_resolvability_csv(tmp_path / "r.csv", res)
    rows = (tmp_path / "r.csv").read_text().strip().splitlines()
    assert len(rows) == 3 and rows[1].split(",")[4] == "0"
