import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lensless3d.grid import build_grid, desk_geometry, magnification
from lensless3d.optics_sim import (
    DiffuserSurface,
    NoiseModel,
    PointSource,
    PsfStack,
    SimulationError,
    autocorrelation_width,
    bin_2x2,
    calibrate,
    diffuser_lattice_for,
    generate_diffuser,
    mean_slope_deg,
    rasterize,
    render_psf,
    simulate_measurement,
)

GEOM = desk_geometry(64)


@pytest.fixture(scope="module")
def surface():
    return generate_diffuser(7, lattice=diffuser_lattice_for(GEOM))


@pytest.fixture(scope="module")
def small_system(surface):
    grid = build_grid(GEOM, [10.86, 14.0, 20.0])
    stack = calibrate(surface, grid, GEOM, n_rays=200_000)
    return grid, stack


def test_diffuser_statistics():
    s = generate_diffuser(1, feature_size=140.0, slope=0.7, lattice=((512, 512), 5.0))
    assert abs(autocorrelation_width(s.heightmap, s.pitch) - 140.0) <= 0.2 * 140.0
    assert 0.56 <= mean_slope_deg(s) <= 0.84
    assert mean_slope_deg(s) == pytest.approx(0.7, rel=1e-9)


def test_diffuser_deterministic_and_seed_dependent():
    a = generate_diffuser(1, lattice=((128, 128), 5.0))
    b = generate_diffuser(1, lattice=((128, 128), 5.0))
    c = generate_diffuser(2, lattice=((128, 128), 5.0))
    assert a.heightmap.tobytes() == b.heightmap.tobytes()
    assert not np.array_equal(a.heightmap, c.heightmap)


def test_diffuser_slope_scales_linearly():
    a = generate_diffuser(3, slope=0.7, lattice=((256, 256), 5.0))
    b = generate_diffuser(3, slope=1.4, lattice=((256, 256), 5.0))
    assert mean_slope_deg(b) / mean_slope_deg(a) == pytest.approx(2.0, rel=0.05)


def test_diffuser_rejects_unresolved_features():
    with pytest.raises(SimulationError, match="feature_size"):
        generate_diffuser(0, feature_size=8.0, lattice=((64, 64), 5.0))


def test_flat_surface_gives_aperture_image():
    lat, pitch = diffuser_lattice_for(GEOM)
    flat = DiffuserSurface(np.zeros(lat), pitch, 140.0, 0.7, 0.5, 0)
    z = 20.0
    psf = render_psf(flat, z, GEOM, n_rays=400_000)
    assert psf.sum() == pytest.approx(1.0)
    # footprint of the aperture projected from the point: w (1 + d/z)
    width_mm = GEOM.aperture_width * (1 + GEOM.diffuser_to_sensor_d / z)
    lit = psf > 0.5 * psf.max()
    cols = np.nonzero(lit.any(axis=0))[0]
    rows = np.nonzero(lit.any(axis=1))[0]
    pitch_mm = GEOM.pixel_pitch * 1e-3
    assert (cols[-1] - cols[0] + 1) * pitch_mm == pytest.approx(width_mm, abs=2 * pitch_mm)
    assert (rows[-1] - rows[0] + 1) * pitch_mm == pytest.approx(width_mm, abs=2 * pitch_mm)
    # centred on the on-axis pixel
    cy, cx = np.array(np.nonzero(lit)).mean(axis=1)
    assert cy == pytest.approx(31.5, abs=1.0) and cx == pytest.approx(31.5, abs=1.0)
    std = psf[lit].std() / psf[lit].mean()
    assert std < 0.2


def test_render_deterministic(surface):
    a = render_psf(surface, 15.0, GEOM, n_rays=100_000)
    b = render_psf(surface, 15.0, GEOM, n_rays=100_000)
    assert a.tobytes() == b.tobytes()
    assert a.sum() == pytest.approx(1.0, abs=1e-12)


def test_render_rejects_too_close(surface):
    with pytest.raises(SimulationError):
        render_psf(surface, 5.0, GEOM, n_rays=1000)


def _ncc(a, b):
    a = a - a.mean()
    b = b - b.mean()
    return float(np.vdot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


def test_translated_source_shifts_pattern(surface):
    z = 20.0
    ref = render_psf(surface, z, GEOM, n_rays=1_000_000)
    m = magnification(z, GEOM)
    pitch_mm = GEOM.pixel_pitch * 1e-3
    dx = 4 * pitch_mm / m  # a four-pixel shift on the sensor
    off = render_psf(surface, z, GEOM, n_rays=1_000_000, source_xy=(dx, 0.0))
    # source at +x moves the caustic toward -x on the sensor
    assert _ncc(ref[:, 4:], off[:, :-4]) > 0.95


def test_depth_scaling_of_caustic(surface):
    from scipy import ndimage

    z1, z2 = 14.0, 20.0
    a = render_psf(surface, z1, GEOM, n_rays=1_000_000)
    b = render_psf(surface, z2, GEOM, n_rays=1_000_000)
    # the caustic footprint scales like w (1 + d/z)
    s = (1 + GEOM.diffuser_to_sensor_d / z1) / (1 + GEOM.diffuser_to_sensor_d / z2)
    c = (np.array(b.shape) - 1) / 2.0
    zoom = ndimage.affine_transform(b, np.eye(2) / s, offset=c - c / s, order=1)
    sa, sz = ndimage.gaussian_filter(a, 1.0), ndimage.gaussian_filter(zoom, 1.0)
    assert _ncc(sa, sz) > 0.8


def test_support_grows_toward_camera(small_system):
    grid, stack = small_system

    def area(p):
        v = np.sort(p.ravel())[::-1]
        thr = v[np.searchsorted(np.cumsum(v), 0.99)]
        r, c = np.nonzero(p >= thr)
        return (r.max() - r.min() + 1) * (c.max() - c.min() + 1)

    areas = [area(p) for p in stack.psfs]
    assert all(a >= b for a, b in zip(areas, areas[1:]))


def test_stack_contract(small_system):
    grid, stack = small_system
    assert stack.psfs.shape == (3, 64, 64)
    stack.check_normalization(1e-6)
    assert np.all(stack.psfs >= 0)
    one = calibrate(generate_diffuser(1, lattice=diffuser_lattice_for(GEOM)),
                    build_grid(GEOM, [20.0]), GEOM, n_rays=10_000)
    assert one.psfs.shape == (1, 64, 64)
    with pytest.raises(SimulationError):
        PsfStack(psfs=stack.psfs, depth_planes=(1.0,))


def test_on_axis_point_is_bitwise_slice(small_system):
    grid, stack = small_system
    for k, z in enumerate(grid.depth_planes):
        b = simulate_measurement([PointSource(0.0, 0.0, z, 1.0)], stack, grid)
        assert b.tobytes() == stack.psfs[k].tobytes()


def test_empty_scene_and_zero_noise(small_system):
    grid, stack = small_system
    assert not np.any(simulate_measurement([], stack, grid))
    src = [PointSource(0.01, -0.02, 14.0, 0.7)]
    clean = simulate_measurement(src, stack, grid)
    noisy = simulate_measurement(src, stack, grid, noise="gaussian:0", rng=5)
    assert clean.tobytes() == noisy.tobytes()


def test_point_list_matches_dense_operator(small_system):
    grid, stack = small_system
    src = [PointSource(0.013, -0.02, 14.0, 0.7), PointSource(-0.05, 0.03, 20.0, 1.3),
           PointSource(0.0, 0.0, 10.86, 0.2)]
    vol = rasterize(src, grid)
    via_op = simulate_measurement(vol, stack, grid)
    direct = simulate_measurement(src, stack, grid)
    np.testing.assert_allclose(direct, via_op, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(pts=st.lists(st.tuples(st.floats(-0.08, 0.08), st.floats(-0.08, 0.08),
                              st.sampled_from([10.86, 14.0, 20.0]), st.floats(0, 2)),
                    min_size=1, max_size=6))
def test_linearity(small_system, pts):
    grid, stack = small_system
    src = [PointSource(*p) for p in pts]
    half = len(src) // 2
    both = simulate_measurement(src, stack, grid)
    parts = simulate_measurement(src[:half], stack, grid) + simulate_measurement(src[half:], stack, grid)
    assert np.abs(both - parts).max() <= 1e-10 * max(np.abs(both).max(), 1e-300)


def test_scene_outside_fov_lists_sources(small_system):
    grid, stack = small_system
    src = [PointSource(0.0, 0.0, 14.0), PointSource(0.0, 0.0, 50.0), PointSource(5.0, 0.0, 14.0)]
    with pytest.raises(SimulationError) as err:
        simulate_measurement(src, stack, grid, geom=GEOM)
    msg = str(err.value)
    assert "#1" in msg and "#2" in msg and "#0" not in msg


def test_noise_models():
    rng = np.random.default_rng(0)
    b = np.full((64, 64), 10.0)
    assert NoiseModel.parse("none")(b, rng) is b
    g = NoiseModel.parse("gaussian:1.0")(b, rng)
    assert g.std() == pytest.approx(1.0, rel=0.1)
    p = NoiseModel.parse("poisson:100")(b, rng)
    assert p.mean() == pytest.approx(10.0, rel=0.01) and np.all(p >= 0)
    s = NoiseModel.parse("snr:20")(b, rng)
    assert (s - b).std() == pytest.approx(1.0, rel=0.1)
    for bad in ("laplace:1", "gaussian:-1", "poisson:0", "gaussian"):
        with pytest.raises(SimulationError):
            NoiseModel.parse(bad)


def test_bin_2x2():
    img = np.arange(20.0).reshape(4, 5)
    out = bin_2x2(img)
    assert out.shape == (2, 2)
    assert out[0, 0] == 0 + 1 + 5 + 6
    assert out.sum() == img[:, :4].sum()
