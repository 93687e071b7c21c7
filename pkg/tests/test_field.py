import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from localedit.field import (
    Camera,
    FieldOptimizer,
    VoxelField,
    color_gradients,
    composite_weights,
    fit_field,
    fit_relevance,
    relevance_density_gradient,
    relevance_gradients,
    render_color,
    render_image,
    render_rays,
    render_relevance,
    sample_along,
    sample_ray,
)

from oracles import quadrature_render

LN2 = math.log(2.0)


def random_field(seed, dims=(8, 8, 8)):
    rng = np.random.default_rng(seed)
    return VoxelField(rng.normal(size=dims), rng.normal(size=dims + (3,)), rng.normal(size=dims),
                      (-1, -1, -1), (1, 1, 1))


def constant_field(density, color, relevance=0.0, dims=(8, 8, 8)):
    return VoxelField.from_values(np.full(dims, float(density)), np.broadcast_to(color, dims + (3,)),
                                  np.full(dims, float(relevance)))


def axis_camera(near=2.0, far=4.0, size=9):
    return Camera.look_at((3.0, 0.0, 0.0), (0.0, 0.0, 0.0), width=size, height=size, near=near, far=far)


def test_single_sample_midpoint():
    t, delta = sample_along(1.0, 3.0, 1, 1)
    assert t[0, 0] == 2.0 and delta[0, 0] == 1.0


def test_unjittered_sampling_deterministic():
    a = sample_ray(axis_camera(), (3, 5), 16)
    b = sample_ray(axis_camera(), (3, 5), 16)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    c = sample_ray(axis_camera(), (3, 5), 16, jitter="stratified", seed=4)
    assert np.all(np.diff(c[2]) > 0)
    with pytest.raises(ValueError):
        sample_along(0.0, 1.0, 1, 4, jitter="stratified")


def test_centre_pixel_on_axis():
    cam = axis_camera(size=9)
    _, d, _, _ = sample_ray(cam, (4, 4), 4)
    assert np.allclose(d, [-1.0, 0.0, 0.0], atol=1e-12)
    assert np.allclose(cam.rotation[:, 2], [-1.0, 0.0, 0.0])


def test_camera_validation_and_roundtrip():
    cam = axis_camera()
    back = Camera.from_dict(cam.to_dict())
    assert np.array_equal(back.rotation, cam.rotation) and np.array_equal(back.position, cam.position)
    assert (back.fx, back.cx, back.width, back.far) == (cam.fx, cam.cx, cam.width, cam.far)
    with pytest.raises(ValueError):
        Camera(1, 1, 0, 0, np.eye(3) * 2, np.zeros(3), 4, 4, 0.1, 1.0)
    with pytest.raises(ValueError):
        Camera(1, 1, 0, 0, np.eye(3), np.zeros(3), 4, 4, 2.0, 1.0)


def test_empty_field_shows_background():
    f = constant_field(0.0, 0.5)
    rgb, alpha = render_color(f, axis_camera(), (4, 4), 32, background=(0.1, 0.2, 0.3))
    assert np.allclose(rgb, [0.1, 0.2, 0.3]) and alpha == 0.0
    assert render_relevance(f, axis_camera(), (4, 4), 32) == 0.0


def test_single_sample_half_opacity():
    # the lone sample sits at the grid centre, where all eight neighbours agree
    f = constant_field(LN2, (1.0, 0.0, 0.0))
    bg = np.array([0.2, 0.4, 0.6])
    rgb, alpha = render_color(f, axis_camera(), (4, 4), 1, background=bg)
    assert alpha == pytest.approx(0.5, abs=1e-12)
    assert np.allclose(rgb, np.array([0.5, 0.0, 0.0]) + 0.5 * bg, atol=1e-12)


def test_two_sample_recursion():
    T, w = composite_weights(np.full((1, 2), LN2), np.ones((1, 2)))
    assert np.allclose(w, [[0.5, 0.25]]) and T[0, -1] == pytest.approx(0.25)


def test_relevance_limits():
    cam = axis_camera()
    opaque = constant_field(500.0, 0.5, 1.0)
    assert render_relevance(opaque, cam, (4, 4), 64) == pytest.approx(1.0, abs=1e-9)
    assert render_relevance(constant_field(500.0, 0.5, 0.0), cam, (4, 4), 64) == 0.0


def test_conservation_random_rays():
    f = random_field(0)
    rng = np.random.default_rng(1)
    o = rng.uniform(-2, 2, (10_000, 3))
    d = rng.normal(size=(10_000, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    out = render_rays(f, o, d, 0.0, 4.0, 32)
    assert np.max(np.abs(out.weights.sum(1) + out.T[:, -1] - 1.0)) < 1e-6
    assert out.relevance.min() >= 0 and out.relevance.max() <= 1


def test_matches_quadrature_oracle():
    f = random_field(2)
    f.density_raw -= 2.0  # keep rays partly transparent
    rng = np.random.default_rng(3)
    bg = (0.3, 0.1, 0.8)
    for _ in range(25):
        o = rng.uniform(-2.5, 2.5, 3)
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        out = render_rays(f, o[None], d[None], 0.2, 4.0, 48, background=bg)
        rgb, alpha, rel, w, left = quadrature_render(f, o, d, 0.2, 4.0, 48, bg)
        assert np.max(np.abs(out.rgb[0] - rgb)) < 1e-6
        assert abs(out.alpha[0] - alpha) < 1e-6 and abs(out.relevance[0] - rel) < 1e-6
        assert np.max(np.abs(out.weights[0] - w)) < 1e-6


def test_relevance_equals_single_channel_color():
    f = random_field(4)
    g = VoxelField(f.density_raw, np.repeat(f.relevance_raw[..., None], 3, axis=-1), f.relevance_raw,
                   f.bbox_min, f.bbox_max)
    cam = Camera.look_at((2.2, 1.0, 0.7), (0, 0, 0), width=6, height=5)
    rgb, _, rel = render_image(g, cam, 32)
    assert np.allclose(rgb[..., 0], rel, atol=1e-14)


def _fd_check(f, loss, analytic, name, h=1e-6, count=60):
    params = getattr(f, name)
    order = np.argsort(-np.abs(analytic.ravel()))[:count]
    for i in order:
        old = params.flat[i]
        params.flat[i] = old + h
        up = loss()
        params.flat[i] = old - h
        down = loss()
        params.flat[i] = old
        fd = (up - down) / (2 * h)
        assert abs(fd - analytic.flat[i]) <= 1e-4 * max(abs(fd), 1e-6), (name, i, fd, analytic.flat[i])


def test_gradients_match_finite_differences():
    f = random_field(5)
    cam = Camera.look_at((2.5, 0.3, 0.5), (0, 0, 0), width=7, height=7)
    o, d = cam.rays()
    bg = np.array([0.2, 0.5, 0.7])
    rng = np.random.default_rng(6)
    g_rgb = rng.normal(size=(len(o), 3))
    g_rel = rng.normal(size=len(o))

    def render():
        return render_rays(f, o, d, cam.near, cam.far, 24, background=bg)

    out = render()
    d_density, d_color = color_gradients(f, out, g_rgb, bg)
    d_rel = relevance_gradients(f, out, g_rel)
    d_rel_density = relevance_density_gradient(f, out, g_rel)
    color_loss = lambda: float(np.sum(g_rgb * render().rgb))  # noqa: E731
    rel_loss = lambda: float(np.sum(g_rel * render().relevance))  # noqa: E731
    _fd_check(f, color_loss, d_density, "density_raw")
    _fd_check(f, color_loss, d_color, "color_raw")
    _fd_check(f, rel_loss, d_rel, "relevance_raw")
    _fd_check(f, rel_loss, d_rel_density, "density_raw")


def test_density_gradient_covers_all_voxels():
    # every voxel touched by a ray gets some gradient; untouched voxels get none
    f = random_field(7, (4, 4, 4))
    cam = Camera.look_at((3.0, 0.0, 0.0), (0, 0, 0), width=3, height=3)
    o, d = cam.rays()
    out = render_rays(f, o, d, cam.near, cam.far, 16)
    dd, _ = color_gradients(f, out, np.ones((len(o), 3)))
    assert np.count_nonzero(dd) > 0 and np.all(np.isfinite(dd))


def test_fit_zero_iterations_is_noop():
    f = random_field(8)
    views = [(axis_camera(), np.zeros((9, 9, 3))), (axis_camera(), np.ones((9, 9, 3)))]
    g = fit_field(f, views, 0)
    assert np.array_equal(g.density_raw, f.density_raw) and np.array_equal(g.color_raw, f.color_raw)
    with pytest.raises(ValueError):
        fit_field(f, views[:1], 10)


def _cube_views(n=4, size=16):
    dims = (12, 12, 12)
    sigma = np.zeros(dims)
    sigma[3:9, 3:9, 3:9] = 40.0
    gt = VoxelField.from_values(sigma, np.broadcast_to([0.8, 0.3, 0.2], dims + (3,)))
    cams = [Camera.look_at((2.8 * math.cos(a), 2.8 * math.sin(a), 1.0), (0, 0, 0), width=size, height=size,
                           fov_deg=45, near=1.0, far=4.6)
            for a in np.linspace(0, 2 * math.pi, n, endpoint=False)]
    return gt, [(c, render_image(gt, c, 32)[0]) for c in cams]


def test_constant_cube_converges():
    gt, views = _cube_views()
    f = fit_field(VoxelField.empty((12, 12, 12)), views, 300, batch_size=512, n_samples=32, seed=0)
    losses = [float(np.mean((render_image(f, c, 32)[0] - img) ** 2)) for c, img in views]
    assert max(losses) < 1e-3


def test_fit_relevance_detached_and_zero_target():
    gt, views = _cube_views()
    f = gt.copy()
    before = f.geometry_digest()
    rel_views = [(c, np.zeros(img.shape[:2])) for c, img in views]
    g = fit_relevance(f, rel_views, 150, batch_size=512, n_samples=32, seed=1)
    assert g.geometry_digest() == before
    losses = [float(np.mean(render_image(g, c, 32)[2] ** 2)) for c, _ in views]
    assert max(losses) < 1e-4


def test_optimizer_detects_divergence():
    f = random_field(9)
    opt = FieldOptimizer(f)
    cam = axis_camera()
    o, d = cam.rays()
    with pytest.raises(FloatingPointError):
        opt.color_step(o[:4], d[:4], cam.near, cam.far, np.full((4, 3), np.nan))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_relevance_in_unit_interval(seed):
    f = random_field(seed % 1000, (4, 4, 4))
    rng = np.random.default_rng(seed)
    o = rng.uniform(-2, 2, (20, 3))
    d = rng.normal(size=(20, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    out = render_rays(f, o, d, 0.0, 3.0, 16)
    assert np.all(out.relevance >= 0) and np.all(out.relevance <= out.alpha + 1e-12)
