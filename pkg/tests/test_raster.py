"""Renderer tests: projection, compositing, gradients, loss, optimization."""

import numpy as np
import pytest

from thermosplat.errors import ContractViolation
from thermosplat.geometry import PinholeIntrinsics, SE3Pose, quat_from_axis_angle
from thermosplat.proxy import ProxyDepthMap
from thermosplat.raster import (
    MappingConfig,
    WindowFrame,
    backward,
    combine_loss,
    loss,
    optimize_map,
    project_gaussians,
    render,
    render_brute,
    ssim,
    ssim_and_gradient,
)
from thermosplat.splat_map import DensifyConfig, GaussianMap
from thermosplat.synthetic import SceneParams, SyntheticScene, look_at

INTR = PinholeIntrinsics(100.0, 100.0, 32.0, 32.0, 64, 64)
IDENTITY = SE3Pose.identity()


def _build_map(mu, scales=0.05, logits=0.0, grays=0.5, rotations=None, seed=0):
    mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
    n = mu.shape[0]
    m = GaussianMap(seed=seed)
    log_s = np.log(np.broadcast_to(np.asarray(scales, dtype=np.float64), (n, 3))).copy()
    if rotations is None:
        rotations = np.zeros((n, 4))
        rotations[:, 0] = 1.0
    logits = np.broadcast_to(np.asarray(logits, dtype=np.float64), (n,)).copy()
    grays = np.broadcast_to(np.asarray(grays, dtype=np.float64), (n,)).copy()
    m._append(mu, log_s, np.asarray(rotations, dtype=np.float64), logits, grays,
              np.zeros(n, dtype=np.int64))
    return m


def _random_map(n, rng, z_range=(1.5, 6.0), spread=1.5):
    mu = np.stack(
        [
            rng.uniform(-spread, spread, n),
            rng.uniform(-spread, spread, n),
            rng.uniform(*z_range, n),
        ],
        axis=-1,
    )
    scales = np.exp(rng.uniform(np.log(0.02), np.log(0.3), (n, 3)))
    rots = rng.standard_normal((n, 4))
    m = _build_map(mu, rotations=rots)
    m.log_scales = np.log(scales)
    m.opacity_logits = rng.uniform(-2.0, 1.5, n)
    m.grays = rng.uniform(0.0, 1.0, n)
    return m


def _flat_proxy(full):
    prov = np.zeros((1, 1), dtype=np.uint8)
    return ProxyDepthMap(np.ones((1, 1)), prov, full, np.zeros_like(full, dtype=np.uint8))


# -- projection --------------------------------------------------------------


def test_on_axis_center_projects_to_principal_point():
    m = _build_map([0.0, 0.0, 2.0])
    proj = project_gaussians(m, IDENTITY, INTR)
    assert len(proj) == 1
    assert proj.mu2d[0] == pytest.approx([INTR.cx, INTR.cy], abs=1e-12)
    assert proj.z[0] == pytest.approx(2.0, abs=1e-15)


def test_isotropic_projection_matches_pinhole_scaling():
    # on-axis isotropic blob: projected covariance is (f * sigma / z)^2 I
    sigma, z = 0.2, 2.0
    m = _build_map([0.0, 0.0, z], scales=sigma)
    proj = project_gaussians(m, IDENTITY, INTR)
    expected = (INTR.fx * sigma / z) ** 2
    cov = proj.cov2[0]
    assert abs(cov[0, 0] - expected) <= 0.01 * expected  # dilation stays inside 1%
    assert abs(cov[1, 1] - expected) <= 0.01 * expected
    assert abs(cov[0, 1]) <= 1e-9 * expected


def test_gaussian_behind_camera_is_culled():
    m = _build_map([0.0, 0.0, -1.0])
    assert len(project_gaussians(m, IDENTITY, INTR)) == 0
    out = render(m, IDENTITY, INTR)
    assert not out.intensity.any() and not out.alpha.any()


def test_far_off_image_gaussian_is_culled():
    m = _build_map([100.0, 0.0, 2.0], scales=0.01)
    assert len(project_gaussians(m, IDENTITY, INTR)) == 0


def test_projection_is_depth_sorted_with_index_tie_break():
    mu = np.array([[0.1, 0.0, 3.0], [0.0, 0.1, 2.0], [-0.1, 0.0, 3.0]])
    m = _build_map(mu)
    proj = project_gaussians(m, IDENTITY, INTR)
    assert np.all(np.diff(proj.z) >= 0)
    assert list(proj.idx) == [1, 0, 2]  # equal depths keep storage order


# -- forward rendering -------------------------------------------------------


def test_center_pixel_blends_opacity_times_color():
    m = _build_map([0.0, 0.0, 2.0], scales=0.05, logits=0.0, grays=0.8)
    out = render(m, IDENTITY, INTR)
    v, u = int(INTR.cy), int(INTR.cx)
    assert out.intensity[v, u] == pytest.approx(0.5 * 0.8, abs=1e-12)
    assert out.depth[v, u] == pytest.approx(0.5 * 2.0, abs=1e-12)
    assert out.alpha[v, u] == pytest.approx(0.5, abs=1e-12)


def test_high_opacity_contribution_caps():
    m = _build_map([0.0, 0.0, 2.0], scales=0.05, logits=12.0, grays=0.8)
    out = render(m, IDENTITY, INTR)
    v, u = int(INTR.cy), int(INTR.cx)
    assert out.intensity[v, u] == pytest.approx(0.99 * 0.8, abs=1e-12)
    assert out.depth[v, u] == pytest.approx(0.99 * 2.0, abs=1e-12)


def test_two_layer_blend_composits_front_to_back():
    mu = np.array([[0.0, 0.0, 2.0], [0.0, 0.0, 4.0]])
    m = _build_map(mu, scales=[[0.05, 0.05, 0.05], [0.1, 0.1, 0.1]],
                   grays=[0.8, 0.2], logits=0.0)
    out = render(m, IDENTITY, INTR)
    v, u = int(INTR.cy), int(INTR.cx)
    assert out.intensity[v, u] == pytest.approx(0.5 * 0.8 + 0.5 * 0.5 * 0.2, abs=1e-12)
    assert out.depth[v, u] == pytest.approx(0.5 * 2.0 + 0.25 * 4.0, abs=1e-12)
    assert out.alpha[v, u] == pytest.approx(0.75, abs=1e-12)


def test_empty_map_renders_zero():
    m = GaussianMap()
    for out in (render(m, IDENTITY, INTR), render_brute(m, IDENTITY, INTR)):
        assert not out.intensity.any()
        assert not out.depth.any()
        assert not out.alpha.any()


def test_tiled_matches_brute_force():
    rng = np.random.default_rng(11)
    m = _random_map(64, rng)
    intr = PinholeIntrinsics(90.0, 90.0, 47.5, 39.5, 96, 80)
    pose = SE3Pose(quat_from_axis_angle([0.0, 0.03, 0.01]), [0.1, -0.05, -0.2])
    tiled = render(m, pose, intr)
    brute = render_brute(m, pose, intr)
    assert np.abs(tiled.intensity - brute.intensity).max() <= 1e-6
    assert np.abs(tiled.depth - brute.depth).max() <= 1e-6
    assert np.abs(tiled.alpha - brute.alpha).max() <= 1e-6


def test_alpha_stays_in_unit_range():
    rng = np.random.default_rng(4)
    m = _random_map(80, rng)
    m.opacity_logits = rng.uniform(1.0, 9.0, len(m))  # push toward saturation
    out = render(m, IDENTITY, INTR)
    assert out.alpha.min() >= 0.0
    assert out.alpha.max() <= 1.0 + 1e-12


def test_storage_order_does_not_change_the_image():
    rng = np.random.default_rng(7)
    m = _random_map(32, rng)
    ref = render(m, IDENTITY, INTR)
    perm = rng.permutation(len(m))
    m._take(perm)
    out = render(m, IDENTITY, INTR)
    assert np.abs(out.intensity - ref.intensity).max() <= 1e-12
    assert np.abs(out.depth - ref.depth).max() <= 1e-12


def test_rendering_is_deterministic():
    rng = np.random.default_rng(8)
    m = _random_map(16, rng)
    m.mu[:, 2] = 3.0  # equal depths force the index tie-break everywhere
    a = render(m, IDENTITY, INTR)
    b = render(m, IDENTITY, INTR)
    assert np.array_equal(a.intensity, b.intensity)
    assert np.array_equal(a.depth, b.depth)


# -- backward ----------------------------------------------------------------


def _fd_objective(gmap, pose, intr, di, dd, da):
    out = render(gmap, pose, intr)
    val = float((out.intensity * di).sum() + (out.depth * dd).sum())
    if da is not None:
        val += float((out.alpha * da).sum())
    return val


def _fd_check(gmap, pose, intr, di, dd, da, h=1e-4, tol=1e-3):
    out = render(gmap, pose, intr)
    bundle = backward(gmap, out.tape, di, dd, da)
    groups = {
        "mu": bundle.d_mu,
        "log_scales": bundle.d_log_scales,
        "rotations": bundle.d_rotations,
        "opacity_logits": bundle.d_opacity_logits,
        "grays": bundle.d_grays,
    }
    worst = 0.0
    for name, analytic in groups.items():
        param = getattr(gmap, name)
        flat = param.reshape(-1)
        grad = np.asarray(analytic, dtype=np.float64).reshape(-1)
        for k in range(flat.size):
            keep = flat[k]
            flat[k] = keep + h
            hi_val = _fd_objective(gmap, pose, intr, di, dd, da)
            flat[k] = keep - h
            lo_val = _fd_objective(gmap, pose, intr, di, dd, da)
            flat[k] = keep
            fd = (hi_val - lo_val) / (2.0 * h)
            err = abs(grad[k] - fd) / max(abs(fd), abs(grad[k]), 1e-3)
            worst = max(worst, err)
    assert worst < tol, worst


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(21)
    intr = PinholeIntrinsics(40.0, 40.0, 15.5, 15.5, 32, 32)
    m = _random_map(8, rng, z_range=(2.0, 5.0), spread=0.8)
    di = rng.standard_normal((32, 32))
    dd = 0.2 * rng.standard_normal((32, 32))
    _fd_check(m, IDENTITY, intr, di, dd, None)


def test_backward_alpha_channel_matches_finite_differences():
    rng = np.random.default_rng(22)
    intr = PinholeIntrinsics(40.0, 40.0, 15.5, 15.5, 32, 32)
    m = _random_map(6, rng, z_range=(2.0, 5.0), spread=0.8)
    da = rng.standard_normal((32, 32))
    zeros = np.zeros((32, 32))
    _fd_check(m, IDENTITY, intr, zeros, zeros, da)


def test_fully_occluded_gaussian_gets_zero_gradient():
    intr = PinholeIntrinsics(40.0, 40.0, 15.5, 15.5, 32, 32)
    mu = np.array([[0.0, 0.0, 1.0 + 0.1 * k] for k in range(5)] + [[0.0, 0.0, 3.0]])
    m = _build_map(mu, scales=3.0, logits=12.0, grays=0.5)
    out = render(m, IDENTITY, intr)
    assert out.alpha.min() > 1.0 - 1e-4  # the wall really is opaque
    bundle = backward(m, out.tape, np.ones((32, 32)), np.ones((32, 32)))
    assert not bundle.touched[5]
    assert not bundle.d_mu[5].any()
    assert not bundle.d_log_scales[5].any()
    assert not bundle.d_rotations[5].any()
    assert bundle.d_opacity_logits[5] == 0.0
    assert bundle.d_grays[5] == 0.0
    assert not bundle.absgs[5].any()
    # three 0.99-capped layers push transmittance under the stop already
    assert bundle.touched[:3].all()
    assert not bundle.touched[3:].any()


def test_absolute_gradient_dominates_signed():
    rng = np.random.default_rng(31)
    m = _random_map(16, rng)
    out = render(m, IDENTITY, INTR)
    di = rng.standard_normal(out.intensity.shape)
    dd = rng.standard_normal(out.intensity.shape)
    bundle = backward(m, out.tape, di, dd)
    assert np.all(bundle.absgs + 1e-12 >= np.abs(bundle.d_mu2d))


def test_absolute_gradient_equals_signed_for_single_pixel():
    m = _build_map([0.0, 0.0, 2.0], scales=0.2)
    out = render(m, IDENTITY, INTR)
    di = np.zeros_like(out.intensity)
    di[30, 35] = 1.0  # one supervised pixel: one contribution, no cancellation
    bundle = backward(m, out.tape, di, np.zeros_like(di))
    assert bundle.absgs[0] == pytest.approx(np.abs(bundle.d_mu2d[0]), abs=1e-15)
    assert np.abs(bundle.d_mu2d[0]).max() > 0


def test_render_tape_goes_stale():
    m = _build_map([0.0, 0.0, 2.0])
    out = render(m, IDENTITY, INTR)
    m.revision += 1  # any optimizer step or layout change does this
    with pytest.raises(ContractViolation):
        backward(m, out.tape, np.zeros((64, 64)), np.zeros((64, 64)))


def test_backward_rejects_wrong_shapes():
    m = _build_map([0.0, 0.0, 2.0])
    out = render(m, IDENTITY, INTR)
    with pytest.raises(ContractViolation):
        backward(m, out.tape, np.zeros((32, 32)), np.zeros((32, 32)))
    with pytest.raises(ContractViolation):
        backward(m, None, np.zeros((64, 64)), np.zeros((64, 64)))


# -- ssim and loss -----------------------------------------------------------


def test_ssim_identical_images_is_one():
    rng = np.random.default_rng(2)
    img = rng.uniform(0.0, 1.0, (24, 20))
    assert ssim(img, img) == pytest.approx(1.0, abs=1e-12)


def test_ssim_penalizes_noise():
    rng = np.random.default_rng(3)
    img = rng.uniform(0.2, 0.8, (32, 32))
    noisy = np.clip(img + 0.1 * rng.standard_normal(img.shape), 0.0, 1.0)
    val = ssim(img, noisy)
    assert 0.0 < val < 0.999


def test_ssim_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    img = rng.uniform(0.0, 1.0, (16, 16))
    ref = rng.uniform(0.0, 1.0, (16, 16))
    _, grad = ssim_and_gradient(img, ref)
    h = 1e-6
    for v, u in [(0, 0), (3, 12), (8, 8), (15, 2), (11, 15), (5, 7)]:
        bump = img.copy()
        bump[v, u] += h
        hi_val = ssim(bump, ref)
        bump[v, u] -= 2 * h
        lo_val = ssim(bump, ref)
        fd = (hi_val - lo_val) / (2 * h)
        assert grad[v, u] == pytest.approx(fd, abs=1e-6, rel=1e-4)


def test_loss_zero_for_perfect_render():
    m = _build_map([0.0, 0.0, 2.0], scales=0.3, logits=2.0)
    out = render(m, IDENTITY, INTR)
    value, d_i, d_d = loss(out, out.intensity.copy(), _flat_proxy(out.depth.copy()))
    assert value == 0.0
    assert np.abs(d_i).max() < 1e-12
    assert not d_d.any()


def test_loss_weight_arithmetic():
    assert combine_loss(0.1, 0.2, 0.05) == pytest.approx(0.13, abs=1e-12)


def test_zero_depth_weight_ignores_depth():
    rng = np.random.default_rng(6)
    m = _random_map(12, rng)
    out = render(m, IDENTITY, INTR)
    target = rng.uniform(0.0, 1.0, out.intensity.shape)
    v1, _, g1 = loss(out, target, _flat_proxy(np.full(out.depth.shape, 0.5)), beta=0.0)
    v2, _, g2 = loss(out, target, _flat_proxy(np.full(out.depth.shape, 7.0)), beta=0.0)
    assert v1 == v2
    assert not g1.any() and not g2.any()


def test_depth_term_only_reads_covered_pixels():
    m = _build_map([0.0, 0.0, 2.0], scales=0.1, logits=8.0)
    out = render(m, IDENTITY, INTR)
    covered = out.alpha > 0.5
    assert covered.any() and not covered.all()
    proxy_full = np.where(covered, out.depth, 1234.5)  # junk outside the mask
    value, _, d_d = loss(out, out.intensity.copy(), _flat_proxy(proxy_full))
    assert value == 0.0
    assert not d_d[~covered].any()


# -- optimization ------------------------------------------------------------


def _psnr(a, b):
    mse = float(np.mean((a - b) ** 2))
    return 10.0 * np.log10(1.0 / mse) if mse > 0 else np.inf


@pytest.fixture(scope="module")
def optimized_single_view():
    # textured wall viewed head-on: a clean single-surface fitting problem
    scene = SyntheticScene(SceneParams(n_frames=4, width=48, height=48, n_spheres=0, seed=5))
    intr = scene.intrinsics
    pose = look_at(np.array([2.5, 0.0, 0.0]), np.array([4.0, 0.0, 0.0]))
    image, zdepth = scene.cast(pose, intr)
    inv = 1.0 / zdepth
    proxy = ProxyDepthMap(
        inv[::8, ::8].copy(),
        np.zeros(inv[::8, ::8].shape, dtype=np.uint8),
        inv,
        np.zeros(inv.shape, dtype=np.uint8),
    )
    gmap = GaussianMap(seed=1)
    gmap.spawn_from_keyframe(pose, image, proxy, intr, kf_id=0, stride=2)
    cfg = MappingConfig(densify_enabled=False)
    window = [WindowFrame(0, pose, image, proxy)]
    losses = optimize_map(gmap, window, intr, 500, cfg)
    return gmap, intr, pose, image, losses


def test_optimize_zero_iterations_is_identity():
    rng = np.random.default_rng(9)
    m = _random_map(8, rng)
    before = {k: getattr(m, k).copy() for k in ("mu", "log_scales", "grays")}
    proxy = _flat_proxy(np.full((64, 64), 0.5))
    window = [WindowFrame(0, IDENTITY, np.zeros((64, 64)), proxy)]
    losses = optimize_map(m, window, INTR, 0)
    assert losses == []
    for k, arr in before.items():
        assert np.array_equal(arr, getattr(m, k))


def test_single_view_optimization_reaches_high_psnr(optimized_single_view):
    gmap, intr, pose, image, _ = optimized_single_view
    out = render(gmap, pose, intr)
    assert _psnr(out.intensity, image) > 30.0


def test_loss_moving_average_non_increasing(optimized_single_view):
    _, _, _, _, losses = optimized_single_view
    ma = np.convolve(np.asarray(losses), np.ones(50) / 50.0, mode="valid")
    assert np.all(np.diff(ma) <= 1e-9)


def test_densify_keeps_optimizer_state_consistent():
    rng = np.random.default_rng(13)
    m = _random_map(12, rng)
    n0 = len(m)
    target = rng.uniform(0.0, 1.0, (64, 64))
    proxy = _flat_proxy(np.full((64, 64), 0.4))
    cfg = MappingConfig(
        densify=DensifyConfig(grad_threshold=1e-12, interval=25, observation_grace=10**6)
    )
    window = [WindowFrame(0, IDENTITY, target, proxy)]
    losses = optimize_map(m, window, INTR, 60, cfg)
    assert len(losses) == 60
    assert np.isfinite(losses).all()
    assert len(m) != n0  # the schedule actually restructured the map


def test_round_robin_records_distinct_observations():
    m = _build_map([[0.0, 0.0, 2.0], [0.3, 0.2, 3.0]], scales=0.2, logits=1.0)
    proxy = _flat_proxy(np.full((64, 64), 0.5))
    image = np.full((64, 64), 0.6)
    window = [WindowFrame(k, IDENTITY, image, proxy) for k in range(3)]
    cfg = MappingConfig(densify_enabled=False)
    optimize_map(m, window, INTR, 6, cfg)
    assert m.observation_count.max() == 3
