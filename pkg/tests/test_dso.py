import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.ndimage import map_coordinates

from thermosplat import dba
from thermosplat.dso import (
    PIXEL_HIGH,
    PIXEL_INVALID,
    PIXEL_LOW,
    affine_init,
    alternate_dba_dso,
    classify_pixels,
    dso_step,
    evaluate_dso_objective,
    fit_keyframe_affine,
    run_dso,
    _assemble_keyframe_system,
)
from thermosplat.errors import DegenerateConfigurationError
from thermosplat.geometry import (
    INV_DEPTH_MAX,
    INV_DEPTH_MIN,
    InverseDepthMap,
    PinholeIntrinsics,
    SE3Pose,
    pixel_grid,
    quat_from_axis_angle,
)
from thermosplat.graph import CovisibilityGraph, Edge, Keyframe
from thermosplat.oracles import MonoDepthMap, SyntheticDepthOracle, SyntheticFlowOracle
from thermosplat.synthetic import SceneParams, SyntheticScene

# a sphere-free room: depth is continuous and nothing self-occludes, so
# exact depths really are multi-view consistent at every pixel
PARAMS = SceneParams(n_frames=40, width=160, height=128, radius=2.0, seed=9, n_spheres=0)


@pytest.fixture(scope="module")
def scene():
    return SyntheticScene(PARAMS)


def _gt_graph(scene, frames, theta_true=1.0, gamma_true=0.0, sigma=0.0):
    """Graph whose keyframes sit exactly at ground truth with exact depths."""
    intr = scene.intrinsics.scaled(1.0 / 8.0)
    flow = SyntheticFlowOracle(scene, intr, sigma=sigma)
    depth = SyntheticDepthOracle(scene, intr, theta_true=theta_true, gamma_true=gamma_true)
    graph = CovisibilityGraph(intr, flow, depth)
    for kf_id, k in enumerate(frames):
        inv = np.clip(1.0 / scene.depth(k, intr), INV_DEPTH_MIN, INV_DEPTH_MAX)
        graph.keyframes.append(
            Keyframe(
                kf_id,
                k,
                scene.timestamp(k),
                scene.pose(k),
                InverseDepthMap(inv),
                scene.render(k),
                depth.predict_depth(k),
            )
        )
        graph.build_keyframe_edges(kf_id)
    return graph


def _set_affine(graph, theta=1.0, gamma=0.0):
    for kf in graph.keyframes:
        kf.affine = (theta, gamma)


# -- classification --------------------------------------------------------


def _plane_graph(plane_z=4.0):
    """Two views of the plane z = plane_z, depths exact.

    Inverse depth of a plane is linear in pixel coordinates, so the bilinear
    neighbor samples are exact and the world-point spread is genuinely zero.
    Classification never reads flow predictions, so the edges carry dummies.
    """
    intr = PinholeIntrinsics(fx=20.0, fy=20.0, cx=9.5, cy=7.5, width=20, height=16)
    poses = [
        SE3Pose.identity(),
        SE3Pose(quat_from_axis_angle([0.0, 0.05, 0.0]), [0.2, 0.1, -0.1]),
    ]
    graph = CovisibilityGraph(intr, None, None)
    grid = pixel_grid(intr.height, intr.width)
    rays = np.stack(
        [
            (grid[..., 0] - intr.cx) / intr.fx,
            (grid[..., 1] - intr.cy) / intr.fy,
            np.ones((intr.height, intr.width)),
        ],
        axis=-1,
    )
    for kf_id, pose in enumerate(poses):
        dirs = rays @ pose.rotation_matrix().T
        depth = (plane_z - pose.t[2]) / dirs[..., 2]
        graph.keyframes.append(
            Keyframe(
                kf_id,
                kf_id,
                float(kf_id),
                pose,
                InverseDepthMap(1.0 / depth),
                None,
                MonoDepthMap(values=depth.copy(), source_id=kf_id),
            )
        )
    zeros = np.zeros((intr.height, intr.width, 2))
    graph.edges = [Edge(0, 1, zeros, zeros), Edge(1, 0, zeros, zeros)]
    return graph


def test_consistent_depths_classify_all_low():
    graph = _plane_graph()
    for kf in graph.keyframes:
        mask = classify_pixels(graph, kf.id)
        assert not mask.high.any()
        assert np.array_equal(mask.low, mask.observed)
        assert mask.low.sum() > 0.6 * mask.labels.size


def test_doubled_inverse_depth_pixel_classified_high(scene):
    graph = _gt_graph(scene, [0, 1, 2])
    kf = graph.keyframes[1]
    intr = graph.intr
    base = classify_pixels(graph, 1)
    vv, uu = 8, 10
    assert base.labels[vv, uu] == PIXEL_LOW
    kf.inv_depth.values[vv, uu] *= 2.0

    # independent spread computation for that pixel: its own (now halved)
    # world point against each neighbor's surface point at the landing pixel
    d = kf.inv_depth.values[vv, uu]
    ray = np.array([(uu - intr.cx) / intr.fx, (vv - intr.cy) / intr.fy, 1.0])
    own = kf.pose.apply(ray / d)
    points = [own]
    for other in (graph.keyframes[0], graph.keyframes[2]):
        x = other.pose.inverse().apply(own)
        u = intr.fx * x[0] / x[2] + intr.cx
        v = intr.fy * x[1] / x[2] + intr.cy
        if not (1 <= u <= intr.width - 2 and 1 <= v <= intr.height - 2 and x[2] > 0):
            continue
        d_samp = map_coordinates(
            other.inv_depth.values, [[v], [u]], order=1, mode="nearest"
        )[0]
        ray_o = np.array([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0])
        points.append(other.pose.apply(ray_o / d_samp))
    assert len(points) >= 2
    spread = max(
        np.linalg.norm(points[a] - points[b])
        for a in range(len(points))
        for b in range(a + 1, len(points))
    )
    valid = kf.inv_depth.valid
    threshold = 0.05 * float((1.0 / kf.inv_depth.values[valid]).mean())
    assert spread > threshold

    mask = classify_pixels(graph, 1)
    assert mask.labels[vv, uu] == PIXEL_HIGH


def test_eta_extremes_fix_the_split(scene):
    graph = _gt_graph(scene, [0, 1])
    all_low = classify_pixels(graph, 0, eta=np.inf)
    all_high = classify_pixels(graph, 0, eta=0.0)
    assert not all_low.high.any()
    assert not all_high.low.any()
    assert np.array_equal(all_low.invalid, all_high.invalid)
    assert np.array_equal(all_low.observed, all_high.high)


def test_pixels_landing_near_border_give_no_observation(scene):
    graph = _gt_graph(scene, [0, 3])  # wide baseline: plenty of non-overlap
    intr = graph.intr
    kf, other = graph.keyframes
    d = kf.inv_depth.values
    h, w = d.shape
    u_idx, v_idx = np.meshgrid(np.arange(w), np.arange(h))
    ray = np.stack(
        [(u_idx - intr.cx) / intr.fx, (v_idx - intr.cy) / intr.fy, np.ones_like(d)], axis=-1
    )
    x = other.pose.inverse().apply(kf.pose.apply(ray / d[..., None]))
    z = x[..., 2]
    zs = np.where(z > 1e-8, z, 1.0)
    u = intr.fx * x[..., 0] / zs + intr.cx
    v = intr.fy * x[..., 1] / zs + intr.cy
    seen = (z > 1e-8) & (u >= 1) & (u <= intr.width - 2) & (v >= 1) & (v <= intr.height - 2)
    assert (~seen).sum() > 0  # the fixture actually exercises the border rule
    mask = classify_pixels(graph, 0)
    assert np.array_equal(mask.invalid, ~seen)


def test_keyframe_without_neighbors_is_all_invalid(scene):
    graph = _gt_graph(scene, [0])
    mask = classify_pixels(graph, 0)
    assert mask.invalid.all()


# -- affine alignment -------------------------------------------------------


def test_affine_init_recovers_exact_map():
    rng = np.random.default_rng(3)
    depth = rng.uniform(1.0, 5.0, size=300)
    d = 2.3 / depth + 0.04
    fit = affine_init(d, depth)
    assert abs(fit.theta - 2.3) < 1e-10
    assert abs(fit.gamma - 0.04) < 1e-10
    assert not fit.degenerate


def test_affine_init_is_least_squares_optimal():
    # frozen oracle: no candidate from a broad random search beats the
    # closed-form solution's squared error
    rng = np.random.default_rng(11)
    depth = rng.uniform(0.5, 6.0, size=200)
    d = 1.7 / depth + 0.02 + rng.normal(0.0, 0.05, size=200)
    fit = affine_init(d, depth)

    def sq_err(theta, gamma):
        return float(((d - (theta / depth + gamma)) ** 2).sum())

    best = sq_err(fit.theta, fit.gamma)
    for theta, gamma in rng.uniform([-1.0, -1.0], [4.0, 1.0], size=(1000, 2)):
        assert best <= sq_err(theta, gamma) + 1e-12


def test_affine_init_constant_prior_is_degenerate():
    d = np.array([0.4, 0.5, 0.6])
    depth = np.full(3, 2.0)
    fit = affine_init(d, depth)
    assert fit.degenerate
    assert fit.theta == 1.0
    assert abs(fit.gamma - (d.mean() - 0.5)) < 1e-12


def test_affine_init_clamps_nonpositive_slope():
    depth = np.array([1.0, 2.0, 4.0])
    x = 1.0 / depth
    d = -0.3 * x + 0.9  # anti-correlated: unconstrained fit has theta < 0
    fit = affine_init(d, depth)
    assert fit.degenerate
    assert fit.theta == 1e-6
    assert abs(fit.gamma - (d - fit.theta * x).mean()) < 1e-12


def test_affine_init_requires_two_samples():
    with pytest.raises(DegenerateConfigurationError):
        affine_init(np.array([0.5]), np.array([2.0]))


@given(st.floats(0.05, 20.0), st.integers(0, 2**32 - 1))
@settings(deadline=None, max_examples=50)
def test_affine_init_scale_consistency(k, seed):
    rng = np.random.default_rng(seed)
    depth = rng.uniform(0.5, 5.0, size=64)
    d = rng.uniform(0.2, 2.0) / depth + rng.uniform(-0.1, 0.5) + rng.normal(0, 0.02, 64)
    base = affine_init(d, depth)
    scaled = affine_init(k * d, depth)
    if not (base.degenerate or scaled.degenerate):
        tol = 1e-9 * max(k, 1.0)
        assert abs(scaled.theta - k * base.theta) < tol * max(abs(base.theta), 1.0)
        assert abs(scaled.gamma - k * base.gamma) < tol * max(abs(base.gamma), 1.0)


def test_fit_keyframe_affine_widens_when_low_set_too_small(scene):
    graph = _gt_graph(scene, [0, 1], theta_true=1.4, gamma_true=0.1)
    kf = graph.keyframes[0]
    mask = classify_pixels(graph, 0, eta=0.0)  # everything observed is high
    assert mask.low.sum() < 2
    fit = fit_keyframe_affine(kf, mask)
    assert fit.degenerate  # fallback fits are flagged for a later re-fit
    assert abs(fit.theta - 1.4) < 1e-9
    assert abs(fit.gamma - 0.1) < 1e-9


# -- refinement step ---------------------------------------------------------


def test_dso_step_requires_affine_init(scene):
    graph = _gt_graph(scene, [0, 1])
    masks = {0: classify_pixels(graph, 0), 1: classify_pixels(graph, 1)}
    with pytest.raises(DegenerateConfigurationError):
        dso_step(graph, masks, {0: 1e-4, 1: 1e-4})


def test_exact_prior_and_exact_depths_give_zero_update(scene):
    graph = _gt_graph(scene, [0, 1, 2])
    _set_affine(graph)  # theta_true=1, gamma_true=0: the prior equals GT
    masks = {kf.id: classify_pixels(graph, kf.id) for kf in graph.keyframes}
    # force some depths into the free set; their residuals are still zero
    for mask in masks.values():
        mask.labels[::2, ::3] = np.where(
            mask.labels[::2, ::3] == PIXEL_LOW, PIXEL_HIGH, mask.labels[::2, ::3]
        )
    before = {kf.id: kf.inv_depth.values.copy() for kf in graph.keyframes}
    lams = {kf.id: 1e-4 for kf in graph.keyframes}
    accepted = dso_step(graph, masks, lams)
    assert accepted == len(graph.keyframes)
    for kf in graph.keyframes:
        assert np.abs(kf.inv_depth.values - before[kf.id]).max() < 1e-12
        assert abs(kf.affine[0] - 1.0) < 1e-12
        assert abs(kf.affine[1]) < 1e-12


def test_zero_flow_weight_pixel_converges_to_prior_value(scene):
    graph = _gt_graph(scene, [0, 1, 2])
    _set_affine(graph)
    kf = graph.keyframes[1]
    vv, uu = 8, 10
    true_inv = kf.inv_depth.values[vv, uu]
    kf.inv_depth.values[vv, uu] *= 1.5
    for edge in graph.edges:
        if edge.i == 1:
            edge.weight[vv, uu, :] = 0.0  # no flow information for this pixel
    masks = {k.id: classify_pixels(graph, k.id) for k in graph.keyframes}
    assert masks[1].labels[vv, uu] == PIXEL_HIGH
    run_dso(graph, masks, max_steps=8)
    # with the flow silenced, the prior term alone owns this pixel
    assert abs(kf.inv_depth.values[vv, uu] - true_inv) < 1e-6


def test_dso_objective_nonincreasing_under_steps(scene):
    graph = _gt_graph(scene, [0, 1, 2], theta_true=1.3, gamma_true=0.05)
    rng = np.random.default_rng(5)
    for kf in graph.keyframes:
        kf.inv_depth.values *= 1.0 + rng.normal(0.0, 0.02, kf.inv_depth.values.shape)
        np.clip(kf.inv_depth.values, INV_DEPTH_MIN, INV_DEPTH_MAX, out=kf.inv_depth.values)
    masks = {kf.id: classify_pixels(graph, kf.id) for kf in graph.keyframes}
    for kf in graph.keyframes:
        fit = fit_keyframe_affine(kf, masks[kf.id])
        kf.affine = (fit.theta, fit.gamma)
    lams = {kf.id: 1e-4 for kf in graph.keyframes}
    objectives = [evaluate_dso_objective(graph, masks)]
    for _ in range(6):
        dso_step(graph, masks, lams)
        objectives.append(evaluate_dso_objective(graph, masks))
    diffs = np.diff(objectives)
    assert (diffs <= 1e-12 + 1e-12 * np.abs(objectives[:-1])).all()
    assert objectives[-1] < objectives[0]


def test_assembled_gradient_matches_finite_differences(scene):
    graph = _gt_graph(scene, [0, 1, 2], theta_true=1.7, gamma_true=0.03)
    rng = np.random.default_rng(7)
    for kf in graph.keyframes:
        kf.inv_depth.values *= 1.0 + rng.normal(0.0, 0.01, kf.inv_depth.values.shape)
        np.clip(kf.inv_depth.values, INV_DEPTH_MIN, INV_DEPTH_MAX, out=kf.inv_depth.values)
    _set_affine(graph, 1.5, 0.1)
    masks = {kf.id: classify_pixels(graph, kf.id) for kf in graph.keyframes}
    kf = graph.keyframes[1]
    problem = graph.ba_problem()
    _, g_d, _, g_a, _ = _assemble_keyframe_system(problem, kf, masks[1], 0.01, 0.1)

    def objective():
        return evaluate_dso_objective(graph, masks)

    h = 1e-6
    worst = 0.0
    picks = [(r, c) for r in (2, 8, 13) for c in (3, 9, 15)]
    for r, c in picks:
        saved = kf.inv_depth.values[r, c]
        kf.inv_depth.values[r, c] = saved + h
        hi = objective()
        kf.inv_depth.values[r, c] = saved - h
        lo = objective()
        kf.inv_depth.values[r, c] = saved
        fd = (hi - lo) / (2 * h)
        ana = -2.0 * g_d[r, c]
        worst = max(worst, abs(fd - ana) / max(abs(fd), 1.0))
    theta, gamma = kf.affine
    for slot, ana in ((0, -2.0 * g_a[0]), (1, -2.0 * g_a[1])):
        for sign in (1.0, -1.0):
            kf.affine = (theta + sign * h, gamma) if slot == 0 else (theta, gamma + sign * h)
            val = objective()
            if sign > 0:
                hi = val
            else:
                lo = val
        kf.affine = (theta, gamma)
        fd = (hi - lo) / (2 * h)
        worst = max(worst, abs(fd - ana) / max(abs(fd), 1.0))
    assert worst < 1e-6


# -- alternation -------------------------------------------------------------


def test_alternation_rejects_zero_rounds(scene):
    graph = _gt_graph(scene, [0, 1])
    with pytest.raises(DegenerateConfigurationError):
        alternate_dba_dso(graph, rounds=0)


def test_alternation_recovers_prior_alignment(scene):
    graph = _gt_graph(scene, [0, 1, 2], theta_true=2.0, gamma_true=0.05)
    trace = alternate_dba_dso(graph, rounds=1)
    assert len(trace) == 1
    for kf in graph.keyframes:
        assert abs(kf.affine[0] - 2.0) < 1e-6
        assert abs(kf.affine[1] - 0.05) < 1e-6


def test_round_two_classification_is_a_fixed_point(scene):
    graph = _gt_graph(scene, [0, 1, 2], theta_true=1.2, gamma_true=0.02)
    rng = np.random.default_rng(13)
    for kf in graph.keyframes:
        kf.inv_depth.values *= 1.0 + rng.normal(0.0, 0.005, kf.inv_depth.values.shape)
        np.clip(kf.inv_depth.values, INV_DEPTH_MIN, INV_DEPTH_MAX, out=kf.inv_depth.values)
    alternate_dba_dso(graph, rounds=1)
    labels_a = [classify_pixels(graph, kf.id).labels.copy() for kf in graph.keyframes]
    alternate_dba_dso(graph, rounds=1)
    labels_b = [classify_pixels(graph, kf.id).labels.copy() for kf in graph.keyframes]
    for a, b in zip(labels_a, labels_b):
        assert np.array_equal(a, b)


def test_prior_keeps_depths_closer_to_truth_under_flow_noise(scene):
    # paired run on identical noisy-flow graphs: anchoring to the mono prior
    # must not hurt depth accuracy (and in practice helps)
    def run(alpha_high, alpha_low):
        graph = _gt_graph(scene, [0, 1, 2, 3], sigma=0.5)
        gt = {
            kf.id: np.clip(
                1.0 / scene.depth(kf.frame_id, graph.intr), INV_DEPTH_MIN, INV_DEPTH_MAX
            )
            for kf in graph.keyframes
        }
        alternate_dba_dso(graph, rounds=3, alpha_high=alpha_high, alpha_low=alpha_low)
        err = np.concatenate(
            [(kf.inv_depth.values - gt[kf.id]).ravel() for kf in graph.keyframes]
        )
        return float(np.sqrt((err**2).mean()))

    rmse_prior = run(0.01, 0.1)
    rmse_free = run(0.0, 0.0)
    assert rmse_prior <= rmse_free + 1e-12


def test_alternation_trace_structure(scene):
    graph = _gt_graph(scene, [0, 1, 2])
    trace = alternate_dba_dso(graph, rounds=3)
    assert len(trace) == 3
    flat = np.array(trace, dtype=float)
    assert np.isfinite(flat).all()
    assert (flat >= 0).all()
