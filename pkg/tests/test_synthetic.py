import filecmp
import os

import numpy as np
import pytest

from thermosplat import dataio
from thermosplat.synthetic import SceneParams, SyntheticScene, generate_synthetic, look_at

SMALL = SceneParams(n_frames=8, width=64, height=48, radius=2.0, seed=5)


def test_every_frame_sees_surfaces_with_finite_depth():
    scene = SyntheticScene(SMALL)
    for k in range(SMALL.n_frames):
        intensity, depth = scene.render(k)
        assert np.isfinite(depth).all()
        assert (depth > 0).all()
        assert intensity.min() >= 0.0 and intensity.max() <= 1.0


def test_depth_matches_independent_ray_intersection():
    # pick 100 random pixels and redo the intersection math from scratch
    scene = SyntheticScene(SMALL)
    intr = scene.intrinsics
    rng = np.random.default_rng(0)
    for _ in range(100):
        k = int(rng.integers(0, SMALL.n_frames))
        r = int(rng.integers(0, intr.height))
        c = int(rng.integers(0, intr.width))
        depth = scene.depth(k)[r, c]

        pose = scene.pose(k)
        d_cam = np.array([(c - intr.cx) / intr.fx, (r - intr.cy) / intr.fy, 1.0])
        d_w = pose.rotation_matrix() @ d_cam
        o = pose.t

        best = np.inf
        hx, hy, hz = SMALL.room
        for axis, value, b0, b1 in [
            (0, -hx, (-hy, -hz), (hy, hz)),
            (0, hx, (-hy, -hz), (hy, hz)),
            (1, -hy, (-hx, -hz), (hx, hz)),
            (1, hy, (-hx, -hz), (hx, hz)),
            (2, -hz, (-hx, -hy), (hx, hy)),
            (2, hz, (-hx, -hy), (hx, hy)),
        ]:
            if abs(d_w[axis]) < 1e-12:
                continue
            t = (value - o[axis]) / d_w[axis]
            if t <= 1e-6:
                continue
            others = [a for a in range(3) if a != axis]
            p = o + t * d_w
            if b0[0] <= p[others[0]] <= b1[0] and b0[1] <= p[others[1]] <= b1[1]:
                best = min(best, t)
        for surf in scene.surfaces[6:]:
            oc = o - surf.center
            a = d_w @ d_w
            b = 2 * (d_w @ oc)
            cq = oc @ oc - surf.radius**2
            disc = b * b - 4 * a * cq
            if disc < 0:
                continue
            for t in ((-b - np.sqrt(disc)) / (2 * a), (-b + np.sqrt(disc)) / (2 * a)):
                if t > 1e-6:
                    best = min(best, t)
                    break
        assert depth == pytest.approx(best, rel=1e-9)


def test_orbit_closes_loop():
    params = SceneParams(trajectory="orbit", n_frames=60, radius=2.0)
    scene = SyntheticScene(params)
    first = scene.pose(0).t
    last = scene.pose(params.n_frames - 1).t
    assert np.linalg.norm(first - last) < 0.01 * params.radius


def test_look_at_points_camera_forward():
    pose = look_at(np.array([2.0, 0.0, 0.0]), np.array([0.0, 0.0, 0.0]))
    R = pose.rotation_matrix()
    assert np.allclose(R @ np.array([0, 0, 1.0]), [-1, 0, 0], atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0)


def test_generate_is_deterministic(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    generate_synthetic(a, SMALL)
    generate_synthetic(b, SMALL)
    for rel in ["calib.txt", "frames.txt", "groundtruth.txt", "scene.json",
                "images/frame_000000.png", "images/frame_000003.png",
                "depth/depth_000000.pfm"]:
        assert filecmp.cmp(a / rel, b / rel, shallow=False), rel


def test_generated_sequence_loads_and_is_14_bit(tmp_path):
    seq = generate_synthetic(tmp_path / "seq", SMALL)
    assert len(seq) == SMALL.n_frames
    raw = seq.load_raw(0)
    assert raw.max() < 2**14
    assert raw.max() > 2**10  # texture actually uses the upper range
    assert seq.groundtruth is not None and len(seq.groundtruth) == SMALL.n_frames
    d = dataio.read_pfm(seq.depth_path(0))
    assert d.shape == (SMALL.height, SMALL.width)
    params = SceneParams.from_json(seq.scene_params)
    assert params == SMALL


def test_scene_depth_at_reduced_intrinsics_matches_pixel_centers(tmp_path):
    scene = SyntheticScene(SMALL)
    intr = scene.intrinsics
    small = intr.scaled(1.0 / 8.0)
    d_small = scene.depth(0, small)
    # grid cell (r, c) center corresponds to full-res coordinates (8c+3.5, 8r+3.5)
    from thermosplat.geometry import pixel_grid

    pix = pixel_grid(small.height, small.width) * 8.0 + 3.5
    _, d_full = scene.cast(scene.pose(0), intr, pixels=pix)
    assert np.allclose(d_small, d_full, rtol=1e-12)
