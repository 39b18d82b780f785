"""Procedural test scenes: textured room + spheres, ray-cast to raws and depth.

The scene is fully determined by SceneParams (including the seed), so a
sequence can be regenerated bit-identically and the ground truth queried at
any resolution afterwards (the synthetic oracles rely on this).
"""

import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import dataio
from .errors import ContractViolation
from .geometry import PinholeIntrinsics, SE3Pose, matrix_to_quat, pixel_grid

_T_MIN = 1e-6


@dataclass
class SceneParams:
    trajectory: str = "orbit"  # orbit | line | figure8
    n_frames: int = 60
    width: int = 320
    height: int = 256
    fov_deg: float = 70.0
    radius: float = 2.0
    z_height: float = 0.0
    room: tuple = (4.0, 4.0, 2.5)  # half-extents of the enclosing box
    n_spheres: int = 4
    bit_depth: int = 14
    fps: float = 10.0
    seed: int = 0

    def to_json(self):
        d = asdict(self)
        d["room"] = list(self.room)
        return d

    @classmethod
    def from_json(cls, d):
        d = dict(d)
        d["room"] = tuple(d.get("room", (4.0, 4.0, 2.5)))
        return cls(**d)


def _value_noise(u, v, lattice):
    """Bilinearly interpolated random lattice, wrapping at the borders."""
    n = lattice.shape[0]
    u = np.asarray(u) % n
    v = np.asarray(v) % n
    i0 = np.floor(u).astype(int) % n
    j0 = np.floor(v).astype(int) % n
    i1 = (i0 + 1) % n
    j1 = (j0 + 1) % n
    fu = u - np.floor(u)
    fv = v - np.floor(v)
    return (
        lattice[i0, j0] * (1 - fu) * (1 - fv)
        + lattice[i1, j0] * fu * (1 - fv)
        + lattice[i0, j1] * (1 - fu) * fv
        + lattice[i1, j1] * fu * fv
    )


class _Surface:
    def texture(self, a, b):
        noise = _value_noise(a / self.noise_scale, b / self.noise_scale, self.lattice)
        band = ((np.floor(a / self.band_width) + np.floor(b / self.band_width)) % 2).astype(float)
        return np.clip(0.15 + 0.6 * noise + 0.2 * band, 0.0, 1.0)


class _Plane(_Surface):
    """Finite axis-aligned rectangle on the plane axis=value."""

    def __init__(self, axis, value, lo, hi, rng):
        self.axis = axis
        self.value = float(value)
        self.lo = np.asarray(lo, dtype=float)  # bounds on the two in-plane axes
        self.hi = np.asarray(hi, dtype=float)
        self.u_axis, self.v_axis = [a for a in range(3) if a != axis]
        self.lattice = rng.uniform(0, 1, size=(8, 8))
        self.noise_scale = rng.uniform(0.8, 1.6)
        self.band_width = rng.uniform(0.9, 1.8)

    def intersect(self, origin, dirs):
        d = dirs[..., self.axis]
        safe = np.where(np.abs(d) < 1e-12, 1.0, d)
        t = (self.value - origin[self.axis]) / safe
        pu = origin[self.u_axis] + t * dirs[..., self.u_axis]
        pv = origin[self.v_axis] + t * dirs[..., self.v_axis]
        ok = (
            (np.abs(d) >= 1e-12)
            & (t > _T_MIN)
            & (pu >= self.lo[0]) & (pu <= self.hi[0])
            & (pv >= self.lo[1]) & (pv <= self.hi[1])
        )
        return np.where(ok, t, np.inf)

    def shade(self, points):
        return self.texture(points[..., self.u_axis], points[..., self.v_axis])


class _Sphere(_Surface):
    def __init__(self, center, radius, rng):
        self.center = np.asarray(center, dtype=float)
        self.radius = float(radius)
        self.lattice = rng.uniform(0, 1, size=(8, 8))
        self.noise_scale = rng.uniform(0.15, 0.35)
        self.band_width = rng.uniform(0.25, 0.5)

    def intersect(self, origin, dirs):
        oc = origin - self.center
        a = (dirs**2).sum(axis=-1)
        b = 2.0 * (dirs @ oc)
        c = oc @ oc - self.radius**2
        disc = b * b - 4 * a * c
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t0 = (-b - sq) / (2 * a)
        t1 = (-b + sq) / (2 * a)
        t = np.where(t0 > _T_MIN, t0, t1)
        return np.where(ok & (t > _T_MIN), t, np.inf)

    def shade(self, points):
        rel = points - self.center
        theta = np.arctan2(rel[..., 1], rel[..., 0])
        phi = np.arccos(np.clip(rel[..., 2] / self.radius, -1, 1))
        return self.texture(theta * self.radius, phi * self.radius)


def look_at(position, target, up=(0.0, 0.0, 1.0)):
    """World-from-camera pose with +z forward, +x right, +y image-down."""
    position = np.asarray(position, dtype=float)
    forward = np.asarray(target, dtype=float) - position
    n = np.linalg.norm(forward)
    if n < 1e-12:
        raise ContractViolation("look_at target coincides with position")
    f = forward / n
    up = np.asarray(up, dtype=float)
    if np.linalg.norm(np.cross(f, up)) < 1e-6:
        up = np.array([0.0, 1.0, 0.0])
    x = np.cross(f, up)
    x /= np.linalg.norm(x)
    y = np.cross(f, x)
    R = np.stack([x, y, f], axis=1)
    return SE3Pose(matrix_to_quat(R), position)


class SyntheticScene:
    def __init__(self, params):
        self.params = params
        root = np.random.SeedSequence([params.seed, 0xD1CE])
        surface_seeds = root.spawn(7)

        hx, hy, hz = params.room
        self.surfaces = [
            _Plane(0, -hx, (-hy, -hz), (hy, hz), np.random.default_rng(surface_seeds[0])),
            _Plane(0, hx, (-hy, -hz), (hy, hz), np.random.default_rng(surface_seeds[1])),
            _Plane(1, -hy, (-hx, -hz), (hx, hz), np.random.default_rng(surface_seeds[2])),
            _Plane(1, hy, (-hx, -hz), (hx, hz), np.random.default_rng(surface_seeds[3])),
            _Plane(2, -hz, (-hx, -hy), (hx, hy), np.random.default_rng(surface_seeds[4])),
            _Plane(2, hz, (-hx, -hy), (hx, hy), np.random.default_rng(surface_seeds[5])),
        ]
        rng = np.random.default_rng(surface_seeds[6])
        for k in range(params.n_spheres):
            ang = rng.uniform(0, 2 * np.pi)
            rad = rng.uniform(0.3, min(1.0, params.radius * 0.45))
            center = np.array(
                [rad * np.cos(ang), rad * np.sin(ang), rng.uniform(-0.4, 0.4) + params.z_height]
            )
            sphere_rng = np.random.default_rng(np.random.SeedSequence([params.seed, 0xBA11, k]))
            self.surfaces.append(_Sphere(center, rng.uniform(0.25, 0.5), sphere_rng))

    @property
    def intrinsics(self):
        p = self.params
        fx = (p.width / 2.0) / np.tan(np.deg2rad(p.fov_deg) / 2.0)
        return PinholeIntrinsics(fx, fx, (p.width - 1) / 2.0, (p.height - 1) / 2.0, p.width, p.height)

    # -- trajectory ---------------------------------------------------------

    def pose(self, k):
        p = self.params
        n = max(p.n_frames - 1, 1)
        s = k / n
        center = np.array([0.0, 0.0, p.z_height])
        if p.trajectory == "orbit":
            # closed loop: frame 0 and frame n_frames-1 coincide
            phi = 2 * np.pi * s
            pos = center + np.array([p.radius * np.cos(phi), p.radius * np.sin(phi), 0.0])
        elif p.trajectory == "line":
            a = center + np.array([-0.8 * p.radius, -0.5 * p.radius, 0.0])
            b = center + np.array([0.8 * p.radius, 0.5 * p.radius, 0.0])
            pos = a + s * (b - a)
        elif p.trajectory == "figure8":
            t = 2 * np.pi * s
            pos = center + np.array(
                [p.radius * np.sin(t), 0.5 * p.radius * np.sin(t) * np.cos(t), 0.0]
            )
            if np.linalg.norm(pos - center) < 0.05 * p.radius:
                pos = pos + np.array([0.0, 0.05 * p.radius, 0.0])
        else:
            raise ContractViolation(f"unknown trajectory {p.trajectory!r}")
        return look_at(pos, center)

    def timestamp(self, k):
        return k / self.params.fps

    def trajectory(self):
        return [(self.timestamp(k), self.pose(k)) for k in range(self.params.n_frames)]

    # -- ray casting --------------------------------------------------------

    def cast(self, pose, intr, pixels=None):
        """Ray-cast through pixel centers; returns (intensity, z_depth)."""
        if pixels is None:
            pixels = pixel_grid(intr.height, intr.width)
        dirs_cam = np.stack(
            [
                (pixels[..., 0] - intr.cx) / intr.fx,
                (pixels[..., 1] - intr.cy) / intr.fy,
                np.ones(pixels.shape[:-1]),
            ],
            axis=-1,
        )
        R = pose.rotation_matrix()
        dirs = dirs_cam @ R.T
        origin = pose.t

        best_t = np.full(pixels.shape[:-1], np.inf)
        best_idx = np.full(pixels.shape[:-1], -1, dtype=int)
        for idx, surf in enumerate(self.surfaces):
            t = surf.intersect(origin, dirs)
            closer = t < best_t
            best_t = np.where(closer, t, best_t)
            best_idx = np.where(closer, idx, best_idx)

        intensity = np.zeros(pixels.shape[:-1])
        for idx, surf in enumerate(self.surfaces):
            mask = best_idx == idx
            if not mask.any():
                continue
            pts = origin + best_t[mask, None] * dirs[mask]
            intensity[mask] = surf.shade(pts)

        # dirs_cam has unit z, so the ray parameter is the camera z-depth
        return intensity, best_t

    def render(self, k, intr=None):
        return self.cast(self.pose(k), intr or self.intrinsics)

    def depth(self, k, intr=None):
        return self.render(k, intr)[1]

    def raw_image(self, k):
        intensity, _ = self.render(k)
        top = 2**self.params.bit_depth - 1
        return np.round(intensity * top).astype(np.uint16)


def generate_synthetic(out_dir, params, write_depth=True):
    """Write a complete synthetic sequence; deterministic in params."""
    scene = SyntheticScene(params)
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    if write_depth:
        os.makedirs(os.path.join(out_dir, "depth"), exist_ok=True)

    dataio.write_calib(os.path.join(out_dir, "calib.txt"), scene.intrinsics, params.bit_depth)
    lines = []
    trajectory = []
    for k in range(params.n_frames):
        rel = f"images/frame_{k:06d}.png"
        intensity, depth = scene.render(k)
        top = 2**params.bit_depth - 1
        dataio.write_png(os.path.join(out_dir, rel), np.round(intensity * top).astype(np.uint16))
        if write_depth:
            dataio.write_pfm(os.path.join(out_dir, "depth", f"depth_{k:06d}.pfm"), depth)
        ts = scene.timestamp(k)
        lines.append(f"{ts:.9f} {rel}")
        trajectory.append((ts, scene.pose(k)))

    with open(os.path.join(out_dir, "frames.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")
    dataio.write_tum(os.path.join(out_dir, "groundtruth.txt"), trajectory)
    with open(os.path.join(out_dir, "scene.json"), "w") as f:
        json.dump(params.to_json(), f, indent=1, sort_keys=True)

    return dataio.load_sequence(out_dir)
