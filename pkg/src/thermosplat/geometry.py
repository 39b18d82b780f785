"""Camera geometry: quaternion SE(3) poses, pinhole projection, Sim(3) alignment.

Conventions used throughout the library:
  * quaternions are (w, x, y, z), unit norm, stored as float64
  * SE3Pose maps camera coordinates to world coordinates (world-from-camera)
  * pixel coordinates are (u, v) = (column, row) at pixel centers
  * inverse depth d = 1/z, valid range [1e-4, 1e2]
"""

import numpy as np

from .errors import BehindCameraError, DegenerateConfigurationError, InvalidDepthError

INV_DEPTH_MIN = 1e-4
INV_DEPTH_MAX = 1e2

_Z_EPS = 1e-8


# ---------------------------------------------------------------------------
# quaternion helpers


def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n < 1e-12:
        raise DegenerateConfigurationError("zero-norm quaternion")
    q = q / n
    # canonical sign: w >= 0 keeps pose serialization unambiguous
    if q[0] < 0:
        q = -q
    return q


def quat_multiply(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_to_matrix(q):
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R):
    R = np.asarray(R, dtype=np.float64)
    t = np.trace(R)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(R)))
        if i == 0:
            s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
            q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
        elif i == 1:
            s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
            q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s])
        else:
            s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
            q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    return quat_normalize(q)


def quat_from_axis_angle(phi):
    """Exponential map so(3) -> unit quaternion for rotation vector phi."""
    phi = np.asarray(phi, dtype=np.float64)
    theta = np.linalg.norm(phi)
    if theta < 1e-12:
        return quat_normalize(np.array([1.0, *(0.5 * phi)]))
    axis = phi / theta
    return quat_normalize(np.array([np.cos(theta / 2), *(np.sin(theta / 2) * axis)]))


def skew(v):
    return np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]], dtype=np.float64)


# ---------------------------------------------------------------------------
# pose types


class SE3Pose:
    """Rigid transform stored as unit quaternion + translation (world-from-camera)."""

    __slots__ = ("q", "t")

    def __init__(self, q=(1.0, 0.0, 0.0, 0.0), t=(0.0, 0.0, 0.0)):
        self.q = quat_normalize(np.asarray(q, dtype=np.float64))
        self.t = np.asarray(t, dtype=np.float64).copy()
        if self.t.shape != (3,):
            raise DegenerateConfigurationError("translation must be a 3-vector")

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, M):
        M = np.asarray(M, dtype=np.float64)
        return cls(matrix_to_quat(M[:3, :3]), M[:3, 3])

    def rotation_matrix(self):
        return quat_to_matrix(self.q)

    def matrix(self):
        M = np.eye(4)
        M[:3, :3] = self.rotation_matrix()
        M[:3, 3] = self.t
        return M

    def compose(self, other):
        """self @ other as transforms."""
        q = quat_multiply(self.q, other.q)
        t = self.rotation_matrix() @ other.t + self.t
        return SE3Pose(q, t)

    def inverse(self):
        R = self.rotation_matrix()
        return SE3Pose(matrix_to_quat(R.T), -R.T @ self.t)

    def apply(self, points):
        """Transform (..., 3) points."""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation_matrix().T + self.t

    def retract(self, xi):
        """Left-multiplicative update exp(xi) @ self, xi = (rho, phi)."""
        return se3_exp(xi).compose(self)

    def copy(self):
        return SE3Pose(self.q, self.t)

    def allclose(self, other, atol=1e-9):
        dq = min(np.linalg.norm(self.q - other.q), np.linalg.norm(self.q + other.q))
        return dq < atol and np.allclose(self.t, other.t, atol=atol)

    def __repr__(self):
        return f"SE3Pose(q={self.q.round(6)}, t={self.t.round(6)})"


def se3_exp(xi):
    """se(3) exponential. xi = (rho[3], phi[3]), translation block first."""
    xi = np.asarray(xi, dtype=np.float64)
    rho, phi = xi[:3], xi[3:]
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < 1e-9:
        V = np.eye(3) + 0.5 * K
    else:
        V = (
            np.eye(3)
            + (1 - np.cos(theta)) / theta**2 * K
            + (theta - np.sin(theta)) / theta**3 * (K @ K)
        )
    return SE3Pose(quat_from_axis_angle(phi), V @ rho)


class Sim3Transform:
    """Similarity transform x -> scale * R x + t."""

    __slots__ = ("scale", "q", "t")

    def __init__(self, scale, q, t):
        if scale <= 0:
            raise DegenerateConfigurationError("similarity scale must be positive")
        self.scale = float(scale)
        self.q = quat_normalize(np.asarray(q, dtype=np.float64))
        self.t = np.asarray(t, dtype=np.float64).copy()

    def apply(self, points):
        points = np.asarray(points, dtype=np.float64)
        return self.scale * (points @ quat_to_matrix(self.q).T) + self.t

    def __repr__(self):
        return f"Sim3Transform(s={self.scale:.6g}, q={self.q.round(6)}, t={self.t.round(6)})"


# ---------------------------------------------------------------------------
# camera model


class PinholeIntrinsics:
    __slots__ = ("fx", "fy", "cx", "cy", "width", "height")

    def __init__(self, fx, fy, cx, cy, width, height):
        if fx <= 0 or fy <= 0 or width <= 0 or height <= 0:
            raise DegenerateConfigurationError("intrinsics must have positive focal lengths and size")
        self.fx, self.fy = float(fx), float(fy)
        self.cx, self.cy = float(cx), float(cy)
        self.width, self.height = int(width), int(height)

    def scaled(self, factor):
        """Intrinsics for an image resampled by `factor`, pixel-center aware."""
        return PinholeIntrinsics(
            self.fx * factor,
            self.fy * factor,
            (self.cx + 0.5) * factor - 0.5,
            (self.cy + 0.5) * factor - 0.5,
            max(1, int(round(self.width * factor))),
            max(1, int(round(self.height * factor))),
        )

    def __repr__(self):
        return (
            f"PinholeIntrinsics(fx={self.fx}, fy={self.fy}, cx={self.cx}, cy={self.cy}, "
            f"width={self.width}, height={self.height})"
        )


class InverseDepthMap:
    """Per-pixel inverse depth with a validity mask."""

    __slots__ = ("values", "valid")

    def __init__(self, values, valid=None):
        self.values = np.asarray(values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DegenerateConfigurationError("inverse depth map must be 2-D")
        if valid is None:
            valid = np.ones(self.values.shape, dtype=bool)
        self.valid = np.asarray(valid, dtype=bool)
        if self.valid.shape != self.values.shape:
            raise DegenerateConfigurationError("validity mask shape mismatch")

    @property
    def shape(self):
        return self.values.shape

    def clamped(self):
        return InverseDepthMap(np.clip(self.values, INV_DEPTH_MIN, INV_DEPTH_MAX), self.valid.copy())

    def copy(self):
        return InverseDepthMap(self.values.copy(), self.valid.copy())


def pixel_grid(height, width):
    """(H, W, 2) array of (u, v) pixel-center coordinates."""
    v, u = np.mgrid[0:height, 0:width]
    return np.stack([u, v], axis=-1).astype(np.float64)


def bilinear_sample(values, u, v):
    """Sample a (H, W) array at float coordinates, clamped to the border."""
    h, w = values.shape
    u = np.clip(u, 0.0, w - 1.0)
    v = np.clip(v, 0.0, h - 1.0)
    u0 = np.clip(np.floor(u).astype(int), 0, w - 2) if w > 1 else np.zeros_like(u, dtype=int)
    v0 = np.clip(np.floor(v).astype(int), 0, h - 2) if h > 1 else np.zeros_like(v, dtype=int)
    fu = u - u0
    fv = v - v0
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    return (
        values[v0, u0] * (1 - fu) * (1 - fv)
        + values[v0, u1] * fu * (1 - fv)
        + values[v1, u0] * (1 - fu) * fv
        + values[v1, u1] * fu * fv
    )


# ---------------------------------------------------------------------------
# projection ops


def backproject(pixel, inv_depth, intr):
    """Pixel + inverse depth -> 3-D point in the camera frame.

    Accepts a single (u, v) or an (..., 2) array with matching inv_depth.
    """
    pixel = np.asarray(pixel, dtype=np.float64)
    inv_depth = np.asarray(inv_depth, dtype=np.float64)
    if np.any(inv_depth < INV_DEPTH_MIN) or np.any(inv_depth > INV_DEPTH_MAX):
        raise InvalidDepthError("inverse depth outside [%g, %g]" % (INV_DEPTH_MIN, INV_DEPTH_MAX))
    x = (pixel[..., 0] - intr.cx) / intr.fx
    y = (pixel[..., 1] - intr.cy) / intr.fy
    z = np.ones_like(x)
    return np.stack([x, y, z], axis=-1) / inv_depth[..., None]


def project(point, intr):
    """Camera-frame 3-D point -> ((u, v), inverse depth).

    Raises BehindCameraError when any z <= 1e-8.
    """
    point = np.asarray(point, dtype=np.float64)
    z = point[..., 2]
    if np.any(z <= _Z_EPS):
        raise BehindCameraError("point at or behind the camera plane")
    u = intr.fx * point[..., 0] / z + intr.cx
    v = intr.fy * point[..., 1] / z + intr.cy
    return np.stack([u, v], axis=-1), 1.0 / z


def reproject(inv_depth_map, pose_i, pose_j, intr, pixels=None):
    """Dense correspondence field from view i into view j.

    Returns (p_ij, valid): p_ij is (H, W, 2) pixel coordinates in view j,
    valid marks pixels with a usable source depth that land in front of
    camera j and inside its image bounds.
    """
    if pixels is None:
        pixels = pixel_grid(*inv_depth_map.shape)
    d = inv_depth_map.values
    ok = inv_depth_map.valid & (d >= INV_DEPTH_MIN) & (d <= INV_DEPTH_MAX)
    d_safe = np.where(ok, d, 1.0)

    points_i = backproject(pixels, d_safe, intr)
    rel = pose_j.inverse().compose(pose_i)
    points_j = points_i @ rel.rotation_matrix().T + rel.t

    z = points_j[..., 2]
    front = z > _Z_EPS
    z_safe = np.where(front, z, 1.0)
    u = intr.fx * points_j[..., 0] / z_safe + intr.cx
    v = intr.fy * points_j[..., 1] / z_safe + intr.cy
    p_ij = np.stack([u, v], axis=-1)

    # small slack so exact-boundary pixels survive floating-point noise
    eps = 1e-6
    inside = (u >= -eps) & (u <= intr.width - 1 + eps) & (v >= -eps) & (v <= intr.height - 1 + eps)
    return p_ij, ok & front & inside


def sim3_umeyama(src, dst):
    """Least-squares similarity aligning src onto dst: dst ~ s R src + t.

    Requires >= 3 non-degenerate correspondences.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise DegenerateConfigurationError("expected matching (N, 3) point sets")
    n = src.shape[0]
    if n < 3:
        raise DegenerateConfigurationError("need at least 3 correspondences")

    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    var_s = (xs**2).sum() / n

    cov = xd.T @ xs / n
    U, D, Vt = np.linalg.svd(cov)
    # collinear sets make the similarity ambiguous
    if var_s < 1e-18 or D[1] < 1e-12 * max(D[0], 1e-300):
        raise DegenerateConfigurationError("degenerate point configuration for Sim(3)")
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    scale = np.trace(np.diag(D) @ S) / var_s
    if scale <= 0:
        raise DegenerateConfigurationError("non-positive similarity scale")
    t = mu_d - scale * R @ mu_s
    return Sim3Transform(scale, matrix_to_quat(R), t)
