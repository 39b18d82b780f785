"""World-space Gaussian map: storage, spawning, densification, pruning.

Gaussians live in structure-of-arrays form so rendering and optimizer updates
stay vectorized. Scales are stored as logs and opacity as a logit, which keeps
every parameter unconstrained during optimization; consumers exponentiate or
sigmoid on use. Densification follows the accumulated magnitude of per-pixel
2D-position gradients (not their signed sum, which cancels across a Gaussian
that should shrink or split).
"""

from dataclasses import dataclass

import numpy as np

from . import dataio
from .errors import ContractViolation

SPAWN_STRIDE = 4
SPAWN_OPACITY_LOGIT = 0.0  # sigmoid(0) = 0.5
EXTENT_PRUNE_OPACITY = 0.5  # "large but translucent" removal needs both halves


@dataclass
class DensifyConfig:
    grad_threshold: float = 0.0008
    scale_split_threshold: float = 0.02  # world units; 1% of extent by default
    split_factor: float = 1.6
    opacity_prune: float = 0.05
    extent_prune_scale: float = 0.2  # world units; 10% of extent by default
    min_observations: int = 3
    observation_grace: int = 3  # keyframes before the observation rule applies
    interval: int = 100

    def __post_init__(self):
        for name in (
            "grad_threshold",
            "scale_split_threshold",
            "split_factor",
            "opacity_prune",
            "extent_prune_scale",
            "min_observations",
            "observation_grace",
            "interval",
        ):
            if getattr(self, name) <= 0:
                raise ContractViolation(f"{name} must be positive")


class DensifyResult:
    __slots__ = ("cloned", "split", "kept", "added")

    def __init__(self, cloned, split, kept, added):
        self.cloned = int(cloned)
        self.split = int(split)
        self.kept = kept  # pre-op indices that survived, in storage order
        self.added = int(added)


class PruneResult:
    __slots__ = ("removed", "kept")

    def __init__(self, removed, kept):
        self.removed = int(removed)
        self.kept = kept


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def rotation_matrices(quats):
    """(N, 3, 3) rotation matrices from (N, 4) quaternions, normalized on use.

    Sign is irrelevant here (R(q) = R(-q)), so only the norm is fixed up.
    """
    q = np.asarray(quats, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    r = np.empty(q.shape[:-1] + (3, 3))
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def world_covariance(log_scales, rotations):
    """Sigma_w = (R S)(R S)^T for one Gaussian or a batch.

    log_scales: (..., 3); rotations: (..., 4) quaternions, normalized on use.
    """
    log_scales = np.asarray(log_scales, dtype=np.float64)
    rotations = np.asarray(rotations, dtype=np.float64)
    s = np.exp(log_scales)
    r = rotation_matrices(rotations)
    v = r * s[..., None, :]  # columns of R scaled: V = R diag(s)
    return v @ np.swapaxes(v, -1, -2)


class GaussianMap:
    """All Gaussians plus the gradient statistics that drive densification."""

    def __init__(self, seed=0):
        self.mu = np.zeros((0, 3))
        self.log_scales = np.zeros((0, 3))
        self.rotations = np.zeros((0, 4))
        self.opacity_logits = np.zeros(0)
        self.grays = np.zeros(0)
        self.created_at = np.zeros(0, dtype=np.int64)
        self.obs_kf = np.full((0, 3), -1, dtype=np.int64)  # distinct observing keyframes
        self.abs_grad_sum = np.zeros(0)
        self.grad_updates = np.zeros(0, dtype=np.int64)
        self.rng = np.random.default_rng(seed)
        self.revision = 0  # bumped on any parameter or layout change

    def __len__(self):
        return self.mu.shape[0]

    @property
    def opacities(self):
        return sigmoid(self.opacity_logits)

    @property
    def observation_count(self):
        return (self.obs_kf >= 0).sum(axis=1)

    def extent(self):
        """Diagonal of the positions' bounding box (0 for maps below 2 points)."""
        if len(self) < 2:
            return 0.0
        return float(np.linalg.norm(self.mu.max(axis=0) - self.mu.min(axis=0)))

    def _append(self, mu, log_scales, rotations, opacity_logits, grays, created_at, obs_kf=None):
        n = mu.shape[0]
        self.mu = np.concatenate([self.mu, mu])
        self.log_scales = np.concatenate([self.log_scales, log_scales])
        self.rotations = np.concatenate([self.rotations, rotations])
        self.opacity_logits = np.concatenate([self.opacity_logits, opacity_logits])
        self.grays = np.concatenate([self.grays, grays])
        self.created_at = np.concatenate([self.created_at, created_at])
        if obs_kf is None:
            obs_kf = np.full((n, 3), -1, dtype=np.int64)
        self.obs_kf = np.concatenate([self.obs_kf, obs_kf])
        self.abs_grad_sum = np.concatenate([self.abs_grad_sum, np.zeros(n)])
        self.grad_updates = np.concatenate([self.grad_updates, np.zeros(n, dtype=np.int64)])
        self.revision += 1

    def _take(self, idx):
        self.mu = self.mu[idx]
        self.log_scales = self.log_scales[idx]
        self.rotations = self.rotations[idx]
        self.opacity_logits = self.opacity_logits[idx]
        self.grays = self.grays[idx]
        self.created_at = self.created_at[idx]
        self.obs_kf = self.obs_kf[idx]
        self.abs_grad_sum = self.abs_grad_sum[idx]
        self.grad_updates = self.grad_updates[idx]
        self.revision += 1

    # -- spawning ---------------------------------------------------------

    def spawn_from_keyframe(self, pose, image, proxy, intr, kf_id, stride=SPAWN_STRIDE):
        """Back-project every stride-th pixel of the proxy depth into the map.

        pose: world-from-camera keyframe pose; image: full-resolution
        intensities in [0, 1]; proxy: ProxyDepthMap whose full view matches
        image. Returns the number of spawned Gaussians.
        """
        h, w = image.shape
        if proxy.full.shape != image.shape:
            raise ContractViolation("proxy full view and image shapes differ")
        vs = np.arange(0, h, stride)
        us = np.arange(0, w, stride)
        uu, vv = np.meshgrid(us, vs)
        inv_d = proxy.full[vv, uu]
        depth = 1.0 / inv_d
        x = (uu - intr.cx) / intr.fx * depth
        y = (vv - intr.cy) / intr.fy * depth
        pts = pose.apply(np.stack([x, y, depth], axis=-1).reshape(-1, 3))
        n = pts.shape[0]
        scale = depth.reshape(-1) / (0.5 * (intr.fx + intr.fy)) * stride
        rot = np.zeros((n, 4))
        rot[:, 0] = 1.0
        self._append(
            pts,
            np.log(scale)[:, None].repeat(3, axis=1),
            rot,
            np.full(n, SPAWN_OPACITY_LOGIT),
            image[vv, uu].reshape(-1).astype(np.float64),
            np.full(n, kf_id, dtype=np.int64),
        )
        return n

    # -- gradient statistics ----------------------------------------------

    def accumulate_gradients(self, abs_mu2d_grad, touched):
        """Fold one render's |dL/dmu'| sums into the densification statistics."""
        if abs_mu2d_grad.shape[0] != len(self):
            raise ContractViolation("gradient statistics length mismatch")
        norm = np.linalg.norm(abs_mu2d_grad, axis=-1)
        self.abs_grad_sum += np.where(touched, norm, 0.0)
        self.grad_updates += touched.astype(np.int64)

    def record_observations(self, kf_id, touched):
        """Remember up to 3 distinct keyframes that saw each Gaussian."""
        seen = (self.obs_kf == kf_id).any(axis=1)
        pending = touched & ~seen
        for slot in range(self.obs_kf.shape[1]):
            fill = pending & (self.obs_kf[:, slot] < 0)
            self.obs_kf[fill, slot] = kf_id
            pending &= ~fill
        # pending gaussians already hold 3 distinct ids: nothing left to prove

    # -- densify / prune ----------------------------------------------------

    def densify(self, cfg):
        """Clone small / split large Gaussians with high mean absolute gradient."""
        n = len(self)
        mean_grad = self.abs_grad_sum / np.maximum(self.grad_updates, 1)
        hot = (mean_grad > cfg.grad_threshold) & (self.grad_updates > 0)
        max_scale = np.exp(self.log_scales).max(axis=1)
        clone = hot & (max_scale < cfg.scale_split_threshold)
        split = hot & ~clone
        keep = ~split  # split parents are replaced by their children
        kept_idx = np.flatnonzero(keep)

        children = []
        for idx, copies, shrink in ((np.flatnonzero(clone), 1, 1.0), (np.flatnonzero(split), 2, cfg.split_factor)):
            if idx.size == 0:
                continue
            rep = np.repeat(idx, copies)
            cov = world_covariance(self.log_scales[rep], self.rotations[rep])
            chol = np.linalg.cholesky(cov + 1e-12 * np.eye(3))
            offsets = (chol @ self.rng.standard_normal((rep.size, 3, 1)))[..., 0]
            children.append(
                (
                    self.mu[rep] + offsets,
                    self.log_scales[rep] - np.log(shrink),
                    self.rotations[rep].copy(),
                    self.opacity_logits[rep].copy(),
                    self.grays[rep].copy(),
                    self.created_at[rep].copy(),
                    self.obs_kf[rep].copy(),
                )
            )

        self._take(kept_idx)
        added = 0
        for block in children:
            self._append(*block)
            added += block[0].shape[0]
        self.abs_grad_sum[:] = 0.0
        self.grad_updates[:] = 0
        assert len(self) == n + int(clone.sum()) + int(split.sum())  # net +1 per split
        return DensifyResult(int(clone.sum()), int(split.sum()), kept_idx, added)

    def prune(self, cfg, current_kf_id):
        """Drop translucent, oversized-translucent, and never-confirmed Gaussians."""
        op = self.opacities
        low_opacity = op < cfg.opacity_prune
        max_scale = np.exp(self.log_scales).max(axis=1)
        oversized = (max_scale > cfg.extent_prune_scale) & (op < EXTENT_PRUNE_OPACITY)
        aged = (current_kf_id - self.created_at) >= cfg.observation_grace
        unconfirmed = aged & (self.observation_count < cfg.min_observations)
        drop = low_opacity | oversized | unconfirmed
        kept = np.flatnonzero(~drop)
        removed = int(drop.sum())
        self._take(kept)
        return PruneResult(removed, kept)

    # -- persistence --------------------------------------------------------

    def save_ply(self, path):
        dataio.write_gaussian_ply(
            path, self.mu, self.log_scales, self.rotations, self.opacity_logits, self.grays
        )

    @classmethod
    def from_ply(cls, path, seed=0):
        data = dataio.read_gaussian_ply(path)
        m = cls(seed=seed)
        n = data["positions"].shape[0]
        m._append(
            data["positions"],
            data["log_scales"],
            data["rotations"],
            data["opacity_logits"],
            data["grays"],
            np.zeros(n, dtype=np.int64),
        )
        return m
