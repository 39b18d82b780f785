"""Flow and mono-depth prediction contracts plus the test oracles.

The odometry consumes two pluggable predictors:

  FlowOracle.predict_flow(i, j, current_pij) -> FlowPrediction
      r: per-pixel revision of the current correspondence estimate, so the
      corrected correspondence is current_pij + r
      w: nonnegative per-axis confidence weights (0 disables a pixel)

  DepthOracle.predict_depth(frame_id) -> MonoDepthMap
      dense positive depth at the reduced grid resolution, scale unknown

Synthetic oracles answer from re-castable ground truth with optional Gaussian
noise; the file oracle replays PFM predictions from disk. Both are
deterministic given their inputs and seed.
"""

import os
from dataclasses import dataclass

import numpy as np

from . import dataio
from .errors import ContractViolation, OracleUnavailableError
from .geometry import (
    INV_DEPTH_MAX,
    INV_DEPTH_MIN,
    InverseDepthMap,
    bilinear_sample,
    pixel_grid,
    reproject,
)

OCCLUSION_REL_TOL = 0.02  # relative z-slack before a landing pixel counts occluded


@dataclass
class FlowPrediction:
    r: np.ndarray  # (H, W, 2) correspondence revisions
    w: np.ndarray  # (H, W, 2) nonnegative weights

    def __post_init__(self):
        if self.r.shape != self.w.shape or self.r.ndim != 3 or self.r.shape[2] != 2:
            raise ContractViolation("flow prediction must be (H, W, 2) with matching weights")
        if np.any(self.w < 0):
            raise ContractViolation("flow weights must be nonnegative")


@dataclass
class MonoDepthMap:
    values: np.ndarray  # (H, W) positive depth
    source_id: int

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ContractViolation("mono depth must be 2-D")
        if np.any(self.values <= 0) or not np.isfinite(self.values).all():
            raise ContractViolation("mono depth must be positive and finite")

    def inverse(self):
        return 1.0 / self.values


class SyntheticFlowOracle:
    """Exact correspondences from a re-castable scene, plus optional noise.

    Ground truth is ray-cast lazily per frame at the reduced grid resolution.
    Occluded or out-of-frame landings get zero weight.
    """

    def __init__(self, scene, grid_intr, sigma=0.0, seed=0):
        self.scene = scene
        self.intr = grid_intr
        self.sigma = float(sigma)
        self.seed = int(seed)
        self._depth_cache = {}

    def _gt_depth(self, frame_id):
        if frame_id not in self._depth_cache:
            self._depth_cache[frame_id] = self.scene.depth(frame_id, self.intr)
        return self._depth_cache[frame_id]

    def predict_flow(self, i, j, current_pij):
        z_i = self._gt_depth(i)
        dmap = InverseDepthMap(np.clip(1.0 / z_i, INV_DEPTH_MIN, INV_DEPTH_MAX))
        pose_i = self.scene.pose(i)
        pose_j = self.scene.pose(j)
        exact, valid = reproject(dmap, pose_i, pose_j, self.intr)

        # occlusion: compare the transported depth against frame j's own depth
        points_w = pose_i.apply(
            np.stack(
                [
                    (pixel_grid(*z_i.shape)[..., 0] - self.intr.cx) / self.intr.fx * z_i,
                    (pixel_grid(*z_i.shape)[..., 1] - self.intr.cy) / self.intr.fy * z_i,
                    z_i,
                ],
                axis=-1,
            )
        )
        z_in_j = pose_j.inverse().apply(points_w)[..., 2]
        z_j = self._gt_depth(j)
        z_seen = bilinear_sample(z_j, exact[..., 0], exact[..., 1])
        visible = valid & (z_in_j <= z_seen * (1.0 + OCCLUSION_REL_TOL))

        r = np.where(visible[..., None], exact - np.asarray(current_pij, dtype=np.float64), 0.0)
        if self.sigma > 0:
            rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0xF10, i, j]))
            r = r + np.where(visible[..., None], rng.normal(0.0, self.sigma, size=r.shape), 0.0)
        w = np.repeat(visible[..., None].astype(np.float64), 2, axis=-1)
        return FlowPrediction(r=r, w=w)


class SyntheticDepthOracle:
    """Mono prior whose inverse is affinely related to ground truth.

    The returned depth D satisfies theta_true / D + gamma_true = d_gt (+ noise
    on the inverse), so a downstream affine fit of d against 1/D recovers
    (theta_true, gamma_true) exactly in the noise-free case.
    """

    def __init__(self, scene, grid_intr, theta_true=1.0, gamma_true=0.0, sigma=0.0, seed=0):
        if theta_true <= 0:
            raise ContractViolation("theta_true must be positive")
        self.scene = scene
        self.intr = grid_intr
        self.theta_true = float(theta_true)
        self.gamma_true = float(gamma_true)
        self.sigma = float(sigma)
        self.seed = int(seed)

    def predict_depth(self, frame_id):
        z = self.scene.depth(frame_id, self.intr)
        d_gt = 1.0 / z
        inv_mono = (d_gt - self.gamma_true) / self.theta_true
        if self.sigma > 0:
            rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0xDEE, frame_id]))
            inv_mono = inv_mono + rng.normal(0.0, self.sigma, size=inv_mono.shape)
        inv_mono = np.clip(inv_mono, INV_DEPTH_MIN, INV_DEPTH_MAX)
        return MonoDepthMap(values=1.0 / inv_mono, source_id=frame_id)


class FileOracle:
    """Replays per-frame mono depth and per-pair flow predictions from disk.

    Layout (all grid-resolution grayscale PFMs):
        depth_<frame>.pfm              mono depth
        flow_<i>_<j>.pfm               u/v revisions stacked vertically (2H, W),
                                       relative to the grid pixel coordinates
        conf_<i>_<j>.pfm               matching weights, same stacking
    """

    def __init__(self, root):
        self.root = str(root)
        if not os.path.isdir(self.root):
            raise FileNotFoundError(f"oracle directory not found: {self.root}")

    def _load(self, name):
        path = os.path.join(self.root, name)
        if not os.path.exists(path):
            raise OracleUnavailableError(f"missing oracle file: {path}")
        return dataio.read_pfm(path).astype(np.float64)

    def predict_depth(self, frame_id):
        return MonoDepthMap(values=self._load(f"depth_{frame_id:06d}.pfm"), source_id=frame_id)

    def predict_flow(self, i, j, current_pij):
        flow = self._load(f"flow_{i:06d}_{j:06d}.pfm")
        conf = self._load(f"conf_{i:06d}_{j:06d}.pfm")
        if flow.shape[0] % 2 != 0 or flow.shape != conf.shape:
            raise ContractViolation("stacked flow/conf PFMs must share an even height")
        h = flow.shape[0] // 2
        w = flow.shape[1]
        disp = np.stack([flow[:h], flow[h:]], axis=-1)
        weights = np.stack([conf[:h], conf[h:]], axis=-1)
        target = pixel_grid(h, w) + disp
        r = target - np.asarray(current_pij, dtype=np.float64)
        return FlowPrediction(r=r, w=np.maximum(weights, 0.0))


def save_file_oracle(root, scene, grid_intr, frame_ids, pairs, theta_true=1.0, gamma_true=0.0):
    """Materialize synthetic oracle answers as a file-oracle directory."""
    os.makedirs(root, exist_ok=True)
    depth_oracle = SyntheticDepthOracle(scene, grid_intr, theta_true, gamma_true)
    flow_oracle = SyntheticFlowOracle(scene, grid_intr)
    grid = pixel_grid(grid_intr.height, grid_intr.width)
    for fid in frame_ids:
        dataio.write_pfm(
            os.path.join(root, f"depth_{fid:06d}.pfm"), depth_oracle.predict_depth(fid).values
        )
    for i, j in pairs:
        # queried at the grid itself, the revision IS the displacement field
        pred = flow_oracle.predict_flow(i, j, grid)
        disp = pred.r
        dataio.write_pfm(
            os.path.join(root, f"flow_{i:06d}_{j:06d}.pfm"),
            np.concatenate([disp[..., 0], disp[..., 1]], axis=0),
        )
        dataio.write_pfm(
            os.path.join(root, f"conf_{i:06d}_{j:06d}.pfm"),
            np.concatenate([pred.w[..., 0], pred.w[..., 1]], axis=0),
        )
