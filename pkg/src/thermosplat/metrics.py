"""Trajectory and image-quality evaluation.

ATE follows the monocular convention: associate poses by timestamp, align the
estimate to the reference with a similarity transform (rotation, translation,
uniform scale), and report the RMSE of the remaining translation differences.
PSNR and SSIM operate on [0, 1] gray images; SSIM shares the renderer's
11x11 Gaussian-window implementation so training and evaluation agree.
"""

import numpy as np

from .errors import ContractViolation, InsufficientOverlapError
from .geometry import sim3_umeyama
from .raster import ssim

DEFAULT_MAX_DT = 0.02  # seconds
PSNR_CAP = 100.0

__all__ = [
    "Trajectory",
    "associate",
    "ate_rmse",
    "psnr",
    "ssim",
    "select_eval_frames",
    "format_report",
]


class Trajectory:
    """Ordered (timestamp, world-from-camera pose) samples."""

    __slots__ = ("timestamps", "poses")

    def __init__(self, samples):
        samples = list(samples)
        self.timestamps = np.array([float(ts) for ts, _ in samples])
        self.poses = [pose for _, pose in samples]
        if np.any(np.diff(self.timestamps) <= 0):
            raise ContractViolation("trajectory timestamps must strictly increase")

    def __len__(self):
        return len(self.poses)

    def __iter__(self):
        return iter(zip(self.timestamps, self.poses))

    def positions(self):
        return np.array([pose.t for pose in self.poses]).reshape(-1, 3)


def associate(est, ref, max_dt=DEFAULT_MAX_DT):
    """One-to-one nearest-timestamp pairs (est index, ref index) within max_dt."""
    candidates = []
    for i, ts in enumerate(est.timestamps):
        j = int(np.argmin(np.abs(ref.timestamps - ts)))
        dt = abs(ref.timestamps[j] - ts)
        if dt <= max_dt:
            candidates.append((dt, i, j))
    candidates.sort()
    pairs = []
    used_i, used_j = set(), set()
    for _, i, j in candidates:
        if i in used_i or j in used_j:
            continue
        used_i.add(i)
        used_j.add(j)
        pairs.append((i, j))
    pairs.sort()
    return pairs


def ate_rmse(est, ref, max_dt=DEFAULT_MAX_DT):
    """Similarity-aligned absolute trajectory error (RMSE, reference units)."""
    if not isinstance(est, Trajectory):
        est = Trajectory(est)
    if not isinstance(ref, Trajectory):
        ref = Trajectory(ref)
    pairs = associate(est, ref, max_dt)
    if len(pairs) < 3:
        raise InsufficientOverlapError(
            f"only {len(pairs)} timestamp associations within {max_dt}s; need >= 3"
        )
    est_xyz = est.positions()[[i for i, _ in pairs]]
    ref_xyz = ref.positions()[[j for _, j in pairs]]
    sim = sim3_umeyama(est_xyz, ref_xyz)
    err = sim.apply(est_xyz) - ref_xyz
    return float(np.sqrt(np.mean(np.sum(err * err, axis=-1))))


def psnr(a, b):
    """Peak signal-to-noise ratio in dB for [0,1] images, capped at 100."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractViolation("psnr inputs must share a shape")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return float(min(10.0 * np.log10(1.0 / mse), PSNR_CAP))


def select_eval_frames(n_frames, training_keyframes, step=5):
    """Every step-th frame index, excluding frames the map trained on."""
    if n_frames < 0 or step <= 0:
        raise ContractViolation("need n_frames >= 0 and step > 0")
    used = set(int(k) for k in training_keyframes)
    return [i for i in range(0, n_frames, step) if i not in used]


def format_report(sequence, values):
    """Line-oriented metrics report: metric<TAB>sequence<TAB>value."""
    lines = []
    for name, value in values.items():
        if isinstance(value, str):
            rendered = value
        else:
            rendered = f"{float(value):.9g}"
        lines.append(f"{name}\t{sequence}\t{rendered}")
    return "\n".join(lines) + "\n"
