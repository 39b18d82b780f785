"""Dataset manifests and file formats (PNG, PFM, TUM trajectories, Gaussian PLY).

Directory layout of a sequence:
    calib.txt          "fx fy cx cy width height bit_depth"
    frames.txt         "timestamp relative-path" per line, timestamps increasing
    groundtruth.txt    optional TUM trajectory "t tx ty tz qx qy qz qw"
    images/*.png       16-bit (or 8-bit) grayscale raws
    depth/*.pfm        optional ground-truth z-depth sidecars
    scene.json         optional generator parameters (synthetic sequences)
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import FormatError
from .geometry import PinholeIntrinsics, SE3Pose, quat_normalize

PLY_FIELDS = (
    "x", "y", "z",
    "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
    "opacity", "gray",
)


# ---------------------------------------------------------------------------
# PNG images


def write_png(path, values):
    """Write a grayscale image; uint16 for >8-bit data, uint8 otherwise."""
    values = np.asarray(values)
    if values.dtype == np.uint8:
        Image.fromarray(values, mode="L").save(path)
    else:
        Image.fromarray(values.astype(np.uint16)).save(path)


def read_png(path):
    """Read a grayscale PNG as a numeric array (uint8 or uint16)."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing image file: {path}")
    arr = np.asarray(Image.open(path))
    if arr.ndim != 2:
        raise FormatError("expected a single-channel image", path=path)
    if arr.dtype not in (np.uint8, np.uint16):
        arr = arr.astype(np.uint16)
    return arr


# ---------------------------------------------------------------------------
# PFM (grayscale "Pf", little-endian, bottom-up rows)


def write_pfm(path, values):
    values = np.asarray(values, dtype=np.float32)
    if values.ndim != 2:
        raise FormatError("PFM writer expects a 2-D array", path=path)
    h, w = values.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(values[::-1].tobytes())  # bottom-up row order


def read_pfm(path):
    with open(path, "rb") as f:
        data = f.read()

    def next_token(pos):
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PFM header", path=path, offset=start)
        return data[start:pos], pos

    magic, pos = next_token(0)
    if magic == b"PF":
        raise FormatError("3-channel PFM not supported (expected grayscale 'Pf')", path=path, offset=0)
    if magic != b"Pf":
        raise FormatError(f"bad PFM magic {magic!r}", path=path, offset=0)

    dims = []
    for _ in range(2):
        tok_start = pos
        tok, pos = next_token(pos)
        try:
            dims.append(int(tok))
        except ValueError:
            raise FormatError(f"bad PFM dimension {tok!r}", path=path, offset=tok_start + 1)
    w, h = dims
    if w <= 0 or h <= 0:
        raise FormatError("non-positive PFM dimensions", path=path, offset=pos)

    scale_start = pos
    tok, pos = next_token(pos)
    try:
        scale = float(tok)
    except ValueError:
        raise FormatError(f"bad PFM scale {tok!r}", path=path, offset=scale_start + 1)
    if scale >= 0:
        raise FormatError("big-endian PFM not supported (scale must be negative)", path=path, offset=scale_start + 1)

    pos += 1  # single whitespace byte after the scale line
    need = w * h * 4
    if len(data) - pos < need:
        raise FormatError(
            f"PFM payload truncated: need {need} bytes, have {len(data) - pos}",
            path=path,
            offset=len(data),
        )
    arr = np.frombuffer(data[pos : pos + need], dtype="<f4").reshape(h, w)
    return arr[::-1].copy()


# ---------------------------------------------------------------------------
# TUM trajectories


def write_tum(path, trajectory):
    """Write [(timestamp, SE3Pose), ...]; quaternion serialized as qx qy qz qw."""
    with open(path, "w") as f:
        for ts, pose in trajectory:
            w, x, y, z = pose.q
            vals = " ".join(f"{v:.9g}" for v in (*pose.t, x, y, z, w))
            f.write(f"{ts:.9f} {vals}\n")


def read_tum(path):
    trajectory = []
    prev_ts = None
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise FormatError(
                    f"expected 8 fields, got {len(parts)}", path=path, line=lineno
                )
            try:
                ts, tx, ty, tz, qx, qy, qz, qw = (float(p) for p in parts)
            except ValueError:
                raise FormatError("non-numeric trajectory field", path=path, line=lineno)
            if prev_ts is not None and ts <= prev_ts:
                raise FormatError("timestamps must be strictly increasing", path=path, line=lineno)
            prev_ts = ts
            trajectory.append((ts, SE3Pose(quat_normalize([qw, qx, qy, qz]), [tx, ty, tz])))
    return trajectory


# ---------------------------------------------------------------------------
# Gaussian map PLY (binary little-endian float32)


def write_gaussian_ply(path, positions, log_scales, rotations, opacity_logits, grays):
    n = len(positions)
    rows = np.hstack(
        [
            np.asarray(positions, dtype=np.float32).reshape(n, 3),
            np.asarray(log_scales, dtype=np.float32).reshape(n, 3),
            np.asarray(rotations, dtype=np.float32).reshape(n, 4),
            np.asarray(opacity_logits, dtype=np.float32).reshape(n, 1),
            np.asarray(grays, dtype=np.float32).reshape(n, 1),
        ]
    )
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {name}" for name in PLY_FIELDS]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(rows.astype("<f4").tobytes())


def read_gaussian_ply(path):
    with open(path, "rb") as f:
        data = f.read()
    end = data.find(b"end_header\n")
    if end < 0:
        raise FormatError("missing end_header", path=path, offset=0)
    header = data[:end].decode("ascii", errors="replace").splitlines()
    if not header or header[0] != "ply":
        raise FormatError("not a PLY file", path=path, offset=0)
    n = None
    props = []
    for line in header[1:]:
        if line.startswith("format") and "binary_little_endian" not in line:
            raise FormatError("only binary_little_endian PLY supported", path=path)
        if line.startswith("element vertex"):
            n = int(line.split()[-1])
        if line.startswith("property"):
            parts = line.split()
            if parts[1] != "float":
                raise FormatError(f"unsupported property type {parts[1]}", path=path)
            props.append(parts[2])
    if n is None:
        raise FormatError("missing vertex element", path=path)
    if tuple(props) != PLY_FIELDS:
        raise FormatError(f"unexpected property layout {props}", path=path)
    payload = data[end + len(b"end_header\n") :]
    need = n * len(PLY_FIELDS) * 4
    if len(payload) < need:
        raise FormatError("PLY payload truncated", path=path, offset=len(data))
    rows = np.frombuffer(payload[:need], dtype="<f4").reshape(n, len(PLY_FIELDS))
    return {
        "positions": rows[:, 0:3].astype(np.float64),
        "log_scales": rows[:, 3:6].astype(np.float64),
        "rotations": rows[:, 6:10].astype(np.float64),
        "opacity_logits": rows[:, 10].astype(np.float64),
        "grays": rows[:, 11].astype(np.float64),
    }


# ---------------------------------------------------------------------------
# sequence manifests


@dataclass
class SequenceData:
    root: str
    intrinsics: PinholeIntrinsics
    bit_depth: int
    frames: list = field(default_factory=list)  # [(timestamp, absolute path)]
    groundtruth: list = None  # [(timestamp, SE3Pose)] or None
    scene_params: dict = None

    def __len__(self):
        return len(self.frames)

    def timestamps(self):
        return [ts for ts, _ in self.frames]

    def load_raw(self, index):
        return read_png(self.frames[index][1])

    def depth_path(self, index):
        return os.path.join(self.root, "depth", f"depth_{index:06d}.pfm")


def write_calib(path, intr, bit_depth):
    with open(path, "w") as f:
        f.write(f"{intr.fx:.9g} {intr.fy:.9g} {intr.cx:.9g} {intr.cy:.9g} {intr.width} {intr.height} {bit_depth}\n")


def read_calib(path):
    with open(path) as f:
        parts = f.read().split()
    if len(parts) != 7:
        raise FormatError(f"calib.txt must have 7 fields, got {len(parts)}", path=path, line=1)
    try:
        fx, fy, cx, cy = (float(p) for p in parts[:4])
        width, height, bit_depth = (int(p) for p in parts[4:])
    except ValueError:
        raise FormatError("non-numeric calibration field", path=path, line=1)
    if not 1 <= bit_depth <= 16:
        raise FormatError(f"bit depth {bit_depth} outside [1, 16]", path=path, line=1)
    return PinholeIntrinsics(fx, fy, cx, cy, width, height), bit_depth


def load_sequence(root):
    """Load a sequence directory; fails fast on malformed manifests."""
    calib_path = os.path.join(root, "calib.txt")
    frames_path = os.path.join(root, "frames.txt")
    if not os.path.exists(calib_path):
        raise FileNotFoundError(f"missing calibration file: {calib_path}")
    if not os.path.exists(frames_path):
        raise FileNotFoundError(f"missing frame manifest: {frames_path}")
    intr, bit_depth = read_calib(calib_path)

    frames = []
    prev_ts = None
    with open(frames_path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(maxsplit=1)
            if len(parts) != 2:
                raise FormatError("expected 'timestamp path'", path=frames_path, line=lineno)
            try:
                ts = float(parts[0])
            except ValueError:
                raise FormatError(f"bad timestamp {parts[0]!r}", path=frames_path, line=lineno)
            if prev_ts is not None and ts <= prev_ts:
                raise FormatError("timestamps must be strictly increasing", path=frames_path, line=lineno)
            prev_ts = ts
            img_path = os.path.join(root, parts[1])
            if not os.path.exists(img_path):
                raise FileNotFoundError(f"missing frame file: {img_path}")
            frames.append((ts, img_path))
    if not frames:
        raise FormatError("no frames listed", path=frames_path, line=1)

    gt_path = os.path.join(root, "groundtruth.txt")
    groundtruth = read_tum(gt_path) if os.path.exists(gt_path) else None

    scene_path = os.path.join(root, "scene.json")
    scene_params = None
    if os.path.exists(scene_path):
        with open(scene_path) as f:
            scene_params = json.load(f)

    return SequenceData(
        root=root,
        intrinsics=intr,
        bit_depth=bit_depth,
        frames=frames,
        groundtruth=groundtruth,
        scene_params=scene_params,
    )
