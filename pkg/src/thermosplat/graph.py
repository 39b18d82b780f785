"""Keyframe co-visibility graph: tracking, promotion, edge lifecycle.

Vertices are keyframes holding a pose and a dense inverse depth grid; directed
edges carry frozen flow targets consumed by the bundle adjustment layer. A new
frame is tracked against the existing keyframes with its pose as the only free
variable, then promoted to a keyframe when the observed mean flow magnitude
since the last keyframe is large enough.
"""

import numpy as np

from . import dba
from .errors import DegenerateConfigurationError, OracleUnavailableError, TrackingFailureError
from .geometry import (
    INV_DEPTH_MAX,
    INV_DEPTH_MIN,
    InverseDepthMap,
    SE3Pose,
    pixel_grid,
    reproject,
)

DEFAULT_FLOW_THRESHOLD = 2.4  # pixels at grid resolution
DEFAULT_MAX_EDGE_AGE = 24  # update steps
DEFAULT_TEMPORAL_RADIUS = 3  # keyframe ordinals
TRACK_NEIGHBORS = 3
TRACK_MICRO_STEPS = 2


class Keyframe:
    """One vertex: refined pose and inverse depth plus per-frame context."""

    __slots__ = ("id", "frame_id", "timestamp", "pose", "inv_depth", "image", "mono_depth", "affine")

    def __init__(self, kf_id, frame_id, timestamp, pose, inv_depth, image, mono_depth):
        self.id = int(kf_id)
        self.frame_id = int(frame_id)
        self.timestamp = float(timestamp)
        self.pose = pose
        self.inv_depth = inv_depth  # InverseDepthMap at grid resolution
        self.image = image  # enhanced full-resolution intensity
        self.mono_depth = mono_depth  # MonoDepthMap at grid resolution
        self.affine = None  # (theta, gamma) once the prior alignment ran


class Edge:
    """Directed flow constraint between two keyframes."""

    __slots__ = ("i", "j", "target", "weight", "age")

    def __init__(self, i, j, target, weight):
        if i == j:
            raise DegenerateConfigurationError("edge endpoints must differ")
        self.i = int(i)
        self.j = int(j)
        self.target = target
        self.weight = weight
        self.age = 0


class TrackedFrame:
    """Most recent non-keyframe tracking result, kept for possible promotion."""

    __slots__ = ("frame_id", "timestamp", "pose", "image")

    def __init__(self, frame_id, timestamp, pose, image):
        self.frame_id = int(frame_id)
        self.timestamp = float(timestamp)
        self.pose = pose
        self.image = image


def constant_velocity_extrapolate(prev, last):
    """Next pose under the constant-velocity model: last * (prev^-1 * last)."""
    return last.compose(prev.inverse().compose(last))


class CovisibilityGraph:
    def __init__(
        self,
        grid_intr,
        flow_oracle,
        depth_oracle,
        tau=DEFAULT_FLOW_THRESHOLD,
        max_edge_age=DEFAULT_MAX_EDGE_AGE,
        temporal_radius=DEFAULT_TEMPORAL_RADIUS,
    ):
        self.intr = grid_intr
        self.flow_oracle = flow_oracle
        self.depth_oracle = depth_oracle
        self.tau = float(tau)
        self.max_edge_age = int(max_edge_age)
        self.temporal_radius = int(temporal_radius)
        self.keyframes = []
        self.edges = []
        self.dropped_frames = 0
        self._grid = pixel_grid(grid_intr.height, grid_intr.width)
        self._last_tracked = None
        self._pose_history = []  # poses of the last two successfully tracked frames

    # -- tracking -------------------------------------------------------

    def _motion_init(self):
        if len(self._pose_history) >= 2:
            return constant_velocity_extrapolate(self._pose_history[-2], self._pose_history[-1])
        return self._pose_history[-1].copy()

    def _bootstrap(self, frame_id, timestamp, image):
        try:
            mono = self.depth_oracle.predict_depth(frame_id)
        except OracleUnavailableError as exc:
            self.dropped_frames += 1
            raise TrackingFailureError(f"no depth prediction for frame {frame_id}") from exc
        inv = np.clip(mono.inverse(), INV_DEPTH_MIN, INV_DEPTH_MAX)
        # no earlier geometry exists, so the prior (affine-ambiguous) inverse
        # depth seeds keyframe 0; bundle adjustment refines it later
        kf = Keyframe(0, frame_id, timestamp, SE3Pose.identity(), InverseDepthMap(inv), image, mono)
        self.keyframes.append(kf)
        self._pose_history = [kf.pose.copy()]
        self._last_tracked = TrackedFrame(frame_id, timestamp, kf.pose.copy(), image)
        return kf.pose.copy(), 0.0

    def _edge_prediction(self, kf, frame_id, pose):
        """Frozen target and weights for grid pixels of kf landing in pose's frame."""
        current, _ = reproject(kf.inv_depth, kf.pose, pose, self.intr)
        pred = self.flow_oracle.predict_flow(kf.frame_id, frame_id, current)
        return current + pred.r, pred.w

    def track_frame(self, frame_id, timestamp, image):
        """Refine the new frame's pose against the nearest keyframes.

        Returns (pose, mean_flow) where mean_flow is the mean valid-pixel flow
        magnitude from the newest keyframe to this frame.
        """
        if not self.keyframes:
            return self._bootstrap(frame_id, timestamp, image)
        init = self._motion_init()
        by_time = sorted(self.keyframes, key=lambda kf: (abs(kf.timestamp - timestamp), -kf.id))
        anchors = by_time[:TRACK_NEIGHBORS]
        try:
            predictions = [self._edge_prediction(kf, frame_id, init) for kf in anchors]
        except OracleUnavailableError as exc:
            self.dropped_frames += 1
            raise TrackingFailureError(f"no flow prediction for frame {frame_id}") from exc

        cur_vertex = len(anchors)
        poses = [kf.pose.copy() for kf in anchors] + [init]
        depths = [kf.inv_depth.values for kf in anchors] + [None]
        edges = [
            dba.BAEdge(k, cur_vertex, target, weight)
            for k, (target, weight) in enumerate(predictions)
        ]
        problem = dba.BAProblem(
            poses,
            depths,
            edges,
            self.intr,
            fixed_pose=[True] * len(anchors) + [False],
            frozen_depth=[True] * (len(anchors) + 1),
        )
        dba.run_dba(problem, max_steps=TRACK_MICRO_STEPS, tol=0.0)
        pose = problem.poses[cur_vertex]

        newest = max(range(len(anchors)), key=lambda k: anchors[k].id)
        target, weight = predictions[newest]
        valid = weight.max(axis=-1) > 0
        if valid.any():
            mean_flow = float(np.linalg.norm((target - self._grid)[valid], axis=-1).mean())
        else:
            mean_flow = float("inf")  # no overlap left: always worth a keyframe
        self._last_tracked = TrackedFrame(frame_id, timestamp, pose.copy(), image)
        self._pose_history = (self._pose_history + [pose.copy()])[-2:]
        return pose, mean_flow

    # -- promotion ------------------------------------------------------

    def _propagate_inv_depth(self, src, pose_new):
        """Warp the newest keyframe's inverse depth into the new frame.

        Nearest-cell scatter with closest-point-wins on collisions; pixels
        left empty are filled with the median of the filled values.
        """
        d = src.inv_depth.values
        rays = np.stack(
            [
                (self._grid[..., 0] - self.intr.cx) / self.intr.fx,
                (self._grid[..., 1] - self.intr.cy) / self.intr.fy,
                np.ones_like(d),
            ],
            axis=-1,
        )
        x_w = src.pose.apply(rays / d[..., None])
        x_n = pose_new.inverse().apply(x_w)
        z = x_n[..., 2]
        ok = z > 1e-8
        zs = np.where(ok, z, 1.0)
        u = np.rint(self.intr.fx * x_n[..., 0] / zs + self.intr.cx).astype(int)
        v = np.rint(self.intr.fy * x_n[..., 1] / zs + self.intr.cy).astype(int)
        ok &= (u >= 0) & (u < self.intr.width) & (v >= 0) & (v < self.intr.height)
        out = np.zeros_like(d)
        filled = np.zeros(d.shape, dtype=bool)
        uu, vv, zz = u[ok], v[ok], z[ok]
        order = np.argsort(-zz, kind="stable")  # nearest surface written last
        out[vv[order], uu[order]] = 1.0 / zz[order]
        filled[vv[order], uu[order]] = True
        if filled.any():
            out[~filled] = np.median(out[filled])
        else:
            out[:] = np.median(d)  # no overlap at all: keep the source's scale
        return np.clip(out, INV_DEPTH_MIN, INV_DEPTH_MAX)

    def maybe_promote_keyframe(self, mean_flow, tau=None):
        """Promote the last tracked frame to a keyframe iff mean_flow > tau."""
        if mean_flow < 0:
            raise DegenerateConfigurationError("mean_flow must be nonnegative")
        threshold = self.tau if tau is None else float(tau)
        if not (mean_flow > threshold):
            return False
        tracked = self._last_tracked
        if tracked is None:
            raise DegenerateConfigurationError("no tracked frame available to promote")
        mono = self.depth_oracle.predict_depth(tracked.frame_id)
        src = self.keyframes[-1]
        inv = self._propagate_inv_depth(src, tracked.pose)
        kf = Keyframe(
            len(self.keyframes),
            tracked.frame_id,
            tracked.timestamp,
            tracked.pose.copy(),
            InverseDepthMap(inv),
            tracked.image,
            mono,
        )
        self.keyframes.append(kf)
        return True

    # -- edge lifecycle ---------------------------------------------------

    def _refreshed_edge(self, i, j):
        kf_i, kf_j = self.keyframes[i], self.keyframes[j]
        target, weight = self._edge_prediction(kf_i, kf_j.frame_id, kf_j.pose)
        return target, weight

    def build_keyframe_edges(self, new_kf_id):
        """Bidirectional edges between the new vertex and its temporal neighbors."""
        added = []
        for other in range(len(self.keyframes)):
            if other == new_kf_id or abs(other - new_kf_id) > self.temporal_radius:
                continue
            for i, j in ((other, new_kf_id), (new_kf_id, other)):
                target, weight = self._refreshed_edge(i, j)
                edge = Edge(i, j, target, weight)
                self.edges.append(edge)
                added.append(edge)
        return added

    def refresh_edge_flows(self):
        """Re-query the oracle for every edge at the current state estimate."""
        for edge in self.edges:
            edge.target, edge.weight = self._refreshed_edge(edge.i, edge.j)

    def age_edges(self):
        for edge in self.edges:
            edge.age += 1

    def prune_edges(self):
        """Drop edges older than max_edge_age, keeping each vertex's newest edge."""
        protected = set()
        for v in range(len(self.keyframes)):
            incident = [k for k, e in enumerate(self.edges) if e.i == v or e.j == v]
            if incident:
                protected.add(min(incident, key=lambda k: (self.edges[k].age, -k)))
        kept = []
        removed = 0
        for k, edge in enumerate(self.edges):
            if edge.age > self.max_edge_age and k not in protected:
                removed += 1
            else:
                kept.append(edge)
        self.edges = kept
        return removed

    # -- bundle adjustment over the graph ---------------------------------

    def ba_problem(self, frozen_depth=False):
        """Problem over all keyframes and edges; vertex 0's pose stays fixed."""
        n = len(self.keyframes)
        return dba.BAProblem(
            [kf.pose for kf in self.keyframes],
            [kf.inv_depth.values for kf in self.keyframes],
            [dba.BAEdge(e.i, e.j, e.target, e.weight) for e in self.edges],
            self.intr,
            fixed_pose=[True] + [False] * (n - 1),
            frozen_depth=[frozen_depth] * n,
        )

    def run_graph_dba(self, max_steps, tol=0.0, lam=dba.DEFAULT_DAMPING):
        """Joint pose/depth refinement; writes results back into the keyframes.

        The constant-velocity history is carried through the newest keyframe's
        correction, otherwise the next motion-model extrapolation would mix
        pre- and post-refinement frames.
        """
        if not self.edges:
            return 0.0
        newest = self.keyframes[-1]
        before = newest.pose.copy()
        problem = self.ba_problem()
        objective = dba.run_dba(problem, max_steps=max_steps, tol=tol, lam=lam)
        for kf, pose in zip(self.keyframes, problem.poses):
            kf.pose = pose
        delta = newest.pose.compose(before.inverse())
        self._pose_history = [delta.compose(p) for p in self._pose_history]
        if self._last_tracked is not None:
            self._last_tracked.pose = delta.compose(self._last_tracked.pose)
        return objective
