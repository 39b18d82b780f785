"""Dense bundle adjustment: joint pose and per-pixel inverse-depth refinement.

The state is a set of camera poses plus one inverse depth per grid pixel of
each depth-carrying vertex. Constraints are directed edges (i, j) holding a
frozen per-pixel correspondence target in frame j for every grid pixel of
frame i, with per-axis confidence weights. The residual for one pixel p is

    r = target - project(T_j^-1 * T_i * backproject(p, d_i))

and the objective is the weighted sum of squares over all edges and pixels.

Each pixel's inverse depth couples only to the two endpoint poses, never to
another depth, so the depth block of the normal equations is diagonal and the
Levenberg-Marquardt step is solved by Schur elimination of the depths.
"""

import numpy as np

from .errors import DegenerateConfigurationError, StepFailedError
from .geometry import INV_DEPTH_MAX, INV_DEPTH_MIN, pixel_grid, skew

WEIGHT_FLOOR = 1e-3  # confidences below this disable the pixel
DEFAULT_DAMPING = 1e-4
MAX_DAMPING_DOUBLINGS = 8
_Z_EPS = 1e-8
_DIAG_FLOOR = 1e-12  # keeps damping meaningful on zero-curvature coordinates


class BAEdge:
    """Directed constraint: grid pixels of vertex i must land on target in j."""

    __slots__ = ("i", "j", "target", "weight")

    def __init__(self, i, j, target, weight):
        if i == j:
            raise DegenerateConfigurationError("edge endpoints must differ")
        self.i = int(i)
        self.j = int(j)
        self.target = np.asarray(target, dtype=np.float64)
        self.weight = np.asarray(weight, dtype=np.float64)
        if self.target.shape != self.weight.shape or self.target.shape[-1] != 2:
            raise DegenerateConfigurationError("edge target/weight must be (H, W, 2)")


class BAProblem:
    """Poses, per-vertex inverse depth grids, and the edges that bind them.

    poses: list of SE3Pose, one per vertex (mutated by accepted steps)
    inv_depths: list of (H, W) float arrays or None for depth-less vertices;
        arrays are updated in place so callers sharing them see refinements
    fixed_pose / frozen_depth: per-vertex booleans; vertex 0's pose is always
        treated as fixed regardless of the flag (gauge anchor)
    """

    def __init__(self, poses, inv_depths, edges, intr, fixed_pose=None, frozen_depth=None):
        n = len(poses)
        if len(inv_depths) != n:
            raise DegenerateConfigurationError("one inv_depth entry (or None) per vertex")
        self.poses = list(poses)
        self.inv_depths = list(inv_depths)
        self.edges = list(edges)
        self.intr = intr
        self.fixed_pose = np.zeros(n, dtype=bool) if fixed_pose is None else np.asarray(fixed_pose, dtype=bool).copy()
        self.frozen_depth = np.zeros(n, dtype=bool) if frozen_depth is None else np.asarray(frozen_depth, dtype=bool).copy()
        if n:
            self.fixed_pose[0] = True
        for e in self.edges:
            if not (0 <= e.i < n and 0 <= e.j < n):
                raise DegenerateConfigurationError("edge references a missing vertex")
            if self.inv_depths[e.i] is None:
                raise DegenerateConfigurationError("edge source vertex carries no depth grid")
        # unit-depth camera rays through every grid pixel, shared by all edges
        grid = pixel_grid(intr.height, intr.width)
        self.rays = np.stack(
            [
                (grid[..., 0] - intr.cx) / intr.fx,
                (grid[..., 1] - intr.cy) / intr.fy,
                np.ones((intr.height, intr.width)),
            ],
            axis=-1,
        )

    def n_free_poses(self):
        return int((~self.fixed_pose).sum())

    def free_depth_vertices(self):
        return [
            v
            for v in range(len(self.poses))
            if self.inv_depths[v] is not None and not self.frozen_depth[v]
        ]


def _edge_geometry(problem, edge):
    """Per-pixel chain values shared by residual and Jacobian evaluation."""
    d = problem.inv_depths[edge.i]
    pose_i = problem.poses[edge.i]
    pose_j = problem.poses[edge.j]
    R_i = pose_i.rotation_matrix()
    R_j = pose_j.rotation_matrix()
    x_i = problem.rays / d[..., None]
    x_w = x_i @ R_i.T + pose_i.t
    x_j = (x_w - pose_j.t) @ R_j
    z = x_j[..., 2]
    safe_z = np.where(z > _Z_EPS, z, 1.0)
    intr = problem.intr
    proj = np.stack(
        [
            intr.fx * x_j[..., 0] / safe_z + intr.cx,
            intr.fy * x_j[..., 1] / safe_z + intr.cy,
        ],
        axis=-1,
    )
    r = edge.target - proj
    w = np.where(edge.weight >= WEIGHT_FLOOR, edge.weight, 0.0)
    w = w * (z > _Z_EPS)[..., None]  # points behind camera j cannot constrain
    r = r * (w > 0)
    return r, w, x_w, x_j, safe_z, R_i, R_j


def edge_residual(problem, edge):
    """(residual, effective weight) for one edge, both (H, W, 2)."""
    r, w = _edge_geometry(problem, edge)[:2]
    return r, w


def evaluate_objective(problem):
    total = 0.0
    for edge in problem.edges:
        r, w = edge_residual(problem, edge)
        total += float((w * r * r).sum())
    return total


def _edge_jacobians(problem, edge):
    """Residual derivatives for one edge.

    Returns (r, w, J_i, J_j, J_d): J_i and J_j are (H, W, 2, 6) derivatives
    with respect to left-multiplicative tangent increments (translation first)
    of the endpoint poses; J_d is (H, W, 2) with respect to the source pixel's
    inverse depth.
    """
    r, w, x_w, x_j, safe_z, R_i, R_j = _edge_geometry(problem, edge)
    intr = problem.intr
    h, wdt = safe_z.shape
    inv_z = 1.0 / safe_z
    inv_z2 = inv_z * inv_z
    # projection derivative d(proj)/d(x_j)
    j_proj = np.zeros((h, wdt, 2, 3))
    j_proj[..., 0, 0] = intr.fx * inv_z
    j_proj[..., 0, 2] = -intr.fx * x_j[..., 0] * inv_z2
    j_proj[..., 1, 1] = intr.fy * inv_z
    j_proj[..., 1, 2] = -intr.fy * x_j[..., 1] * inv_z2
    # d(x_j)/d(xi_i) = R_j^T [I | -skew(x_w)]; a left increment on T_j gives
    # the same block negated, so A below serves both endpoints
    t6 = np.zeros((h, wdt, 3, 6))
    t6[..., 0, 0] = t6[..., 1, 1] = t6[..., 2, 2] = 1.0
    sk = np.zeros((h, wdt, 3, 3))
    sk[..., 0, 1] = -x_w[..., 2]
    sk[..., 0, 2] = x_w[..., 1]
    sk[..., 1, 0] = x_w[..., 2]
    sk[..., 1, 2] = -x_w[..., 0]
    sk[..., 2, 0] = -x_w[..., 1]
    sk[..., 2, 1] = x_w[..., 0]
    t6[..., :, 3:] = -sk
    a = np.einsum("hwab,bc,hwcd->hwad", j_proj, R_j.T, t6)
    # r = target - proj, so the residual derivative flips the projection's sign
    j_i = -a
    j_j = a
    d = problem.inv_depths[edge.i]
    # d(x_j)/dd = R_j^T R_i (-ray / d^2); the residual flips the sign back
    dr_dd_chain = (problem.rays @ (R_j.T @ R_i).T) * (1.0 / (d * d))[..., None]
    j_d = np.einsum("hwab,hwb->hwa", j_proj, dr_dd_chain)
    return r, w, j_i, j_j, j_d


def linearize(problem):
    """Assemble the weighted Gauss-Newton normal equations.

    Returns (B, E, C, g_p, g_d, pose_slot, depth_base):
      B: (6P, 6P) pose Hessian for the P free poses
      E: (6P, D) pose-depth coupling, D = free depth pixels
      C: (D,) diagonal depth Hessian
      g_p, g_d: right-hand sides of (H + lambda D) delta = g
      pose_slot: per-vertex free-pose slot or -1
      depth_base: per-vertex first depth column or -1
    """
    n = len(problem.poses)
    pose_slot = np.full(n, -1, dtype=int)
    slot = 0
    for v in range(n):
        if not problem.fixed_pose[v]:
            pose_slot[v] = slot
            slot += 1
    depth_base = np.full(n, -1, dtype=int)
    base = 0
    px = problem.intr.height * problem.intr.width
    for v in problem.free_depth_vertices():
        depth_base[v] = base
        base += px
    n_p = 6 * slot
    n_d = base
    B = np.zeros((n_p, n_p))
    E = np.zeros((n_p, n_d))
    C = np.zeros(n_d)
    g_p = np.zeros(n_p)
    g_d = np.zeros(n_d)
    for edge in problem.edges:
        r, w, j_i, j_j, j_d = _edge_jacobians(problem, edge)
        si, sj = pose_slot[edge.i], pose_slot[edge.j]
        db = depth_base[edge.i]
        if si >= 0:
            B[6 * si : 6 * si + 6, 6 * si : 6 * si + 6] += np.einsum(
                "hwau,hwa,hwav->uv", j_i, w, j_i
            )
            g_p[6 * si : 6 * si + 6] -= np.einsum("hwau,hwa,hwa->u", j_i, w, r)
        if sj >= 0:
            B[6 * sj : 6 * sj + 6, 6 * sj : 6 * sj + 6] += np.einsum(
                "hwau,hwa,hwav->uv", j_j, w, j_j
            )
            g_p[6 * sj : 6 * sj + 6] -= np.einsum("hwau,hwa,hwa->u", j_j, w, r)
        if si >= 0 and sj >= 0:
            off = np.einsum("hwau,hwa,hwav->uv", j_i, w, j_j)
            B[6 * si : 6 * si + 6, 6 * sj : 6 * sj + 6] += off
            B[6 * sj : 6 * sj + 6, 6 * si : 6 * si + 6] += off.T
        if db >= 0:
            C[db : db + px] += np.einsum("hwa,hwa,hwa->hw", j_d, w, j_d).ravel()
            g_d[db : db + px] -= np.einsum("hwa,hwa,hwa->hw", j_d, w, r).ravel()
            if si >= 0:
                E[6 * si : 6 * si + 6, db : db + px] += np.einsum(
                    "hwau,hwa,hwa->uhw", j_i, w, j_d
                ).reshape(6, px)
            if sj >= 0:
                E[6 * sj : 6 * sj + 6, db : db + px] += np.einsum(
                    "hwau,hwa,hwa->uhw", j_j, w, j_d
                ).reshape(6, px)
    return B, E, C, g_p, g_d, pose_slot, depth_base


def solve_schur(B, E, C, g_p, g_d, lam):
    """Solve the damped normal equations by eliminating the diagonal depths.

    Raises numpy.linalg.LinAlgError when the reduced pose system is singular.
    """
    d_b = np.maximum(np.diag(B), _DIAG_FLOOR)
    d_c = np.maximum(C, _DIAG_FLOOR)
    c_lam = C + lam * d_c
    if B.shape[0] == 0:
        return np.zeros(0), g_d / c_lam
    b_lam = B + lam * np.diag(d_b)
    inv_c = 1.0 / c_lam
    s = b_lam - (E * inv_c) @ E.T
    rhs = g_p - E @ (g_d * inv_c)
    delta_p = np.linalg.solve(s, rhs)
    if not np.isfinite(delta_p).all():
        raise np.linalg.LinAlgError("non-finite pose update")
    delta_d = (g_d - delta_p @ E) * inv_c
    return delta_p, delta_d


def _apply_update(problem, delta_p, delta_d, pose_slot, depth_base):
    px = problem.intr.height * problem.intr.width
    for v, slot in enumerate(pose_slot):
        if slot >= 0:
            problem.poses[v] = problem.poses[v].retract(delta_p[6 * slot : 6 * slot + 6])
    for v, base in enumerate(depth_base):
        if base >= 0:
            d = problem.inv_depths[v]
            d += delta_d[base : base + px].reshape(d.shape)
            np.clip(d, INV_DEPTH_MIN, INV_DEPTH_MAX, out=d)


def dba_step(problem, lam=DEFAULT_DAMPING):
    """One Levenberg-Marquardt step over the whole problem.

    Mutates the problem state only when the step is accepted (objective does
    not increase). Returns (accepted, objective_delta, next_lam) where
    objective_delta = old - new of the accepted state (0.0 when rejected).
    """
    if problem.n_free_poses() == 0 and not problem.free_depth_vertices():
        raise DegenerateConfigurationError("no free variables to optimize")
    old = evaluate_objective(problem)
    B, E, C, g_p, g_d, pose_slot, depth_base = linearize(problem)
    trial = lam
    for _ in range(MAX_DAMPING_DOUBLINGS + 1):
        try:
            delta_p, delta_d = solve_schur(B, E, C, g_p, g_d, trial)
            break
        except np.linalg.LinAlgError:
            trial *= 2.0
    else:
        raise StepFailedError(
            f"reduced pose system still singular after {MAX_DAMPING_DOUBLINGS} damping doublings"
        )
    saved_poses = [problem.poses[v].copy() for v in range(len(problem.poses))]
    saved_depths = [
        problem.inv_depths[v].copy() if depth_base[v] >= 0 else None
        for v in range(len(problem.poses))
    ]
    _apply_update(problem, delta_p, delta_d, pose_slot, depth_base)
    new = evaluate_objective(problem)
    if new <= old:
        return True, old - new, trial / 2.0
    for v in range(len(problem.poses)):
        problem.poses[v] = saved_poses[v]
        if saved_depths[v] is not None:
            np.copyto(problem.inv_depths[v], saved_depths[v])
    return False, 0.0, trial * 2.0


def run_dba(problem, max_steps, tol=0.0, lam=DEFAULT_DAMPING):
    """Iterate dba_step until max_steps or an accepted step improves by < tol.

    Relative improvement is measured against the pre-step objective plus a
    tiny absolute floor, so states already at the numerical noise level stop
    immediately for any tol > 0. Returns the final objective value.
    """
    if max_steps < 1:
        raise DegenerateConfigurationError("max_steps must be >= 1")
    for _ in range(max_steps):
        before = evaluate_objective(problem)
        _, delta, lam = dba_step(problem, lam)
        if delta < tol * (before + 1e-12):
            break
    return evaluate_objective(problem)
