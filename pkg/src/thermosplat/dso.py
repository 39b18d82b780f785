"""Prior-anchored depth refinement alternating with bundle adjustment.

Bundle-adjusted inverse depths are accurate where multi-view flow constrains
them and junk elsewhere, while the mono prior is dense but only defined up to
a per-frame affine map in inverse depth. This module classifies each grid
pixel by multi-view consistency, fits the per-keyframe affine alignment
(theta, gamma) of the prior on the consistent pixels, then refines the
inconsistent depths against both the flow constraints and the aligned prior.

Poses stay frozen here; the alternation loop hands them back to the bundle
adjustment phase. With poses frozen the joint problem decomposes into one
small arrow-shaped system per keyframe (diagonal depth block plus the two
affine parameters), solved by eliminating the depths.
"""

import numpy as np

from . import dba
from .errors import DegenerateConfigurationError
from .geometry import INV_DEPTH_MAX, INV_DEPTH_MIN, bilinear_sample, pixel_grid

PIXEL_INVALID = 0
PIXEL_LOW = 1
PIXEL_HIGH = 2

DEFAULT_ETA = 0.05  # consistency radius as a fraction of mean scene depth
DEFAULT_ALPHA_HIGH = 0.01  # prior weight on refined (high-error) pixels
DEFAULT_ALPHA_LOW = 0.1  # prior weight anchoring (theta, gamma) on low pixels
_THETA_MIN = 1e-6
_BORDER = 1.0  # landings this close to the border give no observation


class PixelClassMask:
    """Per-pixel consistency labels for one keyframe's depth grid."""

    __slots__ = ("labels",)

    def __init__(self, labels):
        self.labels = labels

    @property
    def low(self):
        return self.labels == PIXEL_LOW

    @property
    def high(self):
        return self.labels == PIXEL_HIGH

    @property
    def invalid(self):
        return self.labels == PIXEL_INVALID

    @property
    def observed(self):
        return self.labels != PIXEL_INVALID


class AffineFit:
    """Least-squares alignment of the inverse mono prior to odometry depth."""

    __slots__ = ("theta", "gamma", "degenerate")

    def __init__(self, theta, gamma, degenerate=False):
        self.theta = float(theta)
        self.gamma = float(gamma)
        self.degenerate = bool(degenerate)

    def __iter__(self):
        yield self.theta
        yield self.gamma


def _neighbor_ids(graph, kf_id):
    out = set()
    for e in graph.edges:
        if e.i == kf_id:
            out.add(e.j)
        elif e.j == kf_id:
            out.add(e.i)
    return sorted(out)


def classify_pixels(graph, kf_id, eta=DEFAULT_ETA):
    """Label each grid pixel low (multi-view consistent), high, or invalid.

    A pixel's world point is compared against the world points implied by
    every co-visible keyframe's own depth at the landing pixel; the pixel is
    low iff the maximum pairwise spread of those points stays under
    eta * mean(depth of this keyframe).
    """
    kf = graph.keyframes[kf_id]
    intr = graph.intr
    d = kf.inv_depth.values
    valid = kf.inv_depth.valid
    grid = pixel_grid(intr.height, intr.width)
    rays = np.stack(
        [
            (grid[..., 0] - intr.cx) / intr.fx,
            (grid[..., 1] - intr.cy) / intr.fy,
            np.ones_like(d),
        ],
        axis=-1,
    )
    own = kf.pose.apply(rays / d[..., None])
    points = [own]
    have = []
    for j in _neighbor_ids(graph, kf_id):
        other = graph.keyframes[j]
        x_j = other.pose.inverse().apply(own)
        z = x_j[..., 2]
        zs = np.where(z > 1e-8, z, 1.0)
        u = intr.fx * x_j[..., 0] / zs + intr.cx
        v = intr.fy * x_j[..., 1] / zs + intr.cy
        seen = (
            (z > 1e-8)
            & (u >= _BORDER)
            & (u <= intr.width - 1 - _BORDER)
            & (v >= _BORDER)
            & (v <= intr.height - 1 - _BORDER)
        )
        d_samp = bilinear_sample(other.inv_depth.values, u, v)
        d_samp = np.clip(d_samp, INV_DEPTH_MIN, INV_DEPTH_MAX)
        ray_j = np.stack(
            [(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)], axis=-1
        )
        points.append(other.pose.apply(ray_j / d_samp[..., None]))
        have.append(seen)
    labels = np.full(d.shape, PIXEL_INVALID, dtype=np.int8)
    if not have:
        return PixelClassMask(labels)
    have = [np.ones(d.shape, dtype=bool)] + have  # own observation always exists
    stacked = np.stack(points)  # (K, H, W, 3)
    seen = np.stack(have)
    n_obs = seen.sum(axis=0)
    spread = np.zeros(d.shape)
    for a in range(len(points)):
        for b in range(a + 1, len(points)):
            dist = np.linalg.norm(stacked[a] - stacked[b], axis=-1)
            both = seen[a] & seen[b]
            spread = np.where(both, np.maximum(spread, dist), spread)
    observed = valid & (n_obs >= 2)  # own point plus at least one neighbor
    threshold = eta * float((1.0 / d[valid]).mean())
    labels[observed & (spread < threshold)] = PIXEL_LOW
    labels[observed & ~(spread < threshold)] = PIXEL_HIGH
    return PixelClassMask(labels)


def affine_init(d_low, mono_depth_low):
    """Closed-form fit of d ~ theta * (1 / D_mono) + gamma.

    d_low: inverse depths at multi-view-consistent pixels (1-D array)
    mono_depth_low: the mono prior's depths at the same pixels
    """
    d = np.asarray(d_low, dtype=np.float64).ravel()
    x = 1.0 / np.asarray(mono_depth_low, dtype=np.float64).ravel()
    if d.size < 2:
        raise DegenerateConfigurationError("affine fit needs at least 2 samples")
    n = d.size
    sx = x.sum()
    sxx = (x * x).sum()
    det = n * sxx - sx * sx
    if det <= 1e-12 * max(n * sxx, 1.0):
        # constant prior: slope unidentifiable
        return AffineFit(1.0, d.mean() - x.mean(), degenerate=True)
    sd = d.sum()
    sxd = (x * d).sum()
    theta = (n * sxd - sx * sd) / det
    gamma = (sxx * sd - sx * sxd) / det
    if theta <= 0:
        theta = _THETA_MIN
        return AffineFit(theta, (d - theta * x).mean(), degenerate=True)
    return AffineFit(theta, gamma)


def fit_keyframe_affine(kf, mask):
    """Affine init over the low pixels, widening to all observed when too few.

    Fewer than 2 low pixels (or all of them sharing one prior value) cannot
    pin the slope, so the fit falls back to every observed pixel and is
    flagged degenerate to request a re-fit next round.
    """
    mono = kf.mono_depth.values
    d = kf.inv_depth.values
    low = mask.low
    if low.sum() >= 2 and np.ptp(1.0 / mono[low]) > 1e-12:
        return affine_init(d[low], mono[low])
    fallback = mask.observed if mask.observed.sum() >= 2 else np.ones(d.shape, dtype=bool)
    fit = affine_init(d[fallback], mono[fallback])
    return AffineFit(fit.theta, fit.gamma, degenerate=True)


def prior_residuals(kf, mask, alpha_high=DEFAULT_ALPHA_HIGH, alpha_low=DEFAULT_ALPHA_LOW):
    """(residual, weight) arrays of the prior term d - (theta/D_mono + gamma)."""
    if kf.affine is None:
        raise DegenerateConfigurationError("affine alignment not initialized")
    theta, gamma = kf.affine
    prior = theta / kf.mono_depth.values + gamma
    r = kf.inv_depth.values - prior
    w = np.where(mask.high, alpha_high, 0.0) + np.where(mask.low, alpha_low, 0.0)
    return r * (w > 0), w


def evaluate_dso_objective(graph, masks, alpha_high=DEFAULT_ALPHA_HIGH, alpha_low=DEFAULT_ALPHA_LOW):
    """Flow reprojection objective plus the weighted prior terms."""
    total = dba.evaluate_objective(graph.ba_problem())
    for kf in graph.keyframes:
        r, w = prior_residuals(kf, masks[kf.id], alpha_high, alpha_low)
        total += float((w * r * r).sum())
    return total


def _keyframe_objective(graph, kf_id, mask, alpha_high, alpha_low):
    """The separable share of the objective owned by one keyframe's variables."""
    problem = graph.ba_problem()
    total = 0.0
    for edge in problem.edges:
        if edge.i == kf_id:
            r, w = dba.edge_residual(problem, edge)
            total += float((w * r * r).sum())
    kf = graph.keyframes[kf_id]
    r, w = prior_residuals(kf, mask, alpha_high, alpha_low)
    return total + float((w * r * r).sum())


def _assemble_keyframe_system(problem, kf, mask, alpha_high, alpha_low):
    """Normal-equation pieces for one keyframe's depths and affine parameters.

    Returns (c_diag, g_d, a_mat, g_a, u_vec): diagonal depth curvature and
    gradient over the full grid, the 2x2 affine block with its gradient, and
    the per-pixel depth/affine coupling rows. Gradients follow the g = -J^T W r
    convention, so -2 * g is the derivative of the squared objective.
    """
    theta, gamma = kf.affine
    x = 1.0 / kf.mono_depth.values
    d = kf.inv_depth.values
    c_diag = np.zeros(d.shape)
    g_d = np.zeros(d.shape)
    a_mat = np.zeros((2, 2))
    g_a = np.zeros(2)
    # flow terms touch only this keyframe's depths (poses frozen)
    for edge in problem.edges:
        if edge.i != kf.id:
            continue
        r, w, _, _, j_d = dba._edge_jacobians(problem, edge)
        c_diag += (w * j_d * j_d).sum(axis=-1)
        g_d -= (w * j_d * r).sum(axis=-1)
    # prior terms: residual e = d - theta * x - gamma
    e = d - theta * x - gamma
    w_prior = np.where(mask.high, alpha_high, 0.0) + np.where(mask.low, alpha_low, 0.0)
    c_diag += w_prior  # d(e)/dd = 1
    g_d -= w_prior * e
    jx = np.stack([-x, -np.ones_like(x)], axis=-1)  # d(e)/d(theta, gamma)
    a_mat += np.einsum("hwa,hw,hwb->ab", jx, w_prior, jx)
    g_a -= np.einsum("hwa,hw,hw->a", jx, w_prior, e)
    u_vec = w_prior[..., None] * jx  # coupling d(e)/dd * d(e)/d(theta, gamma)
    return c_diag, g_d, a_mat, g_a, u_vec


def dso_step(graph, masks, lams, alpha_high=DEFAULT_ALPHA_HIGH, alpha_low=DEFAULT_ALPHA_LOW):
    """One damped step per keyframe on the high-error depths and (theta, gamma).

    lams: per-keyframe damping, updated in place (halved on accept, doubled on
    reject). Returns the number of keyframes whose step was accepted. The
    poses-frozen objective separates per keyframe, so acceptance is judged
    independently for each.
    """
    problem = graph.ba_problem()
    accepted = 0
    for kf in graph.keyframes:
        mask = masks[kf.id]
        if kf.affine is None:
            raise DegenerateConfigurationError("run the affine init before dso_step")
        free = mask.high
        m = int(free.sum())
        theta, gamma = kf.affine
        d = kf.inv_depth.values
        c_diag, g_d, a_mat, g_a, u_vec = _assemble_keyframe_system(
            problem, kf, mask, alpha_high, alpha_low
        )

        # restrict depth variables to the high-error pixels
        c_free = c_diag[free]
        g_free = g_d[free]
        u_free = u_vec[free]

        before = _keyframe_objective(graph, kf.id, mask, alpha_high, alpha_low)
        lam = lams[kf.id]
        c_lam = c_free + lam * np.maximum(c_free, 1e-12)
        a_lam = a_mat + lam * np.diag(np.maximum(np.diag(a_mat), 1e-12))
        if m:
            s = a_lam - u_free.T @ (u_free / c_lam[:, None])
            rhs = g_a - u_free.T @ (g_free / c_lam)
        else:
            s, rhs = a_lam, g_a
        try:
            delta_a = np.linalg.solve(s, rhs)
        except np.linalg.LinAlgError:
            lams[kf.id] = lam * 2.0
            continue
        delta_d = (g_free - u_free @ delta_a) / c_lam if m else np.zeros(0)

        saved_d = d[free].copy()
        saved_affine = kf.affine
        d[free] = np.clip(d[free] + delta_d, INV_DEPTH_MIN, INV_DEPTH_MAX)
        kf.affine = (max(theta + delta_a[0], _THETA_MIN), gamma + delta_a[1])
        after = _keyframe_objective(graph, kf.id, mask, alpha_high, alpha_low)
        if after <= before:
            lams[kf.id] = lam / 2.0
            accepted += 1
        else:
            d[free] = saved_d
            kf.affine = saved_affine
            lams[kf.id] = lam * 2.0
    return accepted


def run_dso(graph, masks, max_steps=5, alpha_high=DEFAULT_ALPHA_HIGH, alpha_low=DEFAULT_ALPHA_LOW, lam=dba.DEFAULT_DAMPING):
    """Iterate dso_step; returns the final combined objective."""
    lams = {kf.id: lam for kf in graph.keyframes}
    for _ in range(max_steps):
        dso_step(graph, masks, lams, alpha_high, alpha_low)
    return evaluate_dso_objective(graph, masks, alpha_high, alpha_low)


def alternate_dba_dso(
    graph,
    rounds=3,
    dba_steps=5,
    dso_steps=5,
    eta=DEFAULT_ETA,
    alpha_high=DEFAULT_ALPHA_HIGH,
    alpha_low=DEFAULT_ALPHA_LOW,
):
    """Alternate bundle adjustment and prior-anchored refinement.

    Per round: run_dba, re-classify, re-fit the affine alignment for frames
    that do not have a trustworthy one yet, then refine depths. Returns the
    list of (dba_objective, dso_objective) pairs, one per round.
    """
    if rounds < 1:
        raise DegenerateConfigurationError("rounds must be >= 1")
    trace = []
    flagged = {kf.id: True for kf in graph.keyframes}
    masks = None
    for _ in range(rounds):
        dba_obj = graph.run_graph_dba(max_steps=dba_steps, tol=0.0)
        masks = {kf.id: classify_pixels(graph, kf.id, eta) for kf in graph.keyframes}
        for kf in graph.keyframes:
            if kf.affine is None or flagged.get(kf.id, True):
                fit = fit_keyframe_affine(kf, masks[kf.id])
                kf.affine = (fit.theta, fit.gamma)
                flagged[kf.id] = fit.degenerate
        dso_obj = run_dso(graph, masks, max_steps=dso_steps, alpha_high=alpha_high, alpha_low=alpha_low)
        trace.append((dba_obj, dso_obj))
    return trace
