"""Differentiable splatting renderer and the mapping optimizer built on it.

Forward pass: world Gaussians are projected to the image plane, sorted by
depth (ties broken by index so equal-depth order is reproducible), binned
into 16x16 tiles by a conservative footprint radius, and alpha-composited
front to back per pixel. Intensity and depth use the same blending weights;
alpha is their sum.

Backward pass: nothing is retained per pixel. The tape stores the projected
snapshot and per-tile index lists, and the backward pass re-runs the cheap
parts of the forward to rebuild blending weights, then chains gradients
through compositing, the 2D Gaussian evaluation, the projection Jacobian,
and the covariance parameterization. Both the signed 2D-center gradient and
the per-pixel absolute-value accumulation (which drives densification) come
out of the same traversal.

All evaluation applies the standard half factor in the exponent, a 0.3 pixel
isotropic dilation of the projected covariance, an opacity contribution cap
of 0.99, a contribution floor of 1e-8 (shared by the tiled and brute-force
paths so they stay comparable), and a per-pixel transmittance stop at 1e-4.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import convolve2d

from .errors import ContractViolation
from .splat_map import DensifyConfig, rotation_matrices, sigmoid, world_covariance

TILE = 16
DILATION = 0.3  # pixels^2 added to the projected covariance diagonal
OPACITY_CAP = 0.99
ALPHA_MIN = 1e-8  # contributions below this are dropped everywhere
T_STOP = 1e-4  # per-pixel transmittance cutoff
CULL_Z = 0.01
CULL_SIGMA = 3.0  # centers more than 3 sigma outside the image are culled

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


class Projected:
    """Depth-sorted snapshot of the Gaussians visible from one camera."""

    __slots__ = (
        "idx",
        "mu2d",
        "cov2",
        "cov2_inv",
        "z",
        "alpha",
        "color",
        "r_cut",
        "xc",
        "jproj",
        "m_cam",
        "r_cw",
        "mu",
        "log_scales",
        "rotations",
        "opacity_logits",
    )

    def __init__(self, **kw):
        for name in self.__slots__:
            setattr(self, name, kw[name])

    def __len__(self):
        return self.idx.size


class RenderTape:
    __slots__ = ("proj", "tiles", "shape", "revision", "map_len")

    def __init__(self, proj, tiles, shape, revision, map_len):
        self.proj = proj
        self.tiles = tiles  # (y0, x0, h, w, selection into proj)
        self.shape = shape
        self.revision = revision
        self.map_len = map_len


class RenderOutput:
    __slots__ = ("intensity", "depth", "alpha", "tape")

    def __init__(self, intensity, depth, alpha, tape):
        self.intensity = intensity
        self.depth = depth
        self.alpha = alpha
        self.tape = tape


class GradientBundle:
    __slots__ = (
        "d_mu",
        "d_log_scales",
        "d_rotations",
        "d_opacity_logits",
        "d_grays",
        "d_mu2d",
        "absgs",
        "touched",
    )

    def __init__(self, n):
        self.d_mu = np.zeros((n, 3))
        self.d_log_scales = np.zeros((n, 3))
        self.d_rotations = np.zeros((n, 4))
        self.d_opacity_logits = np.zeros(n)
        self.d_grays = np.zeros(n)
        self.d_mu2d = np.zeros((n, 2))  # signed, for diagnostics
        self.absgs = np.zeros((n, 2))  # summed |dL/dmu'| per Gaussian
        self.touched = np.zeros(n, dtype=bool)


def _projection_jacobian(xc, intr):
    """(N, 2, 3) derivative of pixel coordinates with respect to camera point."""
    x, y, z = xc[:, 0], xc[:, 1], xc[:, 2]
    inv_z = 1.0 / z
    j = np.zeros((xc.shape[0], 2, 3))
    j[:, 0, 0] = intr.fx * inv_z
    j[:, 0, 2] = -intr.fx * x * inv_z * inv_z
    j[:, 1, 1] = intr.fy * inv_z
    j[:, 1, 2] = -intr.fy * y * inv_z * inv_z
    return j


def project_gaussians(gmap, pose, intr):
    """Project the map through a world-from-camera pose; cull and depth-sort."""
    r_wc = pose.rotation_matrix()
    r_cw = r_wc.T
    t_cw = -r_cw @ pose.t
    xc = gmap.mu @ r_cw.T + t_cw
    z = xc[:, 2]
    keep = z > CULL_Z
    idx = np.flatnonzero(keep)
    xc = xc[idx]
    z = z[idx]
    mu2d = np.stack(
        [intr.fx * xc[:, 0] / z + intr.cx, intr.fy * xc[:, 1] / z + intr.cy], axis=-1
    )
    j = _projection_jacobian(xc, intr)
    cov_w = world_covariance(gmap.log_scales[idx], gmap.rotations[idx])
    m_cam = np.einsum("ab,nbc,dc->nad", r_cw, cov_w, r_cw)
    cov2 = np.einsum("nab,nbc,ndc->nad", j, m_cam, j)
    cov2[:, 0, 0] += DILATION
    cov2[:, 1, 1] += DILATION
    a, b, c = cov2[:, 0, 0], cov2[:, 0, 1], cov2[:, 1, 1]
    lam_max = 0.5 * (a + c) + np.sqrt(0.25 * (a - c) ** 2 + b * b)
    sigma_max = np.sqrt(lam_max)
    inside = (
        (mu2d[:, 0] >= -CULL_SIGMA * sigma_max)
        & (mu2d[:, 0] <= intr.width - 1 + CULL_SIGMA * sigma_max)
        & (mu2d[:, 1] >= -CULL_SIGMA * sigma_max)
        & (mu2d[:, 1] <= intr.height - 1 + CULL_SIGMA * sigma_max)
    )
    sub = np.flatnonzero(inside)
    idx, xc, z, mu2d, j, m_cam, cov2 = (
        arr[sub] for arr in (idx, xc, z, mu2d, j, m_cam, cov2)
    )
    sigma_max = sigma_max[sub]
    alpha = sigmoid(gmap.opacity_logits[idx])
    with np.errstate(divide="ignore"):
        log_ratio = np.log(alpha / ALPHA_MIN)
    r_cut = sigma_max * np.sqrt(2.0 * np.maximum(log_ratio, 0.0))
    det = cov2[:, 0, 0] * cov2[:, 1, 1] - cov2[:, 0, 1] ** 2
    cov2_inv = np.empty_like(cov2)
    cov2_inv[:, 0, 0] = cov2[:, 1, 1] / det
    cov2_inv[:, 1, 1] = cov2[:, 0, 0] / det
    cov2_inv[:, 0, 1] = cov2_inv[:, 1, 0] = -cov2[:, 0, 1] / det
    order = np.lexsort((idx, z))  # depth-sorted, stable across equal depths
    take = lambda arr: arr[order]
    return Projected(
        idx=take(idx),
        mu2d=take(mu2d),
        cov2=take(cov2),
        cov2_inv=take(cov2_inv),
        z=take(z),
        alpha=take(alpha),
        color=gmap.grays[take(idx)],
        r_cut=take(r_cut),
        xc=take(xc),
        jproj=take(j),
        m_cam=take(m_cam),
        r_cw=r_cw,
        mu=gmap.mu[take(idx)],
        log_scales=gmap.log_scales[take(idx)],
        rotations=gmap.rotations[take(idx)],
        opacity_logits=gmap.opacity_logits[take(idx)],
    )


def _blend(proj, sel, pix):
    """Composite the selected (already depth-ordered) Gaussians at pixels.

    Returns (weights, G, T, active) with shapes (P, K); weights already
    include the transmittance-stop mask.
    """
    mu = proj.mu2d[sel]
    pm = proj.cov2_inv[sel]
    delta = pix[:, None, :] - mu[None, :, :]
    q = np.einsum("pka,kab,pkb->pk", delta, pm, delta)
    g = proj.alpha[sel][None, :] * np.exp(-0.5 * q)
    g = np.where(g < ALPHA_MIN, 0.0, np.minimum(g, OPACITY_CAP))
    one_minus = 1.0 - g
    t = np.cumprod(one_minus, axis=1)
    t = np.concatenate([np.ones((t.shape[0], 1)), t[:, :-1]], axis=1)
    active = t >= T_STOP
    w = g * t * active
    return w, g, t, active


def _composite_images(proj, sel, pix):
    w, _, _, _ = _blend(proj, sel, pix)
    intensity = w @ proj.color[sel]
    depth = w @ proj.z[sel]
    alpha = w.sum(axis=1)
    return intensity, depth, alpha


def render(gmap, pose, intr, tile=TILE):
    """Tile-based forward render returning intensity, depth, alpha and a tape."""
    h, w = intr.height, intr.width
    intensity = np.zeros((h, w))
    depth = np.zeros((h, w))
    alpha = np.zeros((h, w))
    proj = project_gaussians(gmap, pose, intr)
    tiles = []
    lo = proj.mu2d - proj.r_cut[:, None]
    hi = proj.mu2d + proj.r_cut[:, None]
    for y0 in range(0, h, tile):
        th = min(tile, h - y0)
        for x0 in range(0, w, tile):
            tw = min(tile, w - x0)
            sel = np.flatnonzero(
                (hi[:, 0] >= x0)
                & (lo[:, 0] <= x0 + tw - 1)
                & (hi[:, 1] >= y0)
                & (lo[:, 1] <= y0 + th - 1)
            )
            tiles.append((y0, x0, th, tw, sel))
            if sel.size == 0:
                continue
            uu, vv = np.meshgrid(np.arange(x0, x0 + tw), np.arange(y0, y0 + th))
            pix = np.stack([uu.reshape(-1), vv.reshape(-1)], axis=-1).astype(np.float64)
            ti, td, ta = _composite_images(proj, sel, pix)
            intensity[y0 : y0 + th, x0 : x0 + tw] = ti.reshape(th, tw)
            depth[y0 : y0 + th, x0 : x0 + tw] = td.reshape(th, tw)
            alpha[y0 : y0 + th, x0 : x0 + tw] = ta.reshape(th, tw)
    tape = RenderTape(proj, tiles, (h, w), gmap.revision, len(gmap))
    return RenderOutput(intensity, depth, alpha, tape)


def render_brute(gmap, pose, intr):
    """Per-pixel compositing over every projected Gaussian; oracle for render."""
    h, w = intr.height, intr.width
    proj = project_gaussians(gmap, pose, intr)
    sel = np.arange(len(proj))
    uu, vv = np.meshgrid(np.arange(w), np.arange(h))
    intensity = np.zeros((h, w))
    depth = np.zeros((h, w))
    alpha = np.zeros((h, w))
    if len(proj):
        for row in range(h):  # row chunks keep the (P, K) workspace bounded
            pix = np.stack([uu[row], vv[row]], axis=-1).astype(np.float64)
            ti, td, ta = _composite_images(proj, sel, pix)
            intensity[row] = ti
            depth[row] = td
            alpha[row] = ta
    return RenderOutput(intensity, depth, alpha, None)


def _quat_rotation_grad(q_hat, d_r):
    """Chain dL/dR into dL/d(normalized quaternion). Shapes (N,4),(N,3,3)->(N,4)."""
    w, x, y, z = q_hat[:, 0], q_hat[:, 1], q_hat[:, 2], q_hat[:, 3]
    zero = np.zeros_like(w)
    dr_dw = 2.0 * np.stack(
        [
            np.stack([zero, -z, y], axis=-1),
            np.stack([z, zero, -x], axis=-1),
            np.stack([-y, x, zero], axis=-1),
        ],
        axis=-2,
    )
    dr_dx = 2.0 * np.stack(
        [
            np.stack([zero, y, z], axis=-1),
            np.stack([y, -2 * x, -w], axis=-1),
            np.stack([z, w, -2 * x], axis=-1),
        ],
        axis=-2,
    )
    dr_dy = 2.0 * np.stack(
        [
            np.stack([-2 * y, x, w], axis=-1),
            np.stack([x, zero, z], axis=-1),
            np.stack([-w, z, -2 * y], axis=-1),
        ],
        axis=-2,
    )
    dr_dz = 2.0 * np.stack(
        [
            np.stack([-2 * z, -w, x], axis=-1),
            np.stack([w, -2 * z, y], axis=-1),
            np.stack([x, y, zero], axis=-1),
        ],
        axis=-2,
    )
    return np.stack(
        [np.einsum("nij,nij->n", d_r, t) for t in (dr_dw, dr_dx, dr_dy, dr_dz)], axis=-1
    )


def backward(gmap, tape, d_intensity, d_depth, d_alpha=None):
    """Chain per-pixel gradients back to the Gaussian parameters.

    The tape must come from a render of the map in its current state; any
    spawn, densify, prune, or optimizer update in between invalidates it.
    """
    if tape is None:
        raise ContractViolation("backward needs a tape from the tiled renderer")
    if tape.revision != gmap.revision or tape.map_len != len(gmap):
        raise ContractViolation("render tape is stale: the map changed since the render")
    if d_intensity.shape != tape.shape or d_depth.shape != tape.shape:
        raise ContractViolation("gradient image shape mismatch")
    proj = tape.proj
    n_proj = len(proj)
    bundle = GradientBundle(len(gmap))
    if n_proj == 0:
        return bundle

    d_mu2d = np.zeros((n_proj, 2))
    absgs = np.zeros((n_proj, 2))
    d_pm = np.zeros((n_proj, 2, 2))
    d_alpha_g = np.zeros(n_proj)
    d_color = np.zeros(n_proj)
    d_z_blend = np.zeros(n_proj)
    touched = np.zeros(n_proj, dtype=bool)

    for y0, x0, th, tw, sel in tape.tiles:
        if sel.size == 0:
            continue
        uu, vv = np.meshgrid(np.arange(x0, x0 + tw), np.arange(y0, y0 + th))
        pix = np.stack([uu.reshape(-1), vv.reshape(-1)], axis=-1).astype(np.float64)
        w, g, t, active = _blend(proj, sel, pix)
        touched[sel] |= (w > 0).any(axis=0)

        di = d_intensity[y0 : y0 + th, x0 : x0 + tw].reshape(-1, 1)
        dd = d_depth[y0 : y0 + th, x0 : x0 + tw].reshape(-1, 1)
        da = (
            d_alpha[y0 : y0 + th, x0 : x0 + tw].reshape(-1, 1)
            if d_alpha is not None
            else None
        )
        color = proj.color[sel][None, :]
        zval = proj.z[sel][None, :]
        # suffix sums over later (farther) contributions per channel
        sc = _suffix_sum(w * color)
        sz = _suffix_sum(w * zval)
        one_minus = 1.0 - g
        d_g = di * (color * t - sc / one_minus) + dd * (zval * t - sz / one_minus)
        if da is not None:
            d_g += da * (t - _suffix_sum(w) / one_minus)
        d_g *= active & (g > 0)

        d_color[sel] += (w * di).sum(axis=0)
        d_z_blend[sel] += (w * dd).sum(axis=0)

        uncapped = (g > 0) & (g < OPACITY_CAP)
        alpha_sel = proj.alpha[sel][None, :]
        with np.errstate(invalid="ignore", divide="ignore"):
            expo = np.where(uncapped, g / alpha_sel, 0.0)
        d_alpha_g[sel] += (d_g * expo).sum(axis=0)
        d_q = d_g * (-0.5) * g * uncapped

        mu = proj.mu2d[sel]
        pm = proj.cov2_inv[sel]
        delta = pix[:, None, :] - mu[None, :, :]
        pm_delta = np.einsum("kab,pkb->pka", pm, delta)
        d_delta = 2.0 * d_q[..., None] * pm_delta
        d_mu2d[sel] += -d_delta.sum(axis=0)
        absgs[sel] += np.abs(d_delta).sum(axis=0)
        d_pm[sel] += np.einsum("pk,pka,pkb->kab", d_q, delta, delta)

    # 2x2 covariance chain: q used the inverse, so flip through -P dP P
    d_cov2 = -np.einsum("nab,nbc,ncd->nad", proj.cov2_inv, d_pm, proj.cov2_inv)
    d_cov2 = 0.5 * (d_cov2 + np.swapaxes(d_cov2, -1, -2))
    d_j = 2.0 * np.einsum("nab,nbc,ncd->nad", d_cov2, proj.jproj, proj.m_cam)
    d_m = np.einsum("nba,nbc,ncd->nad", proj.jproj, d_cov2, proj.jproj)
    r_cw = proj.r_cw
    d_cov_w = np.einsum("ba,nbc,cd->nad", r_cw, d_m, r_cw)
    d_cov_w = 0.5 * (d_cov_w + np.swapaxes(d_cov_w, -1, -2))

    # covariance parameterization: Sigma_w = V V^T, V = R diag(exp(s))
    q_norm = np.linalg.norm(proj.rotations, axis=-1, keepdims=True)
    q_hat = proj.rotations / q_norm
    r_g = rotation_matrices(proj.rotations)
    s = np.exp(proj.log_scales)
    v = r_g * s[:, None, :]
    d_v = 2.0 * np.einsum("nab,nbc->nac", d_cov_w, v)
    bundle_ds = s * np.einsum("nik,nik->nk", r_g, d_v)
    d_r = d_v * s[:, None, :]
    d_q_hat = _quat_rotation_grad(q_hat, d_r)
    d_quat = (d_q_hat - q_hat * (q_hat * d_q_hat).sum(axis=-1, keepdims=True)) / q_norm

    # camera-point chain: center projection, blended depth, Jacobian entries
    d_xc = np.einsum("na,nab->nb", d_mu2d, proj.jproj)
    d_xc[:, 2] += d_z_blend
    x, y, z = proj.xc[:, 0], proj.xc[:, 1], proj.xc[:, 2]
    inv_z2 = 1.0 / (z * z)
    inv_z3 = inv_z2 / z
    fx = proj.jproj[:, 0, 0] * z  # recover fx, fy without carrying intr around
    fy = proj.jproj[:, 1, 1] * z
    d_xc[:, 0] += d_j[:, 0, 2] * (-fx * inv_z2)
    d_xc[:, 1] += d_j[:, 1, 2] * (-fy * inv_z2)
    d_xc[:, 2] += (
        d_j[:, 0, 0] * (-fx * inv_z2)
        + d_j[:, 0, 2] * (2.0 * fx * x * inv_z3)
        + d_j[:, 1, 1] * (-fy * inv_z2)
        + d_j[:, 1, 2] * (2.0 * fy * y * inv_z3)
    )
    d_mu_world = d_xc @ r_cw

    d_logit = d_alpha_g * proj.alpha * (1.0 - proj.alpha)

    idx = proj.idx
    np.add.at(bundle.d_mu, idx, d_mu_world)
    np.add.at(bundle.d_log_scales, idx, bundle_ds)
    np.add.at(bundle.d_rotations, idx, d_quat)
    np.add.at(bundle.d_opacity_logits, idx, d_logit)
    np.add.at(bundle.d_grays, idx, d_color)
    np.add.at(bundle.d_mu2d, idx, d_mu2d)
    np.add.at(bundle.absgs, idx, absgs)
    np.logical_or.at(bundle.touched, idx, touched)
    return bundle


def _suffix_sum(arr):
    """suffix[k] = sum of arr[k+1:] along the last axis."""
    out = np.zeros_like(arr)
    out[:, :-1] = np.cumsum(arr[:, :0:-1], axis=1)[:, ::-1]
    return out


# ---------------------------------------------------------------------------
# loss


def _ssim_kernel():
    half = (SSIM_WINDOW - 1) / 2.0
    g = np.exp(-((np.arange(SSIM_WINDOW) - half) ** 2) / (2.0 * SSIM_SIGMA**2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(img, ref):
    """Mean SSIM over fully valid 11x11 windows, sigma 1.5, [0,1] range."""
    return _ssim_fields(img, ref)[0]


def _ssim_fields(img, ref):
    if img.shape != ref.shape:
        raise ContractViolation("SSIM inputs must share a shape")
    if img.shape[0] < SSIM_WINDOW or img.shape[1] < SSIM_WINDOW:
        raise ContractViolation("image smaller than the SSIM window")
    k = _ssim_kernel()
    mu_x = convolve2d(img, k, mode="valid")
    mu_y = convolve2d(ref, k, mode="valid")
    sxx = convolve2d(img * img, k, mode="valid")
    syy = convolve2d(ref * ref, k, mode="valid")
    sxy = convolve2d(img * ref, k, mode="valid")
    var_x = sxx - mu_x * mu_x
    var_y = syy - mu_y * mu_y
    cov = sxy - mu_x * mu_y
    a1 = 2.0 * mu_x * mu_y + SSIM_C1
    a2 = 2.0 * cov + SSIM_C2
    b1 = mu_x * mu_x + mu_y * mu_y + SSIM_C1
    b2 = var_x + var_y + SSIM_C2
    smap = (a1 * a2) / (b1 * b2)
    return float(smap.mean()), (k, mu_x, mu_y, a1, a2, b1, b2, smap)


def ssim_and_gradient(img, ref):
    """(mean SSIM, d(mean SSIM)/d(img)) with the same window convention."""
    value, (k, mu_x, mu_y, a1, a2, b1, b2, smap) = _ssim_fields(img, ref)
    n = smap.size
    d_mu = (2.0 * mu_y * (a2 - a1) / (b1 * b2) - 2.0 * mu_x * smap * (1.0 / b1 - 1.0 / b2)) / n
    d_sxx = (-smap / b2) / n
    d_sxy = (2.0 * a1 / (b1 * b2)) / n
    grad = (
        convolve2d(d_mu, k, mode="full")
        + 2.0 * img * convolve2d(d_sxx, k, mode="full")
        + ref * convolve2d(d_sxy, k, mode="full")
    )
    return value, grad


def combine_loss(l_c, l_ssim, l_d, alpha=0.2, beta=0.2):
    """Weighted photometric + structural + depth objective.

    (1 - alpha) * l_c is evaluated distributed so reference weightings
    round exactly (0.8 * 0.1 alone already carries a spurious ulp).
    """
    return l_c - alpha * l_c + alpha * l_ssim + beta * l_d


def loss(render_out, target, proxy, alpha=0.2, beta=0.2):
    """Scalar mapping loss and its per-pixel gradients.

    Returns (value, d/d(intensity), d/d(depth)). The depth term compares the
    blended depth against the proxy only where rendered alpha > 0.5; the mask
    is treated as a constant gate, not differentiated.
    """
    img = render_out.intensity
    if img.shape != target.shape:
        raise ContractViolation("rendered and target image shapes differ")
    if proxy.full.shape != img.shape:
        raise ContractViolation("proxy full view does not match the image")
    n = img.size
    diff = img - target
    l_c = float(np.abs(diff).mean())
    d_c = np.sign(diff) / n
    ssim_val, ssim_grad = ssim_and_gradient(img, target)
    l_ssim = 1.0 - ssim_val
    covered = render_out.alpha > 0.5
    if covered.any():
        d_diff = render_out.depth - proxy.full
        l_d = float(np.abs(d_diff[covered]).mean())
        d_depth = np.where(covered, np.sign(d_diff), 0.0) / covered.sum()
    else:
        l_d = 0.0
        d_depth = np.zeros_like(img)
    value = combine_loss(l_c, l_ssim, l_d, alpha, beta)
    d_intensity = (1.0 - alpha) * d_c - alpha * ssim_grad
    return value, d_intensity, beta * d_depth


# ---------------------------------------------------------------------------
# mapping optimizer


@dataclass
class MappingConfig:
    lr_position_scale: float = 1.6e-4  # multiplied by the scene extent
    lr_log_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_opacity: float = 5e-2
    lr_gray: float = 2.5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    loss_alpha: float = 0.2
    loss_beta: float = 0.2
    densify: DensifyConfig = field(default_factory=DensifyConfig)
    densify_enabled: bool = True


class WindowFrame:
    """One mapping supervision view."""

    __slots__ = ("kf_id", "pose", "image", "proxy")

    def __init__(self, kf_id, pose, image, proxy):
        self.kf_id = int(kf_id)
        self.pose = pose
        self.image = image
        self.proxy = proxy


_PARAM_GROUPS = ("mu", "log_scales", "rotations", "opacity_logits", "grays")


class MapOptimizer:
    """Adam over the Gaussian parameter groups, resilient to map reindexing."""

    def __init__(self, gmap, cfg, extent):
        self.cfg = cfg
        self.lrs = {
            "mu": cfg.lr_position_scale * max(extent, 1e-12),
            "log_scales": cfg.lr_log_scale,
            "rotations": cfg.lr_rotation,
            "opacity_logits": cfg.lr_opacity,
            "grays": cfg.lr_gray,
        }
        self.t = 0
        self.m = {g: np.zeros_like(getattr(gmap, g)) for g in _PARAM_GROUPS}
        self.v = {g: np.zeros_like(getattr(gmap, g)) for g in _PARAM_GROUPS}

    def step(self, gmap, bundle):
        self.t += 1
        b1, b2 = self.cfg.beta1, self.cfg.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for group in _PARAM_GROUPS:
            grad = getattr(bundle, "d_" + group)
            m = self.m[group]
            v = self.v[group]
            m *= b1
            m += (1 - b1) * grad
            v *= b2
            v += (1 - b2) * grad * grad
            param = getattr(gmap, group)
            param -= self.lrs[group] * (m / c1) / (np.sqrt(v / c2) + self.cfg.eps)
        np.clip(gmap.grays, 0.0, 1.0, out=gmap.grays)  # intensities live in [0,1]
        gmap.revision += 1

    def remap(self, kept, added):
        for group in _PARAM_GROUPS:
            pad = np.zeros((added,) + self.m[group].shape[1:])
            self.m[group] = np.concatenate([self.m[group][kept], pad])
            self.v[group] = np.concatenate([self.v[group][kept], pad])


def optimize_map(gmap, window, intr, iterations, cfg=None, extent=None):
    """Round-robin mapping iterations over the supervision window.

    Poses stay frozen; only Gaussian parameters move. Densify and prune run
    on the configured interval. Returns the per-iteration loss values.
    """
    if not window:
        raise ContractViolation("mapping window is empty")
    cfg = cfg or MappingConfig()
    if extent is None:
        extent = gmap.extent()
    opt = MapOptimizer(gmap, cfg, extent)
    newest_kf = max(frame.kf_id for frame in window)
    losses = []
    for it in range(iterations):
        frame = window[it % len(window)]
        out = render(gmap, frame.pose, intr)
        value, d_i, d_d = loss(out, frame.image, frame.proxy, cfg.loss_alpha, cfg.loss_beta)
        bundle = backward(gmap, out.tape, d_i, d_d)
        gmap.record_observations(frame.kf_id, bundle.touched)
        gmap.accumulate_gradients(bundle.absgs, bundle.touched)
        opt.step(gmap, bundle)
        losses.append(value)
        if cfg.densify_enabled and (it + 1) % cfg.densify.interval == 0:
            dres = gmap.densify(cfg.densify)
            opt.remap(dres.kept, dres.added)
            pres = gmap.prune(cfg.densify, newest_kf)
            opt.remap(pres.kept, 0)
    return losses
