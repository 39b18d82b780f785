"""Dense proxy depth for map supervision.

Refined odometry depth is trustworthy only at the multi-view-consistent
pixels; everywhere else the affine-aligned mono prior fills in. The fusion
runs in the inverse-depth domain and the fused grid is upsampled to image
resolution so the renderer can compare against it per pixel.
"""

import numpy as np

from .dso import affine_init
from .errors import DegenerateConfigurationError
from .geometry import INV_DEPTH_MAX, INV_DEPTH_MIN

PROV_ODOMETRY = 0
PROV_MONO = 1

UPSAMPLE = 8  # grid cell (r, c) sits at full-resolution pixel (8c+3.5, 8r+3.5)


class ProxyDepthMap:
    """Fused inverse depth at grid and image resolution with provenance."""

    __slots__ = ("grid", "provenance", "full", "full_provenance")

    def __init__(self, grid, provenance, full, full_provenance):
        self.grid = grid
        self.provenance = provenance  # PROV_* per grid cell
        self.full = full
        self.full_provenance = full_provenance


def fit_proxy_affine(d_hat, mono, low_mask):
    """Align the inverse mono prior to refined inverse depth over low pixels."""
    low_mask = np.asarray(low_mask, dtype=bool)
    if low_mask.sum() < 2:
        raise DegenerateConfigurationError("proxy affine fit needs >= 2 low-error pixels")
    return affine_init(d_hat[low_mask], mono.values[low_mask])


def fuse(d_hat, mono, theta, gamma, mask, full_shape=None):
    """Combine refined depth and the aligned prior into a dense proxy map.

    Low-error pixels keep the refined inverse depth; high-error and invalid
    pixels take theta / D_mono + gamma. mask is a PixelClassMask; full_shape
    defaults to 8x the grid.
    """
    d_hat = np.asarray(d_hat, dtype=np.float64)
    prior = theta / mono.values + gamma
    grid = np.where(mask.low, d_hat, prior)
    grid = np.clip(grid, INV_DEPTH_MIN, INV_DEPTH_MAX)
    provenance = np.where(mask.low, PROV_ODOMETRY, PROV_MONO).astype(np.uint8)
    if full_shape is None:
        full_shape = (grid.shape[0] * UPSAMPLE, grid.shape[1] * UPSAMPLE)
    full, full_prov = _upsample(grid, provenance, full_shape)
    # blending can round a hair past the bounds; the invariant covers both views
    full = np.clip(full, INV_DEPTH_MIN, INV_DEPTH_MAX)
    return ProxyDepthMap(grid, provenance, full, full_prov)


def _upsample(grid, provenance, full_shape):
    """Bilinear upsample, falling back to the nearest cell across seams.

    Blending across an odometry/mono boundary would invent depths belonging
    to neither source, so pixels whose four support cells disagree on
    provenance copy the nearest cell instead.
    """
    hg, wg = grid.shape
    h, w = full_shape
    u = np.arange(w, dtype=np.float64)
    v = np.arange(h, dtype=np.float64)
    gc = np.clip((u - (UPSAMPLE - 1) / 2.0) / UPSAMPLE, 0.0, wg - 1.0)
    gr = np.clip((v - (UPSAMPLE - 1) / 2.0) / UPSAMPLE, 0.0, hg - 1.0)
    gc, gr = np.meshgrid(gc, gr)
    c0 = np.clip(np.floor(gc).astype(int), 0, max(wg - 2, 0))
    r0 = np.clip(np.floor(gr).astype(int), 0, max(hg - 2, 0))
    fc = gc - c0
    fr = gr - r0
    c1 = np.minimum(c0 + 1, wg - 1)
    r1 = np.minimum(r0 + 1, hg - 1)
    blended = (
        grid[r0, c0] * (1 - fc) * (1 - fr)
        + grid[r0, c1] * fc * (1 - fr)
        + grid[r1, c0] * (1 - fc) * fr
        + grid[r1, c1] * fc * fr
    )
    same = (
        (provenance[r0, c0] == provenance[r0, c1])
        & (provenance[r0, c0] == provenance[r1, c0])
        & (provenance[r0, c0] == provenance[r1, c1])
    )
    rn = np.clip(np.rint(gr).astype(int), 0, hg - 1)
    cn = np.clip(np.rint(gc).astype(int), 0, wg - 1)
    full = np.where(same, blended, grid[rn, cn])
    return full, provenance[rn, cn]
