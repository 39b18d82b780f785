"""Tone mapping of high-bit-depth thermal raws into [0, 1] grayscale.

Two methods:
  fieldscale     local min/max percentile fields on a coarse grid, smoothed and
                 bilinearly interpolated, then a per-pixel affine stretch
  naive_rescale  global 1-99 percentile rescale followed by 256-bin histogram
                 equalization (piecewise-linear interpolated cdf)

Both are invariant to a global shift of the raw counts and map any constant
image to 0.5.
"""

import numpy as np

from .errors import ContractViolation

GRID = (8, 8)
PERCENTILES = (1.0, 99.0)
SMOOTH_PASSES = 10
_MIN_SPAN = 1.0  # counts; spans below this are degenerate


def _cell_slices(n, cells):
    """Start/stop pairs partitioning range(n) into `cells` near-equal runs."""
    bounds = np.linspace(0, n, cells + 1).round().astype(int)
    return [(bounds[i], bounds[i + 1]) for i in range(cells)]


def _smooth_field(field, passes):
    # repeated 4-neighbor averaging with replicated borders
    for _ in range(passes):
        p = np.pad(field, 1, mode="edge")
        field = (p[1:-1, 1:-1] + p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:]) / 5.0
    return field


def _bilinear_from_grid(field, centers_r, centers_c, height, width):
    """Evaluate a cell-grid field at every pixel, clamped past outer centers."""
    rows = np.arange(height, dtype=np.float64)
    cols = np.arange(width, dtype=np.float64)

    def axis_weights(coords, centers):
        idx = np.searchsorted(centers, coords) - 1
        idx = np.clip(idx, 0, len(centers) - 2)
        denom = centers[idx + 1] - centers[idx]
        w = (coords - centers[idx]) / denom
        return idx, np.clip(w, 0.0, 1.0)

    ri, rw = axis_weights(rows, centers_r)
    ci, cw = axis_weights(cols, centers_c)
    f00 = field[np.ix_(ri, ci)]
    f01 = field[np.ix_(ri, ci + 1)]
    f10 = field[np.ix_(ri + 1, ci)]
    f11 = field[np.ix_(ri + 1, ci + 1)]
    rw = rw[:, None]
    cw = cw[None, :]
    return (
        f00 * (1 - rw) * (1 - cw)
        + f01 * (1 - rw) * cw
        + f10 * rw * (1 - cw)
        + f11 * rw * cw
    )


def fieldscale_fields(raw, grid=GRID, percentiles=PERCENTILES, passes=SMOOTH_PASSES):
    """Per-pixel (min_field, max_field) used by fieldscale.

    Returns None when the whole image is degenerate (constant).
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2:
        raise ContractViolation("expected a 2-D raw image")
    gh, gw = grid
    h, w = raw.shape
    if h < gh or w < gw:
        raise ContractViolation("image smaller than the field grid")

    glo, ghi = np.percentile(raw, percentiles)
    if ghi - glo < _MIN_SPAN:
        glo, ghi = raw.min(), raw.max()
        if ghi - glo < _MIN_SPAN:
            return None

    row_sl = _cell_slices(h, gh)
    col_sl = _cell_slices(w, gw)
    fmin = np.empty((gh, gw))
    fmax = np.empty((gh, gw))
    for i, (r0, r1) in enumerate(row_sl):
        for j, (c0, c1) in enumerate(col_sl):
            lo, hi = np.percentile(raw[r0:r1, c0:c1], percentiles)
            if hi - lo < _MIN_SPAN:
                lo, hi = glo, ghi  # degenerate cell: global range
            fmin[i, j], fmax[i, j] = lo, hi

    fmin = _smooth_field(fmin, passes)
    fmax = _smooth_field(fmax, passes)

    centers_r = np.array([(r0 + r1 - 1) / 2.0 for r0, r1 in row_sl])
    centers_c = np.array([(c0 + c1 - 1) / 2.0 for c0, c1 in col_sl])
    pix_min = _bilinear_from_grid(fmin, centers_r, centers_c, h, w)
    pix_max = _bilinear_from_grid(fmax, centers_r, centers_c, h, w)
    return pix_min, pix_max


def fieldscale(raw, grid=GRID, percentiles=PERCENTILES, passes=SMOOTH_PASSES):
    """Locally adaptive stretch of a thermal raw into [0, 1]."""
    raw = np.asarray(raw, dtype=np.float64)
    fields = fieldscale_fields(raw, grid, percentiles, passes)
    if fields is None:
        return np.full(raw.shape, 0.5)
    pix_min, pix_max = fields
    span = np.maximum(pix_max - pix_min, _MIN_SPAN)
    return np.clip((raw - pix_min) / span, 0.0, 1.0)


def naive_rescale(raw, percentiles=PERCENTILES, bins=256):
    """Global percentile rescale + histogram equalization into [0, 1]."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2:
        raise ContractViolation("expected a 2-D raw image")

    lo, hi = np.percentile(raw, percentiles)
    if hi - lo < _MIN_SPAN:
        lo, hi = raw.min(), raw.max()
        if hi - lo < _MIN_SPAN:
            return np.full(raw.shape, 0.5)
    x = (raw - lo) / (hi - lo)

    xmin, xmax = x.min(), x.max()
    if xmax - xmin <= 0:
        return np.full(raw.shape, 0.5)
    hist, edges = np.histogram(x, bins=bins, range=(xmin, xmax))
    cdf = np.concatenate([[0.0], np.cumsum(hist)]) / x.size
    return np.interp(x, edges, cdf)
