"""Numba kernels for the Joseph fan-beam projector pair.

Both kernels walk the same rays with the same interpolation weights, so the
back projection is the exact transpose of the forward projection. Loops run
serially so the scatter in the back projection is bit-reproducible.

Along the driving axis the interpolation coordinate is affine in the loop
index, ``f = f0 + df * i``; only the indices whose two neighbours can touch
the grid are visited.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True, inline="always")
def _ray_setup(sx, sy, ex, ey, pixel_size, cx, cy, n_drive, n_other):
    """Affine coordinate ``f0 + df * i``, step length and visited index range of one ray."""
    if abs(ex) >= abs(ey):
        slope = ey / ex
        # row coordinate at column c: cy - (sy + ((c - cx) ps - sx) slope) / ps
        f0 = cy - (sy + (-cx * pixel_size - sx) * slope) / pixel_size
        df = -slope
    else:
        slope = ex / ey
        # column coordinate at row r: cx + (sx + ((cy - r) ps - sy) slope) / ps
        f0 = cx + (sx + (cy * pixel_size - sy) * slope) / pixel_size
        df = -slope
    step = pixel_size * math.sqrt(1.0 + slope * slope)
    # indices i where -1 < f0 + df * i < n_other
    if df == 0.0:
        if -1.0 < f0 < n_other:
            lo, hi = 0, n_drive
        else:
            lo, hi = 0, 0
    else:
        a = (-1.0 - f0) / df
        b = (n_other - f0) / df
        if a > b:
            a, b = b, a
        lo = max(0, int(math.floor(a)))
        hi = min(n_drive, int(math.ceil(b)) + 1)
    return f0, df, step, lo, hi


@njit(cache=True)
def joseph_forward(img, pixel_size, src_x, src_y, det_x, det_y, out):
    height, width = img.shape
    num_views, num_bins = out.shape
    cx = 0.5 * (width - 1)
    cy = 0.5 * (height - 1)
    for v in range(num_views):
        for b in range(num_bins):
            sx = src_x[v, b]
            sy = src_y[v, b]
            ex = det_x[v, b] - sx
            ey = det_y[v, b] - sy
            acc = 0.0
            if abs(ex) >= abs(ey):
                f0, df, step, lo, hi = _ray_setup(sx, sy, ex, ey, pixel_size, cx, cy, width, height)
                for c in range(lo, hi):
                    rf = f0 + df * c
                    r0 = int(math.floor(rf))
                    w1 = rf - r0
                    if 0 <= r0 < height:
                        acc += (1.0 - w1) * img[r0, c]
                    if 0 <= r0 + 1 < height:
                        acc += w1 * img[r0 + 1, c]
            else:
                f0, df, step, lo, hi = _ray_setup(sx, sy, ex, ey, pixel_size, cx, cy, height, width)
                for r in range(lo, hi):
                    cf = f0 + df * r
                    c0 = int(math.floor(cf))
                    w1 = cf - c0
                    if 0 <= c0 < width:
                        acc += (1.0 - w1) * img[r, c0]
                    if 0 <= c0 + 1 < width:
                        acc += w1 * img[r, c0 + 1]
            out[v, b] = acc * step
    return out


@njit(cache=True)
def joseph_back(sino, pixel_size, src_x, src_y, det_x, det_y, out):
    height, width = out.shape
    num_views, num_bins = sino.shape
    cx = 0.5 * (width - 1)
    cy = 0.5 * (height - 1)
    for v in range(num_views):
        for b in range(num_bins):
            val = sino[v, b]
            if val == 0.0:
                continue
            sx = src_x[v, b]
            sy = src_y[v, b]
            ex = det_x[v, b] - sx
            ey = det_y[v, b] - sy
            if abs(ex) >= abs(ey):
                f0, df, step, lo, hi = _ray_setup(sx, sy, ex, ey, pixel_size, cx, cy, width, height)
                sv = val * step
                for c in range(lo, hi):
                    rf = f0 + df * c
                    r0 = int(math.floor(rf))
                    w1 = rf - r0
                    if 0 <= r0 < height:
                        out[r0, c] += sv * (1.0 - w1)
                    if 0 <= r0 + 1 < height:
                        out[r0 + 1, c] += sv * w1
            else:
                f0, df, step, lo, hi = _ray_setup(sx, sy, ex, ey, pixel_size, cx, cy, height, width)
                sv = val * step
                for r in range(lo, hi):
                    cf = f0 + df * r
                    c0 = int(math.floor(cf))
                    w1 = cf - c0
                    if 0 <= c0 < width:
                        out[r, c0] += sv * (1.0 - w1)
                    if 0 <= c0 + 1 < width:
                        out[r, c0 + 1] += sv * w1
    return out


def warmup():
    """Compile both kernels on a tiny problem."""
    img = np.zeros((2, 2))
    s = np.zeros((1, 1))
    joseph_forward(img, 1.0, s + 10.0, s, s - 10.0, s + 0.1, np.zeros((1, 1)))
    joseph_back(s + 1.0, 1.0, s + 10.0, s, s - 10.0, s + 0.1, np.zeros((2, 2)))
