"""Pure numpy implementations of the per-pixel kernels.

These mirror ``_kernels.pyx`` operation for operation (same float64 formulas in
the same order) so both backends produce bit-identical masks.
"""
import math

import numpy as np


def stroke_polyline(mask, xs, ys, width):
    """Union a stroked polyline into ``mask`` (uint8, modified in place).

    Pixel ``(i, j)`` has its center at ``x=j, y=i``. A segment a->b covers the
    centers with ``0 <= t < L`` along the segment and ``-w/2 <= s < w/2``
    across it (flat ends). Interior vertices get a disc of radius ``w/2``.
    """
    h, w = mask.shape
    hw = 0.5 * width
    n = len(xs)
    for k in range(n - 1):
        ax, ay, bx, by = float(xs[k]), float(ys[k]), float(xs[k + 1]), float(ys[k + 1])
        dx = bx - ax
        dy = by - ay
        length = math.sqrt(dx * dx + dy * dy)
        if length == 0.0:
            continue
        ux = dx / length
        uy = dy / length
        nx = -uy * hw
        ny = ux * hw
        x0 = max(int(math.floor(min(ax + nx, ax - nx, bx + nx, bx - nx))), 0)
        x1 = min(int(math.ceil(max(ax + nx, ax - nx, bx + nx, bx - nx))), w - 1)
        y0 = max(int(math.floor(min(ay + ny, ay - ny, by + ny, by - ny))), 0)
        y1 = min(int(math.ceil(max(ay + ny, ay - ny, by + ny, by - ny))), h - 1)
        if x0 > x1 or y0 > y1:
            continue
        rx = np.arange(x0, x1 + 1, dtype=np.float64)[None, :] - ax
        ry = np.arange(y0, y1 + 1, dtype=np.float64)[:, None] - ay
        t = rx * ux + ry * uy
        s = ry * ux - rx * uy
        inside = (t >= 0.0) & (t < length) & (s >= -hw) & (s < hw)
        mask[y0:y1 + 1, x0:x1 + 1][inside] = 1
    r2 = hw * hw
    for k in range(1, n - 1):
        vx, vy = float(xs[k]), float(ys[k])
        x0 = max(int(math.floor(vx - hw)), 0)
        x1 = min(int(math.ceil(vx + hw)), w - 1)
        y0 = max(int(math.floor(vy - hw)), 0)
        y1 = min(int(math.ceil(vy + hw)), h - 1)
        if x0 > x1 or y0 > y1:
            continue
        ddx = np.arange(x0, x1 + 1, dtype=np.float64)[None, :] - vx
        ddy = np.arange(y0, y1 + 1, dtype=np.float64)[:, None] - vy
        inside = ddx * ddx + ddy * ddy < r2
        mask[y0:y1 + 1, x0:x1 + 1][inside] = 1


def iou_counts(pred, gt):
    """Return ``(intersection, union, n_eval, n_bad_pred)`` for the road class."""
    valid = gt != 255
    p = pred == 1
    g = gt == 1
    inter = int(np.count_nonzero(p & g))
    union = int(np.count_nonzero((p | g) & valid))
    n_eval = int(np.count_nonzero(valid))
    n_bad = int(np.count_nonzero(pred > 1))
    return inter, union, n_eval, n_bad
