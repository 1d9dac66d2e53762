# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled per-pixel kernels. See ``_kernels_py`` for the reference semantics."""
from libc.math cimport floor, ceil, sqrt

import numpy as np


cdef inline double _min4(double a, double b, double c, double d) nogil:
    cdef double m = a
    if b < m:
        m = b
    if c < m:
        m = c
    if d < m:
        m = d
    return m


cdef inline double _max4(double a, double b, double c, double d) nogil:
    cdef double m = a
    if b > m:
        m = b
    if c > m:
        m = c
    if d > m:
        m = d
    return m


def stroke_polyline(unsigned char[:, ::1] mask, xs, ys, double width):
    cdef double[::1] px = np.ascontiguousarray(xs, dtype=np.float64)
    cdef double[::1] py = np.ascontiguousarray(ys, dtype=np.float64)
    cdef Py_ssize_t h = mask.shape[0], w = mask.shape[1]
    cdef Py_ssize_t n = px.shape[0]
    cdef double hw = 0.5 * width
    cdef double r2 = hw * hw
    cdef double ax, ay, bx, by, dx, dy, length, ux, uy, nx, ny
    cdef double rx, ry, t, s, vx, vy, lo, hi, c0, c1
    cdef Py_ssize_t k, i, j, j0, j1, x0, x1, y0, y1
    with nogil:
        for k in range(n - 1):
            ax = px[k]
            ay = py[k]
            bx = px[k + 1]
            by = py[k + 1]
            dx = bx - ax
            dy = by - ay
            length = sqrt(dx * dx + dy * dy)
            if length == 0.0:
                continue
            ux = dx / length
            uy = dy / length
            nx = -uy * hw
            ny = ux * hw
            x0 = <Py_ssize_t>floor(_min4(ax + nx, ax - nx, bx + nx, bx - nx))
            x1 = <Py_ssize_t>ceil(_max4(ax + nx, ax - nx, bx + nx, bx - nx))
            y0 = <Py_ssize_t>floor(_min4(ay + ny, ay - ny, by + ny, by - ny))
            y1 = <Py_ssize_t>ceil(_max4(ay + ny, ay - ny, by + ny, by - ny))
            if x0 < 0:
                x0 = 0
            if y0 < 0:
                y0 = 0
            if x1 > w - 1:
                x1 = w - 1
            if y1 > h - 1:
                y1 = h - 1
            for i in range(y0, y1 + 1):
                ry = <double>i - ay
                # conservative column span of this row; the exact test below decides
                lo = -1e300
                hi = 1e300
                if ux > 1e-12:
                    lo = (-ry * uy) / ux
                    hi = (length - ry * uy) / ux
                elif ux < -1e-12:
                    lo = (length - ry * uy) / ux
                    hi = (-ry * uy) / ux
                if uy > 1e-12:
                    c0 = (ry * ux - hw) / uy
                    c1 = (ry * ux + hw) / uy
                    lo = c0 if c0 > lo else lo
                    hi = c1 if c1 < hi else hi
                elif uy < -1e-12:
                    c0 = (ry * ux + hw) / uy
                    c1 = (ry * ux - hw) / uy
                    lo = c0 if c0 > lo else lo
                    hi = c1 if c1 < hi else hi
                if hi < lo - 2.0:
                    continue
                j0 = x0
                j1 = x1
                if lo + ax - 2.0 > j0:
                    j0 = <Py_ssize_t>floor(lo + ax - 2.0)
                if hi + ax + 2.0 < j1:
                    j1 = <Py_ssize_t>ceil(hi + ax + 2.0)
                for j in range(j0, j1 + 1):
                    rx = <double>j - ax
                    t = rx * ux + ry * uy
                    s = ry * ux - rx * uy
                    if t >= 0.0 and t < length and s >= -hw and s < hw:
                        mask[i, j] = 1
        for k in range(1, n - 1):
            vx = px[k]
            vy = py[k]
            x0 = <Py_ssize_t>floor(vx - hw)
            x1 = <Py_ssize_t>ceil(vx + hw)
            y0 = <Py_ssize_t>floor(vy - hw)
            y1 = <Py_ssize_t>ceil(vy + hw)
            if x0 < 0:
                x0 = 0
            if y0 < 0:
                y0 = 0
            if x1 > w - 1:
                x1 = w - 1
            if y1 > h - 1:
                y1 = h - 1
            for i in range(y0, y1 + 1):
                ry = <double>i - vy
                for j in range(x0, x1 + 1):
                    rx = <double>j - vx
                    if rx * rx + ry * ry < r2:
                        mask[i, j] = 1


def iou_counts(pred, gt):
    cdef const unsigned char[::1] p = np.ascontiguousarray(pred, dtype=np.uint8).ravel()
    cdef const unsigned char[::1] g = np.ascontiguousarray(gt, dtype=np.uint8).ravel()
    cdef Py_ssize_t n = p.shape[0], k
    cdef long long inter = 0, union_ = 0, n_eval = 0, n_bad = 0
    cdef unsigned char a, b
    cdef int valid, pa, gb
    if g.shape[0] != n:
        raise ValueError("pred and gt sizes differ")
    with nogil:
        # branch-free so the loop vectorizes
        for k in range(n):
            a = p[k]
            b = g[k]
            valid = b != 255
            pa = a == 1
            gb = b == 1
            n_bad += a > 1
            n_eval += valid
            union_ += valid & (pa | gb)
            inter += pa & gb
    return int(inter), int(union_), int(n_eval), int(n_bad)
