"""Marching-squares zero contours on a rectilinear grid and their crossings.

Segments are kept cell-local, so crossings between two contour families are
found by testing only segment pairs that share a grid cell.
"""

from __future__ import annotations

from collections import defaultdict

import numpy as np

__all__ = ["marching_squares", "contour_intersections"]


def _edge_point(x, y, f, a, b):
    (ia, ja), (ib, jb) = a, b
    fa, fb = f[ia, ja], f[ib, jb]
    t = fa / (fa - fb)
    return (x[ia] + t * (x[ib] - x[ia]), y[ja] + t * (y[jb] - y[ja]))


def marching_squares(x, y, f, level=0.0):
    """Zero-level contour segments of ``f`` sampled on ``x`` (rows) by ``y`` (columns).

    Returns a dict mapping cell index (i, j) to a list of segments
    ((x0, y0), (x1, y1)). Cells with a NaN corner are skipped; the ambiguous
    saddle case is resolved with the cell-centre average.
    """
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    f = np.asarray(f, float) - level
    out = defaultdict(list)
    quad = np.stack([f[:-1, :-1], f[1:, :-1], f[1:, 1:], f[:-1, 1:]])
    npos = (quad > 0).sum(axis=0)
    mixed = np.all(np.isfinite(quad), axis=0) & (npos > 0) & (npos < 4)
    for i, j in np.argwhere(mixed):
        i, j = int(i), int(j)
        c = (f[i, j], f[i + 1, j], f[i + 1, j + 1], f[i, j + 1])
        corners = ((i, j), (i + 1, j), (i + 1, j + 1), (i, j + 1))
        pos = [v > 0 for v in c]
        crossings = []
        for k in range(4):
            a, b = corners[k], corners[(k + 1) % 4]
            if pos[k] != pos[(k + 1) % 4]:
                crossings.append((k, _edge_point(x, y, f, a, b)))
        if len(crossings) == 2:
            out[i, j].append((crossings[0][1], crossings[1][1]))
        elif len(crossings) == 4:
            centre = sum(c) / 4.0
            pts = [p for _, p in crossings]
            # pair edges so the positive region is connected iff the centre is positive
            if (centre > 0) == pos[0]:
                out[i, j].extend([(pts[0], pts[1]), (pts[2], pts[3])])
            else:
                out[i, j].extend([(pts[3], pts[0]), (pts[1], pts[2])])
    return dict(out)


def _segment_cross(p, q):
    (x1, y1), (x2, y2) = p
    (x3, y3), (x4, y4) = q
    d = (x2 - x1) * (y4 - y3) - (y2 - y1) * (x4 - x3)
    if d == 0:
        return None
    t = ((x3 - x1) * (y4 - y3) - (y3 - y1) * (x4 - x3)) / d
    s = ((x3 - x1) * (y2 - y1) - (y3 - y1) * (x2 - x1)) / d
    eps = 1e-12
    if -eps <= t <= 1 + eps and -eps <= s <= 1 + eps:
        return (x1 + t * (x2 - x1), y1 + t * (y2 - y1))
    return None


def contour_intersections(segs_a, segs_b):
    """Crossing points between two cell-keyed segment collections.

    Returns a list of ((x, y), cell) tuples.
    """
    hits = []
    for cell in segs_a.keys() & segs_b.keys():
        for p in segs_a[cell]:
            for q in segs_b[cell]:
                pt = _segment_cross(p, q)
                if pt is not None:
                    hits.append((pt, cell))
    return hits
