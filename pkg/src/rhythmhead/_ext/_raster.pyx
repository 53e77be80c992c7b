# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled per-(pixel, face) kernels for soft and hard rasterization.

Screen space: vertex (u, v) in pixels, pixel (x, y) has its center at
(x + 0.5, y + 0.5); depth z grows away from the camera.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport ceil, floor, sqrt

cnp.import_array()

# squared-distance / sigma beyond which an outside pixel's edge probability is < 1e-8
DEF CULL = 18.420680743952367


cdef inline double _cross(double ax, double ay, double bx, double by) noexcept nogil:
    return ax * by - ay * bx


cdef inline double _seg_d2(double px, double py, double ax, double ay, double bx, double by, double* t_out) noexcept nogil:
    cdef double ex = bx - ax
    cdef double ey = by - ay
    cdef double l2 = ex * ex + ey * ey
    cdef double t = 0.0
    cdef double qx, qy
    if l2 > 0.0:
        t = ((px - ax) * ex + (py - ay) * ey) / l2
    if t < 0.0:
        t = 0.0
    elif t > 1.0:
        t = 1.0
    qx = px - (ax + t * ex)
    qy = py - (ay + t * ey)
    t_out[0] = t
    return qx * qx + qy * qy


cdef inline void _bbox(double lo, double hi, double margin, int n, int* a, int* b) noexcept nogil:
    a[0] = <int>ceil(lo - margin - 0.5)
    b[0] = <int>floor(hi + margin - 0.5)
    if a[0] < 0:
        a[0] = 0
    if b[0] > n - 1:
        b[0] = n - 1


def soft_pairs(double[:, ::1] verts, double[:, ::1] colors, cnp.int64_t[:, ::1] faces, int H, int W, double sigma):
    """Enumerate every (pixel, face) pair whose edge probability exceeds 1e-8."""
    cdef Py_ssize_t M = faces.shape[0]
    cdef double margin = sqrt(sigma * CULL)
    cdef Py_ssize_t f, cap = 0, n = 0
    cdef int x0, x1, y0, y1, x, y, k, e, best
    cdef cnp.int64_t i0, i1, i2
    cdef double ax, ay, bx, by, cx, cy, area, px, py, d2, dd, t, tbest, s
    cdef double b[3]
    cdef double c[3]
    cdef double minu, maxu, minv, maxv

    for f in range(M):
        i0 = faces[f, 0]; i1 = faces[f, 1]; i2 = faces[f, 2]
        minu = min(verts[i0, 0], verts[i1, 0], verts[i2, 0]); maxu = max(verts[i0, 0], verts[i1, 0], verts[i2, 0])
        minv = min(verts[i0, 1], verts[i1, 1], verts[i2, 1]); maxv = max(verts[i0, 1], verts[i1, 1], verts[i2, 1])
        _bbox(minu, maxu, margin, W, &x0, &x1)
        _bbox(minv, maxv, margin, H, &y0, &y1)
        if x1 >= x0 and y1 >= y0:
            cap += (x1 - x0 + 1) * (y1 - y0 + 1)

    pix_a = np.empty(cap, dtype=np.int64)
    face_a = np.empty(cap, dtype=np.int64)
    bary_a = np.empty((cap, 3), dtype=np.float64)
    wc_a = np.empty((cap, 3), dtype=np.float64)
    edge_a = np.empty(cap, dtype=np.int64)
    t_a = np.empty(cap, dtype=np.float64)
    d2_a = np.empty(cap, dtype=np.float64)
    inside_a = np.empty(cap, dtype=np.int8)
    z_a = np.empty(cap, dtype=np.float64)
    col_a = np.empty((cap, 3), dtype=np.float64)
    cdef cnp.int64_t[::1] pix = pix_a
    cdef cnp.int64_t[::1] face = face_a
    cdef double[:, ::1] bary = bary_a
    cdef double[:, ::1] wc = wc_a
    cdef cnp.int64_t[::1] edge = edge_a
    cdef double[::1] tt = t_a
    cdef double[::1] dist2 = d2_a
    cdef cnp.int8_t[::1] inside = inside_a
    cdef double[::1] zz = z_a
    cdef double[:, ::1] col = col_a
    cdef cnp.int64_t idx[3]
    cdef double pu[3]
    cdef double pv[3]

    with nogil:
        for f in range(M):
            idx[0] = faces[f, 0]; idx[1] = faces[f, 1]; idx[2] = faces[f, 2]
            for k in range(3):
                pu[k] = verts[idx[k], 0]
                pv[k] = verts[idx[k], 1]
            area = _cross(pu[1] - pu[0], pv[1] - pv[0], pu[2] - pu[0], pv[2] - pv[0])
            if area == 0.0:
                continue
            _bbox(min(pu[0], pu[1], pu[2]), max(pu[0], pu[1], pu[2]), margin, W, &x0, &x1)
            _bbox(min(pv[0], pv[1], pv[2]), max(pv[0], pv[1], pv[2]), margin, H, &y0, &y1)
            for y in range(y0, y1 + 1):
                py = y + 0.5
                for x in range(x0, x1 + 1):
                    px = x + 0.5
                    b[0] = _cross(pu[1] - px, pv[1] - py, pu[2] - px, pv[2] - py) / area
                    b[1] = _cross(pu[2] - px, pv[2] - py, pu[0] - px, pv[0] - py) / area
                    b[2] = _cross(pu[0] - px, pv[0] - py, pu[1] - px, pv[1] - py) / area
                    d2 = _seg_d2(px, py, pu[0], pv[0], pu[1], pv[1], &tbest)
                    best = 0
                    for e in range(1, 3):
                        dd = _seg_d2(px, py, pu[e], pv[e], pu[(e + 1) % 3], pv[(e + 1) % 3], &t)
                        if dd < d2:
                            d2 = dd
                            tbest = t
                            best = e
                    if not (b[0] >= 0.0 and b[1] >= 0.0 and b[2] >= 0.0):
                        if d2 > CULL * sigma:
                            continue
                        inside[n] = 0
                    else:
                        inside[n] = 1
                    s = 0.0
                    for k in range(3):
                        c[k] = b[k]
                        if c[k] < 0.0:
                            c[k] = 0.0
                        elif c[k] > 1.0:
                            c[k] = 1.0
                        s = s + c[k]
                    pix[n] = y * W + x
                    face[n] = f
                    edge[n] = best
                    tt[n] = tbest
                    dist2[n] = d2
                    zz[n] = 0.0
                    col[n, 0] = 0.0; col[n, 1] = 0.0; col[n, 2] = 0.0
                    for k in range(3):
                        bary[n, k] = b[k]
                        wc[n, k] = c[k] / s
                        zz[n] = zz[n] + wc[n, k] * verts[idx[k], 2]
                        col[n, 0] = col[n, 0] + wc[n, k] * colors[idx[k], 0]
                        col[n, 1] = col[n, 1] + wc[n, k] * colors[idx[k], 1]
                        col[n, 2] = col[n, 2] + wc[n, k] * colors[idx[k], 2]
                    n += 1

    return {
        "pix": pix_a[:n], "face": face_a[:n], "bary": bary_a[:n], "wc": wc_a[:n], "edge": edge_a[:n],
        "t": t_a[:n], "d2": d2_a[:n], "inside": inside_a[:n].astype(bool), "z": z_a[:n], "color": col_a[:n],
    }


def soft_pairs_backward(
    double[:, ::1] verts, double[:, ::1] colors, cnp.int64_t[:, ::1] faces, int W,
    cnp.int64_t[::1] pix, cnp.int64_t[::1] face, double[:, ::1] bary, double[:, ::1] wc,
    cnp.int64_t[::1] edge, double[::1] tt,
    double[::1] g_d2, double[::1] g_z, double[:, ::1] g_col,
):
    """Chain per-pair gradients (d2, interpolated z, interpolated color) to vertices and colors."""
    cdef Py_ssize_t P = pix.shape[0]
    gv_a = np.zeros((verts.shape[0], 3), dtype=np.float64)
    gc_a = np.zeros((colors.shape[0], 3), dtype=np.float64)
    cdef double[:, ::1] gv = gv_a
    cdef double[:, ::1] gc = gc_a
    cdef Py_ssize_t n
    cdef int k, m, ch, e0, e1
    cdef cnp.int64_t idx[3]
    cdef double pu[3]
    cdef double pv[3]
    cdef double gw[3]
    cdef double gb[3]
    cdef double dA_du[3][3]
    cdef double dA_dv[3][3]
    cdef double dar_du[3]
    cdef double dar_dv[3]
    cdef double px, py, area, s, dot, t, rx, ry, g, clipped, qx, qy

    with nogil:
        for n in range(P):
            idx[0] = faces[face[n], 0]; idx[1] = faces[face[n], 1]; idx[2] = faces[face[n], 2]
            for k in range(3):
                pu[k] = verts[idx[k], 0]
                pv[k] = verts[idx[k], 1]
            px = (pix[n] % W) + 0.5
            py = (pix[n] // W) + 0.5

            # interpolated depth and color
            for k in range(3):
                gv[idx[k], 2] += wc[n, k] * g_z[n]
                gw[k] = g_z[n] * verts[idx[k], 2]
                for ch in range(3):
                    gc[idx[k], ch] += wc[n, k] * g_col[n, ch]
                    gw[k] += g_col[n, ch] * colors[idx[k], ch]

            # renormalized clipped barycentrics -> raw barycentrics
            s = 0.0
            dot = 0.0
            for k in range(3):
                clipped = bary[n, k]
                if clipped < 0.0:
                    clipped = 0.0
                elif clipped > 1.0:
                    clipped = 1.0
                s += clipped
                dot += gw[k] * wc[n, k]
            for k in range(3):
                if bary[n, k] > 0.0 and bary[n, k] < 1.0:
                    gb[k] = (gw[k] - dot) / s
                else:
                    gb[k] = 0.0

            # raw barycentrics b_k = A_k / area; sub-areas are crosses about the pixel
            area = _cross(pu[1] - pu[0], pv[1] - pv[0], pu[2] - pu[0], pv[2] - pv[0])
            for k in range(3):
                for m in range(3):
                    dA_du[k][m] = 0.0
                    dA_dv[k][m] = 0.0
            for k in range(3):
                e0 = (k + 1) % 3
                e1 = (k + 2) % 3
                # A_k = cross(P_e0 - p, P_e1 - p)
                dA_du[k][e0] = pv[e1] - py
                dA_dv[k][e0] = -(pu[e1] - px)
                dA_du[k][e1] = -(pv[e0] - py)
                dA_dv[k][e1] = pu[e0] - px
            dar_du[1] = pv[2] - pv[0]
            dar_dv[1] = -(pu[2] - pu[0])
            dar_du[2] = -(pv[1] - pv[0])
            dar_dv[2] = pu[1] - pu[0]
            dar_du[0] = -(dar_du[1] + dar_du[2])
            dar_dv[0] = -(dar_dv[1] + dar_dv[2])
            for k in range(3):
                if gb[k] != 0.0:
                    g = gb[k] / area
                    for m in range(3):
                        gv[idx[m], 0] += g * (dA_du[k][m] - bary[n, k] * dar_du[m])
                        gv[idx[m], 1] += g * (dA_dv[k][m] - bary[n, k] * dar_dv[m])

            # squared distance to the closest edge (envelope theorem over the clamp)
            if g_d2[n] != 0.0:
                e0 = <int>edge[n]
                e1 = (e0 + 1) % 3
                t = tt[n]
                qx = pu[e0] + t * (pu[e1] - pu[e0])
                qy = pv[e0] + t * (pv[e1] - pv[e0])
                rx = px - qx
                ry = py - qy
                gv[idx[e0], 0] += g_d2[n] * (-2.0 * rx * (1.0 - t))
                gv[idx[e0], 1] += g_d2[n] * (-2.0 * ry * (1.0 - t))
                gv[idx[e1], 0] += g_d2[n] * (-2.0 * rx * t)
                gv[idx[e1], 1] += g_d2[n] * (-2.0 * ry * t)
    return gv_a, gc_a


def hard_raster(double[:, ::1] verts, cnp.int64_t[:, ::1] faces, int H, int W):
    """Classical z-buffer: nearest covering face per pixel center (ties -> lower face index)."""
    face_a = np.full((H, W), -1, dtype=np.int64)
    bary_a = np.zeros((H, W, 3), dtype=np.float64)
    depth_a = np.full((H, W), np.inf, dtype=np.float64)
    cdef cnp.int64_t[:, ::1] fid = face_a
    cdef double[:, :, ::1] bb = bary_a
    cdef double[:, ::1] depth = depth_a
    cdef Py_ssize_t M = faces.shape[0], f
    cdef int x0, x1, y0, y1, x, y, k
    cdef cnp.int64_t idx[3]
    cdef double pu[3]
    cdef double pv[3]
    cdef double b[3]
    cdef double area, px, py, z
    with nogil:
        for f in range(M):
            idx[0] = faces[f, 0]; idx[1] = faces[f, 1]; idx[2] = faces[f, 2]
            for k in range(3):
                pu[k] = verts[idx[k], 0]
                pv[k] = verts[idx[k], 1]
            area = _cross(pu[1] - pu[0], pv[1] - pv[0], pu[2] - pu[0], pv[2] - pv[0])
            if area == 0.0:
                continue
            _bbox(min(pu[0], pu[1], pu[2]), max(pu[0], pu[1], pu[2]), 0.0, W, &x0, &x1)
            _bbox(min(pv[0], pv[1], pv[2]), max(pv[0], pv[1], pv[2]), 0.0, H, &y0, &y1)
            for y in range(y0, y1 + 1):
                py = y + 0.5
                for x in range(x0, x1 + 1):
                    px = x + 0.5
                    b[0] = _cross(pu[1] - px, pv[1] - py, pu[2] - px, pv[2] - py) / area
                    b[1] = _cross(pu[2] - px, pv[2] - py, pu[0] - px, pv[0] - py) / area
                    b[2] = _cross(pu[0] - px, pv[0] - py, pu[1] - px, pv[1] - py) / area
                    if b[0] < 0.0 or b[1] < 0.0 or b[2] < 0.0:
                        continue
                    z = b[0] * verts[idx[0], 2] + b[1] * verts[idx[1], 2] + b[2] * verts[idx[2], 2]
                    if z < depth[y, x]:
                        depth[y, x] = z
                        fid[y, x] = f
                        bb[y, x, 0] = b[0]; bb[y, x, 1] = b[1]; bb[y, x, 2] = b[2]
    return face_a, bary_a, depth_a
