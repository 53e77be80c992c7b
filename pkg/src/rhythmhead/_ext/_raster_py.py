"""Pure-NumPy twin of the compiled raster kernels (same pairs, same math)."""
from __future__ import annotations

import numpy as np

CULL = 18.420680743952367


def _cross(ax, ay, bx, by):
    return ax * by - ay * bx


def _bbox(lo, hi, margin, n):
    a = np.maximum(np.ceil(lo - margin - 0.5), 0).astype(np.int64)
    b = np.minimum(np.floor(hi + margin - 0.5), n - 1).astype(np.int64)
    return a, b


def _enumerate(verts, faces, H, W, margin):
    """Candidate (pixel, face) pairs from each face's expanded bounding box, in face-major order."""
    pu = verts[faces, 0]
    pv = verts[faces, 1]
    area = _cross(pu[:, 1] - pu[:, 0], pv[:, 1] - pv[:, 0], pu[:, 2] - pu[:, 0], pv[:, 2] - pv[:, 0])
    x0, x1 = _bbox(pu.min(1), pu.max(1), margin, W)
    y0, y1 = _bbox(pv.min(1), pv.max(1), margin, H)
    nx = np.maximum(x1 - x0 + 1, 0)
    ny = np.maximum(y1 - y0 + 1, 0)
    counts = np.where(area != 0.0, nx * ny, 0)
    face = np.repeat(np.arange(len(faces)), counts)
    start = np.repeat(np.cumsum(counts) - counts, counts)
    k = np.arange(face.size) - start
    x = x0[face] + k % np.maximum(nx[face], 1)
    y = y0[face] + k // np.maximum(nx[face], 1)
    return face, x, y, pu[face], pv[face], area[face]


def _barycentric(pu, pv, px, py, area):
    return np.stack(
        [
            _cross(pu[:, 1] - px, pv[:, 1] - py, pu[:, 2] - px, pv[:, 2] - py) / area,
            _cross(pu[:, 2] - px, pv[:, 2] - py, pu[:, 0] - px, pv[:, 0] - py) / area,
            _cross(pu[:, 0] - px, pv[:, 0] - py, pu[:, 1] - px, pv[:, 1] - py) / area,
        ],
        axis=1,
    )


def _edge_distance(pu, pv, px, py):
    d2s, ts = [], []
    for e in range(3):
        ax, ay = pu[:, e], pv[:, e]
        ex, ey = pu[:, (e + 1) % 3] - ax, pv[:, (e + 1) % 3] - ay
        l2 = ex * ex + ey * ey
        with np.errstate(invalid="ignore", divide="ignore"):
            t = np.where(l2 > 0, ((px - ax) * ex + (py - ay) * ey) / np.where(l2 > 0, l2, 1.0), 0.0)
        t = np.clip(t, 0.0, 1.0)
        qx, qy = px - (ax + t * ex), py - (ay + t * ey)
        d2s.append(qx * qx + qy * qy)
        ts.append(t)
    d2s = np.stack(d2s, 1)
    ts = np.stack(ts, 1)
    # first minimum wins, matching the strict '<' in the compiled loop
    edge = np.argmin(d2s, axis=1)
    rows = np.arange(len(edge))
    return d2s[rows, edge], edge, ts[rows, edge]


def soft_pairs(verts, colors, faces, H, W, sigma):
    face, x, y, pu, pv, area = _enumerate(verts, faces, H, W, np.sqrt(sigma * CULL))
    px, py = x + 0.5, y + 0.5
    b = _barycentric(pu, pv, px, py, area)
    d2, edge, t = _edge_distance(pu, pv, px, py)
    inside = np.all(b >= 0.0, axis=1)
    keep = inside | (d2 <= CULL * sigma)
    face, x, y, b, d2, edge, t, inside = (a[keep] for a in (face, x, y, b, d2, edge, t, inside))
    c = np.clip(b, 0.0, 1.0)
    wc = c / c.sum(1, keepdims=True)
    idx = faces[face]
    z = np.einsum("pk,pk->p", wc, verts[idx, 2])
    color = np.einsum("pk,pkc->pc", wc, colors[idx])
    return {
        "pix": y * W + x, "face": face, "bary": b, "wc": wc, "edge": edge,
        "t": t, "d2": d2, "inside": inside, "z": z, "color": color,
    }


def soft_pairs_backward(verts, colors, faces, W, pix, face, bary, wc, edge, tt, g_d2, g_z, g_col):
    gv = np.zeros((len(verts), 3))
    gc = np.zeros((len(colors), 3))
    idx = faces[face]
    pu, pv = verts[idx, 0], verts[idx, 1]
    px, py = pix % W + 0.5, pix // W + 0.5

    np.add.at(gv[:, 2], idx, wc * g_z[:, None])
    np.add.at(gc, idx, wc[:, :, None] * g_col[:, None, :])
    gw = g_z[:, None] * verts[idx, 2] + np.einsum("pc,pkc->pk", g_col, colors[idx])

    s = np.clip(bary, 0.0, 1.0).sum(1, keepdims=True)
    dot = (gw * wc).sum(1, keepdims=True)
    gb = np.where((bary > 0.0) & (bary < 1.0), (gw - dot) / s, 0.0)

    area = _cross(pu[:, 1] - pu[:, 0], pv[:, 1] - pv[:, 0], pu[:, 2] - pu[:, 0], pv[:, 2] - pv[:, 0])
    dar_du = np.empty_like(pu)
    dar_dv = np.empty_like(pv)
    dar_du[:, 1] = pv[:, 2] - pv[:, 0]
    dar_dv[:, 1] = -(pu[:, 2] - pu[:, 0])
    dar_du[:, 2] = -(pv[:, 1] - pv[:, 0])
    dar_dv[:, 2] = pu[:, 1] - pu[:, 0]
    dar_du[:, 0] = -(dar_du[:, 1] + dar_du[:, 2])
    dar_dv[:, 0] = -(dar_dv[:, 1] + dar_dv[:, 2])
    g = gb / area[:, None]
    gu = np.zeros_like(pu)
    gvv = np.zeros_like(pv)
    for k in range(3):
        e0, e1 = (k + 1) % 3, (k + 2) % 3
        gu[:, e0] += g[:, k] * (pv[:, e1] - py)
        gvv[:, e0] += g[:, k] * -(pu[:, e1] - px)
        gu[:, e1] += g[:, k] * -(pv[:, e0] - py)
        gvv[:, e1] += g[:, k] * (pu[:, e0] - px)
    gu -= (g * bary).sum(1, keepdims=True) * dar_du
    gvv -= (g * bary).sum(1, keepdims=True) * dar_dv

    rows = np.arange(len(pix))
    e0 = edge
    e1 = (edge + 1) % 3
    qx = pu[rows, e0] + tt * (pu[rows, e1] - pu[rows, e0])
    qy = pv[rows, e0] + tt * (pv[rows, e1] - pv[rows, e0])
    rx, ry = px - qx, py - qy
    np.add.at(gu, (rows, e0), g_d2 * -2.0 * rx * (1.0 - tt))
    np.add.at(gvv, (rows, e0), g_d2 * -2.0 * ry * (1.0 - tt))
    np.add.at(gu, (rows, e1), g_d2 * -2.0 * rx * tt)
    np.add.at(gvv, (rows, e1), g_d2 * -2.0 * ry * tt)

    np.add.at(gv[:, 0], idx, gu)
    np.add.at(gv[:, 1], idx, gvv)
    return gv, gc


def hard_raster(verts, faces, H, W):
    face_map = np.full((H, W), -1, dtype=np.int64)
    bary_map = np.zeros((H, W, 3))
    depth = np.full((H, W), np.inf)
    face, x, y, pu, pv, area = _enumerate(verts, faces, H, W, 0.0)
    b = _barycentric(pu, pv, x + 0.5, y + 0.5, area)
    ok = np.all(b >= 0.0, axis=1)
    face, x, y, b = face[ok], x[ok], y[ok], b[ok]
    z = np.einsum("pk,pk->p", b, verts[faces[face], 2])
    pix = y * W + x
    # nearest first, then lowest face index: same winner as the sequential z-test
    order = np.lexsort((face, z, pix))
    pix, face, b, z = pix[order], face[order], b[order], z[order]
    first = np.ones(len(pix), dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    pix, face, b, z = pix[first], face[first], b[first], z[first]
    face_map.reshape(-1)[pix] = face
    bary_map.reshape(-1, 3)[pix] = b
    depth.reshape(-1)[pix] = z
    return face_map, bary_map, depth
