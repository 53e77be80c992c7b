"""Deterministic construction of the shipped canonical face and template mesh.

Run ``python -m rhythmhead.assets`` to regenerate ``rhythmhead/data``.
World axes: x right, y up, z toward the camera.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from scipy.interpolate import RBFInterpolator
from scipy.spatial import Delaunay

DATA_DIR = Path(__file__).parent / "data"

# iBUG-68 groups
JAW = range(0, 17)
MOUTH = range(48, 68)
CHIN_TIP = 8


def _surface(x, y):
    """Ellipsoidal head depth before the nose and lip offsets."""
    return np.sqrt(np.maximum(1.6**2 - x**2 - 0.45 * y**2, 0.0))


def build_canonical_landmarks() -> np.ndarray:
    """Symmetric neutral 68-point face, centroid at the origin, mean point radius 1."""
    pts = np.zeros((68, 3))
    # jaw: half-ellipse from the right ear (image left) through the chin
    phi = np.pi + np.arange(17) / 16 * np.pi
    pts[0:17, 0] = 1.0 * np.cos(phi)
    pts[0:17, 1] = 0.25 + 1.3 * np.sin(phi)
    brow_x = np.array([-0.85, -0.7, -0.5, -0.32, -0.18])
    brow_y = np.array([0.52, 0.62, 0.66, 0.63, 0.56])
    pts[17:22, 0], pts[17:22, 1] = brow_x, brow_y
    pts[22:27, 0], pts[22:27, 1] = -brow_x[::-1], brow_y[::-1]
    pts[27:31, 0] = 0.0
    pts[27:31, 1] = [0.42, 0.27, 0.12, -0.03]
    pts[31:36, 0] = [-0.22, -0.11, 0.0, 0.11, 0.22]
    pts[31:36, 1] = [-0.15, -0.19, -0.21, -0.19, -0.15]
    eye_x = np.array([-0.72, -0.6, -0.42, -0.3, -0.42, -0.6])
    eye_y = np.array([0.3, 0.37, 0.37, 0.3, 0.24, 0.24])
    pts[36:42, 0], pts[36:42, 1] = eye_x, eye_y
    # left eye runs inner corner -> outer corner, upper lid first
    pts[42:48, 0] = -eye_x[[3, 2, 1, 0, 5, 4]]
    pts[42:48, 1] = eye_y[[3, 2, 1, 0, 5, 4]]
    outer_x = np.array([-0.4, -0.26, -0.1, 0.0, 0.1, 0.26, 0.4, 0.27, 0.12, 0.0, -0.12, -0.27])
    outer_y = np.array([-0.55, -0.47, -0.43, -0.45, -0.43, -0.47, -0.55, -0.64, -0.69, -0.7, -0.69, -0.64])
    pts[48:60, 0], pts[48:60, 1] = outer_x, outer_y
    inner_x = np.array([-0.3, -0.12, 0.0, 0.12, 0.3, 0.12, 0.0, -0.12])
    inner_y = np.array([-0.555, -0.53, -0.53, -0.53, -0.555, -0.58, -0.58, -0.58])
    pts[60:68, 0], pts[60:68, 1] = inner_x, inner_y

    pts[:, 2] = _surface(pts[:, 0], pts[:, 1])
    pts[27:31, 2] += [0.08, 0.18, 0.28, 0.38]
    pts[31:36, 2] += [0.12, 0.17, 0.2, 0.17, 0.12]
    pts[48:68, 2] += 0.06
    pts[36:48, 2] -= 0.04

    pts -= pts.mean(0)
    pts /= np.linalg.norm(pts, axis=1).mean()
    return pts


def _cross2(a, b):
    return a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]


def _hex_grid(spacing: float, lo, hi) -> np.ndarray:
    rows = []
    for i, y in enumerate(np.arange(lo[1], hi[1] + 1e-9, spacing * np.sqrt(3) / 2)):
        xs = np.arange(lo[0] + (spacing / 2 if i % 2 else 0.0), hi[0] + 1e-9, spacing)
        rows.append(np.stack([xs, np.full_like(xs, y)], 1))
    return np.concatenate(rows)


def build_template_mesh(landmarks: np.ndarray | None = None, spacing: float = 0.125):
    """Landmarks plus a dome of interpolated vertices, Delaunay-triangulated in the image plane.

    Returns (vertices N×3, faces M×3); the first 68 vertices are the landmarks.
    """
    lm = build_canonical_landmarks() if landmarks is None else np.asarray(landmarks, dtype=np.float64)
    jaw = lm[list(JAW), :2]
    # forehead arc closing the outline above the brows
    top = lm[list(JAW), 1].max()
    cx, rx = 0.5 * (jaw[0, 0] + jaw[-1, 0]), 0.5 * (jaw[-1, 0] - jaw[0, 0])
    ang = np.linspace(0.0, np.pi, 15)[1:-1]
    forehead = np.stack([cx + rx * np.cos(ang), top + 0.75 * rx * np.sin(ang)], 1)
    outline = np.concatenate([jaw, forehead[::-1] if forehead[0, 0] < forehead[-1, 0] else forehead])
    hull = Delaunay(outline)

    grid = _hex_grid(spacing, outline.min(0) - spacing, outline.max(0) + spacing)
    grid = grid[hull.find_simplex(grid) >= 0]
    # keep dome points clear of landmarks and of the outline
    d_lm = np.min(np.linalg.norm(grid[:, None] - lm[None, :, :2], axis=2), axis=1)
    grid = grid[d_lm > 0.6 * spacing]
    fore = forehead[np.min(np.linalg.norm(forehead[:, None] - lm[None, :, :2], axis=2), axis=1) > 0.6 * spacing]
    grid = grid[np.min(np.linalg.norm(grid[:, None] - fore[None], axis=2), axis=1) > 0.6 * spacing]
    xy = np.concatenate([lm[:, :2], fore, grid])

    # depth: ellipsoid plus a smooth interpolant of the landmark offsets
    offset = RBFInterpolator(lm[:, :2], lm[:, 2] - _surface(lm[:, 0], lm[:, 1]), kernel="thin_plate_spline", smoothing=1e-3)
    z = _surface(xy[:, 0], xy[:, 1]) + offset(xy)
    z[:68] = lm[:, 2]
    verts = np.concatenate([xy, z[:, None]], 1)

    tri = Delaunay(xy).simplices
    # drop slivers along the outline and triangles outside it
    cen = xy[tri].mean(1)
    keep = hull.find_simplex(cen) >= 0
    a = xy[tri]
    area = 0.5 * np.abs(_cross2(a[:, 1] - a[:, 0], a[:, 2] - a[:, 0]))
    keep &= area > 1e-4
    tri = tri[keep]
    # consistent winding: counter-clockwise in (x, y)
    a = xy[tri]
    cw = _cross2(a[:, 1] - a[:, 0], a[:, 2] - a[:, 0]) < 0
    tri[cw] = tri[cw][:, [0, 2, 1]]
    used = np.unique(tri)
    remap = -np.ones(len(verts), dtype=np.int64)
    remap[used] = np.arange(len(used))
    if not np.array_equal(used[:68], np.arange(68)):
        raise RuntimeError("template mesh lost a landmark vertex")
    return verts[used], remap[tri].astype(np.int64)


def write_assets(directory: Path = DATA_DIR) -> None:
    from .audio import DEFAULT_SAMPLE_RATE, AudioTrack, colored_noise, write_wav
    from .render import TexturedMesh, save_obj

    directory.mkdir(parents=True, exist_ok=True)
    lm = build_canonical_landmarks()
    (directory / "canonical_face.json").write_text(json.dumps({"landmarks": np.round(lm, 12).tolist()}, indent=1))
    verts, faces = build_template_mesh(np.round(lm, 12))
    save_obj(directory / "template_mesh.obj", TexturedMesh(verts, faces, np.full((len(verts), 3), 0.5)))
    write_wav(directory / "noise.wav", AudioTrack(0.5 * colored_noise(2 * DEFAULT_SAMPLE_RATE, np.random.default_rng(1234))))


if __name__ == "__main__":
    write_assets()
