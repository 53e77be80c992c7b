"""Gray-scale landmark sketches: the 68-point connectivity drawn as thin anti-aliased polylines."""
from __future__ import annotations

import numpy as np

from ..geometry import RigidTransform, as_landmarks
from ..render import Camera, project_points


def _chain(a: int, b: int, closed: bool = False):
    seg = [(i, i + 1) for i in range(a, b)]
    return seg + [(b, a)] if closed else seg


# iBUG-68 polylines: jaw, brows, nose bridge and base, eyes, outer and inner lips
CONNECTIVITY = np.array(
    _chain(0, 16)
    + _chain(17, 21)
    + _chain(22, 26)
    + _chain(27, 30)
    + _chain(31, 35)
    + [(30, 31), (30, 35)]
    + _chain(36, 41, True)
    + _chain(42, 47, True)
    + _chain(48, 59, True)
    + _chain(60, 67, True),
    dtype=np.int64,
)


def draw_segments(points2d: np.ndarray, segments: np.ndarray, height: int, width: int) -> np.ndarray:
    """Max-composite of per-segment line intensities.

    Along each segment's major axis every pixel column (or row) gets one
    pixel with weight 1 − 2·|minor offset| from the line, so a line covers
    about as many pixels as a Bresenham line while staying anti-aliased.
    """
    img = np.zeros((height, width))
    if len(segments) == 0:
        return img
    px = np.arange(width) + 0.5
    py = np.arange(height) + 0.5
    for i, j in segments:
        (x0, y0), (x1, y1) = points2d[i], points2d[j]
        if not np.all(np.isfinite([x0, y0, x1, y1])):
            continue
        dx, dy = x1 - x0, y1 - y0
        if abs(dx) >= abs(dy):
            major, minor, a0, a1, b0, db, da = px, py, x0, x1, y0, dy, dx
        else:
            major, minor, a0, a1, b0, db, da = py, px, y0, y1, x0, dx, dy
        lo, hi = min(a0, a1), max(a0, a1)
        cols = np.nonzero((major >= lo - 0.5) & (major < hi + 0.5))[0]
        if cols.size == 0:
            continue
        t = np.clip((major[cols] - a0) / da, 0.0, 1.0) if da != 0 else np.zeros(cols.size)
        line = b0 + t * db
        off = np.abs(minor[None, :] - line[:, None])  # (cols, minor)
        w = np.clip(1.0 - 2.0 * off, 0.0, 1.0)
        if abs(dx) >= abs(dy):
            img[:, cols] = np.maximum(img[:, cols], w.T)
        else:
            img[cols, :] = np.maximum(img[cols, :], w)
    return img


def render_landmark_image(landmarks, pose: RigidTransform | None = None, camera: Camera | None = None) -> np.ndarray:
    """Pose the canonical-frame landmarks (l_t = R⁻¹(p_t − T)), project, and sketch. H×W in [0, 1]."""
    camera = camera or Camera()
    pts = as_landmarks(landmarks)
    if pose is not None:
        pts = pose.inverse().apply(pts)
    uv = project_points(pts, camera)[:, :2]
    return draw_segments(uv, CONNECTIVITY, camera.height, camera.width)
