"""Backward warping with visibility-derived attention."""
from __future__ import annotations

import numpy as np
from scipy.ndimage import map_coordinates, uniform_filter


def warp(image, flow, visibility=None):
    """Sample ``image`` (H×W×C or H×W) at pixel + flow; outside samples are 0.

    Returns (warped, attention) where attention is the visibility mask after
    a 3×3 box filter, clamped to [0, 1].
    """
    img = np.asarray(image, dtype=np.float64)
    flow = np.asarray(flow, dtype=np.float64)
    H, W = img.shape[:2]
    if flow.shape != (H, W, 2):
        raise ValueError(f"flow must be {(H, W, 2)}, got {flow.shape}")
    if not np.isfinite(flow).all():
        raise ValueError("flow contains non-finite values")
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    coords = [ys + flow[..., 1], xs + flow[..., 0]]
    planes = img[..., None] if img.ndim == 2 else img
    out = np.stack([map_coordinates(planes[..., c], coords, order=1, mode="constant", cval=0.0) for c in range(planes.shape[2])], -1)
    if img.ndim == 2:
        out = out[..., 0]
    vis = np.ones((H, W)) if visibility is None else np.asarray(visibility, dtype=np.float64)
    attention = np.clip(uniform_filter(vis, size=3, mode="nearest"), 0.0, 1.0)
    return out, attention
