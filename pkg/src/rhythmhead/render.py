"""Textured template mesh, rigid posing and a differentiable soft rasterizer.

Orthographic camera looking down −z: a world point (X, Y, Z) lands at pixel
coordinates u = cx + sx·X, v = cy + sy·Y, and larger Z is nearer.  Pixel
(x, y) has its center at (x + 0.5, y + 0.5).
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.interpolate import RBFInterpolator
from scipy.ndimage import map_coordinates

from . import geometry
from ._ext import kernels
from .numeric.tensor import _sigmoid, _wrap, as_tensor


class RenderError(ValueError):
    pass


@dataclass
class TexturedMesh:
    vertices: np.ndarray
    faces: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64)
        self.colors = np.asarray(self.colors, dtype=np.float64)
        n = len(self.vertices)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise RenderError(f"vertices must be Nx3, got {self.vertices.shape}")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise RenderError(f"faces must be Mx3, got {self.faces.shape}")
        if self.colors.shape != self.vertices.shape:
            raise RenderError(f"colors must match vertices {self.vertices.shape}, got {self.colors.shape}")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= n):
            raise RenderError("face index out of range")

    def with_vertices(self, vertices) -> "TexturedMesh":
        return TexturedMesh(vertices, self.faces, self.colors)

    def with_colors(self, colors) -> "TexturedMesh":
        return TexturedMesh(self.vertices, self.faces, colors)


@dataclass(frozen=True)
class Camera:
    height: int = 64
    width: int = 64
    sx: float = 16.0
    sy: float = -16.0  # image rows grow downward while world y points up
    cx: float | None = None
    cy: float | None = None

    def __post_init__(self):
        if self.height <= 0 or self.width <= 0:
            raise RenderError("image size must be positive")
        if self.cx is None:
            object.__setattr__(self, "cx", self.width / 2.0)
        if self.cy is None:
            object.__setattr__(self, "cy", self.height / 2.0)

    @classmethod
    def for_size(cls, height: int, width: int | None = None) -> "Camera":
        width = height if width is None else width
        s = 16.0 * min(height, width) / 64.0
        return cls(height, width, s, -s)


@dataclass(frozen=True)
class RasterSettings:
    sigma: float = 0.05  # squared pixels
    gamma: float = 1e-3
    background: tuple = (0.0, 0.0, 0.0)
    znear: float = 4.0
    zfar: float = -4.0

    def __post_init__(self):
        if not (self.sigma > 0 and self.gamma > 0):
            raise RenderError("sigma and gamma must be positive")
        if self.znear == self.zfar:
            raise RenderError("znear and zfar must differ")


def project_points(vertices, camera: Camera) -> np.ndarray:
    """World → (u, v, z) with z kept as world depth."""
    V = np.asarray(vertices, dtype=np.float64)
    return np.stack([camera.cx + camera.sx * V[:, 0], camera.cy + camera.sy * V[:, 1], V[:, 2]], 1)


def hard_rasterize(vertices, faces, camera: Camera):
    """Z-buffer oracle: (face id or −1, barycentrics, world depth or −inf) per pixel."""
    s = project_points(vertices, camera)
    s[:, 2] = -s[:, 2]  # kernels keep the smallest key
    fid, bary, depth = kernels.hard_raster(np.ascontiguousarray(s), np.ascontiguousarray(faces, dtype=np.int64), camera.height, camera.width)
    return fid, bary, -depth


# ---------------------------------------------------------------------------
# soft rasterization


def _aggregate(pairs, H, W, settings: RasterSettings):
    """Per-pixel depth-softmax over contributing faces, summed in a face-order-free order."""
    P = len(pairs["pix"])
    D = _sigmoid(np.where(pairs["inside"], 1.0, -1.0) * pairs["d2"] / settings.sigma)
    zn, col, pix = pairs["z"], pairs["color"], pairs["pix"]
    order = np.lexsort((col[:, 2], col[:, 1], col[:, 0], D, zn, pix))
    pairs = {k: v[order] for k, v in pairs.items()}
    D, zn, col, pix = D[order], zn[order], col[order], pix[order]

    bg = np.asarray(settings.background, dtype=np.float64)
    image = np.broadcast_to(bg, (H * W, 3)).copy()
    sil = np.zeros(H * W)
    ctx = {"pairs": pairs, "D": D, "P": P}
    if P == 0:
        return image.reshape(H, W, 3), sil.reshape(H, W), ctx
    starts = np.flatnonzero(np.r_[True, pix[1:] != pix[:-1]])
    upix = pix[starts]
    seg = np.repeat(np.arange(len(starts)), np.diff(np.r_[starts, P]))

    zmax = np.maximum(np.maximum.reduceat(zn, starts), 0.0)
    ex = np.exp((zn - zmax[seg]) / settings.gamma)
    e = D * ex
    e_bg = np.exp(-zmax / settings.gamma)
    ssum = np.add.reduceat(e, starts) + e_bg
    num = np.add.reduceat(e[:, None] * col, starts) + e_bg[:, None] * bg
    rgb = num / ssum[:, None]
    image[upix] = rgb

    om = 1.0 - D
    zero = om == 0.0
    nz_prod = np.multiply.reduceat(np.where(zero, 1.0, om), starts)
    nzero = np.add.reduceat(zero.astype(np.int64), starts)
    sil[upix] = 1.0 - np.where(nzero > 0, 0.0, nz_prod)
    # product of (1 − D_k) over k ≠ j, exact even when some factors vanish
    excl = np.where(
        nzero[seg] == 0,
        nz_prod[seg] / np.where(zero, 1.0, om),
        np.where(zero & (nzero[seg] == 1), nz_prod[seg], 0.0),
    )
    ctx.update(seg=seg, upix=upix, ex=ex, e=e, ssum=ssum, rgb=rgb, excl=excl)
    return image.reshape(H, W, 3), sil.reshape(H, W), ctx


def _soft_backward(ctx, screen, colors, faces, W, settings, g_img, g_sil):
    """Gradients w.r.t. screen-space (u, v, zn) vertices and per-vertex colors."""
    if ctx["P"] == 0:
        return np.zeros_like(screen), np.zeros_like(colors)
    p, seg, upix = ctx["pairs"], ctx["seg"], ctx["upix"]
    gI = g_img.reshape(-1, 3)[upix]
    gS = g_sil.reshape(-1)[upix]
    e, ex, D = ctx["e"], ctx["ex"], ctx["D"]
    ssum = ctx["ssum"][seg]
    g_e = np.einsum("pc,pc->p", gI[seg], p["color"] - ctx["rgb"][seg]) / ssum
    g_col = gI[seg] * (e / ssum)[:, None]
    g_D = g_e * ex + gS[seg] * ctx["excl"]
    g_zn = g_e * e / settings.gamma
    sign = np.where(p["inside"], 1.0, -1.0)
    g_d2 = g_D * D * (1.0 - D) * sign / settings.sigma
    return kernels.soft_pairs_backward(
        screen, colors, faces, W, p["pix"], p["face"], p["bary"], p["wc"], p["edge"], p["t"],
        np.ascontiguousarray(g_d2), np.ascontiguousarray(g_zn), np.ascontiguousarray(g_col),
    )


def soft_rasterize_tensors(vertices, colors, faces, camera: Camera, settings: RasterSettings | None = None):
    """Differentiable render of world-space vertices and per-vertex colors.

    Returns (image H×W×3 in [−1, 1], silhouette H×W in [0, 1]) as tensors.
    """
    settings = settings or RasterSettings()
    vt, ct = as_tensor(vertices), as_tensor(colors)
    faces = np.ascontiguousarray(faces, dtype=np.int64)
    if len(faces) == 0 or len(vt.data) == 0:
        raise RenderError("cannot rasterize an empty mesh")
    V = np.asarray(vt.data, dtype=np.float64)
    C = np.ascontiguousarray(ct.data, dtype=np.float64)
    H, W = camera.height, camera.width
    depth_scale = 1.0 / (settings.znear - settings.zfar)
    screen = project_points(V, camera)
    screen[:, 2] = (V[:, 2] - settings.zfar) * depth_scale
    screen = np.ascontiguousarray(screen)
    pairs = kernels.soft_pairs(screen, C, faces, H, W, float(settings.sigma))
    rgb, sil, ctx = _aggregate(pairs, H, W, settings)
    dtype = vt.dtype

    def grads(g_img, g_sil):
        gs, gc = _soft_backward(ctx, screen, C, faces, W, settings, g_img, g_sil)
        gv = gs * np.array([camera.sx, camera.sy, depth_scale])
        return gv.astype(vt.dtype), gc.astype(ct.dtype)

    zeros_img = np.zeros((H, W, 3))
    zeros_sil = np.zeros((H, W))
    image = _wrap((2.0 * rgb - 1.0).astype(dtype), (vt, ct), lambda g: grads(2.0 * np.asarray(g, np.float64), zeros_sil))
    silhouette = _wrap(sil.astype(dtype), (vt, ct), lambda g: grads(zeros_img, np.asarray(g, np.float64)))
    return image, silhouette


def soft_rasterize(mesh: TexturedMesh, camera: Camera | None = None, settings: RasterSettings | None = None):
    return soft_rasterize_tensors(mesh.vertices, mesh.colors, mesh.faces, camera or Camera(), settings)


def pose_mesh(mesh: TexturedMesh, pose_src, pose_dst) -> TexturedMesh:
    return mesh.with_vertices(geometry.repose_vertices(mesh.vertices, pose_src, pose_dst))


def project_frame(mesh: TexturedMesh, pose_ref, pose_t, camera: Camera | None = None, settings: RasterSettings | None = None) -> np.ndarray:
    """ỹ_t: the reference mesh re-posed to pose_t and rendered (H×W×3 in [−1, 1])."""
    image, _ = soft_rasterize(pose_mesh(mesh, pose_ref, pose_t), camera, settings)
    return image.data


# ---------------------------------------------------------------------------
# template and unprojection


@lru_cache(maxsize=1)
def _template() -> TexturedMesh:
    with resources.as_file(resources.files("rhythmhead.data").joinpath("template_mesh.obj")) as path:
        return load_obj(path)


def load_template() -> TexturedMesh:
    t = _template()
    return TexturedMesh(t.vertices.copy(), t.faces.copy(), t.colors.copy())


def sample_bilinear(image: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Sample H×W×C at continuous pixel coordinates (u, v); edges clamp."""
    coords = [uv[:, 1] - 0.5, uv[:, 0] - 0.5]
    return np.stack([map_coordinates(image[..., c], coords, order=1, mode="nearest") for c in range(image.shape[2])], 1)


def vertex_visibility(vertices, faces, camera: Camera, tol: float = 0.1) -> np.ndarray:
    """True for vertices not hidden behind nearer geometry in the z-buffer."""
    fid, _, depth = hard_rasterize(vertices, faces, camera)
    s = project_points(vertices, camera)
    xi = np.clip(np.floor(s[:, 0]).astype(int), 0, camera.width - 1)
    yi = np.clip(np.floor(s[:, 1]).astype(int), 0, camera.height - 1)
    d = depth[yi, xi]
    return (fid[yi, xi] < 0) | (d - s[:, 2] <= tol)


def unproject(image: np.ndarray, landmarks3d, template: TexturedMesh | None = None, camera: Camera | None = None) -> TexturedMesh:
    """Fit the template to the frame's 3D landmarks with a thin-plate spline and sample its colors.

    ``image`` is H×W×3 in [−1, 1].  Occluded vertices keep the template color.
    """
    template = template or load_template()
    camera = camera or Camera(image.shape[0], image.shape[1])
    lm = geometry.as_landmarks(landmarks3d)
    src = template.vertices[: geometry.N_LANDMARKS]
    tps = RBFInterpolator(src, lm - src, kernel="thin_plate_spline", degree=1)
    verts = template.vertices + tps(template.vertices)
    uv = project_points(verts, camera)
    outside = (uv[:, 0] < 0) | (uv[:, 0] > camera.width) | (uv[:, 1] < 0) | (uv[:, 1] > camera.height)
    if outside.mean() > 0.5:
        raise RenderError(f"{outside.mean():.0%} of vertices project outside the image; landmarks misaligned")
    rgb01 = (np.asarray(image, dtype=np.float64) + 1.0) * 0.5
    sampled = sample_bilinear(rgb01, uv)
    visible = vertex_visibility(verts, template.faces, camera) & ~outside
    colors = np.where(visible[:, None], sampled, template.colors)
    return TexturedMesh(verts, template.faces, np.clip(colors, 0.0, 1.0))


# ---------------------------------------------------------------------------
# file formats


def save_obj(path, mesh: TexturedMesh) -> None:
    lines = [f"v {x:.12g} {y:.12g} {z:.12g} {r:.6g} {g:.6g} {b:.6g}" for (x, y, z), (r, g, b) in zip(mesh.vertices, mesh.colors)]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


def load_obj(path) -> TexturedMesh:
    verts, cols, faces = [], [], []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            vals = [float(x) for x in parts[1:]]
            if len(vals) not in (3, 6):
                raise RenderError(f"{path}:{n}: vertex needs 3 or 6 values")
            verts.append(vals[:3])
            cols.append(vals[3:] if len(vals) == 6 else [0.5, 0.5, 0.5])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
            if len(idx) != 3:
                raise RenderError(f"{path}:{n}: only triangles are supported")
            faces.append(idx)
    return TexturedMesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3), np.array(cols).reshape(-1, 3))


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((np.asarray(image, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def save_png(path, image: np.ndarray) -> None:
    Image.fromarray(to_uint8(image)).save(path, format="PNG")


def load_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 127.5 - 1.0
