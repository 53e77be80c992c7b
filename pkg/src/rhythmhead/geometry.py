"""Rigid head pose in 3D landmark space: fitting, disentangling, re-posing, matching."""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Sequence

import numpy as np

N_LANDMARKS = 68
# jaw contour minus chin tip, nose, inner eye corners
DEFAULT_RIGID_INDICES = tuple(list(range(0, 8)) + list(range(9, 17)) + list(range(27, 36)) + [39, 42])


class GeometryError(ValueError):
    """Degenerate or malformed geometric input."""


def as_landmarks(points) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    if p.shape != (N_LANDMARKS, 3):
        raise GeometryError(f"landmark set must be 68x3, got {p.shape}")
    if not np.isfinite(p).all():
        raise GeometryError("landmark set contains non-finite values")
    return p


# ---------------------------------------------------------------------------
# rotations


def _skew(r: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -r[2], r[1]], [r[2], 0.0, -r[0]], [-r[1], r[0], 0.0]])


def axis_angle_to_matrix(r) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    theta = float(np.linalg.norm(r))
    K = _skew(r)
    if theta < 1e-8:
        # second-order Taylor; exact to double precision at this size
        return np.eye(3) + K + 0.5 * K @ K
    return np.eye(3) + (np.sin(theta) / theta) * K + ((1.0 - np.cos(theta)) / theta**2) * K @ K


def matrix_to_axis_angle(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    # sin(theta) * axis from the antisymmetric part, cos(theta) from the trace
    w = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    s = float(np.linalg.norm(w))
    c = float(np.clip((np.trace(R) - 1.0) * 0.5, -1.0, 1.0))
    theta = float(np.arctan2(s, c))
    if theta < 1e-8:
        return w
    if c > -0.99:
        return w * (theta / s)
    # near pi: axis from the symmetric part, sign fixed by w
    B = 0.5 * (R + R.T) - c * np.eye(3)
    k = int(np.argmax(np.diag(B)))
    axis = B[k] / np.sqrt(max(B[k, k], 1e-300))
    axis /= np.linalg.norm(axis)
    if axis @ w < 0:
        axis = -axis
    # refine the angle with the full trace/antisymmetric information
    theta = float(np.arctan2(axis @ w, c))
    return axis * theta


def geodesic_angle(Ra, Rb=None) -> float:
    """Rotation angle of Ra·Rbᵀ (or of Ra alone)."""
    M = np.asarray(Ra, dtype=np.float64) if Rb is None else np.asarray(Ra) @ np.asarray(Rb).T
    return float(np.linalg.norm(matrix_to_axis_angle(M)))


# ---------------------------------------------------------------------------
# transforms and sequences


@dataclass(frozen=True)
class RigidTransform:
    """Head pose [R, T]; maps frame landmarks onto the canonical face."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        T = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if R.shape != (3, 3):
            raise GeometryError(f"rotation must be 3x3, got {R.shape}")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-6 or abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise GeometryError("rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", T)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_vector(cls, h) -> "RigidTransform":
        h = np.asarray(h, dtype=np.float64).reshape(6)
        return cls(axis_angle_to_matrix(h[:3]), h[3:])

    def to_vector(self) -> np.ndarray:
        """6-D encoding h = (axis-angle, translation)."""
        return np.concatenate([matrix_to_axis_angle(self.rotation), self.translation])

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self ∘ other: apply ``other`` first."""
        return RigidTransform(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)


@dataclass
class MotionSequence:
    poses: list
    fps: float = 25.0

    def __post_init__(self):
        if len(self.poses) == 0:
            raise GeometryError("motion sequence must be non-empty")
        if not self.fps > 0:
            raise GeometryError("fps must be positive")

    def __len__(self):
        return len(self.poses)

    def to_array(self) -> np.ndarray:
        return np.stack([p.to_vector() for p in self.poses])

    @classmethod
    def from_array(cls, h, fps: float = 25.0) -> "MotionSequence":
        return cls([RigidTransform.from_vector(row) for row in np.asarray(h, dtype=np.float64)], fps)


@dataclass(frozen=True)
class CanonicalFace:
    landmarks: np.ndarray
    rigid_indices: tuple = DEFAULT_RIGID_INDICES

    def __post_init__(self):
        object.__setattr__(self, "landmarks", as_landmarks(self.landmarks))
        idx = tuple(int(i) for i in self.rigid_indices)
        if len(set(idx)) != len(idx) or any(not 0 <= i < N_LANDMARKS for i in idx):
            raise GeometryError("rigid indices must be distinct and within [0, 68)")
        object.__setattr__(self, "rigid_indices", idx)


@lru_cache(maxsize=1)
def _canonical_points() -> np.ndarray:
    text = resources.files("rhythmhead.data").joinpath("canonical_face.json").read_text()
    return np.asarray(json.loads(text)["landmarks"], dtype=np.float64)


def load_canonical(rigid_indices=DEFAULT_RIGID_INDICES) -> CanonicalFace:
    return CanonicalFace(_canonical_points().copy(), rigid_indices)


# ---------------------------------------------------------------------------
# operations


def fit_rigid(source, target, indices: Sequence[int] | None = None) -> RigidTransform:
    """Least-squares [R, T] with target ≈ R·source + T over ``indices`` (Kabsch, no scale)."""
    src = np.asarray(source, dtype=np.float64)
    dst = np.asarray(target, dtype=np.float64)
    if indices is not None:
        idx = np.asarray(indices, dtype=np.int64)
        src, dst = src[idx], dst[idx]
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise GeometryError(f"point sets must be matching Nx3 arrays, got {src.shape} and {dst.shape}")
    if len(src) < 3:
        raise GeometryError("need at least 3 points to fit a rigid transform")
    if not (np.isfinite(src).all() and np.isfinite(dst).all()):
        raise GeometryError("point sets contain non-finite values")
    mu_s, mu_d = src.mean(0), dst.mean(0)
    a, b = src - mu_s, dst - mu_d
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-300)
    for pts in (a, b):
        sv = np.linalg.svd(pts, compute_uv=False)
        if sv[1] <= 1e-9 * scale * np.sqrt(len(pts)):
            raise GeometryError("degenerate point configuration (collinear or coincident)")
    U, _, Vt = np.linalg.svd(a.T @ b)
    d = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return RigidTransform(R, mu_d - R @ mu_s)


def disentangle(frames, canonical: CanonicalFace | None = None):
    """Per-frame pose h_t and pose-free aligned landmarks R_t·l_t + T_t."""
    canonical = canonical or load_canonical()
    frames = list(frames)
    if not frames:
        raise GeometryError("disentangle needs at least one frame")
    poses, aligned = [], []
    for t, frame in enumerate(frames):
        try:
            pose = fit_rigid(as_landmarks(frame), canonical.landmarks, canonical.rigid_indices)
        except GeometryError as exc:
            raise GeometryError(f"frame {t}: {exc}") from exc
        poses.append(pose)
        aligned.append(pose.apply(frame))
    return MotionSequence(poses), aligned


def repose_vertices(vertices, pose_src: RigidTransform, pose_dst: RigidTransform) -> np.ndarray:
    """V_dst = R_dst⁻¹(R_src·V + T_src − T_dst)."""
    V = np.asarray(vertices, dtype=np.float64)
    if not np.isfinite(V).all():
        raise GeometryError("vertices contain non-finite values")
    return (V @ pose_src.rotation.T + pose_src.translation - pose_dst.translation) @ pose_dst.rotation


def select_reference_frame(motion: MotionSequence) -> int:
    """Most frontal frame: smallest rotation angle, first on ties."""
    angles = np.array([geodesic_angle(p.rotation) for p in motion.poses])
    return int(np.argmin(angles))


def _as_h(x) -> np.ndarray:
    if isinstance(x, RigidTransform):
        return x.to_vector()
    return np.asarray(x, dtype=np.float64).reshape(6)


def match_motion(query, references) -> tuple[int, float]:
    """argmin_k ‖h_query − h_k‖², first index on ties."""
    H = np.stack([_as_h(r) for r in references]) if len(references) else np.empty((0, 6))
    if len(H) == 0:
        raise GeometryError("match_motion needs at least one reference")
    cost = np.sum((H - _as_h(query)) ** 2, axis=1)
    k = int(np.argmin(cost))
    return k, float(cost[k])


def match_motions(queries: np.ndarray, references: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized match_motion over rows of 6-D encodings."""
    Q = np.asarray(queries, dtype=np.float64).reshape(-1, 6)
    H = np.asarray(references, dtype=np.float64).reshape(-1, 6)
    cost = np.sum((Q[:, None, :] - H[None, :, :]) ** 2, axis=2)
    k = np.argmin(cost, axis=1)
    return k, cost[np.arange(len(Q)), k]


def perturb_match(index: int, cost: float, references, temperature: float, rng: np.random.Generator) -> int:
    """Training-time robustness: occasionally swap the optimal match for a worse one.

    With probability min(1, temperature)·(K−1)/K a uniformly chosen non-optimal
    index is returned, so temperature 1 makes the choice uniform over all K.
    """
    if temperature < 0:
        raise GeometryError("temperature must be non-negative")
    K = len(references)
    if K <= 1 or temperature == 0:
        return int(index)
    if rng.random() < min(1.0, temperature) * (K - 1) / K:
        other = int(rng.integers(K - 1))
        return other + (other >= index)
    return int(index)


class FlowField(tuple):
    """(flow H×W×2, visibility H×W) with an ``empty`` flag for meshes that project nowhere."""

    def __new__(cls, flow, visibility, empty=False):
        obj = super().__new__(cls, (flow, visibility))
        obj.empty = bool(empty)
        return obj

    @property
    def flow(self):
        return self[0]

    @property
    def visibility(self):
        return self[1]


def rigid_flow(mesh, pose_src: RigidTransform, pose_dst: RigidTransform, camera, depth_tol: float = 0.1) -> FlowField:
    """Backward flow from the pose_dst render to the pose_src render.

    ``mesh`` vertices are expressed at pose_src.  For each pixel covered at
    pose_dst, flow = projection of the same surface point at pose_src minus
    the pixel center, so sampling the source image at pixel + flow
    reproduces the target.
    """
    from .render import hard_rasterize, project_points

    H, W = camera.height, camera.width
    flow = np.zeros((H, W, 2))
    vis = np.zeros((H, W))
    V_src = np.asarray(mesh.vertices, dtype=np.float64)
    V_dst = repose_vertices(V_src, pose_src, pose_dst)
    fid, bary, _ = hard_rasterize(V_dst, mesh.faces, camera)
    covered = fid >= 0
    if not covered.any():
        warnings.warn("rigid_flow: mesh does not project onto the image", RuntimeWarning, stacklevel=2)
        return FlowField(flow, vis, empty=True)
    s_src = project_points(V_src, camera)
    tri = mesh.faces[fid[covered]]
    pts = np.einsum("pk,pkc->pc", bary[covered], s_src[tri])
    ys, xs = np.nonzero(covered)
    flow[covered] = pts[:, :2] - np.stack([xs + 0.5, ys + 0.5], 1)

    # source-side occlusion: compare against the pose_src depth buffer
    fid_s, _, depth_s = hard_rasterize(V_src, mesh.faces, camera)
    xi = np.clip(np.floor(pts[:, 0]).astype(int), 0, W - 1)
    yi = np.clip(np.floor(pts[:, 1]).astype(int), 0, H - 1)
    inside = (pts[:, 0] >= 0) & (pts[:, 0] < W) & (pts[:, 1] >= 0) & (pts[:, 1] < H)
    same_face = fid_s[yi, xi] == fid[covered]
    near_enough = np.abs(depth_s[yi, xi] - pts[:, 2]) <= depth_tol
    vis[covered] = (inside & (fid_s[yi, xi] >= 0) & (same_face | near_enough)).astype(float)
    return FlowField(flow, vis)


# ---------------------------------------------------------------------------
# file formats

MOTION_COLUMNS = ("rx", "ry", "rz", "tx", "ty", "tz")


def save_landmarks_json(path, frames, fps: float = 25.0) -> None:
    """{"fps": fps, "frames": [[[x, y, z] × 68], ...]}"""
    data = {"fps": float(fps), "frames": [as_landmarks(f).tolist() for f in frames]}
    with open(path, "w") as fh:
        json.dump(data, fh)


def load_landmarks_json(path) -> tuple[list, float]:
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, dict) or "frames" not in data:
        raise GeometryError(f"{path}: expected an object with a 'frames' list")
    try:
        frames = [as_landmarks(f) for f in data["frames"]]
    except GeometryError as exc:
        raise GeometryError(f"{path}: {exc}") from exc
    return frames, float(data.get("fps", 25.0))


def save_motion_csv(path, motion) -> None:
    h = motion.to_array() if isinstance(motion, MotionSequence) else np.asarray(motion, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MOTION_COLUMNS)
        for row in h:
            w.writerow([repr(float(v)) for v in row])


def load_motion_csv(path, fps: float = 25.0) -> MotionSequence:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(c.strip() for c in rows[0]) != MOTION_COLUMNS:
        raise GeometryError(f"{path}: header must be {','.join(MOTION_COLUMNS)}")
    try:
        h = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=np.float64)
    except ValueError as exc:
        raise GeometryError(f"{path}: {exc}") from exc
    if h.ndim != 2 or h.shape[1] != 6 or len(h) == 0:
        raise GeometryError(f"{path}: need at least one row of 6 values")
    return MotionSequence.from_array(h, fps)
