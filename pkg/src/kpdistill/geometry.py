"""Pinhole camera geometry: intrinsics, depth conversion, cross-frame reprojection.

Poses map camera coordinates to world coordinates, ``x_world = R @ x_cam + t``.
Pixel ``(u, v)`` refers to column ``u`` and row ``v`` of the image arrays.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np


class GeometryError(ValueError):
    pass


class DepthKind(str, Enum):
    PLANAR_Z = "planar_z"
    RAY_DISTANCE = "ray_distance"


class Reason(str, Enum):
    OK = "ok"
    OUT_OF_BOUNDS = "out_of_bounds"
    BEHIND_CAMERA = "behind_camera"
    INVALID_DEPTH = "invalid_depth"
    OCCLUDED = "occluded"


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


def default_intrinsics(width: int, height: int) -> CameraIntrinsics:
    """Simulator intrinsics: ``fx = fy = W/2``, principal point at the image center.

    Note that ``fy`` is ``W/2`` too, not ``H/2``.
    """
    if width <= 0 or height <= 0:
        raise GeometryError(f"image size must be positive, got {width}x{height}")
    return CameraIntrinsics(width / 2, width / 2, width / 2, height / 2)


def check_rotation(R: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64).reshape(3, 3)
    if not np.allclose(R.T @ R, np.eye(3), atol=tol) or abs(np.linalg.det(R) - 1.0) > tol:
        raise GeometryError("rotation matrix is not orthonormal with determinant +1")
    return R


@dataclass
class CameraFrame:
    image: np.ndarray  # (H, W)
    depth: np.ndarray  # (H, W); non-positive marks invalid pixels
    depth_kind: DepthKind
    intrinsics: CameraIntrinsics
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        self.depth_kind = DepthKind(self.depth_kind)
        self.R = check_rotation(self.R)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if self.image.shape != self.depth.shape:
            raise GeometryError(f"image shape {self.image.shape} differs from depth shape {self.depth.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape

    def planar_depth(self) -> np.ndarray:
        """Depth map converted to camera-Z, invalid pixels kept non-positive."""
        if self.depth_kind is DepthKind.PLANAR_Z:
            return self.depth.astype(np.float64)
        h, w = self.depth.shape
        v, u = np.mgrid[0:h, 0:w].astype(np.float64)
        z = ray_distance_to_z(self.depth.astype(np.float64), u, v, self.intrinsics)
        return np.where(self.depth > 0, z, self.depth)


def ray_distance_to_z(r, u, v, K: CameraIntrinsics):
    """Convert distance to the projection center into camera-Z along the pixel ray."""
    dx = (np.asarray(u, dtype=np.float64) - K.cx) / K.fx
    dy = (np.asarray(v, dtype=np.float64) - K.cy) / K.fy
    return r / np.sqrt(1.0 + dx * dx + dy * dy)


def z_to_ray_distance(z, u, v, K: CameraIntrinsics):
    dx = (np.asarray(u, dtype=np.float64) - K.cx) / K.fx
    dy = (np.asarray(v, dtype=np.float64) - K.cy) / K.fy
    return z * np.sqrt(1.0 + dx * dx + dy * dy)


def unproject(u, v, z, K: CameraIntrinsics) -> np.ndarray:
    """Pixel(s) and camera-Z to camera-frame points, shape ``(..., 3)``."""
    z = np.asarray(z, dtype=np.float64)
    if np.any(z <= 0):
        raise GeometryError("unproject needs positive depth")
    x = (np.asarray(u, dtype=np.float64) - K.cx) / K.fx * z
    y = (np.asarray(v, dtype=np.float64) - K.cy) / K.fy * z
    return np.stack(np.broadcast_arrays(x, y, z), axis=-1)


def project(p: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    z = p[..., 2]
    return np.stack([K.fx * p[..., 0] / z + K.cx, K.fy * p[..., 1] / z + K.cy], axis=-1)


def bilinear_depth(depth: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Sample a depth map at (x, y) points; NaN where a neighbor is invalid or outside."""
    h, w = depth.shape
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    x, y = pts[:, 0], pts[:, 1]
    inside = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    xs = np.clip(x, 0, w - 1)
    ys = np.clip(y, 0, h - 1)
    x0 = np.minimum(np.floor(xs).astype(int), max(w - 2, 0))
    y0 = np.minimum(np.floor(ys).astype(int), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ax, ay = xs - x0, ys - y0
    d00, d01, d10, d11 = depth[y0, x0], depth[y0, x1], depth[y1, x0], depth[y1, x1]
    val = d00 * (1 - ax) * (1 - ay) + d01 * ax * (1 - ay) + d10 * (1 - ax) * ay + d11 * ax * ay
    ok = inside & (d00 > 0) & (d01 > 0) & (d10 > 0) & (d11 > 0)
    return np.where(ok, val, np.nan)


@dataclass
class Correspondences:
    """Vectorized per-point reprojection results."""

    source: np.ndarray  # (N, 2)
    projected: np.ndarray  # (N, 2); NaN when not computable
    reason: np.ndarray  # (N,) of Reason value strings

    @property
    def valid(self) -> np.ndarray:
        return self.reason == Reason.OK.value

    def __len__(self) -> int:
        return len(self.source)


OCCLUSION_TOLERANCE = 0.05


def _reasons(n: int) -> np.ndarray:
    return np.full(n, Reason.OK.value, dtype="<U16")


def _sample_z(frame: CameraFrame, pts: np.ndarray) -> np.ndarray:
    """Camera-Z at subpixel points, NaN where unavailable.

    Interpolates inverse depth: on a plane 1/Z is affine in pixel
    coordinates, so bilinear sampling of it is exact there, while sampling Z
    itself bends on tilted surfaces.
    """
    z = frame.planar_depth()
    inv = np.where(z > 0, 1.0 / np.where(z > 0, z, 1.0), 0.0)
    return 1.0 / bilinear_depth(inv, pts)


def reproject(
    frame_i: CameraFrame,
    frame_j: CameraFrame,
    points: np.ndarray,
    occlusion_check: bool = True,
) -> Correspondences:
    """Map pixels of ``frame_i`` into ``frame_j`` through depth and relative pose."""
    if frame_i.shape != frame_j.shape:
        raise GeometryError(f"frame sizes differ: {frame_i.shape} vs {frame_j.shape}")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = len(pts)
    reason = _reasons(n)
    projected = np.full((n, 2), np.nan)
    if n == 0:
        return Correspondences(pts, projected, reason)

    z = _sample_z(frame_i, pts)
    bad = ~np.isfinite(z)
    reason[bad] = Reason.INVALID_DEPTH.value
    ok = ~bad
    if not ok.any():
        return Correspondences(pts, projected, reason)

    p_cam = unproject(pts[ok, 0], pts[ok, 1], z[ok], frame_i.intrinsics)
    world = p_cam @ frame_i.R.T + frame_i.t
    q = (world - frame_j.t) @ frame_j.R
    idx = np.nonzero(ok)[0]
    front = q[:, 2] > 0
    reason[idx[~front]] = Reason.BEHIND_CAMERA.value
    uv = np.full((len(idx), 2), np.nan)
    uv[front] = project(q[front], frame_j.intrinsics)
    projected[idx] = uv

    h, w = frame_j.shape
    inb = front & (uv[:, 0] >= 0) & (uv[:, 0] < w) & (uv[:, 1] >= 0) & (uv[:, 1] < h)
    reason[idx[front & ~inb]] = Reason.OUT_OF_BOUNDS.value
    if occlusion_check and inb.any():
        sel = idx[inb]
        zj = _sample_z(frame_j, projected[sel])
        occluded = np.isfinite(zj) & (q[inb, 2] > zj * (1 + OCCLUSION_TOLERANCE))
        reason[sel[occluded]] = Reason.OCCLUDED.value
    return Correspondences(pts, projected, reason)


def plane_homography(frame_i: CameraFrame, frame_j: CameraFrame, normal_world, offset_world: float) -> np.ndarray:
    """Homography induced by the world plane ``n . X = d`` between two frames."""
    n_w = np.asarray(normal_world, dtype=np.float64)
    # plane in camera i: n_i . X_i = d_i
    n_i = frame_i.R.T @ n_w
    d_i = offset_world - n_w @ frame_i.t
    R_ji = frame_j.R.T @ frame_i.R
    t_ji = frame_j.R.T @ (frame_i.t - frame_j.t)
    H = frame_j.intrinsics.K @ (R_ji + np.outer(t_ji, n_i) / d_i) @ np.linalg.inv(frame_i.intrinsics.K)
    return H / H[2, 2]


def warp_homography(h: np.ndarray, points: np.ndarray, eps: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    """Apply a 3x3 projective transform to (N, 2) points.

    Returns the warped points and a validity mask; points whose homogeneous
    scale is (near) zero are invalid and returned as NaN.
    """
    h = np.asarray(h, dtype=np.float64).reshape(3, 3)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    hom = pts @ h[:, :2].T + h[:, 2]
    s = hom[:, 2]
    valid = np.abs(s) > eps
    out = np.full((len(pts), 2), np.nan)
    out[valid] = hom[valid, :2] / s[valid, None]
    return out, valid


def homography_correspondences(h: np.ndarray, points: np.ndarray, shape: tuple[int, int]) -> Correspondences:
    """Correspondences for a homography pair, marking out-of-image targets."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    out, valid = warp_homography(h, pts)
    reason = _reasons(len(pts))
    reason[~valid] = Reason.BEHIND_CAMERA.value
    hgt, wid = shape
    with np.errstate(invalid="ignore"):
        inb = (out[:, 0] >= 0) & (out[:, 0] < wid) & (out[:, 1] >= 0) & (out[:, 1] < hgt)
    reason[valid & ~inb] = Reason.OUT_OF_BOUNDS.value
    return Correspondences(pts, out, reason)
