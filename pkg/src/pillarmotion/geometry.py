"""Rigid-body transforms, pinhole cameras, and camera-flow factorization.

Coordinate conventions used throughout the package:

* LiDAR / vehicle frame: x forward, y left, z up, meters.
* Camera frame: x right, y down, z forward along the optical axis, meters.
* Image frame: continuous pixel coordinates with the origin at the top-left
  corner of the top-left pixel, so the center of pixel (row, col) sits at
  (u, v) = (col + 0.5, row + 0.5). Nearest-pixel lookup is floor().

"Ego motion" always denotes the rigid map that takes coordinates of static
scene content from the earlier sweep's frame to the later sweep's frame,
i.e. the inverse of the vehicle pose change over the interval.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Projections at or below this camera-frame depth count as out of view.
DEPTH_MIN = 0.1

_ORTHONORMAL_TOL = 1e-9


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected an (N, 3) point array, got shape {pts.shape}")
    return pts


def rot_x(angle: float) -> np.ndarray:
    """Rotation matrix about the x axis by ``angle`` radians."""
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Proper rigid motion p -> R p + t.

    ``rotation`` must be orthonormal with determinant +1 (checked to 1e-9).
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if not (np.isfinite(r).all() and np.isfinite(t).all()):
            raise ValueError("transform entries must be finite")
        if np.abs(r @ r.T - np.eye(3)).max() > _ORTHONORMAL_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > _ORTHONORMAL_TOL:
            raise ValueError("rotation must have determinant +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_translation(cls, t) -> "RigidTransform":
        return cls(np.eye(3), np.asarray(t, dtype=float))

    def apply(self, points) -> np.ndarray:
        """Transform an (N, 3) array (or a single 3-vector) of points."""
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            return self.rotation @ pts + self.translation
        return pts @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return the transform applying ``other`` first, then ``self``."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)


@dataclass(frozen=True, eq=False)
class CameraModel:
    """Pinhole camera: upper-triangular intrinsics plus a LiDAR->camera extrinsic."""

    intrinsics: np.ndarray
    extrinsic: RigidTransform
    width: int
    height: int

    def __post_init__(self):
        k = np.asarray(self.intrinsics, dtype=float).reshape(3, 3)
        if not np.isfinite(k).all():
            raise ValueError("intrinsics must be finite")
        if k[1, 0] != 0.0 or k[2, 0] != 0.0 or k[2, 1] != 0.0:
            raise ValueError("intrinsics must be upper triangular")
        if k[0, 0] <= 0.0 or k[1, 1] <= 0.0 or k[2, 2] <= 0.0:
            raise ValueError("focal entries must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        object.__setattr__(self, "intrinsics", k)


def transform_points(points, transform: RigidTransform) -> np.ndarray:
    """Apply a rigid transform to an (N, 3) point array."""
    return transform.apply(_as_points(points))


def project_points(points, cam: CameraModel, depth_min: float = DEPTH_MIN):
    """Project points in the LiDAR frame onto the image plane.

    Returns (uv, depth, in_view): continuous pixel coordinates (N, 2), the
    camera-frame depth (N,), and a mask of points that land inside the image
    with depth above ``depth_min``. Rows with non-positive depth hold NaN.
    """
    pts = _as_points(points)
    cam_pts = cam.extrinsic.apply(pts)
    depth = cam_pts[:, 2]
    safe = np.where(depth > 1e-12, depth, np.nan)
    hom = cam_pts @ cam.intrinsics.T
    uv = hom[:, :2] / safe[:, None]
    in_view = (
        (depth > depth_min)
        & (uv[:, 0] >= 0.0)
        & (uv[:, 0] < cam.width)
        & (uv[:, 1] >= 0.0)
        & (uv[:, 1] < cam.height)
    )
    return uv, depth, in_view


def project(point, cam: CameraModel, depth_min: float = DEPTH_MIN):
    """Project a single point; returns (u, v) or None when out of view."""
    uv, _, ok = project_points(np.asarray(point, dtype=float)[None, :], cam, depth_min)
    if not ok[0]:
        return None
    return float(uv[0, 0]), float(uv[0, 1])


def unproject(uv, depth, cam: CameraModel) -> np.ndarray:
    """Invert projection: pixel coordinates plus camera-frame depth -> LiDAR frame."""
    uv = np.atleast_2d(np.asarray(uv, dtype=float))
    depth = np.atleast_1d(np.asarray(depth, dtype=float))
    hom = np.concatenate([uv, np.ones((len(uv), 1))], axis=1)
    rays = hom @ np.linalg.inv(cam.intrinsics).T
    cam_pts = rays * (depth / rays[:, 2])[:, None]
    return cam.extrinsic.inverse().apply(cam_pts)


def ego_flow_points(points, cam: CameraModel, ego_motion: RigidTransform,
                    depth_min: float = DEPTH_MIN):
    """Pixel displacement each static point would show due to ego motion alone.

    The point is projected in the earlier frame and again after mapping it into
    the later frame through ``ego_motion``; the flow is the difference of the
    two pixel positions. Returns (flow (N, 2), valid (N,)); rows where either
    projection is out of view are zeroed and flagged invalid.
    """
    pts = _as_points(points)
    uv0, _, ok0 = project_points(pts, cam, depth_min)
    uv1, _, ok1 = project_points(ego_motion.apply(pts), cam, depth_min)
    valid = ok0 & ok1
    flow = np.where(valid[:, None], uv1 - uv0, 0.0)
    return flow, valid


def ego_flow(point, cam: CameraModel, ego_motion: RigidTransform):
    """Single-point ego flow; returns a 2-vector or None when out of view."""
    flow, valid = ego_flow_points(np.asarray(point, dtype=float)[None, :], cam, ego_motion)
    if not valid[0]:
        return None
    return flow[0]


@dataclass(eq=False)
class FlowImage:
    """Per-pixel 2D optical flow with a validity mask.

    ``flow`` has shape (H, W, 2); values at invalid pixels are ignored.
    """

    flow: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.flow = np.asarray(self.flow, dtype=float)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.flow.ndim != 3 or self.flow.shape[2] != 2:
            raise ValueError(f"flow must be (H, W, 2), got {self.flow.shape}")
        if self.valid.shape != self.flow.shape[:2]:
            raise ValueError("validity mask shape must match the flow image")
        if not np.isfinite(self.flow[self.valid]).all():
            raise ValueError("flow values at valid pixels must be finite")

    @property
    def height(self) -> int:
        return self.flow.shape[0]

    @property
    def width(self) -> int:
        return self.flow.shape[1]


def sample_flow(image: FlowImage, uv, mode: str = "nearest"):
    """Sample a flow image at continuous pixel coordinates.

    Nearest mode reads the pixel containing (u, v); bilinear blends the four
    surrounding pixel centers and requires all of them to be valid and in
    bounds. Returns (values (N, 2), ok (N,)).
    """
    uv = np.nan_to_num(np.atleast_2d(np.asarray(uv, dtype=float)), nan=-1.0)
    h, w = image.height, image.width
    if mode == "nearest":
        cols = np.floor(uv[:, 0]).astype(int)
        rows = np.floor(uv[:, 1]).astype(int)
        inb = (cols >= 0) & (cols < w) & (rows >= 0) & (rows < h)
        cols_c = np.clip(cols, 0, w - 1)
        rows_c = np.clip(rows, 0, h - 1)
        ok = inb & image.valid[rows_c, cols_c]
        vals = np.where(ok[:, None], image.flow[rows_c, cols_c], 0.0)
        return vals, ok
    if mode == "bilinear":
        # Interpolate between pixel centers at (col + 0.5, row + 0.5).
        x = uv[:, 0] - 0.5
        y = uv[:, 1] - 0.5
        x0 = np.floor(x).astype(int)
        y0 = np.floor(y).astype(int)
        fx = (x - x0)[:, None]
        fy = (y - y0)[:, None]
        inb = (x0 >= 0) & (x0 + 1 < w) & (y0 >= 0) & (y0 + 1 < h)
        x0c = np.clip(x0, 0, w - 2)
        y0c = np.clip(y0, 0, h - 2)
        ok = inb & (
            image.valid[y0c, x0c] & image.valid[y0c, x0c + 1]
            & image.valid[y0c + 1, x0c] & image.valid[y0c + 1, x0c + 1]
        )
        v00 = image.flow[y0c, x0c]
        v01 = image.flow[y0c, x0c + 1]
        v10 = image.flow[y0c + 1, x0c]
        v11 = image.flow[y0c + 1, x0c + 1]
        vals = (v00 * (1 - fx) * (1 - fy) + v01 * fx * (1 - fy)
                + v10 * (1 - fx) * fy + v11 * fx * fy)
        return np.where(ok[:, None], vals, 0.0), ok
    raise ValueError(f"unknown sampling mode {mode!r}")


@dataclass(eq=False)
class ObjectFlowSamples:
    """Object flow (measured flow minus ego flow) at projected points.

    ``point_index`` refers to rows of the point array the samples were drawn
    from; points that fell out of view or hit invalid flow pixels are absent
    and counted in the diagnostics fields.
    """

    point_index: np.ndarray      # (K,) int
    uv: np.ndarray               # (K, 2) continuous pixel coordinates
    pixel: np.ndarray            # (K, 2) int (row, col) of the sampled pixel
    object_flow: np.ndarray      # (K, 2) pixels
    n_points: int
    n_out_of_view: int
    n_invalid_flow: int


def factorize_object_flow(flow: FlowImage, points, cam: CameraModel,
                          ego_motion: RigidTransform, sampling: str = "nearest",
                          depth_min: float = DEPTH_MIN) -> ObjectFlowSamples:
    """Subtract ego-induced flow from a flow image at each projected point.

    Only points whose projections stay in view in both sweeps and land on
    valid flow pixels produce samples; the rest are skipped and tallied.
    """
    pts = _as_points(points)
    if (flow.width, flow.height) != (cam.width, cam.height):
        raise ValueError(
            f"flow image is {flow.width}x{flow.height} but the camera expects "
            f"{cam.width}x{cam.height}"
        )
    uv0, _, ok0 = project_points(pts, cam, depth_min)
    eflow, ok_ego = ego_flow_points(pts, cam, ego_motion, depth_min)
    viewable = ok0 & ok_ego
    sampled, ok_sample = sample_flow(flow, uv0, mode=sampling)
    keep = viewable & ok_sample
    idx = np.nonzero(keep)[0]
    pixel = np.stack(
        [np.floor(uv0[idx, 1]).astype(int), np.floor(uv0[idx, 0]).astype(int)],
        axis=1,
    ) if len(idx) else np.zeros((0, 2), dtype=int)
    return ObjectFlowSamples(
        point_index=idx,
        uv=uv0[idx],
        pixel=pixel,
        object_flow=sampled[idx] - eflow[idx],
        n_points=len(pts),
        n_out_of_view=int((~viewable).sum()),
        n_invalid_flow=int((viewable & ~ok_sample).sum()),
    )
