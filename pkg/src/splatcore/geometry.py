"""Pinhole camera model, rigid transforms, projection and unprojection.

Conventions used throughout the package:

- Camera poses are world-from-camera: ``p_world = R @ p_cam + t``, so the
  camera center is the translation column of the pose.
- The camera looks along +z of its own frame; x is right, y is down.
- Pixel coordinates are continuous. The center of the pixel at grid index
  (row, col) sits at ``(col + 0.5, row + 0.5)``.
- Zero skew; intrinsics carry fx, fy, cx, cy on the standard slots.
- All geometry runs in 64-bit floats.

The scalar operations (`project`, `unproject`) and the grid operations
(`project_points`, `unproject_depth_grid`) evaluate the same elementwise
expression trees, so per-pixel loops over the scalar functions produce
bit-identical results to the vectorized paths. The covisibility code and
its brute-force test oracle rely on this.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

ROTATION_TOL = 1e-6
DEGENERATE_DEPTH = 1e-12


class ProjectionError(ValueError):
    """Point is degenerate for projection (sits on the camera plane)."""


def _check_rotation(r, tol=ROTATION_TOL):
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got {r.shape}")
    if not np.allclose(r.T @ r, np.eye(3), atol=tol):
        raise ValueError("rotation is not orthonormal")
    if abs(np.linalg.det(r) - 1.0) > tol:
        raise ValueError("rotation determinant is not +1")
    return r


@dataclass(frozen=True)
class RigidPose:
    """Rotation + translation; validated to be a proper rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = _check_rotation(self.rotation)
        t = np.asarray(self.translation, dtype=np.float64)
        if t.shape != (3,):
            raise ValueError(f"translation must be a 3-vector, got {t.shape}")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"pose matrix must be 4x4, got {m.shape}")
        if not np.allclose(m[3], [0.0, 0.0, 0.0, 1.0], atol=1e-9):
            raise ValueError("pose matrix bottom row must be [0, 0, 0, 1]")
        return cls(m[:3, :3], m[:3, 3])

    def as_matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points):
        """Map points (3,) or (N, 3) from this pose's source frame to its target frame."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation


def compose(a: RigidPose, b: RigidPose) -> RigidPose:
    """Pose that applies b first, then a."""
    return RigidPose(a.rotation @ b.rotation,
                     a.rotation @ b.translation + a.translation)


def invert_pose(pose: RigidPose) -> RigidPose:
    rt = pose.rotation.T
    return RigidPose(rt, -(rt @ pose.translation))


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: intrinsics, world-from-camera pose, image size, depth range."""

    intrinsics: np.ndarray
    pose: np.ndarray
    width: int
    height: int
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        k = np.asarray(self.intrinsics, dtype=np.float64)
        if k.shape != (3, 3):
            raise ValueError(f"intrinsics must be 3x3, got {k.shape}")
        if k[0, 0] <= 0 or k[1, 1] <= 0:
            raise ValueError("fx and fy must be positive")
        if k[0, 1] != 0.0:
            raise ValueError("intrinsics skew must be zero")
        if not np.allclose(k[2], [0.0, 0.0, 1.0], atol=1e-12) or k[1, 0] != 0.0:
            raise ValueError("intrinsics must be an upper-triangular pinhole matrix")
        pose = np.asarray(self.pose, dtype=np.float64)
        if pose.shape != (4, 4):
            raise ValueError(f"pose must be 4x4, got {pose.shape}")
        _check_rotation(pose[:3, :3])
        if not np.allclose(pose[3], [0.0, 0.0, 0.0, 1.0], atol=1e-9):
            raise ValueError("pose bottom row must be [0, 0, 0, 1]")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        if not (0.0 < self.near < self.far):
            raise ValueError("require 0 < near < far")
        object.__setattr__(self, "intrinsics", k)
        object.__setattr__(self, "pose", pose)

    @property
    def fx(self):
        return self.intrinsics[0, 0]

    @property
    def fy(self):
        return self.intrinsics[1, 1]

    @property
    def cx(self):
        return self.intrinsics[0, 2]

    @property
    def cy(self):
        return self.intrinsics[1, 2]

    @property
    def rotation(self):
        return self.pose[:3, :3]

    @property
    def translation(self):
        return self.pose[:3, 3]

    def rigid_pose(self) -> RigidPose:
        return RigidPose(self.rotation, self.translation)

    def with_pose(self, pose: RigidPose) -> "Camera":
        return Camera(self.intrinsics, pose.as_matrix(), self.width,
                      self.height, self.near, self.far)


# Component-wise transform helpers. These accept scalars or arrays and keep
# a single floating-point expression tree for both, which is what makes the
# scalar oracle paths bit-identical to the vectorized ones.

def _world_from_cam(rot, t, x, y, z):
    wx = rot[0, 0] * x + rot[0, 1] * y + rot[0, 2] * z + t[0]
    wy = rot[1, 0] * x + rot[1, 1] * y + rot[1, 2] * z + t[1]
    wz = rot[2, 0] * x + rot[2, 1] * y + rot[2, 2] * z + t[2]
    return wx, wy, wz


def _cam_from_world(rot, t, wx, wy, wz):
    dx = wx - t[0]
    dy = wy - t[1]
    dz = wz - t[2]
    x = rot[0, 0] * dx + rot[1, 0] * dy + rot[2, 0] * dz
    y = rot[0, 1] * dx + rot[1, 1] * dy + rot[2, 1] * dz
    z = rot[0, 2] * dx + rot[1, 2] * dy + rot[2, 2] * dz
    return x, y, z


def project(camera: Camera, point_world):
    """Project a world point; returns (pixel (2,), depth).

    Depth is the point's z in the camera frame. The pixel is returned even
    when it falls outside the image; callers test bounds. Raises
    ProjectionError when the point lies on the camera plane (|z| < 1e-12).
    """
    p = np.asarray(point_world, dtype=np.float64)
    x, y, z = _cam_from_world(camera.rotation, camera.translation,
                              p[0], p[1], p[2])
    if abs(z) < DEGENERATE_DEPTH:
        raise ProjectionError(f"point projects at degenerate depth {z!r}")
    u = camera.fx * x / z + camera.cx
    v = camera.fy * y / z + camera.cy
    return np.array([u, v]), float(z)


def unproject(camera: Camera, pixel, depth):
    """Lift a pixel at the given camera-frame depth to a world point."""
    if depth <= 0.0:
        raise ValueError(f"unproject requires depth > 0, got {depth}")
    px = np.asarray(pixel, dtype=np.float64)
    x = (px[0] - camera.cx) * depth / camera.fx
    y = (px[1] - camera.cy) * depth / camera.fy
    wx, wy, wz = _world_from_cam(camera.rotation, camera.translation,
                                 x, y, depth)
    return np.array([wx, wy, wz])


def project_points(camera: Camera, points_world):
    """Vectorized project: (N, 3) -> pixels (N, 2), depths (N,).

    No degeneracy check; entries near the camera plane produce inf/nan
    pixels, which downstream bounds tests reject.
    """
    p = np.asarray(points_world, dtype=np.float64)
    x, y, z = _cam_from_world(camera.rotation, camera.translation,
                              p[..., 0], p[..., 1], p[..., 2])
    u = camera.fx * x / z + camera.cx
    v = camera.fy * y / z + camera.cy
    return np.stack([u, v], axis=-1), z


def unproject_depth_grid(camera: Camera, depth):
    """Lift a full depth grid to world points, (H, W) -> (H, W, 3).

    Pixels with non-positive depth produce points on the camera plane;
    mask them with ``depth > 0`` before use.
    """
    d = np.asarray(depth, dtype=np.float64)
    if d.shape != (camera.height, camera.width):
        raise ValueError(f"depth grid {d.shape} does not match camera "
                         f"({camera.height}, {camera.width})")
    cols = np.arange(camera.width, dtype=np.float64)
    rows = np.arange(camera.height, dtype=np.float64)
    u = np.broadcast_to(cols[None, :] + 0.5, d.shape)
    v = np.broadcast_to(rows[:, None] + 0.5, d.shape)
    x = (u - camera.cx) * d / camera.fx
    y = (v - camera.cy) * d / camera.fy
    wx, wy, wz = _world_from_cam(camera.rotation, camera.translation, x, y, d)
    return np.stack([wx, wy, wz], axis=-1)


def camera_to_dict(camera: Camera) -> dict:
    return {
        "intrinsics": [float(x) for x in camera.intrinsics.ravel()],
        "pose": [float(x) for x in camera.pose.ravel()],
        "width": camera.width,
        "height": camera.height,
        "near": camera.near,
        "far": camera.far,
    }


def camera_from_dict(d: dict) -> Camera:
    return Camera(
        intrinsics=np.array(d["intrinsics"], dtype=np.float64).reshape(3, 3),
        pose=np.array(d["pose"], dtype=np.float64).reshape(4, 4),
        width=int(d["width"]),
        height=int(d["height"]),
        near=float(d.get("near", 0.01)),
        far=float(d.get("far", 100.0)),
    )


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> RigidPose:
    """World-from-camera pose for a camera at `eye` looking at `target`.

    The camera's y axis points downward in world terms (image rows grow
    downward), matching the pixel convention.
    """
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    fwd = target - eye
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise ValueError("look_at eye and target coincide")
    fwd = fwd / n
    right = np.cross(fwd, up)
    rn = np.linalg.norm(right)
    if rn < 1e-9:
        raise ValueError("look_at direction is parallel to the up vector")
    right = right / rn
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd], axis=1)
    return RigidPose(rot, eye)


def random_rotation(rng) -> np.ndarray:
    """Uniform random rotation matrix from a normalized random quaternion."""
    q = rng.normal(size=4)
    q = q / np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def worker_count(env_value=None) -> int:
    """Worker cap from SPLATCORE_THREADS (0 or unset = auto).

    All current kernels run sequentially, which satisfies any cap; the
    helper exists so the cap is parsed and validated in one place.
    """
    import os

    raw = env_value if env_value is not None else os.environ.get("SPLATCORE_THREADS", "0")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ValueError(f"SPLATCORE_THREADS must be an integer, got {raw!r}") from exc
    if n < 0:
        raise ValueError(f"SPLATCORE_THREADS must be >= 0, got {n}")
    if n == 0:
        return 1
    return n
