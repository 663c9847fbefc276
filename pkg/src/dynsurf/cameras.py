"""Pinhole cameras, polar pose parameterization, pseudo cameras and rays.

Conventions used throughout the package:

* poses are camera-to-world; the camera looks down its local ``-z`` axis,
  ``+x`` is image right and ``+y`` is image up (pixel rows grow downward);
* pixel coordinates are continuous, the center of pixel ``(col, row)`` is
  ``(col + 0.5, row + 0.5)``;
* polar coordinates are standard spherical coordinates about the object
  center: ``polar`` is measured from ``+z`` and ``azimuth`` is
  ``atan2(y, x)``.  The scene "up" axis is therefore ``+z``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "DegeneratePoseError",
    "OrientationError",
    "Intrinsics",
    "RigidPose",
    "PolarPose",
    "DeltaPose",
    "Rays",
    "ViewBounds",
    "to_polar",
    "from_polar",
    "relative_polar",
    "wrap_angle",
    "angular_distance",
    "look_at",
    "pseudo_camera",
    "generate_rays",
    "pixel_centers",
    "project",
    "sphere_near_far",
    "sample_virtual_view",
]


class DegeneratePoseError(ValueError):
    """Camera center coincides with the polar origin."""


class OrientationError(ValueError):
    """The camera's viewing axis cannot reach the object center."""


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, width: int, height: int) -> "Intrinsics":
        """Same field of view at a different image size."""
        sx, sy = width / self.width, height / self.height
        return Intrinsics(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy, width, height)

    @classmethod
    def from_fov(cls, fov_deg: float, width: int, height: int) -> "Intrinsics":
        f = 0.5 * width / math.tan(0.5 * math.radians(fov_deg))
        return cls(f, f, width / 2.0, height / 2.0, width, height)


@dataclass(frozen=True)
class RigidPose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    def check(self, tol: float = 1e-6) -> None:
        if not np.allclose(self.rotation.T @ self.rotation, np.eye(3), atol=tol, rtol=0):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(self.rotation) - 1.0) > tol:
            raise ValueError("rotation is not proper (det != 1)")

    @property
    def center(self) -> np.ndarray:
        return self.translation

    @property
    def viewing_axis(self) -> np.ndarray:
        return -self.rotation[:, 2]

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - self.translation) @ self.rotation


@dataclass(frozen=True)
class PolarPose:
    radius: float
    polar: float
    azimuth: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("radius must be positive")

    def as_array(self) -> np.ndarray:
        return np.array([self.radius, self.polar, self.azimuth])


@dataclass(frozen=True)
class DeltaPose:
    d_radius: float
    d_polar: float
    d_azimuth: float

    def as_array(self) -> np.ndarray:
        return np.array([self.d_radius, self.d_polar, self.d_azimuth])


@dataclass
class Rays:
    """A batch of rays with unit directions and per-ray [near, far] interval."""

    origins: np.ndarray
    directions: np.ndarray
    near: np.ndarray
    far: np.ndarray

    def __len__(self) -> int:
        return len(self.origins)

    def __getitem__(self, idx) -> "Rays":
        return Rays(self.origins[idx], self.directions[idx], self.near[idx], self.far[idx])


@dataclass(frozen=True)
class ViewBounds:
    """Absolute ranges for virtual cameras; ``None`` pins a coordinate to the reference."""

    radius: tuple[float, float] | None = None
    polar: tuple[float, float] | None = None
    azimuth: tuple[float, float] | None = None


def wrap_angle(a):
    """Wrap angles into [-pi, pi); values already in range are returned unchanged."""
    a = np.asarray(a, dtype=np.float64)
    wrapped = np.mod(a + np.pi, 2.0 * np.pi) - np.pi
    return np.where((a >= -np.pi) & (a < np.pi), a, np.where(wrapped < np.pi, wrapped, -np.pi))


def to_polar(pose: RigidPose, center=(0.0, 0.0, 0.0)) -> PolarPose:
    v = pose.translation - np.asarray(center, dtype=np.float64)
    r = float(np.linalg.norm(v))
    if r == 0.0:
        raise DegeneratePoseError("camera center coincides with the polar origin")
    polar = math.atan2(math.hypot(v[0], v[1]), v[2])
    azimuth = float(wrap_angle(math.atan2(v[1], v[0])))
    return PolarPose(r, polar, azimuth)


def from_polar(p: PolarPose, center=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Camera center of a polar pose."""
    st = math.sin(p.polar)
    offset = np.array([st * math.cos(p.azimuth), st * math.sin(p.azimuth), math.cos(p.polar)])
    return np.asarray(center, dtype=np.float64) + p.radius * offset


def relative_polar(ref: PolarPose, virt: PolarPose) -> DeltaPose:
    return DeltaPose(
        virt.radius - ref.radius,
        virt.polar - ref.polar,
        float(wrap_angle(virt.azimuth - ref.azimuth)),
    )


def angular_distance(origin_ref, origin_virt) -> float:
    """Angle between two camera origins seen from the object center, in units of pi."""
    a = np.asarray(origin_ref, dtype=np.float64)
    b = np.asarray(origin_virt, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("camera origin has zero length")
    cos = float(np.clip(a @ b / (na * nb), -1.0, 1.0))
    return math.acos(cos) / math.pi


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> RigidPose:
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-9:
        # looking along the up axis
        right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    cam_up = np.cross(right, forward)
    return RigidPose(np.stack([right, cam_up, -forward], axis=1), eye)


def pseudo_camera(pose: RigidPose) -> RigidPose:
    """Shift the camera within its image plane until its axis passes through the origin.

    The rotation is kept.  With viewing direction ``d`` the new center is
    ``(t.d) d``, which lies on the original image plane and sees the origin at
    depth ``-(t.d)``.
    """
    d = pose.viewing_axis
    depth = -float(pose.translation @ d)
    if not depth > 0:
        raise OrientationError("object center is not in front of the camera")
    return RigidPose(pose.rotation.copy(), -depth * d)


def pixel_centers(width: int, height: int) -> np.ndarray:
    """(H*W, 2) array of pixel-center coordinates in row-major order."""
    cols, rows = np.meshgrid(np.arange(width) + 0.5, np.arange(height) + 0.5)
    return np.stack([cols.ravel(), rows.ravel()], axis=-1)


def camera_directions(intr: Intrinsics, pixels) -> np.ndarray:
    """Unnormalized camera-frame ray directions with unit ``-z`` component."""
    uv = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    x = (uv[:, 0] - intr.cx) / intr.fx
    y = -(uv[:, 1] - intr.cy) / intr.fy
    return np.stack([x, y, -np.ones_like(x)], axis=-1)


def sphere_near_far(origins, directions, radius: float = 1.0):
    """Ray interval inside the bounding sphere; missing rays get near == far."""
    b = np.einsum("ij,ij->i", origins, directions)
    c = np.einsum("ij,ij->i", origins, origins) - radius**2
    disc = b * b - c
    hit = disc > 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    near = np.where(hit, np.maximum(-b - sq, 0.0), 0.0)
    far = np.where(hit, np.maximum(-b + sq, 0.0), 0.0)
    return near, far


def generate_rays(intr: Intrinsics, pose: RigidPose, pixels, bound_radius: float = 1.0) -> Rays:
    dirs_cam = camera_directions(intr, pixels)
    dirs = dirs_cam @ pose.rotation.T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(pose.translation, dirs.shape).copy()
    near, far = sphere_near_far(origins, dirs, bound_radius)
    return Rays(origins, dirs, near, far)


def project(intr: Intrinsics, pose: RigidPose, points):
    """Project world points; returns (pixels (N,2), z-depth (N,))."""
    pc = pose.world_to_camera(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    z = -pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.cx + intr.fx * pc[:, 0] / z
        v = intr.cy - intr.fy * pc[:, 1] / z
    return np.stack([u, v], axis=-1), z


def sample_virtual_view(rng: np.random.Generator, bounds: ViewBounds, reference: PolarPose):
    """Draw a virtual camera uniformly in (radius, polar, azimuth) looking at the origin."""
    vals = []
    for name in ("radius", "polar", "azimuth"):
        rng_range = getattr(bounds, name)
        if rng_range is None:
            rng.uniform()  # keep the stream length independent of the bounds
            vals.append(getattr(reference, name))
        else:
            lo, hi = rng_range
            vals.append(float(lo + (hi - lo) * rng.uniform()))
    polar_pose = PolarPose(vals[0], vals[1], float(wrap_angle(vals[2])))
    return look_at(from_polar(polar_pose)), polar_pose
