"""Cameras, rays and the bounding-sphere integration interval.

World convention: object centred at the origin, right-handed axes, +y up.
Cameras follow the pinhole model with square pixels and the principal point
at the image centre; the camera looks down its local -z axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_RADIUS = 0.87


@dataclass(frozen=True)
class Camera:
    rotation: np.ndarray  # 3x3 camera-to-world
    translation: np.ndarray  # camera centre in world units
    fov_y: float  # radians
    width: int
    height: int

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64)
        trans = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if rot.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-6) or np.linalg.det(rot) < 0:
            raise ValueError("rotation must be orthonormal with det +1")
        if not 0.0 < self.fov_y < math.pi:
            raise ValueError("fov_y must lie in (0, pi)")
        if int(self.width) < 1 or int(self.height) < 1:
            raise ValueError("image size must be at least 1x1")
        rot.setflags(write=False)
        trans.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def focal(self) -> float:
        """Focal length in pixels."""
        return 0.5 * self.height / math.tan(0.5 * self.fov_y)

    @property
    def forward(self) -> np.ndarray:
        return -self.rotation[:, 2]

    @property
    def pose(self) -> np.ndarray:
        """3x4 camera-to-world matrix."""
        return np.hstack([self.rotation, self.translation[:, None]])

    def to_json(self) -> dict:
        return {
            "pose": [float(v) for v in self.pose.ravel()],
            "fov_y_deg": math.degrees(self.fov_y),
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_json(cls, data: dict) -> "Camera":
        pose = np.asarray(data["pose"], dtype=np.float64)
        if pose.size != 12:
            raise ValueError("camera pose must have 12 numbers (row-major 3x4)")
        pose = pose.reshape(3, 4)
        return cls(pose[:, :3], pose[:, 3], math.radians(float(data["fov_y_deg"])),
                   int(data["width"]), int(data["height"]))


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float = 0.0
    t_far: float = math.inf


@dataclass(frozen=True)
class BoundingSphere:
    radius: float = DEFAULT_RADIUS
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("sphere radius must be positive")


def look_at_camera(eye, target, up, fov_y: float, width: int, height: int) -> Camera:
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    fwd = target - eye
    norm = np.linalg.norm(fwd)
    if norm < 1e-12:
        raise ValueError("eye and target coincide")
    fwd = fwd / norm
    right = np.cross(fwd, up)
    rnorm = np.linalg.norm(right)
    if rnorm < 1e-9 * max(np.linalg.norm(up), 1.0):
        raise ValueError("up vector is parallel to the viewing direction")
    right = right / rnorm
    true_up = np.cross(right, fwd)
    rot = np.stack([right, true_up, -fwd], axis=1)
    return Camera(rot, eye, fov_y, width, height)


def pixel_directions(camera: Camera, px: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Unit world directions for pixel (col, row) arrays plus in-pixel offsets."""
    px = np.asarray(px, dtype=np.float64)
    offsets = np.asarray(offsets, dtype=np.float64)
    u = px[..., 0] + offsets[..., 0] - 0.5 * camera.width
    v = px[..., 1] + offsets[..., 1] - 0.5 * camera.height
    f = camera.focal
    local = np.stack([u / f, -v / f, -np.ones_like(u)], axis=-1)
    dirs = local @ camera.rotation.T
    return dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)


def ray_through_pixel(camera: Camera, px, jitter=None) -> Ray:
    """Ray through pixel ``px = (col, row)``.

    Without jitter the ray passes through the pixel centre; a jitter pair in
    [0, 1)^2 replaces the centre offset with that in-pixel position.
    """
    col, row = int(px[0]), int(px[1])
    if not (0 <= col < camera.width and 0 <= row < camera.height):
        raise ValueError(f"pixel {tuple(px)} outside {camera.width}x{camera.height} image")
    if jitter is None:
        off = np.array([0.5, 0.5])
    else:
        off = np.asarray(jitter, dtype=np.float64)
        if np.any(off < 0) or np.any(off >= 1):
            raise ValueError("jitter must lie in [0, 1)^2")
    d = pixel_directions(camera, np.array([col, row]), off)
    return Ray(camera.translation.copy(), d)


def sphere_interval(origins: np.ndarray, dirs: np.ndarray, sphere: BoundingSphere):
    """Vectorised clip: returns (t_near, t_far, hit) arrays."""
    oc = origins - np.asarray(sphere.center)
    b = np.einsum("...i,...i->...", oc, dirs)
    c = np.einsum("...i,...i->...", oc, oc) - sphere.radius ** 2
    disc = b * b - c
    hit = disc > 0
    root = np.sqrt(np.where(hit, disc, 0.0))
    t0 = np.maximum(-b - root, 0.0)
    t1 = -b + root
    hit &= t1 > t0
    return np.where(hit, t0, 0.0), np.where(hit, t1, 0.0), hit


def clip_to_sphere(ray: Ray, sphere: BoundingSphere | None = None) -> Ray | None:
    """Restrict the ray to its intersection with ``sphere``; None on a miss."""
    sphere = sphere or BoundingSphere()
    t0, t1, hit = sphere_interval(ray.origin[None], ray.direction[None], sphere)
    if not hit[0]:
        return None
    return Ray(ray.origin, ray.direction, float(t0[0]), float(t1[0]))


def yaw_matrix(angle: float) -> np.ndarray:
    """Rotation about the world up (+y) axis."""
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def ring_cameras(n_views: int, distance: float = 2.0, elevation_deg: float = 20.0,
                 fov_deg: float = 40.0, resolution: int = 64) -> list[Camera]:
    """Cameras evenly spaced in azimuth, all looking at the origin."""
    elev = math.radians(elevation_deg)
    cams = []
    for k in range(n_views):
        az = 2.0 * math.pi * k / n_views
        eye = distance * np.array([math.cos(elev) * math.sin(az), math.sin(elev),
                                   math.cos(elev) * math.cos(az)])
        cams.append(look_at_camera(eye, np.zeros(3), np.array([0.0, 1.0, 0.0]),
                                   math.radians(fov_deg), resolution, resolution))
    return cams
