"""Analytic synthetic scenes rendered by exact ray-shape intersection."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import DEFAULT_RADIUS, Camera, ring_cameras
from .losses import SupervisionView
from .mesh import DensityGrid, marching_cubes, sample_surface_points
from .renderer import camera_rays

SHAPES = ("sphere", "box", "superquadric")


@dataclass
class ShapeSpec:
    kind: str = "sphere"
    center: tuple = (0.0, 0.0, 0.0)
    size: tuple = (0.5, 0.5, 0.5)  # radius for spheres, half-extents / semi-axes otherwise
    exponents: tuple = (0.5, 0.5)  # superquadric (e1, e2)
    albedo: tuple = (0.8, 0.3, 0.2)
    albedo_mode: str = "constant"  # or "position"

    def __post_init__(self):
        if self.kind not in SHAPES:
            raise ValueError(f"unknown shape kind {self.kind!r}")
        self.center = tuple(float(c) for c in self.center)
        size = self.size
        if isinstance(size, (int, float)):
            size = (size,) * 3
        self.size = tuple(float(s) for s in size)
        if len(self.size) != 3 or min(self.size) <= 0:
            raise ValueError("shape size needs three positive numbers")
        if self.albedo_mode not in ("constant", "position"):
            raise ValueError(f"unknown albedo mode {self.albedo_mode!r}")
        if self.bounding_radius() > DEFAULT_RADIUS + 1e-12:
            raise ValueError("shape does not fit inside the radius-0.87 bounding sphere")

    def bounding_radius(self) -> float:
        c = np.linalg.norm(self.center)
        if self.kind == "sphere":
            return c + self.size[0]
        if self.kind == "box":
            return c + float(np.linalg.norm(self.size))
        # superquadrics with exponents <= 1 lie inside their bounding box
        return c + float(np.linalg.norm(self.size))

    @property
    def radius(self) -> float:
        return self.size[0]

    def albedo_at(self, points: np.ndarray) -> np.ndarray:
        base = np.asarray(self.albedo, dtype=np.float64)
        if self.albedo_mode == "constant":
            return np.broadcast_to(base, points.shape).copy()
        rel = (points - np.asarray(self.center)) / np.asarray(self.size)
        return np.clip(base + 0.25 * rel, 0.0, 1.0)

    def inside(self, points: np.ndarray) -> np.ndarray:
        """Signed implicit value, negative inside."""
        q = (np.asarray(points) - np.asarray(self.center)) / np.asarray(self.size)
        if self.kind == "sphere":
            return np.linalg.norm(q, axis=-1) - 1.0
        if self.kind == "box":
            return np.abs(q).max(axis=-1) - 1.0
        e1, e2 = self.exponents
        ax, ay, az = np.abs(q[..., 0]), np.abs(q[..., 1]), np.abs(q[..., 2])
        xy = (ax ** (2.0 / e2) + az ** (2.0 / e2)) ** (e2 / e1)
        return (xy + ay ** (2.0 / e1)) ** (e1 / 2.0) - 1.0

    def intersect(self, origins: np.ndarray, dirs: np.ndarray):
        """First-hit distance per ray, ``inf`` on a miss."""
        if self.kind == "sphere":
            oc = origins - np.asarray(self.center)
            b = np.einsum("ij,ij->i", oc, dirs)
            c = np.einsum("ij,ij->i", oc, oc) - self.radius ** 2
            disc = b * b - c
            t = -b - np.sqrt(np.maximum(disc, 0.0))
            return np.where((disc > 0) & (t > 0), t, np.inf)
        if self.kind == "box":
            lo = np.asarray(self.center) - np.asarray(self.size)
            hi = np.asarray(self.center) + np.asarray(self.size)
            with np.errstate(divide="ignore", invalid="ignore"):
                inv = 1.0 / dirs
                t1, t2 = (lo - origins) * inv, (hi - origins) * inv
            tmin = np.nanmax(np.minimum(t1, t2), axis=1)
            tmax = np.nanmin(np.maximum(t1, t2), axis=1)
            return np.where((tmax >= tmin) & (tmin > 0), tmin, np.inf)
        return self._march(origins, dirs)

    def _march(self, origins, dirs, steps=512, refine=40):
        o_c = origins - np.asarray(self.center)
        reach = self.bounding_radius() - float(np.linalg.norm(self.center)) + 1e-6
        b = np.einsum("ij,ij->i", o_c, dirs)
        c = np.einsum("ij,ij->i", o_c, o_c) - reach ** 2
        disc = b * b - c
        ok = disc > 0
        t0 = np.where(ok, -b - np.sqrt(np.maximum(disc, 0)), 0.0)
        t1 = np.where(ok, -b + np.sqrt(np.maximum(disc, 0)), 0.0)
        ts = t0[:, None] + (t1 - t0)[:, None] * np.linspace(0.0, 1.0, steps)[None, :]
        vals = self.inside(origins[:, None, :] + ts[..., None] * dirs[:, None, :])
        crossed = vals <= 0
        any_hit = ok & crossed.any(axis=1)
        k = np.argmax(crossed, axis=1)
        lo = ts[np.arange(len(ts)), np.maximum(k - 1, 0)]
        hi = ts[np.arange(len(ts)), k]
        for _ in range(refine):
            mid = 0.5 * (lo + hi)
            inside = self.inside(origins + mid[:, None] * dirs) <= 0
            hi = np.where(inside, mid, hi)
            lo = np.where(inside, lo, mid)
        return np.where(any_hit, hi, np.inf)

    def surface_points(self, n: int, rng) -> np.ndarray:
        """Uniform samples on the analytic surface (meshed finely when no closed form)."""
        if self.kind == "sphere":
            d = rng.normal(size=(n, 3))
            return np.asarray(self.center) + self.radius * d / np.linalg.norm(d, axis=1, keepdims=True)
        G = 160
        ext = DEFAULT_RADIUS
        x = np.linspace(-ext, ext, G)
        X, Y, Z = np.meshgrid(x, x, x, indexing="ij")
        vals = -self.inside(np.stack([X, Y, Z], axis=-1))
        mesh = marching_cubes(DensityGrid(vals, ext), 0.0)
        return sample_surface_points(mesh, n, rng)

    def to_json(self) -> dict:
        return {"kind": self.kind, "center": list(self.center), "size": list(self.size),
                "exponents": list(self.exponents), "albedo": list(self.albedo),
                "albedo_mode": self.albedo_mode}


@dataclass
class SyntheticScene:
    shape: ShapeSpec
    cameras: list
    views: list = field(default_factory=list)
    background: tuple = (1.0, 1.0, 1.0)


def render_analytic(shape: ShapeSpec, camera: Camera, background=(1.0, 1.0, 1.0)) -> SupervisionView:
    rays = camera_rays(camera)
    t = shape.intersect(rays.origins, rays.dirs)
    hit = np.isfinite(t)
    img = np.broadcast_to(np.asarray(background, dtype=np.float64), (len(t), 3)).copy()
    if hit.any():
        pts = rays.origins[hit] + t[hit, None] * rays.dirs[hit]
        img[hit] = shape.albedo_at(pts)
    H, W = camera.height, camera.width
    return SupervisionView(img.reshape(H, W, 3), hit.astype(np.float64).reshape(H, W), camera)


def make_synthetic_scene(shape: ShapeSpec | None = None, n_views: int = 8, resolution: int = 64,
                         distance: float = 2.0, elevation_deg: float = 20.0,
                         fov_deg: float = 40.0) -> SyntheticScene:
    """Ring of cameras around the origin plus exactly rendered views of ``shape``."""
    shape = shape or ShapeSpec()
    cams = ring_cameras(n_views, distance, elevation_deg, fov_deg, resolution)
    return SyntheticScene(shape, cams, [render_analytic(shape, c) for c in cams])


def projected_disk_fraction(radius: float, distance: float, fov_y: float) -> float:
    """Image-area fraction covered by a centred sphere in a square pinhole view."""
    half = math.tan(math.asin(radius / distance)) / math.tan(0.5 * fov_y)
    return math.pi * half * half / 4.0
