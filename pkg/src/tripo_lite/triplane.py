"""Triplane storage, bilinear point sampling and the depth-to-space upsampler.

Planes are stored as one array of shape ``(3, R, R, C)`` in XY, XZ, YZ order.
Plane ``k`` is indexed ``[a, b]`` by its two world axes (x,y), (x,z), (y,z);
the cube ``[-extent, extent]`` maps affinely onto grid coordinates
``[0, R-1]`` with texels as point samples at integer coordinates.

Gradient accumulation contract: every backward call returns a freshly
allocated gradient array private to that call. Callers running chunks in
parallel sum those arrays once, in chunk order, which makes the result
independent of thread scheduling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .geometry import DEFAULT_RADIUS

PLANE_AXES = ((0, 1), (0, 2), (1, 2))


@dataclass
class Triplane:
    planes: np.ndarray
    extent: float = DEFAULT_RADIUS

    def __post_init__(self):
        p = np.asarray(self.planes)
        if p.ndim != 4 or p.shape[0] != 3 or p.shape[1] != p.shape[2]:
            raise ValueError(f"planes must have shape (3, R, R, C), got {p.shape}")
        if p.shape[1] < 2:
            raise ValueError("triplane resolution must be at least 2")
        self.planes = p

    @property
    def resolution(self) -> int:
        return self.planes.shape[1]

    @property
    def channels(self) -> int:
        return self.planes.shape[3]

    @classmethod
    def zeros(cls, resolution=64, channels=40, extent=DEFAULT_RADIUS, dtype=np.float32):
        return cls(np.zeros((3, resolution, resolution, channels), dtype=dtype), extent)

    @classmethod
    def random(cls, rng, resolution=64, channels=40, scale=0.1, extent=DEFAULT_RADIUS,
               dtype=np.float32):
        planes = rng.normal(0.0, scale, size=(3, resolution, resolution, channels))
        return cls(planes.astype(dtype), extent)


@dataclass
class UpsamplerParams:
    weight: np.ndarray  # (C_in, factor**2 * C_out)
    bias: np.ndarray  # (factor**2 * C_out,)
    factor: int = 2

    @property
    def in_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[1] // (self.factor * self.factor)

    @classmethod
    def init(cls, rng, in_channels=1024, out_channels=40, factor=2, dtype=np.float32):
        w = rng.normal(0.0, 1.0 / np.sqrt(in_channels), size=(in_channels, factor * factor * out_channels))
        return cls(w.astype(dtype), np.zeros(factor * factor * out_channels, dtype=dtype), factor)


def bilinear_taps(points: np.ndarray, resolution: int, extent: float):
    """Flat texel indices and weights, each shaped (N, 3, 4)."""
    pts = np.clip(np.asarray(points, dtype=np.float64), -extent, extent)
    g = (pts + extent) * ((resolution - 1) / (2.0 * extent))
    base = np.clip(np.floor(g), 0, resolution - 2)
    frac = g - base
    base = base.astype(np.int64)
    n = pts.shape[0]
    idx = np.empty((n, 3, 4), dtype=np.int64)
    w = np.empty((n, 3, 4), dtype=np.float64)
    for k, (a, b) in enumerate(PLANE_AXES):
        i0, j0 = base[:, a], base[:, b]
        fa, fb = frac[:, a], frac[:, b]
        idx[:, k, 0] = i0 * resolution + j0
        idx[:, k, 1] = i0 * resolution + j0 + 1
        idx[:, k, 2] = (i0 + 1) * resolution + j0
        idx[:, k, 3] = (i0 + 1) * resolution + j0 + 1
        w[:, k, 0] = (1 - fa) * (1 - fb)
        w[:, k, 1] = (1 - fa) * fb
        w[:, k, 2] = fa * (1 - fb)
        w[:, k, 3] = fa * fb
    return idx, w


def sample_features(tp: Triplane, points: np.ndarray) -> np.ndarray:
    """Bilinearly sampled features, concatenated XY|XZ|YZ.

    Accepts a single 3-vector (returns ``(3C,)``) or an ``(N, 3)`` batch
    (returns ``(N, 3C)``). Coordinates outside the cube are clamped.
    """
    pts = np.asarray(points)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 3)
    if not np.all(np.isfinite(pts)):
        raise ValueError("sample points must be finite")
    R, C = tp.resolution, tp.channels
    idx, w = bilinear_taps(pts, R, tp.extent)
    w = w.astype(tp.planes.dtype)
    flat = tp.planes.reshape(3, R * R, C)
    out = np.empty((pts.shape[0], 3, C), dtype=tp.planes.dtype)
    for k in range(3):
        gathered = flat[k][idx[:, k]]  # (N, 4, C)
        out[:, k] = np.einsum("nt,ntc->nc", w[:, k], gathered)
    out = out.reshape(pts.shape[0], 3 * C)
    return out[0] if single else out


def sample_features_backward(tp: Triplane, points: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of :func:`sample_features` w.r.t. the planes.

    Returns a new array shaped like ``tp.planes``; add it into an existing
    gradient buffer to accumulate across calls.
    """
    pts = np.asarray(points).reshape(-1, 3)
    R, C = tp.resolution, tp.channels
    g = np.asarray(upstream, dtype=tp.planes.dtype).reshape(pts.shape[0], 3, C)
    idx, w = bilinear_taps(pts, R, tp.extent)
    n = pts.shape[0]
    rows = np.repeat(np.arange(n), 4)
    grad = np.empty((3, R * R, C), dtype=tp.planes.dtype)
    for k in range(3):
        scatter = sp.csr_matrix((w[:, k].ravel().astype(tp.planes.dtype), (rows, idx[:, k].ravel())),
                                shape=(n, R * R))
        grad[k] = scatter.T @ g[:, k]
    return grad.reshape(tp.planes.shape)


def upsample(coarse: Triplane, params: UpsamplerParams) -> Triplane:
    """Shared 1x1 linear map followed by depth-to-space on each plane."""
    _, R, _, C_in = coarse.planes.shape
    if C_in != params.in_channels:
        raise ValueError(f"coarse triplane has {C_in} channels, upsampler expects {params.in_channels}")
    f, C_out = params.factor, params.out_channels
    y = coarse.planes @ params.weight + params.bias  # (3, R, R, f*f*C_out)
    y = y.reshape(3, R, R, f, f, C_out).transpose(0, 1, 3, 2, 4, 5)
    return Triplane(np.ascontiguousarray(y.reshape(3, R * f, R * f, C_out)), coarse.extent)
