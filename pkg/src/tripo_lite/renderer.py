"""Differentiable emission-absorption volume rendering over a triplane field.

Each ray is clipped to the bounding sphere and split into ``samples_per_ray``
equal bins. A sample sits at its bin midpoint (or uniformly inside the bin
when stratified) and represents the whole bin, so ``delta_i`` is the bin
width and the deltas sum to the chord length.

Rays are processed in fixed-size chunks. Chunk boundaries never depend on
the thread count and gradients are reduced in chunk order, so ``threads=1``
and ``threads=N`` give identical results.

Backward recomputes the forward pass per chunk instead of keeping per-sample
activations between calls; :func:`render_rays_vjp` is the cached variant
used inside the fit loop where one patch at a time fits in memory.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .field import FieldParams, _backward, _forward
from .geometry import BoundingSphere, Camera, Ray, pixel_directions, sphere_interval
from .triplane import Triplane, sample_features, sample_features_backward

CHUNK_RAYS = 512


class RenderError(RuntimeError):
    pass


@dataclass
class RenderConfig:
    samples_per_ray: int = 128
    sphere: BoundingSphere = field(default_factory=BoundingSphere)
    background: tuple = (1.0, 1.0, 1.0)
    stratified: bool = False
    threads: int = 1

    def __post_init__(self):
        if self.samples_per_ray < 1:
            raise ValueError("samples_per_ray must be >= 1")
        bg = np.asarray(self.background, dtype=np.float64)
        if bg.shape != (3,) or np.any(bg < 0) or np.any(bg > 1):
            raise ValueError("background must be an RGB triple in [0, 1]")


@dataclass
class RenderOutput:
    rgb: np.ndarray  # (H, W, 3)
    mask: np.ndarray  # (H, W)


@dataclass
class RayBatch:
    origins: np.ndarray
    dirs: np.ndarray

    def __len__(self):
        return self.origins.shape[0]

    @classmethod
    def from_rays(cls, rays) -> "RayBatch":
        rays = list(rays)
        return cls(np.stack([r.origin for r in rays]).astype(np.float64),
                   np.stack([r.direction for r in rays]).astype(np.float64))

    def take(self, sl) -> "RayBatch":
        return RayBatch(self.origins[sl], self.dirs[sl])


def camera_rays(camera: Camera, top=0, left=0, height=None, width=None) -> RayBatch:
    """Rays through pixel centres of a rectangle, row-major."""
    height = camera.height if height is None else height
    width = camera.width if width is None else width
    if top < 0 or left < 0 or top + height > camera.height or left + width > camera.width:
        raise ValueError(f"patch ({top},{left},{height}x{width}) outside {camera.height}x{camera.width} image")
    rows, cols = np.mgrid[top:top + height, left:left + width]
    px = np.stack([cols.ravel(), rows.ravel()], axis=-1)
    dirs = pixel_directions(camera, px, np.full(px.shape, 0.5))
    return RayBatch(np.broadcast_to(camera.translation, dirs.shape).copy(), dirs)


def draw_jitter(rng, n_rays: int, cfg: RenderConfig):
    """Per-sample in-bin offsets for stratified sampling, None otherwise."""
    if not cfg.stratified:
        return None
    return rng.random((n_rays, cfg.samples_per_ray))


def _samples(rays: RayBatch, cfg: RenderConfig, jitter):
    t0, t1, hit = sphere_interval(rays.origins, rays.dirs, cfg.sphere)
    S = cfg.samples_per_ray
    width = (t1 - t0) / S
    off = np.full((len(rays), S), 0.5) if jitter is None else np.asarray(jitter, dtype=np.float64)
    t = t0[:, None] + (np.arange(S)[None, :] + off) * width[:, None]
    return t, width, hit


@dataclass
class _ChunkCache:
    hit: np.ndarray
    points: np.ndarray
    field_cache: tuple
    delta: np.ndarray
    sigma: np.ndarray
    rgb: np.ndarray
    tau: np.ndarray
    trans: np.ndarray
    alpha: np.ndarray


def composite(sigma, rgb, delta, bg):
    """Alpha-composite per-sample density (n, S) and colour (n, S, 3) front to back.

    Returns ``(rgb (n, 3), mask (n,), tau, trans, alpha)``; the last three
    are the activations ``composite_backward`` needs.
    """
    tau = sigma * delta[:, None]
    csum = np.cumsum(tau, axis=1)
    trans = np.exp(-(csum - tau))  # exclusive
    alpha = -np.expm1(-tau)
    w = trans * alpha
    t_final = np.exp(-csum[:, -1])
    out_rgb = np.einsum("ns,nsc->nc", w, rgb) + t_final[:, None] * bg
    return out_rgb, w.sum(axis=1), tau, trans, alpha


def composite_backward(sigma, rgb, delta, bg, tau, trans, alpha, g_rgb, g_mask):
    """Gradients of ``composite`` w.r.t. sample density and colour."""
    n, S = sigma.shape
    # colour composited by the samples behind k, as seen from just after k
    behind = np.empty_like(rgb)
    acc = np.broadcast_to(bg, (n, 3)).copy()
    for k in range(S - 1, -1, -1):
        behind[:, k] = acc
        acc = alpha[:, k, None] * rgb[:, k] + (1.0 - alpha[:, k, None]) * acc
    rev = np.cumsum(tau[:, ::-1], axis=1)[:, ::-1]
    after = np.exp(-(rev - tau))  # transmittance through samples j > k

    g_alpha = trans * (np.einsum("nc,nsc->ns", g_rgb, rgb - behind) + g_mask[:, None] * after)
    g_sigma = g_alpha * delta[:, None] * np.exp(-tau)
    g_col = (trans * alpha)[:, :, None] * g_rgb[:, None, :]
    return g_sigma, g_col


def _forward_chunk(tp: Triplane, params: FieldParams, rays: RayBatch, cfg: RenderConfig, jitter,
                   offset: int):
    dtype = params.dtype
    bg = np.asarray(cfg.background, dtype=dtype)
    n = len(rays)
    out_rgb = np.broadcast_to(bg, (n, 3)).astype(dtype)
    out_mask = np.zeros(n, dtype=dtype)
    t, width, hit = _samples(rays, cfg, jitter)
    if not hit.any():
        return out_rgb, out_mask, None
    S = cfg.samples_per_ray
    pts = rays.origins[hit, None, :] + t[hit, :, None] * rays.dirs[hit, None, :]
    pts = pts.reshape(-1, 3)
    feats = sample_features(tp, pts)
    sigma, rgb, field_cache = _forward(params, feats)
    sigma = sigma.reshape(-1, S)
    rgb = rgb.reshape(-1, S, 3)
    bad = ~(np.isfinite(sigma).all(axis=1) & np.isfinite(rgb).all(axis=(1, 2)))
    if bad.any():
        ray_idx = offset + int(np.flatnonzero(hit)[np.argmax(bad)])
        raise RenderError(f"non-finite field output on ray {ray_idx}")
    delta = width[hit].astype(dtype)
    c_rgb, c_mask, tau, trans, alpha = composite(sigma, rgb, delta, bg)
    out_rgb[hit] = c_rgb
    out_mask[hit] = c_mask
    return out_rgb, out_mask, _ChunkCache(hit, pts, field_cache, delta, sigma, rgb, tau, trans, alpha)


def _backward_chunk(tp, params, cfg, cache: _ChunkCache, g_rgb, g_mask):
    if cache is None:
        return None, None
    dtype = params.dtype
    bg = np.asarray(cfg.background, dtype=dtype)
    g_rgb = np.asarray(g_rgb, dtype=dtype)[cache.hit]
    g_mask = np.asarray(g_mask, dtype=dtype)[cache.hit]
    g_sigma, g_col = composite_backward(cache.sigma, cache.rgb, cache.delta, bg, cache.tau, cache.trans,
                                        cache.alpha, g_rgb, g_mask)
    sigma, rgb = cache.sigma, cache.rgb
    d_feats, d_params = _backward(params, sigma.reshape(-1), rgb.reshape(-1, 3), cache.field_cache,
                                  g_sigma.reshape(-1), g_col.reshape(-1, 3))
    d_planes = sample_features_backward(tp, cache.points, d_feats)
    return d_planes, d_params


def _chunks(n):
    return [slice(s, min(s + CHUNK_RAYS, n)) for s in range(0, n, CHUNK_RAYS)]


def _map(fn, items, threads):
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _as_batch(rays) -> RayBatch:
    if isinstance(rays, RayBatch):
        return rays
    if isinstance(rays, Ray):
        return RayBatch.from_rays([rays])
    return RayBatch.from_rays(rays)


def render_rays_vjp(tp: Triplane, params: FieldParams, rays, cfg: RenderConfig, jitter=None):
    """Forward render that keeps activations.

    Returns ``(rgb (N,3), mask (N,), backward)`` where ``backward(g_rgb,
    g_mask)`` yields ``(triplane gradient, FieldParams gradient)``.
    """
    rays = _as_batch(rays)
    chunks = _chunks(len(rays))

    def fwd(sl):
        jit = None if jitter is None else jitter[sl]
        return _forward_chunk(tp, params, rays.take(sl), cfg, jit, sl.start)

    results = _map(fwd, chunks, cfg.threads)
    rgb = np.concatenate([r[0] for r in results]) if results else np.zeros((0, 3), params.dtype)
    mask = np.concatenate([r[1] for r in results]) if results else np.zeros(0, params.dtype)

    def backward(g_rgb, g_mask):
        g_rgb = np.asarray(g_rgb).reshape(-1, 3)
        g_mask = np.asarray(g_mask).reshape(-1)

        def bwd(item):
            sl, res = item
            return _backward_chunk(tp, params, cfg, res[2], g_rgb[sl], g_mask[sl])

        parts = _map(bwd, list(zip(chunks, results)), cfg.threads)
        d_planes = np.zeros_like(tp.planes)
        d_params = params.zeros_like()
        for dp, dpar in parts:  # fixed chunk order
            if dp is None:
                continue
            d_planes += dp
            d_params = d_params.with_arrays([a + b for a, b in zip(d_params.arrays(), dpar.arrays())])
        return d_planes, d_params

    return rgb, mask, backward


def render_rays(tp: Triplane, params: FieldParams, rays, cfg: RenderConfig, jitter=None):
    """Per-ray ``(rgb (N,3), mask (N,))``; rays missing the sphere get the background."""
    rgb, mask, _ = render_rays_vjp(tp, params, rays, cfg, jitter)
    return rgb, mask


def render_backward(tp: Triplane, params: FieldParams, rays, cfg: RenderConfig, g_rgb, g_mask,
                    jitter=None):
    """Gradients of ``sum(g_rgb*rgb) + sum(g_mask*mask)`` w.r.t. planes and field params."""
    _, _, backward = render_rays_vjp(tp, params, rays, cfg, jitter)
    return backward(g_rgb, g_mask)


def render_patch(tp: Triplane, params: FieldParams, camera: Camera, top: int, left: int,
                 height: int, width: int, cfg: RenderConfig, jitter=None) -> RenderOutput:
    rays = camera_rays(camera, top, left, height, width)
    rgb, mask = render_rays(tp, params, rays, cfg, jitter)
    return RenderOutput(rgb.reshape(height, width, 3), mask.reshape(height, width))


def render_view(tp: Triplane, params: FieldParams, camera: Camera, cfg: RenderConfig,
                jitter=None) -> RenderOutput:
    return render_patch(tp, params, camera, 0, 0, camera.height, camera.width, cfg, jitter)
