"""Rendering supervision: MSE, mask BCE, perceptual term and patch sampling.

Every term is a mean over pixels; the combined loss is then a mean over
views. Each function returns ``(value, gradient w.r.t. prediction)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .geometry import Camera

BCE_EPS = 1e-6


class LossError(ValueError):
    pass


@dataclass
class SupervisionView:
    image: np.ndarray  # (H, W, 3)
    mask: np.ndarray  # (H, W)
    camera: Camera

    def __post_init__(self):
        if self.image.shape[:2] != self.mask.shape or self.image.shape[2:] != (3,):
            raise ValueError("image must be (H, W, 3) and mask (H, W)")
        if self.image.shape[:2] != (self.camera.height, self.camera.width):
            raise ValueError("view size does not match its camera")


@dataclass
class LossWeights:
    lambda_lpips: float = 2.0
    lambda_mask: float = 0.05

    def __post_init__(self):
        if self.lambda_lpips < 0 or self.lambda_mask < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossReport:
    mse: float
    perceptual: float
    mask_bce: float
    total: float
    per_view: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {"mse": self.mse, "perceptual": self.perceptual, "mask_bce": self.mask_bce,
                "total": self.total, "per_view": self.per_view}


@dataclass
class PatchSpec:
    top: int
    left: int
    size: int = 128
    source: int = 512

    def __post_init__(self):
        if not (0 <= self.top <= self.source - self.size and 0 <= self.left <= self.source - self.size):
            raise ValueError(f"patch at ({self.top},{self.left}) size {self.size} leaves {self.source} image")


def _check_shapes(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def mse_loss(pred, gt):
    pred = np.asarray(pred)
    gt = np.asarray(gt, dtype=pred.dtype)
    _check_shapes(pred, gt)
    diff = pred - gt
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def mask_bce_loss(pred_mask, gt_mask, eps: float = BCE_EPS):
    p_raw = np.asarray(pred_mask)
    m = np.asarray(gt_mask, dtype=p_raw.dtype)
    _check_shapes(p_raw, m)
    p = np.clip(p_raw, eps, 1.0 - eps)
    loss = -(m * np.log(p) + (1.0 - m) * np.log1p(-p))
    grad = (p - m) / (p * (1.0 - p)) / p_raw.size
    inside = (p_raw >= eps) & (p_raw <= 1.0 - eps)
    return float(np.mean(loss)), np.where(inside, grad, 0.0).astype(p_raw.dtype)


class PerceptualBackend(Protocol):
    """Non-negative image distance, zero when ``pred == gt``, differentiable."""

    def __call__(self, pred: np.ndarray, gt: np.ndarray) -> tuple[float, np.ndarray]: ...


def _downscale(img):
    h, w = (img.shape[0] // 2) * 2, (img.shape[1] // 2) * 2
    img = img[:h, :w]
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])


def _downscale_backward(g, shape):
    out = np.zeros(shape, dtype=g.dtype)
    q = 0.25 * g
    h, w = g.shape[0] * 2, g.shape[1] * 2
    for di in (0, 1):
        for dj in (0, 1):
            out[di:h:2, dj:w:2] += q
    return out


class GradientProxyLoss:
    """Multi-scale gradient-magnitude L1 proxy. This is NOT LPIPS.

    At each of ``scales`` resolutions (full, then repeated 2x box
    downscales) it takes forward-difference image gradients and the
    per-pixel gradient magnitude ``sqrt(dx^2 + dy^2 + eps^2) - eps``, and
    averages the L1 difference of those magnitudes over pixels. The scale
    terms are summed. ``eps`` keeps the magnitude differentiable at flat
    regions.
    """

    def __init__(self, scales: int = 3, eps: float = 1e-3):
        self.scales = scales
        self.eps = eps

    def _magnitude(self, img):
        dx = img[:-1, 1:] - img[:-1, :-1]
        dy = img[1:, :-1] - img[:-1, :-1]
        return np.sqrt(dx * dx + dy * dy + self.eps ** 2) - self.eps, dx, dy

    def __call__(self, pred, gt):
        pred = np.asarray(pred)
        gt = np.asarray(gt, dtype=pred.dtype)
        _check_shapes(pred, gt)
        levels_p, levels_g = [pred], [gt]
        for _ in range(self.scales - 1):
            if min(levels_p[-1].shape[:2]) < 4:
                break
            levels_p.append(_downscale(levels_p[-1]))
            levels_g.append(_downscale(levels_g[-1]))
        total = 0.0
        grads = []
        for p, g in zip(levels_p, levels_g):
            if min(p.shape[:2]) < 2:
                grads.append(np.zeros_like(p))
                continue
            mp, dx, dy = self._magnitude(p)
            mg, _, _ = self._magnitude(g)
            diff = mp - mg
            total += float(np.mean(np.abs(diff)))
            gm = np.sign(diff) / diff.size
            r = gm / (mp + self.eps)
            gdx, gdy = r * dx, r * dy
            gp = np.zeros_like(p)
            gp[:-1, 1:] += gdx
            gp[:-1, :-1] -= gdx + gdy
            gp[1:, :-1] += gdy
            grads.append(gp)
        for i in range(len(grads) - 1, 0, -1):
            grads[i - 1] = grads[i - 1] + _downscale_backward(grads[i], levels_p[i - 1].shape)
        return total, grads[0]


def perceptual_loss(pred, gt, plugin: PerceptualBackend | None = None):
    plugin = plugin or GradientProxyLoss()
    value, grad = plugin(pred, gt)
    if not math.isfinite(value) or value < 0:
        raise LossError(f"perceptual backend returned invalid value {value!r}")
    if not np.all(np.isfinite(grad)):
        raise LossError("perceptual backend returned a non-finite gradient")
    return value, grad


def total_loss(renders, views, weights: LossWeights | None = None, plugin=None):
    """Weighted per-view loss averaged over views.

    Returns ``(LossReport, [(d_rgb, d_mask) per view])``.
    """
    weights = weights or LossWeights()
    renders, views = list(renders), list(views)
    if not views:
        raise ValueError("need at least one supervision view")
    if len(renders) != len(views):
        raise ValueError("one render per supervision view is required")
    V = len(views)
    per_view, grads = [], []
    for r, v in zip(renders, views):
        mse, g_mse = mse_loss(r.rgb, v.image)
        perc, g_perc = perceptual_loss(r.rgb, v.image, plugin)
        bce, g_bce = mask_bce_loss(r.mask, v.mask)
        tot = mse + weights.lambda_lpips * perc + weights.lambda_mask * bce
        per_view.append({"mse": mse, "perceptual": perc, "mask_bce": bce, "total": tot})
        grads.append(((g_mse + weights.lambda_lpips * g_perc) / V, weights.lambda_mask * g_bce / V))

    def mean(key):
        return math.fsum(pv[key] for pv in per_view) / V

    report = LossReport(mean("mse"), mean("perceptual"), mean("mask_bce"), mean("total"), per_view)
    return report, grads


def sample_patch(gt_mask, rng, size: int = 128, p_fg: float = 0.8, policy: str = "importance") -> PatchSpec:
    """Pick a square crop; biased toward foreground under the importance policy.

    With probability ``p_fg`` the crop is centred on a uniformly drawn
    foreground pixel and clamped into the image; otherwise (or when the mask
    has no foreground) the top-left corner is uniform over valid positions.
    """
    mask = np.asarray(gt_mask)
    H, W = mask.shape
    if H != W:
        raise ValueError("patch sampling expects a square mask")
    if size > H:
        raise ValueError(f"patch size {size} exceeds source size {H}")
    hi = H - size
    if policy == "importance" and rng.random() < p_fg:
        fg = np.flatnonzero(mask.ravel() > 0.5)
        if fg.size:
            r, c = divmod(int(fg[rng.integers(fg.size)]), W)
            top = min(max(r - size // 2, 0), hi)
            left = min(max(c - size // 2, 0), hi)
            return PatchSpec(top, left, size, H)
    elif policy not in ("importance", "uniform"):
        raise ValueError(f"unknown patch policy {policy!r}")
    return PatchSpec(int(rng.integers(hi + 1)), int(rng.integers(hi + 1)), size, H)
