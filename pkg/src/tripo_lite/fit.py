"""Direct triplane + field fitting against rendered supervision.

Each step draws one view uniformly from the rig and one patch from it
(importance-biased toward the foreground), renders the patch, evaluates the
weighted loss, backpropagates through compositing, field and triplane
sampling, and applies one AdamW update at the scheduled learning rate.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .field import FieldParams
from .geometry import Camera
from .losses import LossReport, LossWeights, SupervisionView, sample_patch, total_loss
from .optim import AdamW, OptimizerConfig, lr_at_step
from .renderer import RenderConfig, RenderOutput, camera_rays, draw_jitter, render_rays_vjp
from .scenes import SyntheticScene
from .triplane import Triplane

log = logging.getLogger(__name__)


class FitAborted(RuntimeError):
    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


@dataclass
class ModelConfig:
    triplane_res: int = 64
    channels: int = 40
    width: int = 64
    n_layers: int = 10
    density_bias: float = -1.0
    init_scale: float = 0.1


@dataclass
class FitConfig:
    steps: int = 3000
    seed: int = 0
    patch_size: int | None = None  # default: resolution // 4
    p_fg: float = 0.8
    triplane_lr_scale: float = 1.0
    model: ModelConfig = field(default_factory=ModelConfig)


@dataclass
class FitState:
    triplane: Triplane
    params: FieldParams
    optimizer: AdamW
    step: int = 0
    history: list = field(default_factory=list)

    def trainable(self) -> list:
        return [self.triplane.planes] + self.params.arrays()


def init_state(model: ModelConfig, opt_cfg: OptimizerConfig, seed: int, triplane_lr_scale=1.0) -> FitState:
    rng = np.random.default_rng(seed)
    tp = Triplane.random(rng, model.triplane_res, model.channels, scale=model.init_scale)
    params = FieldParams.init(rng, 3 * model.channels, model.width, model.n_layers, model.density_bias)
    arrays = [tp.planes] + params.arrays()
    opt = AdamW(arrays, opt_cfg, lr_scale=[triplane_lr_scale] + [1.0] * (len(arrays) - 1))
    return FitState(tp, params, opt)


def smoothed(history, window: int = 50) -> np.ndarray:
    """Trailing moving average of the total loss."""
    vals = np.array([h.total if isinstance(h, LossReport) else h["total"] for h in history])
    if len(vals) == 0:
        return vals
    c = np.concatenate([[0.0], np.cumsum(vals)])
    idx = np.arange(1, len(vals) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def fit_step(state: FitState, scene: SyntheticScene, rng, opt_cfg: OptimizerConfig, render_cfg: RenderConfig,
             weights: LossWeights, patch_size: int, p_fg: float, plugin=None) -> LossReport:
    v = int(rng.integers(len(scene.views)))
    view = scene.views[v]
    patch = sample_patch(view.mask, rng, size=patch_size, p_fg=p_fg)
    sl = np.s_[patch.top:patch.top + patch_size, patch.left:patch.left + patch_size]
    rays = camera_rays(view.camera, patch.top, patch.left, patch_size, patch_size)
    jitter = draw_jitter(rng, len(rays), render_cfg)
    rgb, mask, backward = render_rays_vjp(state.triplane, state.params, rays, render_cfg, jitter)
    render = RenderOutput(rgb.reshape(patch_size, patch_size, 3), mask.reshape(patch_size, patch_size))
    crop = SupervisionView(view.image[sl], view.mask[sl], _patch_camera(view.camera, patch_size))
    report, grads = total_loss([render], [crop], weights, plugin)
    if not math.isfinite(report.total):
        raise FitAborted(state.step + 1, "non-finite loss")
    g_rgb, g_mask = grads[0]
    d_planes, d_params = backward(g_rgb, g_mask)
    lr = lr_at_step(opt_cfg, state.step + 1)
    accepted = state.optimizer.step(state.trainable(), [d_planes] + d_params.arrays(), lr)
    state.step += 1
    entry = {"step": state.step, "view": v, "top": patch.top, "left": patch.left, "lr": lr,
             "accepted": accepted, **report.to_json()}
    entry.pop("per_view")
    state.history.append(entry)
    return report


def _patch_camera(camera, size):
    # only the size is used for validation; rays come from the full camera
    return Camera(camera.rotation, camera.translation, camera.fov_y, size, size)


def fit(scene: SyntheticScene, cfg: FitConfig | None = None, opt_cfg: OptimizerConfig | None = None,
        render_cfg: RenderConfig | None = None, weights: LossWeights | None = None, plugin=None,
        callback=None) -> FitState:
    """Fit a triplane and field to ``scene``; deterministic given ``cfg.seed``."""
    cfg = cfg or FitConfig()
    if not scene.views:
        raise ValueError("scene has no supervision views")
    opt_cfg = opt_cfg or OptimizerConfig(warmup_steps=min(200, cfg.steps), total_steps=max(cfg.steps, 1))
    render_cfg = render_cfg or RenderConfig(stratified=True, background=scene.background)
    weights = weights or LossWeights()
    patch = cfg.patch_size or scene.views[0].image.shape[0] // 4
    state = init_state(cfg.model, opt_cfg, cfg.seed, cfg.triplane_lr_scale)
    rng = np.random.default_rng([cfg.seed, 1])
    for _ in range(cfg.steps):
        report = fit_step(state, scene, rng, opt_cfg, render_cfg, weights, patch, cfg.p_fg, plugin)
        if callback is not None:
            callback(state, report)
    return state
