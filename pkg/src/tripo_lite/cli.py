"""``tripo-lite`` command line: render, fit, extract, eval, forward, demo.

Exit codes: 0 success, 2 input/validation error, 3 numerical abort.
``TRIPO_LITE_OUT`` and ``TRIPO_LITE_THREADS`` override the defaults of
``--out`` and ``--threads``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import jsonschema
import numpy as np
from PIL import Image

from . import backbone as bb
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .field import FieldParams
from .fit import FitAborted, FitConfig, ModelConfig, fit_step, init_state, smoothed
from .geometry import Camera, look_at_camera
from .losses import LossWeights
from .mesh import (MeshParseError, clean_grid, colorize_vertices, marching_cubes, read_mesh, sample_density_grid,
                   write_mesh)
from .metrics import DEFAULT_TAUS, evaluate
from .optim import OptimizerConfig
from .renderer import RenderConfig, RenderError, draw_jitter, render_view
from .scenes import ShapeSpec, make_synthetic_scene
from .triplane import Triplane

log = logging.getLogger("tripo_lite")

EXIT_INPUT = 2
EXIT_NUMERIC = 3


class InputError(Exception):
    pass


_NUM = {"type": "number"}
_POS_INT = {"type": "integer", "minimum": 1}
_NONNEG_INT = {"type": "integer", "minimum": 0}
_VEC3 = {"type": "array", "items": _NUM, "minItems": 3, "maxItems": 3}

FIT_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": _NONNEG_INT,
        "steps": _NONNEG_INT,
        "scene": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "shape": {
                    "type": "object", "additionalProperties": False,
                    "properties": {
                        "kind": {"enum": ["sphere", "box", "superquadric"]},
                        "center": _VEC3,
                        "size": {"oneOf": [{"type": "number", "exclusiveMinimum": 0}, _VEC3]},
                        "exponents": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0},
                                      "minItems": 2, "maxItems": 2},
                        "albedo": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1},
                                   "minItems": 3, "maxItems": 3},
                        "albedo_mode": {"enum": ["constant", "position"]},
                    },
                },
                "n_views": _POS_INT,
                "resolution": {"type": "integer", "minimum": 4},
            },
        },
        "optimizer": {
            "type": "object", "additionalProperties": False,
            "properties": {"base_lr": {"type": "number", "exclusiveMinimum": 0},
                           "warmup_steps": _NONNEG_INT, "beta1": _NUM, "beta2": _NUM,
                           "weight_decay": {"type": "number", "minimum": 0},
                           "triplane_lr_scale": {"type": "number", "exclusiveMinimum": 0}},
        },
        "weights": {
            "type": "object", "additionalProperties": False,
            "properties": {"lambda_lpips": {"type": "number", "minimum": 0},
                           "lambda_mask": {"type": "number", "minimum": 0}},
        },
        "patch": {
            "type": "object", "additionalProperties": False,
            "properties": {"size": _POS_INT, "p_fg": {"type": "number", "minimum": 0, "maximum": 1}},
        },
        "render": {
            "type": "object", "additionalProperties": False,
            "properties": {"samples_per_ray": _POS_INT, "stratified": {"type": "boolean"}},
        },
        "model": {
            "type": "object", "additionalProperties": False,
            "properties": {"triplane_res": {"type": "integer", "minimum": 2}, "channels": _POS_INT,
                           "width": _POS_INT, "n_layers": _POS_INT, "density_bias": _NUM,
                           "init_scale": {"type": "number", "minimum": 0}},
        },
        "checkpoint_every": _NONNEG_INT,
    },
}

CAMERA_SCHEMA = {
    "type": "object",
    "required": ["pose", "fov_y_deg", "width", "height"],
    "properties": {
        "pose": {"type": "array", "items": _NUM, "minItems": 12, "maxItems": 12},
        "fov_y_deg": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 180},
        "width": _POS_INT,
        "height": _POS_INT,
    },
}


def validate(data, schema, what: str):
    """Raise InputError naming every failing field."""
    errors = sorted(jsonschema.Draft7Validator(schema).iter_errors(data), key=lambda e: list(e.path))
    if errors:
        lines = [f"  {'/'.join(str(p) for p in e.path) or '<root>'}: {e.message}" for e in errors]
        raise InputError(f"invalid {what}:\n" + "\n".join(lines))


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read {path}: {exc}") from None


def _dtype(args):
    return np.float64 if args.precision == 64 else np.float32


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _inside(out: Path, name: str) -> Path:
    path = (out / name).resolve()
    if out.resolve() not in path.parents:
        raise InputError(f"{name!r} would be written outside --out")
    return path


def _load(path, args):
    try:
        tp, params, sections = load_checkpoint(path, _dtype(args))
    except (OSError, CheckpointError) as exc:
        raise InputError(f"unreadable checkpoint: {exc}") from None
    if params is None:
        raise InputError(f"checkpoint {path} has no field parameters")
    return tp, params, sections


def _png(path, arr):
    img = np.clip(np.round(np.asarray(arr, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img).save(path, format="PNG")


# --- commands -------------------------------------------------------------

def cmd_demo(args) -> int:
    """Zero-weight checkpoint: constant density exp(-1), grey colour everywhere."""
    out = _out_dir(args)
    tp = Triplane.zeros(args.resolution, args.channels)
    params = FieldParams.zeros(3 * args.channels, args.width, args.layers)
    path = _inside(out, args.name)
    save_checkpoint(path, tp, params, {"meta.seed": np.array([0.0])})
    print(f"wrote {path}")
    return 0


def cmd_render(args) -> int:
    out = _out_dir(args)
    tp, params, _ = _load(args.checkpoint, args)
    if args.camera:
        data = _read_json(args.camera)
        validate(data, CAMERA_SCHEMA, "camera")
        try:
            cam = Camera.from_json(data)
        except ValueError as exc:
            raise InputError(f"invalid camera: {exc}") from None
    else:
        cam = look_at_camera([0.0, 0.0, 2.0], [0.0, 0.0, 0.0], [0.0, 1.0, 0.0], math.radians(40.0), 64, 64)
    if args.size:
        cam = Camera(cam.rotation, cam.translation, cam.fov_y, args.size, args.size)
    cfg = RenderConfig(samples_per_ray=args.samples, stratified=args.stratified, threads=args.threads)
    jitter = draw_jitter(np.random.default_rng(args.seed), cam.width * cam.height, cfg)
    t = time.perf_counter()
    res = render_view(tp, params, cam, cfg, jitter)
    dt = time.perf_counter() - t
    _png(_inside(out, "rgb.png"), res.rgb)
    _png(_inside(out, "mask.png"), res.mask)
    print(f"rendered {cam.width}x{cam.height} in {dt:.3f}s (seed {args.seed}) -> {out}")
    return 0


def fit_config_objects(cfg: dict):
    shape = ShapeSpec(**cfg.get("scene", {}).get("shape", {}))
    scene_cfg = cfg.get("scene", {})
    steps = cfg.get("steps", 3000)
    opt = dict(cfg.get("optimizer", {}))
    tlr = opt.pop("triplane_lr_scale", 1.0)
    opt.setdefault("warmup_steps", min(200, steps))
    opt_cfg = OptimizerConfig(total_steps=max(steps, opt["warmup_steps"], 1), **opt)
    patch = cfg.get("patch", {})
    fit_cfg = FitConfig(steps=steps, seed=cfg.get("seed", 0), patch_size=patch.get("size"),
                        p_fg=patch.get("p_fg", 0.8), triplane_lr_scale=tlr,
                        model=ModelConfig(**cfg.get("model", {})))
    render = {"stratified": True, **cfg.get("render", {})}
    return (shape, scene_cfg.get("n_views", 8), scene_cfg.get("resolution", 64), fit_cfg, opt_cfg,
            RenderConfig(**render), LossWeights(**cfg.get("weights", {})))


def cmd_fit(args) -> int:
    out = _out_dir(args)
    cfg = _read_json(args.config)
    validate(cfg, FIT_SCHEMA, "fit config")
    try:
        shape, n_views, res, fit_cfg, opt_cfg, render_cfg, weights = fit_config_objects(cfg)
    except ValueError as exc:
        raise InputError(f"invalid fit config: {exc}") from None
    render_cfg.threads = args.threads
    scene = make_synthetic_scene(shape, n_views, res)
    patch = fit_cfg.patch_size or res // 4
    if patch > res:
        raise InputError(f"patch size {patch} exceeds resolution {res}")
    state = init_state(fit_cfg.model, opt_cfg, fit_cfg.seed, fit_cfg.triplane_lr_scale)
    rng = np.random.default_rng([fit_cfg.seed, 1])
    every = cfg.get("checkpoint_every", 0)
    meta = {"meta.seed": np.array([float(fit_cfg.seed)])}
    log_path = _inside(out, "loss.jsonl")
    t = time.perf_counter()
    with open(log_path, "w") as fh:
        for _ in range(fit_cfg.steps):
            try:
                fit_step(state, scene, rng, opt_cfg, render_cfg, weights, patch, fit_cfg.p_fg)
            except (FitAborted, RenderError, FloatingPointError) as exc:
                step = getattr(exc, "step", state.step + 1)
                print(f"numerical abort at step {step}: {exc}", file=sys.stderr)
                return EXIT_NUMERIC
            fh.write(json.dumps({**state.history[-1], "seed": fit_cfg.seed}) + "\n")
            if every and state.step % every == 0:
                save_checkpoint(_inside(out, f"checkpoint_{state.step:06d}.bin"), state.triplane,
                                state.params, meta)
    wall = time.perf_counter() - t
    save_checkpoint(_inside(out, "checkpoint.bin"), state.triplane, state.params, meta)
    sm = smoothed(state.history)
    summary = {"steps": state.step, "seed": fit_cfg.seed, "wall_time_s": wall,
               "initial_smoothed_loss": float(sm[0]) if len(sm) else None,
               "final_smoothed_loss": float(sm[-1]) if len(sm) else None}
    _inside(out, "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))
    return 0


def cmd_extract(args) -> int:
    out = _out_dir(args)
    tp, params, _ = _load(args.checkpoint, args)
    grid = sample_density_grid(tp, params, args.grid)
    if not args.raw:
        grid = clean_grid(grid, args.isolevel)
    mesh = marching_cubes(grid, args.isolevel)
    if mesh.is_empty:
        print(f"warning: no isosurface at level {args.isolevel} (density range "
              f"{grid.values.min():.4g}..{grid.values.max():.4g}); no file written", file=sys.stderr)
        return 0
    if args.color:
        mesh = colorize_vertices(mesh, tp, params)
    path = _inside(out, args.output)
    if path.suffix.lower() not in (".obj", ".ply"):
        raise InputError("--output must end in .obj or .ply")
    write_mesh(mesh, path)
    print(f"wrote {path}: {len(mesh.vertices)} vertices, {len(mesh.faces)} faces, "
          f"closed={mesh.is_closed()}")
    return 0


CSV_FIELDS = ["path_pred", "path_gt", "cd", "fs@0.1", "fs@0.2", "fs@0.5", "yaw_deg", "icp_iters", "seed"]


def cmd_eval(args) -> int:
    out = _out_dir(args)
    try:
        pred, gt = read_mesh(args.pred), read_mesh(args.gt)
    except (OSError, MeshParseError, ValueError) as exc:
        raise InputError(f"cannot read mesh: {exc}") from None
    for name, m in (("pred", pred), ("gt", gt)):
        if m.is_empty:
            raise InputError(f"{name} mesh is empty")
    taus = tuple(args.taus) if args.taus else DEFAULT_TAUS
    report = evaluate(pred, gt, n_points=args.points, seed=args.seed, taus=taus, threads=args.threads)
    row = {"path_pred": args.pred, "path_gt": args.gt, **report.row()}
    fields = CSV_FIELDS + [k for k in row if k not in CSV_FIELDS]
    path = _inside(out, args.csv)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        if new:
            writer.writeheader()
        writer.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in row.items()})
    print(f"CD {report.cd:.6f}  " + "  ".join(f"FS@{t:g} {v:.4f}" for t, v in sorted(report.fs.items()))
          + f"  yaw {math.degrees(report.alignment.yaw):.1f} deg  icp {report.alignment.iterations} it"
          + f"  seed {args.seed}")
    return 0


def cmd_forward(args) -> int:
    cfg = bb.BackboneConfig.paper() if args.preset == "paper" else bb.BackboneConfig.toy()
    try:
        img = np.asarray(Image.open(args.image).convert("RGB"), dtype=np.float64) / 255.0
    except OSError as exc:
        raise InputError(f"cannot read image: {exc}") from None
    res = cfg.image_resolution
    if img.shape[:2] != (res, res):
        raise InputError(f"{args.preset} preset needs a {res}x{res} image, got "
                         f"{img.shape[1]}x{img.shape[0]}")
    print(f"{'stage':<18} shape")
    for name, shape in bb.shape_trace(cfg):
        print(f"{name:<18} {' x '.join(str(s) for s in shape)}")
    if args.preset == "paper":
        return 0
    out = _out_dir(args)
    params = bb.BackboneParams.init(np.random.default_rng(args.seed), cfg)
    tp = bb.image_to_triplane(img, cfg, params)
    if not np.all(np.isfinite(tp.planes)):
        print("non-finite triplane", file=sys.stderr)
        return EXIT_NUMERIC
    path = _inside(out, "triplane.bin")
    save_checkpoint(path, tp, None, params.flat() + [("meta.seed", np.array([float(args.seed)]))])
    print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tripo-lite", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default=os.environ.get("TRIPO_LITE_OUT", "out"))
    common.add_argument("--threads", type=int, default=int(os.environ.get("TRIPO_LITE_THREADS", os.cpu_count() or 1)))
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--precision", type=int, choices=(32, 64), default=32)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("demo", parents=[common], help="write a zero-weight checkpoint")
    s.add_argument("--name", default="demo.bin")
    s.add_argument("--resolution", type=int, default=64)
    s.add_argument("--channels", type=int, default=40)
    s.add_argument("--width", type=int, default=64)
    s.add_argument("--layers", type=int, default=10)
    s.set_defaults(func=cmd_demo)

    s = sub.add_parser("render", parents=[common], help="render rgb.png and mask.png")
    s.add_argument("checkpoint")
    s.add_argument("--camera", help="camera JSON file")
    s.add_argument("--size", type=int)
    s.add_argument("--samples", type=int, default=128)
    s.add_argument("--stratified", action="store_true")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("fit", parents=[common], help="fit a triplane to a synthetic scene")
    s.add_argument("config")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("extract", parents=[common], help="marching-cubes mesh from a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("--grid", type=int, default=128)
    s.add_argument("--isolevel", type=float, default=10.0)
    s.add_argument("--color", action="store_true")
    s.add_argument("--raw", action="store_true", help="skip dropping detached blobs and filling cavities")
    s.add_argument("--output", default="mesh.obj")
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("eval", parents=[common], help="CD / F-score between two meshes")
    s.add_argument("pred")
    s.add_argument("gt")
    s.add_argument("--points", type=int, default=10_000)
    s.add_argument("--taus", type=float, nargs="+")
    s.add_argument("--csv", default="metrics.csv")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("forward", parents=[common], help="image-to-triplane forward / shape trace")
    s.add_argument("image")
    s.add_argument("--preset", choices=("paper", "toy"), default="toy")
    s.set_defaults(func=cmd_forward)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
