"""Command-line entry point.

Every subcommand resolves a ``RunConfig`` (defaults < ``--config`` file <
flags), writes ``effective_config.json`` next to its outputs and exits with
0 on success, 1 on a runtime failure and 2 on a usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .config import RunConfig
from .denoise import EditTargets, GuidanceScales, ProceduralDenoiser
from .editor import EditTask, edit_image
from .field import Camera, VoxelField, fit_field, render_image
from .metrics import frame_consistency, mask_iou, psnr_report
from .relevance import compute_relevance, mask_to_pixel, threshold_mask
from .scene_edit import TrainingSet, edit_scene
from .synth import (
    SceneSpec,
    apply_instruction,
    build_scene,
    capture,
    default_scene,
    image_task,
    lookup_rule,
    orbit_cameras,
    random_scene,
    register_pairs,
)

log = logging.getLogger("localedit")


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# Shared helpers


def _load_config(args) -> RunConfig:
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
    except (ValueError, json.JSONDecodeError) as exc:
        raise UsageError(f"bad config {args.config}: {exc}") from exc
    if args.seed is not None:
        cfg.seed = args.seed
    if args.deterministic:
        cfg.deterministic = True
    overrides = {
        "trel": ("relevance", "t_rel"),
        "tau": ("editor", "tau"),
        "si": ("editor", "s_I"),
        "st": ("editor", "s_T"),
        "tedit": ("editor", "t_edit"),
        "steps": ("editor", "steps"),
        "iters": ("field", "prefit_iters"),
        "edit_iters": ("scene_edit", "total_iters"),
        "views": ("synth", "n_views"),
        "resolution": ("synth", "resolution"),
    }
    for flag, (section, key) in overrides.items():
        value = getattr(args, flag, None)
        if value is not None:
            setattr(getattr(cfg, section), key, value)
    return cfg


def _write_config(cfg: RunConfig, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cfg.dump(directory / "effective_config.json")


def _load_scene(path) -> SceneSpec:
    if path is None:
        return default_scene()
    return SceneSpec.from_dict(json.loads(Path(path).read_text()))


def _orbit(cfg: RunConfig, spec: SceneSpec) -> list[Camera]:
    s = cfg.synth
    target = 0.5 * (np.asarray(spec.bbox_min) + np.asarray(spec.bbox_max))
    return orbit_cameras(s.n_views, radius=s.radius, elevation_deg=s.elevation_deg,
                         resolution=s.resolution, fov_deg=s.fov_deg, target=target)


def _image_denoiser(cfg: RunConfig, spec: SceneSpec, instruction: str, image: np.ndarray):
    """Procedural oracle whose targets are the scene's top view and orbit views."""
    codec = cfg.codec.build()
    targets = EditTargets()
    rule = lookup_rule(spec, instruction)
    if rule.effect == "noop":
        targets.register_noop(instruction)
    else:
        H, W = image.shape[:2]
        pairs = []
        if H == W:
            before, after, _ = image_task(spec, instruction, H)
            pairs.append((before, after))
        if (H, W) == (cfg.synth.resolution, cfg.synth.resolution):
            edited, _ = apply_instruction(spec, rule)
            f0 = build_scene(spec, cfg.field.dims)
            f1 = build_scene(edited, cfg.field.dims)
            for cam in _orbit(cfg, spec):
                pairs.append((render_image(f0, cam, cfg.field.n_samples, background=spec.background)[0],
                              render_image(f1, cam, cfg.field.n_samples, background=spec.background)[0]))
        register_pairs(targets, codec, instruction, pairs)
    return ProceduralDenoiser(cfg.schedule.build(), targets), codec


def _read_image(path) -> np.ndarray:
    img = io.read_png(path)
    if img.dtype == bool:
        raise UsageError(f"{path} is a mask, not an RGB image")
    return img


def _out_dir(path) -> Path:
    return Path(path).resolve().parent


def _ensure_parents(*paths) -> None:
    for p in paths:
        if p:
            Path(p).resolve().parent.mkdir(parents=True, exist_ok=True)


# --------------------------------------------------------------------------
# Subcommands


def cmd_relevance(args) -> None:
    cfg = _load_config(args)
    image = _read_image(args.input)
    spec = _load_scene(args.scene)
    den, codec = _image_denoiser(cfg, spec, args.instruction, image)
    rel = compute_relevance(den, codec, image, args.instruction, cfg.relevance.t_rel, cfg.seed,
                            samples=cfg.relevance.samples)
    mask = mask_to_pixel(threshold_mask(rel, cfg.editor.tau), codec)
    _ensure_parents(args.out, args.mask)
    io.write_pfm(args.out, rel)
    io.write_mask_png(args.mask, mask)
    _write_config(cfg, _out_dir(args.out))


def cmd_edit_image(args) -> None:
    cfg = _load_config(args)
    image = _read_image(args.input)
    spec = _load_scene(args.scene)
    den, codec = _image_denoiser(cfg, spec, args.instruction, image)
    e = cfg.editor
    task = EditTask(args.instruction, GuidanceScales(e.s_I, e.s_T), e.tau, e.t_edit, e.steps, cfg.seed)
    result = edit_image(den, codec, image, task, t_rel=cfg.relevance.t_rel,
                        relevance_samples=cfg.relevance.samples,
                        resample_unedited_noise=e.resample_unedited_noise)
    _ensure_parents(args.out, args.relevance, args.mask)
    io.write_png(args.out, result.image)
    if args.relevance:
        io.write_pfm(args.relevance, result.relevance)
    if args.mask:
        io.write_mask_png(args.mask, result.pixel_mask)
    _write_config(cfg, _out_dir(args.out))


def cmd_synth(args) -> None:
    cfg = _load_config(args)
    if args.action == "make-scene":
        spec = random_scene(np.random.default_rng(cfg.seed), args.random) if args.random else default_scene()
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
        _write_config(cfg, _out_dir(out))
        return

    spec = _load_scene(args.scene)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.action == "capture":
        gt = build_scene(spec, cfg.field.dims)
        cams = _orbit(cfg, spec)
        for k, cam in enumerate(cams):
            io.write_png(out / f"view_{k:03d}.png",
                         render_image(gt, cam, cfg.field.n_samples, background=spec.background)[0])
        (out / "cameras.json").write_text(json.dumps([c.to_dict() for c in cams], indent=2) + "\n")
    else:  # image
        if not args.instruction:
            raise UsageError("synth image needs --instruction")
        before, after, support = image_task(spec, args.instruction, cfg.synth.resolution)
        io.write_png(out / "before.png", before)
        io.write_png(out / "after.png", after)
        io.write_mask_png(out / "support.png", support)
    _write_config(cfg, out)


def _captures(cfg: RunConfig, spec: SceneSpec):
    s = cfg.synth
    gt = build_scene(spec, cfg.field.dims)
    return capture(gt, s.n_views, resolution=s.resolution, radius=s.radius,
                   elevation_deg=s.elevation_deg, fov_deg=s.fov_deg,
                   n_samples=cfg.field.n_samples, background=spec.background)


def _prefit(cfg: RunConfig, spec: SceneSpec, views) -> VoxelField:
    f = cfg.field
    start = VoxelField.empty(f.dims, spec.bbox_min, spec.bbox_max)
    return fit_field(start, views, f.prefit_iters, lr=f.lr, lr_density=f.lr_density, batch_size=f.batch_size,
                     n_samples=f.n_samples, seed=cfg.seed, background=spec.background)


def cmd_fit(args) -> None:
    cfg = _load_config(args)
    spec = _load_scene(args.scene)
    views = _captures(cfg, spec)
    fitted = _prefit(cfg, spec, views)
    io.save_field(args.out, fitted)
    _write_config(cfg, args.out)


def cmd_edit_scene(args) -> None:
    cfg = _load_config(args)
    spec = _load_scene(args.scene)
    lookup_rule(spec, args.instruction)
    views = _captures(cfg, spec)
    cams = [c for c, _ in views]
    fitted = io.load_field(args.prefit) if args.prefit else _prefit(cfg, spec, views)

    codec = cfg.codec.build()
    targets = EditTargets()
    rule = lookup_rule(spec, args.instruction)
    if rule.effect == "noop":
        targets.register_noop(args.instruction)
    else:
        edited, _ = apply_instruction(spec, rule)
        gte = build_scene(edited, cfg.field.dims)
        register_pairs(targets, codec, args.instruction, [
            (img, render_image(gte, c, cfg.field.n_samples, background=spec.background)[0])
            for c, img in views
        ])
    den = ProceduralDenoiser(cfg.schedule.build(), targets)
    se_cfg = cfg.scene_edit.build(cfg.relevance, cfg.field)
    result = edit_scene(fitted, TrainingSet(cams, [img for _, img in views]), den, codec,
                        args.instruction, se_cfg, cfg.seed, background=spec.background)

    io.save_field(args.out, result.field)
    log_path = Path(args.log) if args.log else Path(args.out) / "metrics.csv"
    log_path.parent.mkdir(parents=True, exist_ok=True)
    with open(log_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, ["iter", "view", "loss_rgb", "loss_rel", "edit_psnr", "mask_area"])
        writer.writeheader()
        writer.writerows(result.log)
    _write_config(cfg, args.out)


def cmd_render(args) -> None:
    cfg = _load_config(args)
    spec = _load_scene(args.scene)
    fld = io.load_field(args.field)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k, cam in enumerate(_orbit(cfg, spec)):
        rgb, alpha, rel = render_image(fld, cam, cfg.field.n_samples, background=spec.background)
        io.write_png(out / f"view_{k:03d}.png", rgb)
        io.write_pfm(out / f"alpha_{k:03d}.pfm", alpha)
        io.write_pfm(out / f"relevance_{k:03d}.pfm", rel)
    _write_config(cfg, out)


def _read_any(path) -> np.ndarray:
    return io.read_pfm(path) if str(path).lower().endswith(".pfm") else io.read_png(path)


def cmd_metrics(args) -> None:
    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    if args.metric == "psnr":
        if len(args.a) != len(args.b):
            raise UsageError("--a and --b need the same number of images")
        masks = [io.read_mask_png(m) for m in args.mask] if args.mask else None
        report = psnr_report([(_read_any(a), _read_any(b)) for a, b in zip(args.a, args.b)], masks)
        rows = [{"a": a, "b": b, "psnr": v} for a, b, v in zip(args.a, args.b, report.values)]
        summary = report.to_dict()
    elif args.metric == "iou":
        if len(args.a) != len(args.b):
            raise UsageError("--a and --b need the same number of masks")
        values = [mask_iou(io.read_mask_png(a), io.read_mask_png(b)) for a, b in zip(args.a, args.b)]
        rows = [{"a": a, "b": b, "iou": v} for a, b, v in zip(args.a, args.b, values)]
        summary = {"name": "mask_iou", "values": values, "mean": float(np.mean(values)),
                   "family": "pixel"}
    else:
        value = frame_consistency([_read_any(p) for p in args.frames])
        rows = [{"frames": len(args.frames), "frame_consistency": value}]
        summary = {"name": "frame_consistency", "values": [value], "mean": value, "family": "pixel"}
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _write_config(cfg, out)


# --------------------------------------------------------------------------
# Parser


def _common(p):
    p.add_argument("--config", help="JSON run config; flags override its values")
    p.add_argument("--seed", type=int)
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="localedit", description="Relevance-guided localized editing.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("relevance", help="relevance map and mask of an image for an instruction")
    _common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--instruction", required=True)
    p.add_argument("--scene", help="scene JSON the oracle targets come from (default scene if omitted)")
    p.add_argument("--trel", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--out", default="rel.pfm")
    p.add_argument("--mask", default="mask.png")
    p.set_defaults(func=cmd_relevance)

    p = sub.add_parser("edit-image", help="relevance-masked edit of one image")
    _common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--instruction", required=True)
    p.add_argument("--scene")
    p.add_argument("--tau", type=float)
    p.add_argument("--si", type=float)
    p.add_argument("--st", type=float)
    p.add_argument("--tedit", type=float)
    p.add_argument("--trel", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--out", default="out.png")
    p.add_argument("--relevance")
    p.add_argument("--mask")
    p.set_defaults(func=cmd_edit_image)

    p = sub.add_parser("synth", help="synthetic scenes, captures and image tasks")
    _common(p)
    p.add_argument("action", choices=["make-scene", "capture", "image"])
    p.add_argument("--scene")
    p.add_argument("--instruction")
    p.add_argument("--random", type=int, default=0, help="make-scene: number of random primitives")
    p.add_argument("--views", type=int)
    p.add_argument("--resolution", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit", help="fit a voxel field to captures of a scene")
    _common(p)
    p.add_argument("--scene")
    p.add_argument("--iters", type=int)
    p.add_argument("--views", type=int)
    p.add_argument("--resolution", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("edit-scene", help="relevance-guided scene edit")
    _common(p)
    p.add_argument("--scene")
    p.add_argument("--instruction", required=True)
    p.add_argument("--prefit", help="checkpoint directory of a pre-fitted field")
    p.add_argument("--iters", type=int, help="pre-fit iterations when --prefit is absent")
    p.add_argument("--edit-iters", dest="edit_iters", type=int)
    p.add_argument("--views", type=int)
    p.add_argument("--resolution", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--log")
    p.set_defaults(func=cmd_edit_scene)

    p = sub.add_parser("render", help="render a checkpoint from orbit cameras")
    _common(p)
    p.add_argument("--field", required=True)
    p.add_argument("--scene")
    p.add_argument("--views", type=int)
    p.add_argument("--resolution", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("metrics", help="PSNR, mask IoU and frame consistency")
    _common(p)
    p.add_argument("metric", choices=["psnr", "iou", "frames"])
    p.add_argument("--a", nargs="+", default=[])
    p.add_argument("--b", nargs="+", default=[])
    p.add_argument("--mask", nargs="+", help="psnr: masks of pixels to include")
    p.add_argument("--frames", nargs="+", default=[])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_metrics)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"localedit {args.command}: usage error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 -- one-line diagnostic, nonzero exit
        text = str(exc.args[0]) if isinstance(exc, KeyError) and exc.args else str(exc)
        msg = text.strip().splitlines()[0] if text.strip() else type(exc).__name__
        print(f"localedit {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0
