"""Command-line surface: train, render, eval, warp-inspect, sweep-views."""

from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import asdict, fields

import numpy as np
import torch

from .consistency import pixel_loss  # noqa: F401 (re-exported surface)
from .datasets import (SceneDataset, load_blender, load_llff,
                       make_synthetic_scene)
from .geometry import occlusion_mask, sample_novel_pose, warp_at_pixels
from .imaging import save_depth_png16, save_png
from .metrics import MetricsRow, avg_err, psnr, ssim
from .renderer import render_image, render_patch
from .trainer import (TrainConfig, Trainer, load_checkpoint, load_config,
                      train, trainer_from_checkpoint)

SYNTHETIC_KINDS = ("textured-plane", "two-plane-occluder", "textured-cube")


def parse_scene(spec: str, n_views: int, seed: int,
                resolution: int) -> SceneDataset:
    """Scene specifier: synthetic:<kind>, blender:<dir> or llff:<dir>."""
    if ":" not in spec:
        raise ValueError(
            f"scene spec {spec!r} must look like synthetic:textured-cube, "
            "blender:/path/to/scene or llff:/path/to/scene")
    family, arg = spec.split(":", 1)
    if family == "synthetic":
        rng = np.random.default_rng(seed)
        dataset, _ = make_synthetic_scene(arg, n_views, resolution, rng)
        return dataset
    if family == "blender":
        return load_blender(arg, n_views, seed)
    if family == "llff":
        return load_llff(arg, n_views, seed)
    raise ValueError(f"unknown scene family {family!r}")


def _build_config(args) -> TrainConfig:
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        overrides[item.split("=", 1)[0].strip()] = item.split("=", 1)[1].strip()
    typed = {}
    concrete = {f.name: type(getattr(TrainConfig(), f.name))
                for f in fields(TrainConfig)}
    for key, text in overrides.items():
        if key not in concrete:
            raise ValueError(f"unknown config key {key!r}")
        typ = concrete[key]
        typed[key] = (text.lower() in ("1", "true", "yes", "on")
                      if typ is bool else typ(text))
    if args.config:
        cfg = load_config(args.config, overrides=typed)
    else:
        cfg = TrainConfig(**typed)
    direct = {}
    if getattr(args, "loss_mode", None) is not None:
        direct["loss_mode"] = args.loss_mode
    if getattr(args, "total_steps", None) is not None:
        direct["total_steps"] = args.total_steps
    if getattr(args, "seed", None) is not None:
        direct["seed"] = args.seed
    if direct:
        cfg = TrainConfig(**{**asdict(cfg), **direct})
    return cfg


def cmd_train(args) -> int:
    cfg = _build_config(args)
    dataset = parse_scene(args.scene, args.n_views, cfg.seed, args.resolution)
    final = train(cfg, dataset, args.out, resume=args.resume,
                  log_every=args.log_every)
    print(f"final checkpoint: {final}")
    return 0


def cmd_render(args) -> int:
    dataset = parse_scene(args.scene, args.n_views, args.seed, args.resolution)
    trainer = trainer_from_checkpoint(args.ckpt, dataset)
    cam = dataset.cameras[args.view]
    color, depth = render_image(trainer.coarse, trainer.fine, cam,
                                trainer.cfg.n_coarse, trainer.cfg.n_fine,
                                dataset.near, dataset.far, trainer.step,
                                trainer.enc_spec, trainer.background)
    os.makedirs(args.out, exist_ok=True)
    save_png(os.path.join(args.out, f"view_{args.view:03d}_color.png"), color)
    save_depth_png16(os.path.join(args.out, f"view_{args.view:03d}_depth.png"),
                     depth, dataset.near, dataset.far)
    print(f"wrote renders to {args.out}")
    return 0


def cmd_eval(args) -> int:
    dataset = parse_scene(args.scene, args.n_views, args.seed, args.resolution)
    trainer = trainer_from_checkpoint(args.ckpt, dataset)
    rows = evaluate_checkpoint(trainer, dataset)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    with open(args.out, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["view", "psnr", "ssim", "avg_err", "lpips"])
        for view, row in rows:
            writer.writerow([view, f"{row.psnr:.6g}", f"{row.ssim:.6g}",
                             f"{row.avg_err:.6g}",
                             "" if row.lpips is None else f"{row.lpips:.6g}"])
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def evaluate_checkpoint(trainer: Trainer, dataset: SceneDataset):
    """One MetricsRow per test view plus a mean row."""
    rows = []
    psnrs, ssims, avgs = [], [], []
    for view in dataset.test_indices:
        color, _ = render_image(trainer.coarse, trainer.fine,
                                dataset.cameras[view], trainer.cfg.n_coarse,
                                trainer.cfg.n_fine, dataset.near, dataset.far,
                                trainer.step, trainer.enc_spec,
                                trainer.background)
        p = psnr(color, dataset.images[view])
        s = ssim(color, dataset.images[view])
        a = avg_err(p, s)
        rows.append((view, MetricsRow(psnr=p, ssim=s, avg_err=a,
                                      scene_id=dataset.scene_id,
                                      view_count=len(dataset.train_indices),
                                      config_hash=trainer.cfg.config_hash())))
        psnrs.append(p), ssims.append(s), avgs.append(a)
    if rows:
        rows.append(("mean", MetricsRow(
            psnr=sum(psnrs) / len(psnrs), ssim=sum(ssims) / len(ssims),
            avg_err=sum(avgs) / len(avgs), scene_id=dataset.scene_id,
            view_count=len(dataset.train_indices),
            config_hash=trainer.cfg.config_hash())))
    return rows


def cmd_warp_inspect(args) -> int:
    """Dump the consistency-modeling panels for one source/target pair:
    ground-truth patch, rendered patch, warped patch, occlusion mask and
    the masked warped patch."""
    dataset = parse_scene(args.scene, args.n_views, args.seed, args.resolution)
    trainer = trainer_from_checkpoint(args.ckpt, dataset)
    cfg = trainer.cfg
    source = args.source_view if args.source_view is not None else dataset.train_indices[0]
    target = args.target_view if args.target_view is not None else dataset.test_indices[0]
    cam_j = dataset.cameras[target]
    size = args.patch_size or min(cfg.patch_size,
                                  cam_j.width // cfg.patch_stride)
    origin = (args.patch_x, args.patch_y)
    pr = render_patch(trainer.coarse, trainer.fine, cam_j, origin, size,
                      cfg.patch_stride, cfg.n_coarse, cfg.n_fine,
                      dataset.near, dataset.far, trainer.step,
                      trainer.enc_spec, background=trainer.background,
                      jitter=False)
    depth_full = pr.depth_fullres.clamp_min(1e-4)
    warped, inb = warp_at_pixels(dataset.images[source], pr.pixel_coords,
                                 depth_full, cam_j, dataset.cameras[source])
    depth_i = trainer._source_depth_map(source).clamp_min(1e-4)
    tau = cfg.occlusion_tau_scale * (dataset.far - dataset.near)
    occ = occlusion_mask(depth_full, depth_i, cam_j, dataset.cameras[source],
                         tau, pixels_j=pr.pixel_coords,
                         point_distance=cfg.mask_point_distance)
    mask = occ.values * inb.float()
    fh, fw = warped.shape[:2]
    gt = dataset.images[target][origin[1]:origin[1] + fh,
                                origin[0]:origin[0] + fw]
    os.makedirs(args.out, exist_ok=True)
    save_png(os.path.join(args.out, "gt_patch.png"), gt)
    save_png(os.path.join(args.out, "rendered_patch.png"), pr.color_fullres)
    save_png(os.path.join(args.out, "warped_patch.png"), warped)
    save_png(os.path.join(args.out, "occlusion_mask.png"), mask)
    save_png(os.path.join(args.out, "masked_warped_patch.png"),
             warped * mask[..., None])
    print(f"wrote 5 panels to {args.out}")
    return 0


def sweep_view_counts(cfg: TrainConfig, scene_spec: str, counts,
                      resolution: int, out_dir: str) -> list:
    """Train one model per input-view count and collect held-out metrics."""
    results = []
    for n in counts:
        dataset = parse_scene(scene_spec, n, cfg.seed, resolution)
        run_dir = os.path.join(out_dir, f"views_{n:02d}")
        train(cfg, dataset, run_dir)
        trainer = trainer_from_checkpoint(
            os.path.join(run_dir, f"ckpt_{cfg.total_steps:08d}.pt"), dataset)
        rows = evaluate_checkpoint(trainer, dataset)
        mean = rows[-1][1]
        results.append((n, mean))
    path = os.path.join(out_dir, "sweep.csv")
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["n_views", "psnr", "ssim", "avg_err"])
        for n, row in results:
            writer.writerow([n, f"{row.psnr:.6g}", f"{row.ssim:.6g}",
                             f"{row.avg_err:.6g}"])
    return results


def cmd_sweep_views(args) -> int:
    cfg = _build_config(args)
    counts = [int(c) for c in args.counts.split(",")]
    results = sweep_view_counts(cfg, args.scene, counts, args.resolution,
                                args.out)
    for n, row in results:
        print(f"{n} views: psnr={row.psnr:.3f} ssim={row.ssim:.4f}")
    return 0


def _add_scene_args(p, include_views=True):
    p.add_argument("--scene", required=True,
                   help="synthetic:<kind>, blender:<dir> or llff:<dir>")
    if include_views:
        p.add_argument("--n-views", type=int, default=3)
    p.add_argument("--resolution", type=int, default=64,
                   help="image size for synthetic scenes")
    p.add_argument("--seed", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="warpnerf",
        description="few-shot radiance-field training with warping "
                    "consistency regularization")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="optimize a scene")
    _add_scene_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a single config key")
    p.add_argument("--loss-mode", choices=("feature", "pixel", "none"))
    p.add_argument("--total-steps", type=int)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render a dataset view from a checkpoint")
    _add_scene_args(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--view", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    _add_scene_args(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True, help="CSV output path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("warp-inspect",
                       help="dump consistency-modeling panels")
    _add_scene_args(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--source-view", type=int)
    p.add_argument("--target-view", type=int)
    p.add_argument("--patch-x", type=int, default=0)
    p.add_argument("--patch-y", type=int, default=0)
    p.add_argument("--patch-size", type=int)
    p.set_defaults(func=cmd_warp_inspect)

    p = sub.add_parser("sweep-views",
                       help="train and evaluate over several view counts")
    _add_scene_args(p, include_views=False)
    p.add_argument("--counts", default="3,6,15")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--loss-mode", choices=("feature", "pixel", "none"))
    p.add_argument("--total-steps", type=int)
    p.set_defaults(func=cmd_sweep_views)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "seed", None) is None and args.command != "train":
        args.seed = 0
    torch.set_num_threads(max(1, os.cpu_count() or 1))
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
