"""Optimization loop: loss assembly, schedules, clipping, checkpoints."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch

from .consistency import (disparity_smoothness, masked_consistency_loss,
                          pixel_loss)
from .datasets import SceneDataset
from .field import EncodingSpec, make_field
from .geometry import (PoseSampler, camera_ray_directions, occlusion_mask,
                       sample_novel_pose, warp_at_pixels)
from .metrics import psnr as psnr_metric
from .renderer import (hierarchical_resample, render_image, render_patch,
                       render_rays, stratified_samples, upsample_strided)

CHECKPOINT_MAGIC = "WARPNERF-CKPT-v1"

LOSS_MODES = ("feature", "pixel", "none")


class TrainingDiverged(RuntimeError):
    """Raised when a step produces a non-finite loss."""


@dataclass
class TrainConfig:
    """Every schedule, weight and hyperparameter in one serializable
    record. Defaults follow the reference training recipe; desk-scale
    runs override sizes and step counts."""

    total_steps: int = 70000
    seed: int = 0
    # learning-rate schedule: linear warmup then cosine decay
    lr_warmup_steps: int = 5000
    lr_peak: float = 5e-4
    lr_min: float = 5e-6
    clip_value: float = 0.1
    clip_norm: float = 0.1
    # consistency loss weight: lambda0 * exp(-step / decay_scale)
    cons_weight_base: float = 1.0
    cons_decay_scale: float = 20000.0
    reg_weight: float = 0.01
    # encoding / network
    anneal_K: int = 15000
    annealing_enabled: bool = True
    anneal_directions: bool = False
    num_freqs_pos: int = 8
    num_freqs_dir: int = 4
    net_depth: int = 4
    net_width: int = 128
    # sampling
    n_coarse: int = 32
    n_fine: int = 32
    n_rand_rays: int = 512
    # novel-pose curriculum
    pose_range_start_deg: float = 3.0
    pose_range_end_deg: float = 9.0
    progressive_pose: bool = True
    # consistency patches
    patch_size: int = 60
    patch_stride: int = 2
    reg_patch_size: int = 16
    source_depth_stride: int = 2
    reg_step_period: int = 1
    extractor_id: str = "random-conv"
    feature_weights: str = ""
    loss_mode: str = "feature"
    mask_enabled: bool = True
    mask_point_distance: bool = True
    occlusion_tau_scale: float = 0.05
    known_view_consistency: bool = False
    obs_from_consistency_view: bool = False
    # bookkeeping
    eval_every: int = 500
    ckpt_every: int = 1000
    n_eval_views: int = 2

    def __post_init__(self):
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")
        for name in ("lr_warmup_steps", "anneal_K", "reg_step_period",
                     "n_coarse", "n_fine", "n_rand_rays", "patch_size",
                     "patch_stride", "reg_patch_size", "source_depth_stride",
                     "eval_every", "ckpt_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("cons_weight_base", "reg_weight", "lr_peak", "lr_min"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")

    def encoding_spec(self) -> EncodingSpec:
        # annealing off = window always fully open
        anneal_K = self.anneal_K if self.annealing_enabled else 1
        return EncodingSpec(num_freqs_pos=self.num_freqs_pos,
                            num_freqs_dir=self.num_freqs_dir,
                            anneal_K=anneal_K,
                            anneal_directions=self.anneal_directions)

    def config_hash(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()


def save_config(cfg: TrainConfig, path: str) -> None:
    with open(path, "w") as f:
        for name, value in asdict(cfg).items():
            f.write(f"{name} = {value}\n")


def _coerce(text: str, typ):
    if typ is bool:
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    return typ(text)


def load_config(path: str, overrides: dict | None = None) -> TrainConfig:
    """Flat key = value config file; '#' starts a comment."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    concrete = {f.name: type(getattr(TrainConfig(), f.name))
                for f in fields(TrainConfig)}
    values = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, text = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = _coerce(text, concrete[key])
    if overrides:
        values.update(overrides)
    return TrainConfig(**values)


@dataclass
class LossReport:
    step: int
    obs_loss: float
    reg_loss: float = 0.0
    cons_loss: float = 0.0
    pix_loss: float = 0.0
    lr: float = 0.0
    lambda_cons: float = 0.0
    mask_fill: float = 0.0
    cons_layers: tuple = ()
    total: float = 0.0

    def __post_init__(self):
        for name in ("obs_loss", "reg_loss", "cons_loss", "pix_loss", "total"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to lr_peak, then cosine decay to lr_min."""
    if step < cfg.lr_warmup_steps:
        return cfg.lr_peak * step / cfg.lr_warmup_steps
    span = cfg.total_steps - cfg.lr_warmup_steps
    progress = min(max((step - cfg.lr_warmup_steps) / span, 0.0), 1.0) if span > 0 else 1.0
    return cfg.lr_min + 0.5 * (cfg.lr_peak - cfg.lr_min) * (1 + math.cos(math.pi * progress))


def cons_weight_at(step: int, cfg: TrainConfig) -> float:
    """Exponential decay of the consistency weight."""
    if step < 0:
        raise ValueError("step must be >= 0")
    return cfg.cons_weight_base * math.exp(-step / cfg.cons_decay_scale)


def _params_hash(modules) -> str:
    h = hashlib.sha256()
    for module in modules:
        for name, tensor in sorted(module.state_dict().items()):
            h.update(name.encode())
            h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()


class Trainer:
    """Single-writer training loop over coarse and fine fields."""

    def __init__(self, cfg: TrainConfig, dataset: SceneDataset):
        if not dataset.train_indices:
            raise ValueError("dataset has no training views")
        self.cfg = cfg
        self.dataset = dataset
        self.enc_spec = cfg.encoding_spec()
        self.coarse = make_field(self.enc_spec, cfg.net_depth, cfg.net_width,
                                 seed=cfg.seed)
        self.fine = make_field(self.enc_spec, cfg.net_depth, cfg.net_width,
                               seed=cfg.seed + 1)
        params = list(self.coarse.parameters()) + list(self.fine.parameters())
        self.optimizer = torch.optim.Adam(params, lr=cfg.lr_peak)
        self.gen = torch.Generator().manual_seed(cfg.seed + 2)
        self.np_rng = np.random.default_rng(cfg.seed + 3)
        self.step = 0
        start = cfg.pose_range_start_deg if cfg.progressive_pose else cfg.pose_range_end_deg
        self.pose_sampler = PoseSampler(
            reference_poses=[dataset.cameras[i] for i in dataset.train_indices],
            range_start_deg=start, range_end_deg=cfg.pose_range_end_deg,
            total_steps=max(cfg.total_steps, 1))
        self.background = torch.tensor(dataset.background, dtype=torch.float32)

    # -- sampling helpers ------------------------------------------------

    def _rand_train_view(self) -> int:
        idx = torch.randint(len(self.dataset.train_indices), (1,),
                            generator=self.gen).item()
        return self.dataset.train_indices[idx]

    def _rand_patch_origin(self, camera, size: int, stride: int):
        span_x = camera.width - size * stride
        span_y = camera.height - size * stride
        if span_x < 0 or span_y < 0:
            raise ValueError(
                f"patch of {size} rays at stride {stride} does not fit in "
                f"{camera.width}x{camera.height} images")
        x0 = torch.randint(span_x + 1, (1,), generator=self.gen).item()
        y0 = torch.randint(span_y + 1, (1,), generator=self.gen).item()
        return x0, y0

    # -- loss terms ------------------------------------------------------

    def _observation_loss(self):
        ds, cfg = self.dataset, self.cfg
        view = self._rand_train_view()
        cam = ds.cameras[view]
        image = ds.images[view]
        ix = torch.randint(cam.width, (cfg.n_rand_rays,), generator=self.gen)
        iy = torch.randint(cam.height, (cfg.n_rand_rays,), generator=self.gen)
        pixels = torch.stack([ix + 0.5, iy + 0.5], dim=-1).float()
        dirs = camera_ray_directions(pixels, cam)
        origins = torch.as_tensor(cam.origin, dtype=dirs.dtype).expand_as(dirs)
        samples = stratified_samples(ds.near, ds.far, cfg.n_coarse,
                                     (cfg.n_rand_rays,), jitter=True,
                                     generator=self.gen)
        coarse = render_rays(self.coarse, origins, dirs, samples, self.step,
                             self.enc_spec, self.background)
        fine_samples = hierarchical_resample(coarse, samples, cfg.n_fine,
                                             generator=self.gen, near=ds.near,
                                             far=ds.far)
        fine = render_rays(self.fine, origins, dirs, fine_samples, self.step,
                           self.enc_spec, self.background)
        gt = image[iy, ix]
        return ((coarse.color - gt) ** 2).mean() + ((fine.color - gt) ** 2).mean()

    def _reg_loss(self):
        ds, cfg = self.dataset, self.cfg
        view = self._rand_train_view()
        cam = ds.cameras[view]
        origin = self._rand_patch_origin(cam, cfg.reg_patch_size, cfg.patch_stride)
        pr = render_patch(self.coarse, self.fine, cam, origin,
                          cfg.reg_patch_size, cfg.patch_stride, cfg.n_coarse,
                          cfg.n_fine, ds.near, ds.far, self.step,
                          self.enc_spec, generator=self.gen,
                          background=self.background)
        gt_patch = ds.images[view][
            origin[1]:origin[1] + cfg.reg_patch_size * cfg.patch_stride:cfg.patch_stride,
            origin[0]:origin[0] + cfg.reg_patch_size * cfg.patch_stride:cfg.patch_stride]
        return disparity_smoothness(pr.depth_lowres.clamp_min(1e-4), gt_patch)

    def _source_depth_map(self, view: int):
        """Rendered full-image depth of an input view, upsampled back to
        full resolution; no gradients (masking evidence only)."""
        ds, cfg = self.dataset, self.cfg
        cam = ds.cameras[view]
        stride = cfg.source_depth_stride
        size = min(cam.width, cam.height) // stride
        with torch.no_grad():
            pr = render_patch(self.coarse, self.fine, cam, (0, 0), size,
                              stride, cfg.n_coarse, cfg.n_fine, ds.near,
                              ds.far, self.step, self.enc_spec, jitter=False,
                              background=self.background)
            return upsample_strided(pr.depth_lowres, stride,
                                    (cam.height, cam.width))

    def _consistency_loss(self):
        ds, cfg = self.dataset, self.cfg
        i_view = self._rand_train_view()
        cam_i = ds.cameras[i_view]
        image_i = ds.images[i_view]

        if cfg.known_view_consistency:
            others = [v for v in ds.train_indices if v != i_view]
            if not others:
                raise ValueError("known-view consistency needs >= 2 views")
            j_idx = torch.randint(len(others), (1,), generator=self.gen).item()
            j_view = others[j_idx]
            cam_j = ds.cameras[j_view]
        else:
            step_for_pose = min(self.step, self.pose_sampler.total_steps)
            cam_j = sample_novel_pose(self.pose_sampler, step_for_pose,
                                      self.np_rng)
            j_view = None

        origin = self._rand_patch_origin(cam_j, cfg.patch_size, cfg.patch_stride)
        pr = render_patch(self.coarse, self.fine, cam_j, origin,
                          cfg.patch_size, cfg.patch_stride, cfg.n_coarse,
                          cfg.n_fine, ds.near, ds.far, self.step,
                          self.enc_spec, generator=self.gen,
                          background=self.background)
        depth_full = pr.depth_fullres.clamp_min(1e-4)

        if cfg.known_view_consistency:
            # gradient reaches geometry through the warp coordinates;
            # the ground-truth target is the constant branch
            warped, inb = warp_at_pixels(image_i, pr.pixel_coords, depth_full,
                                         cam_j, cam_i)
            fh, fw = warped.shape[:2]
            target = ds.images[j_view][origin[1]:origin[1] + fh,
                                       origin[0]:origin[0] + fw]
            rendered_branch, warped_branch = warped, target
        else:
            warped, inb = warp_at_pixels(image_i, pr.pixel_coords,
                                         depth_full.detach(), cam_j, cam_i)
            rendered_branch, warped_branch = pr.color_fullres, warped

        mask_v = inb.to(depth_full.dtype)
        if cfg.mask_enabled:
            depth_i = self._source_depth_map(i_view).clamp_min(1e-4)
            tau = cfg.occlusion_tau_scale * (ds.far - ds.near)
            occ = occlusion_mask(depth_full.detach(), depth_i, cam_j, cam_i,
                                 tau, pixels_j=pr.pixel_coords,
                                 point_distance=cfg.mask_point_distance)
            mask_v = mask_v * occ.values
        mask_fill = float(mask_v.mean())

        if cfg.loss_mode == "pixel":
            loss = pixel_loss(warped_branch, rendered_branch, mask_v)
            return loss, mask_fill, (), "pixel"
        loss, layers = masked_consistency_loss(
            warped_branch, rendered_branch, mask_v,
            extractor=self._extractor(), return_layers=True)
        return loss, mask_fill, tuple(layers), "feature"

    def _extractor(self):
        from .consistency import get_extractor
        return get_extractor(self.cfg.extractor_id,
                             weights_path=self.cfg.feature_weights or None)

    # -- steps -----------------------------------------------------------

    def train_step(self) -> LossReport:
        cfg = self.cfg
        lr = lr_at(self.step, cfg)
        for group in self.optimizer.param_groups:
            group["lr"] = lr

        obs = self._observation_loss()
        if not torch.isfinite(obs):
            raise TrainingDiverged(
                f"non-finite observation loss at step {self.step}")
        total = obs
        reg = torch.zeros(())
        if cfg.reg_weight > 0:
            reg = self._reg_loss()
            total = total + cfg.reg_weight * reg

        cons = torch.zeros(())
        lam = 0.0
        mask_fill = 0.0
        layers = ()
        mode = "none"
        run_consistency = (cfg.loss_mode != "none"
                           and (self.step + 1) % cfg.reg_step_period == 0)
        if run_consistency:
            lam = cons_weight_at(self.step, cfg)
            cons, mask_fill, layers, mode = self._consistency_loss()
            total = total + lam * cons

        if not torch.isfinite(total):
            raise TrainingDiverged(
                f"non-finite loss at step {self.step}: "
                f"obs={float(obs.detach())} reg={float(reg.detach())} "
                f"cons={float(cons.detach())}")

        self.optimizer.zero_grad()
        total.backward()
        all_params = [p for g in self.optimizer.param_groups for p in g["params"]]
        torch.nn.utils.clip_grad_value_(all_params, cfg.clip_value)
        torch.nn.utils.clip_grad_norm_(all_params, cfg.clip_norm)
        self.optimizer.step()
        report = LossReport(step=self.step, obs_loss=float(obs.detach()),
                            reg_loss=float(reg.detach()),
                            cons_loss=float(cons.detach()) if mode == "feature" else 0.0,
                            pix_loss=float(cons.detach()) if mode == "pixel" else 0.0,
                            lr=lr, lambda_cons=lam, mask_fill=mask_fill,
                            cons_layers=layers, total=float(total.detach()))
        self.step += 1
        return report

    # -- evaluation and persistence ---------------------------------------

    def evaluate(self, n_views: int | None = None) -> float:
        """Mean held-out PSNR over (up to) n_views test views."""
        ds, cfg = self.dataset, self.cfg
        views = ds.test_indices[:n_views or cfg.n_eval_views]
        if not views:
            return float("nan")
        values = []
        for v in views:
            color, _ = render_image(self.coarse, self.fine, ds.cameras[v],
                                    cfg.n_coarse, cfg.n_fine, ds.near, ds.far,
                                    self.step, self.enc_spec, self.background)
            values.append(psnr_metric(color, ds.images[v]))
        return sum(values) / len(values)

    def params_hash(self) -> str:
        return _params_hash([self.coarse, self.fine])

    def save_checkpoint(self, path: str) -> None:
        payload = {
            "magic": CHECKPOINT_MAGIC,
            "step": self.step,
            "coarse": self.coarse.state_dict(),
            "fine": self.fine.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "torch_rng": self.gen.get_state(),
            "np_rng": self.np_rng.bit_generator.state,
            "config": asdict(self.cfg),
            "config_hash": self.cfg.config_hash(),
            "encoding_spec": asdict(self.cfg.encoding_spec()),
        }
        torch.save(payload, path)

    @classmethod
    def resume(cls, path: str, cfg: TrainConfig,
               dataset: SceneDataset) -> "Trainer":
        payload = load_checkpoint(path)
        if payload["config_hash"] != cfg.config_hash():
            raise ValueError(
                "checkpoint was written with a different configuration; "
                "refusing to resume (config hashes differ)")
        trainer = cls(cfg, dataset)
        trainer.coarse.load_state_dict(payload["coarse"])
        trainer.fine.load_state_dict(payload["fine"])
        trainer.optimizer.load_state_dict(payload["optimizer"])
        trainer.gen.set_state(payload["torch_rng"])
        trainer.np_rng.bit_generator.state = payload["np_rng"]
        trainer.step = payload["step"]
        return trainer


def load_checkpoint(path: str) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("magic") != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a recognized checkpoint file")
    return payload


def trainer_from_checkpoint(path: str, dataset: SceneDataset) -> Trainer:
    payload = load_checkpoint(path)
    cfg = TrainConfig(**payload["config"])
    return Trainer.resume(path, cfg, dataset)


METRICS_COLUMNS = ("step", "lr", "lambda_cons", "obs", "cons", "reg",
                   "psnr_holdout")


def train(cfg: TrainConfig, dataset: SceneDataset, out_dir: str,
          resume: str | None = None, log_every: int = 0) -> str:
    """Run the loop to cfg.total_steps, writing periodic checkpoints and
    a metrics CSV. Returns the final checkpoint path."""
    os.makedirs(out_dir, exist_ok=True)
    save_config(cfg, os.path.join(out_dir, "config.txt"))
    if resume is not None:
        trainer = Trainer.resume(resume, cfg, dataset)
        csv_mode = "a"
    else:
        trainer = Trainer(cfg, dataset)
        csv_mode = "w"
    metrics_path = os.path.join(out_dir, "metrics.csv")
    last = None
    with open(metrics_path, csv_mode, newline="") as f:
        writer = csv.writer(f)
        if csv_mode == "w":
            writer.writerow(METRICS_COLUMNS)

        def emit(report: LossReport | None):
            holdout = trainer.evaluate()
            step = trainer.step
            writer.writerow([
                step, f"{lr_at(min(step, cfg.total_steps), cfg):.8g}",
                f"{cons_weight_at(step, cfg):.8g}",
                f"{report.obs_loss:.8g}" if report else "",
                f"{report.cons_loss + report.pix_loss:.8g}" if report else "",
                f"{report.reg_loss:.8g}" if report else "",
                f"{holdout:.6g}"])
            f.flush()

        if trainer.step == 0:
            emit(None)
        while trainer.step < cfg.total_steps:
            last = trainer.train_step()
            if log_every and trainer.step % log_every == 0:
                print(f"step {trainer.step}: obs={last.obs_loss:.4g} "
                      f"cons={last.cons_loss:.4g} reg={last.reg_loss:.4g}")
            if trainer.step % cfg.eval_every == 0 and trainer.step < cfg.total_steps:
                emit(last)
            if trainer.step % cfg.ckpt_every == 0:
                trainer.save_checkpoint(
                    os.path.join(out_dir, f"ckpt_{trainer.step:08d}.pt"))
        emit(last)
    final = os.path.join(out_dir, f"ckpt_{trainer.step:08d}.pt")
    trainer.save_checkpoint(final)
    return final
