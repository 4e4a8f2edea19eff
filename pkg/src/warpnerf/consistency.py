"""Feature extraction and the masked consistency / smoothness losses."""

from __future__ import annotations

import os
from dataclasses import dataclass

import torch
import torch.nn as nn

from .geometry import OcclusionMask, downsample_mask


@dataclass
class FeaturePyramid:
    layers: list          # per-level (C_l, H_l, W_l) tensors
    layer_ids: list

    def __post_init__(self):
        prev = None
        for f in self.layers:
            hw = tuple(f.shape[-2:])
            if prev is not None and (hw[0] > prev[0] or hw[1] > prev[1]):
                raise ValueError("pyramid resolutions must be nonincreasing")
            prev = hw


class RandomConvExtractor(nn.Module):
    """Fixed-seed random convolutional stack mirroring the pretrained
    extractor's 4-level geometry (resolutions H, H/2, H/4, H/8). Used as
    the deterministic test extractor; needs no weight file."""

    def __init__(self, channels=(8, 16, 32, 64), seed: int = 1234,
                 dtype=torch.float32):
        super().__init__()
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            blocks = []
            in_c = 3
            for c in channels:
                blocks.append(nn.Sequential(
                    nn.Conv2d(in_c, c, 3, padding=1), nn.ReLU(),
                    nn.Conv2d(c, c, 3, padding=1), nn.ReLU()))
                in_c = c
        self.blocks = nn.ModuleList(blocks)
        self.pool = nn.MaxPool2d(2)
        self.layer_ids = [f"randconv{i + 1}" for i in range(len(channels))]
        self.mean = (0.0, 0.0, 0.0)
        self.std = (1.0, 1.0, 1.0)
        self.to(dtype)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, image: torch.Tensor) -> list:
        h = image
        feats = []
        for i, block in enumerate(self.blocks):
            if i > 0:
                h = self.pool(h)
            h = block(h)
            feats.append(h)
        return feats


class Vgg19Extractor(nn.Module):
    """Pretrained 19-layer conv classification network; activations at
    conv1_2, conv2_2, conv3_4, conv4_4 (post-ReLU).

    Weights come from ``weights_path`` (a torchvision-format state dict
    for the full classifier or its feature trunk); falls back to the
    FEATURE_WEIGHTS environment variable.
    """

    LAYER_IDX = {"conv1_2": 3, "conv2_2": 8, "conv3_4": 17, "conv4_4": 26}

    def __init__(self, weights_path: str | None = None, dtype=torch.float32):
        super().__init__()
        from torchvision.models import vgg19

        path = weights_path or os.environ.get("FEATURE_WEIGHTS", "")
        model = vgg19(weights=None)
        if path:
            state = torch.load(path, map_location="cpu", weights_only=True)
            if any(k.startswith("features.") for k in state):
                model.load_state_dict(state, strict=False)
            else:
                model.features.load_state_dict(state)
        else:
            raise FileNotFoundError(
                "pretrained extractor weights not found; set the "
                "feature_weights config key or the FEATURE_WEIGHTS env var")
        cut = max(self.LAYER_IDX.values()) + 1
        self.features = model.features[:cut].eval()
        self.layer_ids = list(self.LAYER_IDX)
        self.mean = (0.485, 0.456, 0.406)
        self.std = (0.229, 0.224, 0.225)
        self.to(dtype)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, image: torch.Tensor) -> list:
        feats = []
        h = image
        grab = set(self.LAYER_IDX.values())
        for i, layer in enumerate(self.features):
            h = layer(h)
            if i in grab:
                feats.append(h)
        return feats


_EXTRACTOR_CACHE: dict = {}


def get_extractor(extractor_id: str, weights_path: str | None = None,
                  dtype=torch.float32) -> nn.Module:
    key = (extractor_id, weights_path, dtype)
    if key in _EXTRACTOR_CACHE:
        return _EXTRACTOR_CACHE[key]
    if extractor_id == "random-conv":
        ext = RandomConvExtractor(dtype=dtype)
    elif extractor_id == "random-conv-tiny":
        ext = RandomConvExtractor(channels=(4, 8), dtype=dtype)
    elif extractor_id == "vgg19":
        ext = Vgg19Extractor(weights_path=weights_path, dtype=dtype)
    else:
        raise ValueError(f"unknown feature extractor: {extractor_id!r}")
    _EXTRACTOR_CACHE[key] = ext
    return ext


def _as_extractor(extractor, dtype):
    if isinstance(extractor, str):
        return get_extractor(extractor, dtype=dtype)
    return extractor


def feature_extract(image: torch.Tensor, extractor) -> FeaturePyramid:
    """Multi-level feature pyramid of an (H, W, 3) image in [0, 1].

    The extractor's declared input normalization is applied here so the
    losses stay agnostic to the extractor choice.
    """
    ext = _as_extractor(extractor, image.dtype)
    x = image.permute(2, 0, 1)[None]
    mean = torch.tensor(ext.mean, dtype=x.dtype).view(1, 3, 1, 1)
    std = torch.tensor(ext.std, dtype=x.dtype).view(1, 3, 1, 1)
    feats = ext((x - mean) / std)
    return FeaturePyramid(layers=[f[0] for f in feats],
                          layer_ids=list(ext.layer_ids))


def _check_same_shape(a, b, names=("warped", "rendered")):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(
            f"{names[0]} shape {tuple(a.shape)} != {names[1]} shape {tuple(b.shape)}")


def _mask_values(mask, like: torch.Tensor) -> torch.Tensor:
    if mask is None:
        return torch.ones(like.shape[:2], dtype=like.dtype)
    values = mask.values if isinstance(mask, OcclusionMask) else mask
    return values.to(like.dtype)


def masked_consistency_loss(warped: torch.Tensor, rendered: torch.Tensor,
                            mask, extractor="random-conv",
                            return_layers: bool = False):
    """Masked multi-level feature difference between the warped (pseudo
    ground truth) and rendered patches.

    sum_l 1/(C_l m_l) * ||M_l * (F_l(warped) - F_l(rendered))||_1 with
    M_l the nearest-neighbor downsampled mask and m_l its nonzero count.
    The warped branch is detached: gradients reach only the render.
    """
    _check_same_shape(warped, rendered)
    mask_v = _mask_values(mask, rendered)
    if tuple(mask_v.shape) != tuple(rendered.shape[:2]):
        raise ValueError("mask resolution must match the patch resolution")
    ext = _as_extractor(extractor, rendered.dtype)
    pyr_w = feature_extract(warped.detach(), ext)
    pyr_r = feature_extract(rendered, ext)
    loss = rendered.new_zeros(())
    per_layer = []
    for fw, fr in zip(pyr_w.layers, pyr_r.layers):
        c_l = fw.shape[0]
        m_l_map = downsample_mask(mask_v, fw.shape[-2:])
        m_l = m_l_map.sum()
        if m_l <= 0:
            per_layer.append(0.0)
            continue
        term = (m_l_map[None] * (fw - fr)).abs().sum() / (c_l * m_l)
        per_layer.append(float(term.detach()))
        loss = loss + term
    if return_layers:
        return loss, per_layer
    return loss


def pixel_loss(warped: torch.Tensor, rendered: torch.Tensor, mask) -> torch.Tensor:
    """Masked mean absolute color difference (ablation arm). The warped
    branch is detached, mirroring the feature loss."""
    _check_same_shape(warped, rendered)
    mask_v = _mask_values(mask, rendered)
    if tuple(mask_v.shape) != tuple(rendered.shape[:2]):
        raise ValueError("mask resolution must match the patch resolution")
    count = mask_v.sum()
    if count <= 0:
        return rendered.new_zeros(())
    diff = (warped.detach() - rendered).abs().mean(dim=-1)
    return (mask_v * diff).sum() / count


def disparity_smoothness(depth: torch.Tensor, image: torch.Tensor) -> torch.Tensor:
    """Edge-aware smoothness of mean-normalized inverse depth.

    Forward differences; image gradient magnitudes (channel mean)
    attenuate the penalty so depth edges may align with color edges.
    """
    if (depth <= 0).any():
        raise ValueError("depth must be positive for disparity smoothness")
    if depth.shape != image.shape[:2]:
        raise ValueError("depth and image resolutions must match")
    disp = 1.0 / depth
    disp = disp / disp.mean()
    ddx = (disp[:, 1:] - disp[:, :-1]).abs()
    ddy = (disp[1:, :] - disp[:-1, :]).abs()
    idx = (image[:, 1:] - image[:, :-1]).abs().mean(dim=-1)
    idy = (image[1:, :] - image[:-1, :]).abs().mean(dim=-1)
    return (ddx * torch.exp(-idx)).mean() + (ddy * torch.exp(-idy)).mean()
