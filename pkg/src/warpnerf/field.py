"""Radiance field: annealed Fourier encoding and the density/color MLP."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn


@dataclass(frozen=True)
class EncodingSpec:
    """Fourier-feature configuration with coarse-to-fine annealing."""

    num_freqs_pos: int = 8
    num_freqs_dir: int = 4
    anneal_K: int = 15000
    include_identity: bool = True
    anneal_directions: bool = False

    def __post_init__(self):
        if self.num_freqs_pos < 0 or self.num_freqs_dir < 0:
            raise ValueError("frequency counts must be >= 0")
        if self.anneal_K <= 0:
            raise ValueError("anneal_K must be positive")

    def pos_dim(self, in_dim: int = 3) -> int:
        base = in_dim if self.include_identity else 0
        return base + 2 * in_dim * self.num_freqs_pos

    def dir_dim(self, in_dim: int = 3) -> int:
        base = in_dim if self.include_identity else 0
        return base + 2 * in_dim * self.num_freqs_dir


def anneal_alpha(num_freqs: int, step: int, anneal_K: int) -> float:
    """Annealing progress: 0 at step 0, reaches num_freqs at step K."""
    if step < 0:
        raise ValueError("step must be >= 0")
    return num_freqs * min(step, anneal_K) / anneal_K


def band_weights(num_freqs: int, alpha: float, dtype=torch.float32) -> torch.Tensor:
    """Per-band cosine annealing window; 0 before a band opens, 1 once
    alpha has passed it by one."""
    k = torch.arange(num_freqs, dtype=dtype)
    return 0.5 * (1 - torch.cos(math.pi * torch.clamp(alpha - k, 0.0, 1.0)))


def encode(x: torch.Tensor, num_freqs: int, alpha: float,
           include_identity: bool = True) -> torch.Tensor:
    """Fourier features [sin(2^k pi x), cos(2^k pi x)], each band scaled
    by the annealing window. ``x`` has shape (..., D)."""
    feats = [x] if include_identity else []
    if num_freqs > 0:
        w = band_weights(num_freqs, alpha, dtype=x.dtype)
        freqs = (2.0 ** torch.arange(num_freqs, dtype=x.dtype)) * math.pi
        # (..., F, D)
        scaled = x[..., None, :] * freqs[:, None]
        sin = torch.sin(scaled) * w[:, None]
        cos = torch.cos(scaled) * w[:, None]
        feats.append(sin.flatten(-2))
        feats.append(cos.flatten(-2))
    if not feats:
        return x.new_zeros(*x.shape[:-1], 0)
    return torch.cat(feats, dim=-1)


def encode_position(x: torch.Tensor, spec: EncodingSpec, step: int) -> torch.Tensor:
    alpha = anneal_alpha(spec.num_freqs_pos, step, spec.anneal_K)
    return encode(x, spec.num_freqs_pos, alpha, spec.include_identity)


def encode_direction(d: torch.Tensor, spec: EncodingSpec, step: int) -> torch.Tensor:
    if spec.anneal_directions:
        alpha = anneal_alpha(spec.num_freqs_dir, step, spec.anneal_K)
    else:
        alpha = float(spec.num_freqs_dir)
    return encode(d, spec.num_freqs_dir, alpha, spec.include_identity)


class RadianceField(nn.Module):
    """MLP mapping encoded position/direction to (color, density).

    Density depends on the position encoding only; color additionally
    sees the direction encoding through a small conditioned head.
    """

    def __init__(self, pos_dim: int, dir_dim: int, depth: int = 4,
                 width: int = 128):
        super().__init__()
        if depth < 2:
            raise ValueError("depth must be >= 2")
        self.pos_dim = pos_dim
        self.dir_dim = dir_dim
        self.skip_at = depth // 2
        layers = []
        in_dim = pos_dim
        for i in range(depth):
            if i == self.skip_at and i > 0:
                in_dim += pos_dim
            layers.append(nn.Linear(in_dim, width))
            in_dim = width
        self.trunk = nn.ModuleList(layers)
        self.sigma_head = nn.Linear(width, 1)
        self.bottleneck = nn.Linear(width, width)
        self.color_head = nn.Sequential(
            nn.Linear(width + dir_dim, width // 2), nn.ReLU(),
            nn.Linear(width // 2, 3))

    def forward(self, x_enc: torch.Tensor, d_enc: torch.Tensor):
        if x_enc.shape[-1] != self.pos_dim:
            raise ValueError(
                f"position encoding dim {x_enc.shape[-1]} != {self.pos_dim}")
        if d_enc.shape[-1] != self.dir_dim:
            raise ValueError(
                f"direction encoding dim {d_enc.shape[-1]} != {self.dir_dim}")
        h = x_enc
        for i, layer in enumerate(self.trunk):
            if i == self.skip_at and i > 0:
                h = torch.cat([h, x_enc], dim=-1)
            h = torch.relu(layer(h))
        sigma = torch.nn.functional.softplus(self.sigma_head(h)[..., 0] - 1.0)
        feat = self.bottleneck(h)
        rgb = torch.sigmoid(self.color_head(torch.cat([feat, d_enc], dim=-1)))
        return rgb, sigma


def make_field(spec: EncodingSpec, depth: int = 4, width: int = 128,
               seed: int | None = None) -> RadianceField:
    """Build a RadianceField; with ``seed`` the init is reproducible and
    does not disturb the global RNG."""
    if seed is None:
        return RadianceField(spec.pos_dim(), spec.dir_dim(), depth, width)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return RadianceField(spec.pos_dim(), spec.dir_dim(), depth, width)
