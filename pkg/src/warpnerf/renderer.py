"""Quadrature volume rendering of color and depth along rays."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .field import EncodingSpec, RadianceField, encode_direction, encode_position
from .geometry import Camera, RayPatch, bilinear_sample, make_patch_rays


@dataclass
class SampleSet:
    """Sorted per-ray sample distances and their quadrature gaps.

    ``deltas[j] = t[j+1] - t[j]`` with the last gap capped at ``far``;
    the leading gap ``t[0] - near`` is not part of the quadrature, so
    deltas telescope to ``far - t[..., 0]``.
    """

    t_values: torch.Tensor  # (..., n), strictly increasing
    deltas: torch.Tensor    # (..., n), > 0
    jittered: bool = False


@dataclass
class RenderResult:
    color: torch.Tensor          # (..., 3)
    depth: torch.Tensor          # (...)
    weights: torch.Tensor        # (..., n)
    transmittance: torch.Tensor  # (...), residual A after the last sample
    t_values: torch.Tensor       # (..., n)


def _deltas(t: torch.Tensor, far: float) -> torch.Tensor:
    last = (far - t[..., -1:]).clamp_min(1e-10)
    return torch.cat([t[..., 1:] - t[..., :-1], last], dim=-1)


def stratified_samples(near: float, far: float, n: int, batch_shape=(),
                       jitter: bool = False,
                       generator: torch.Generator | None = None,
                       dtype=torch.float32) -> SampleSet:
    """n uniform bins over [near, far]; one sample per bin (center, or
    uniform within the bin when jittering)."""
    if n < 2:
        raise ValueError("need at least 2 samples per ray")
    edges = torch.linspace(near, far, n + 1, dtype=dtype)
    lo, hi = edges[:-1], edges[1:]
    if jitter:
        u = torch.rand(*batch_shape, n, dtype=dtype, generator=generator)
    else:
        u = torch.full((*batch_shape, n), 0.5, dtype=dtype)
    t = lo + (hi - lo) * u
    return SampleSet(t_values=t, deltas=_deltas(t, far), jittered=jitter)


def render_rays(field: RadianceField, origins: torch.Tensor,
                directions: torch.Tensor, samples: SampleSet, step: int,
                enc_spec: EncodingSpec,
                background: torch.Tensor | None = None) -> RenderResult:
    """Composite color and depth along rays.

    Per sample: a = exp(-sigma * delta); weight w = A * (1 - a) with A
    the running transmittance product. C = sum(w c) (+ residual * bg),
    D = sum(w t). Differentiable end-to-end.
    """
    t = samples.t_values
    points = origins[..., None, :] + t[..., None] * directions[..., None, :]
    x_enc = encode_position(points, enc_spec, step)
    d_enc = encode_direction(directions, enc_spec, step)
    d_enc = d_enc[..., None, :].expand(*t.shape, d_enc.shape[-1])
    rgb, sigma = field(x_enc, d_enc)
    alpha = torch.exp(-sigma * samples.deltas)
    # running transmittance before each sample: cumprod shifted right by one
    trans = torch.cumprod(alpha, dim=-1)
    a_before = torch.cat([torch.ones_like(trans[..., :1]), trans[..., :-1]], dim=-1)
    weights = a_before * (1 - alpha)
    color = (weights[..., None] * rgb).sum(dim=-2)
    depth = (weights * t).sum(dim=-1)
    residual = trans[..., -1]
    if background is not None:
        color = color + residual[..., None] * background.to(color.dtype)
    return RenderResult(color=color, depth=depth, weights=weights,
                        transmittance=residual, t_values=t)


def hierarchical_resample(coarse: RenderResult, samples: SampleSet,
                          n_fine: int, generator: torch.Generator | None = None,
                          near: float | None = None, far: float | None = None,
                          jitter: bool = True) -> SampleSet:
    """Inverse-CDF draw of ``n_fine`` new samples proportional to the
    coarse weights, merged and sorted with the coarse samples.

    Rays whose weights are all zero fall back to a stratified draw over
    the coarse sample span.
    """
    t = samples.t_values.detach()
    w = coarse.weights.detach()
    if near is None:
        near = float(t[..., 0].min())
    if far is None:
        far = float(t[..., -1].max())
    # bin edges: near, midpoints, far
    mids = 0.5 * (t[..., 1:] + t[..., :-1])
    lo = torch.full_like(t[..., :1], near).minimum(t[..., :1])
    hi = torch.full_like(t[..., :1], far).maximum(t[..., -1:])
    edges = torch.cat([lo, mids, hi], dim=-1)  # (..., n+1)
    wsum = w.sum(dim=-1, keepdim=True)
    degenerate = wsum[..., 0] <= 0
    w = torch.where(degenerate[..., None], torch.ones_like(w), w)
    pdf = w / w.sum(dim=-1, keepdim=True)
    cdf = torch.cat([torch.zeros_like(pdf[..., :1]),
                     torch.cumsum(pdf, dim=-1)], dim=-1)
    if jitter:
        u = torch.rand(*t.shape[:-1], n_fine, dtype=t.dtype, generator=generator)
    else:
        u = (torch.arange(n_fine, dtype=t.dtype) + 0.5) / n_fine
        u = u.expand(*t.shape[:-1], n_fine)
    u = u.contiguous()
    idx = torch.searchsorted(cdf.contiguous(), u, right=True).clamp(1, cdf.shape[-1] - 1)
    cdf_lo = torch.gather(cdf, -1, idx - 1)
    cdf_hi = torch.gather(cdf, -1, idx)
    edge_lo = torch.gather(edges, -1, idx - 1)
    edge_hi = torch.gather(edges, -1, idx)
    denom = (cdf_hi - cdf_lo).clamp_min(1e-12)
    frac = (u - cdf_lo) / denom
    t_fine = edge_lo + frac * (edge_hi - edge_lo)
    merged, _ = torch.sort(torch.cat([t, t_fine], dim=-1), dim=-1)
    return SampleSet(t_values=merged, deltas=_deltas(merged, far),
                     jittered=jitter or samples.jittered)


def upsample_strided(lowres: torch.Tensor, stride: int, out_hw=None) -> torch.Tensor:
    """Bilinear upsampling from a strided grid back to full resolution.

    Grid node (a, b) corresponds to full-resolution pixel (a*stride,
    b*stride); full-res pixels map to continuous grid coordinates and
    are sampled bilinearly with border clamping, so values at grid nodes
    are preserved exactly. stride 1 is the identity.
    """
    single = lowres.dim() == 2
    h, w = lowres.shape[0], lowres.shape[1]
    if out_hw is None:
        out_hw = (h * stride, w * stride)
    if stride == 1 and tuple(out_hw) == (h, w):
        return lowres
    ys = torch.arange(out_hw[0], dtype=lowres.dtype) / stride + 0.5
    xs = torch.arange(out_hw[1], dtype=lowres.dtype) / stride + 0.5
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    coords = torch.stack([gx, gy], dim=-1)
    out, _ = bilinear_sample(lowres if not single else lowres[..., None], coords)
    return out[..., 0] if single else out


@dataclass
class PatchRender:
    """A strided patch render plus its full-resolution upsamplings."""

    color_lowres: torch.Tensor    # (h, w, 3) at the strided grid
    depth_lowres: torch.Tensor    # (h, w)
    color_fullres: torch.Tensor   # (h*s, w*s, 3), bilinear upsample
    depth_fullres: torch.Tensor   # (h*s, w*s)
    pixel_coords: torch.Tensor    # (h*s, w*s, 2) full-res pixel centers
    rays: RayPatch
    coarse: RenderResult
    fine: RenderResult


def render_patch(coarse_field: RadianceField, fine_field: RadianceField,
                 camera: Camera, patch_origin, patch_size, stride: int,
                 n_coarse: int, n_fine: int, near: float, far: float,
                 step: int, enc_spec: EncodingSpec,
                 generator: torch.Generator | None = None,
                 background: torch.Tensor | None = None,
                 jitter: bool = True) -> PatchRender:
    """Render a strided patch (coarse + fine) and upsample depth and
    color back to the full patch footprint."""
    rays = make_patch_rays(camera, patch_origin, patch_size, stride, near, far)
    samples = stratified_samples(near, far, n_coarse, rays.grid_shape,
                                 jitter=jitter, generator=generator,
                                 dtype=rays.directions.dtype)
    coarse = render_rays(coarse_field, rays.origins, rays.directions, samples,
                         step, enc_spec, background)
    fine_samples = hierarchical_resample(coarse, samples, n_fine,
                                         generator=generator, near=near,
                                         far=far, jitter=jitter)
    fine = render_rays(fine_field, rays.origins, rays.directions, fine_samples,
                       step, enc_spec, background)
    depth_full = upsample_strided(fine.depth, stride)
    color_full = upsample_strided(fine.color, stride)
    x0, y0 = int(patch_origin[0]), int(patch_origin[1])
    fh, fw = depth_full.shape
    ys = y0 + torch.arange(fh, dtype=depth_full.dtype) + 0.5
    xs = x0 + torch.arange(fw, dtype=depth_full.dtype) + 0.5
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    pixels = torch.stack([gx, gy], dim=-1)
    return PatchRender(color_lowres=fine.color, depth_lowres=fine.depth,
                       color_fullres=color_full, depth_fullres=depth_full,
                       pixel_coords=pixels, rays=rays, coarse=coarse, fine=fine)


def render_image(coarse_field: RadianceField, fine_field: RadianceField,
                 camera: Camera, n_coarse: int, n_fine: int, near: float,
                 far: float, step: int, enc_spec: EncodingSpec,
                 background: torch.Tensor | None = None,
                 chunk: int = 4096) -> tuple[torch.Tensor, torch.Tensor]:
    """Full-image render in row chunks (no gradients). Returns (color
    (H, W, 3), depth (H, W))."""
    from .geometry import camera_ray_directions, pixel_grid

    H, W = camera.height, camera.width
    pixels = pixel_grid(H, W).reshape(-1, 2)
    colors, depths = [], []
    with torch.no_grad():
        for start in range(0, pixels.shape[0], chunk):
            px = pixels[start:start + chunk]
            dirs = camera_ray_directions(px, camera)
            origins = torch.as_tensor(camera.origin, dtype=dirs.dtype).expand_as(dirs)
            samples = stratified_samples(near, far, n_coarse, (px.shape[0],),
                                         jitter=False, dtype=dirs.dtype)
            coarse = render_rays(coarse_field, origins, dirs, samples, step,
                                 enc_spec, background)
            fine_samples = hierarchical_resample(coarse, samples, n_fine,
                                                 near=near, far=far, jitter=False)
            fine = render_rays(fine_field, origins, dirs, fine_samples, step,
                               enc_spec, background)
            colors.append(fine.color)
            depths.append(fine.depth)
    color = torch.cat(colors).reshape(H, W, 3)
    depth = torch.cat(depths).reshape(H, W)
    return color, depth
