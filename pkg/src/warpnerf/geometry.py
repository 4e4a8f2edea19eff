"""Cameras, rays, reprojection, differentiable warping and occlusion masks.

Conventions used throughout:
  * pixel centers sit at integer + 0.5,
  * the camera looks down -z in its own frame (+x right, +y up),
  * ray directions are unit-norm, so depth values are euclidean
    distances along the ray from the camera center.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.spatial.transform import Rotation


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: intrinsics ``K`` plus a camera-to-world pose."""

    K: np.ndarray
    pose: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        pose = np.asarray(self.pose, dtype=np.float64).reshape(4, 4)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "pose", pose)
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        if K[0, 0] <= 0 or K[1, 1] <= 0 or abs(K[2, 2] - 1.0) > 1e-9:
            raise ValueError("K must have positive focals and K[2,2] == 1")
        if max(abs(K[1, 0]), abs(K[2, 0]), abs(K[2, 1])) > 1e-9:
            raise ValueError("K must be upper-triangular")
        R = pose[:3, :3]
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-6:
            raise ValueError("pose rotation is not orthonormal")
        if np.linalg.det(R) < 0:
            raise ValueError("pose rotation must have determinant +1")

    @property
    def rotation(self) -> np.ndarray:
        return self.pose[:3, :3]

    @property
    def origin(self) -> np.ndarray:
        return self.pose[:3, 3]

    def world_to_camera(self) -> np.ndarray:
        """Inverse pose as a 4x4 matrix (exact for rigid transforms)."""
        R, t = self.rotation, self.origin
        out = np.eye(4)
        out[:3, :3] = R.T
        out[:3, 3] = -R.T @ t
        return out


@dataclass
class RayPatch:
    """A strided grid of rays through a rectangular patch of pixels."""

    pixel_coords: torch.Tensor  # (H, W, 2) continuous pixel positions
    origins: torch.Tensor       # (H, W, 3)
    directions: torch.Tensor    # (H, W, 3), unit norm
    near: float
    far: float
    stride: int

    def __post_init__(self):
        if not self.near < self.far:
            raise ValueError("near must be < far")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")

    @property
    def grid_shape(self):
        return tuple(self.pixel_coords.shape[:2])

    @property
    def footprint(self):
        """Full-resolution pixel extent covered by the strided grid."""
        h, w = self.grid_shape
        return (h * self.stride, w * self.stride)


@dataclass
class OcclusionMask:
    values: torch.Tensor  # binary, same layout as the query pixels
    threshold_used: float

    def __post_init__(self):
        v = self.values
        if not torch.logical_or(v == 0, v == 1).all():
            raise ValueError("mask values must be binary")


@dataclass
class PoseSampler:
    """Perturbs reference poses by Euler-angle noise with a growing range."""

    reference_poses: list
    range_start_deg: float
    range_end_deg: float
    total_steps: int
    perturb_translation: bool = field(default=False)

    def __post_init__(self):
        if self.range_start_deg > self.range_end_deg:
            raise ValueError("range_start_deg must be <= range_end_deg")

    def range_at(self, step: int) -> float:
        if not 0 <= step <= self.total_steps:
            raise ValueError(f"step {step} outside [0, {self.total_steps}]")
        frac = step / self.total_steps if self.total_steps > 0 else 1.0
        return self.range_start_deg + (self.range_end_deg - self.range_start_deg) * frac


def pixel_grid(height: int, width: int, dtype=torch.float32) -> torch.Tensor:
    """(H, W, 2) map of pixel-center coordinates (x, y)."""
    ys = torch.arange(height, dtype=dtype) + 0.5
    xs = torch.arange(width, dtype=dtype) + 0.5
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx, gy], dim=-1)


def camera_ray_directions(pixels: torch.Tensor, camera: Camera) -> torch.Tensor:
    """Unit world-space ray directions through continuous pixel coords (..., 2)."""
    dtype = pixels.dtype
    fx, fy = camera.K[0, 0], camera.K[1, 1]
    cx, cy = camera.K[0, 2], camera.K[1, 2]
    x = (pixels[..., 0] - cx) / fx
    y = -(pixels[..., 1] - cy) / fy
    z = -torch.ones_like(x)
    d_cam = torch.stack([x, y, z], dim=-1)
    R = torch.as_tensor(camera.rotation, dtype=dtype)
    d_world = d_cam @ R.T
    return d_world / d_world.norm(dim=-1, keepdim=True)


def make_patch_rays(camera: Camera, patch_origin, patch_size, stride: int,
                    near: float, far: float, dtype=torch.float32) -> RayPatch:
    """Rays on a strided pixel grid starting at ``patch_origin`` (x0, y0).

    ``patch_size`` counts rays per side; the covered full-resolution
    footprint is ``patch_size * stride`` pixels and must fit in the image.
    """
    x0, y0 = int(patch_origin[0]), int(patch_origin[1])
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if isinstance(patch_size, int):
        patch_size = (patch_size, patch_size)
    pw, ph = int(patch_size[0]), int(patch_size[1])
    if x0 < 0 or y0 < 0 or x0 + pw * stride > camera.width or y0 + ph * stride > camera.height:
        raise ValueError(
            f"patch origin={patch_origin} size={patch_size} stride={stride} "
            f"does not fit in a {camera.width}x{camera.height} image")
    ys = y0 + torch.arange(ph, dtype=dtype) * stride + 0.5
    xs = x0 + torch.arange(pw, dtype=dtype) * stride + 0.5
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    pixels = torch.stack([gx, gy], dim=-1)
    directions = camera_ray_directions(pixels, camera)
    origins = torch.as_tensor(camera.origin, dtype=dtype).expand_as(directions)
    return RayPatch(pixel_coords=pixels, origins=origins.contiguous(),
                    directions=directions, near=float(near), far=float(far),
                    stride=stride)


def backproject(pixels: torch.Tensor, depth: torch.Tensor, camera: Camera) -> torch.Tensor:
    """World-space 3-D points at euclidean ``depth`` along the pixel rays."""
    d = camera_ray_directions(pixels, camera)
    o = torch.as_tensor(camera.origin, dtype=pixels.dtype)
    return o + depth[..., None] * d


def project(points_world: torch.Tensor, camera: Camera):
    """Project world points to continuous pixel coords.

    Returns (pixels (..., 2), valid (...,)) where valid marks points in
    front of the camera. Pixel values for invalid points are unreliable.
    """
    dtype = points_world.dtype
    R = torch.as_tensor(camera.rotation, dtype=dtype)
    t = torch.as_tensor(camera.origin, dtype=dtype)
    p_cam = (points_world - t) @ R
    z = p_cam[..., 2]
    valid = z < -1e-12
    denom = torch.where(valid, -z, torch.ones_like(z))
    fx, fy = camera.K[0, 0], camera.K[1, 1]
    cx, cy = camera.K[0, 2], camera.K[1, 2]
    u = cx + fx * p_cam[..., 0] / denom
    v = cy - fy * p_cam[..., 1] / denom
    return torch.stack([u, v], dim=-1), valid


def reproject(pixels_j: torch.Tensor, depth_j: torch.Tensor,
              cam_j: Camera, cam_i: Camera):
    """Map view-j pixels with known depth into view-i pixel coordinates.

    Returns (coords (..., 2), valid (...,)); coordinates are continuous
    and may fall outside the image. Points behind camera i are flagged
    invalid instead of raising.
    """
    if not torch.isfinite(depth_j).all() or (depth_j <= 0).any():
        raise ValueError("depths must be positive and finite")
    points = backproject(pixels_j, depth_j, cam_j)
    return project(points, cam_i)


def bilinear_sample(image: torch.Tensor, coords: torch.Tensor):
    """Differentiable bilinear lookup of ``image`` (H, W, C) at pixel coords.

    Out-of-bounds coordinates return the border-clamped value with the
    companion in-bounds flag set to 0; the function itself never fails.
    """
    H, W = image.shape[0], image.shape[1]
    single_channel = image.dim() == 2
    if single_channel:
        image = image[..., None]
    x = coords[..., 0] - 0.5
    y = coords[..., 1] - 0.5
    in_bounds = (x >= 0) & (x <= W - 1) & (y >= 0) & (y <= H - 1)
    x = x.clamp(0, W - 1)
    y = y.clamp(0, H - 1)
    x0 = x.floor().clamp(0, W - 2).long() if W > 1 else torch.zeros_like(x).long()
    y0 = y.floor().clamp(0, H - 2).long() if H > 1 else torch.zeros_like(y).long()
    x1 = (x0 + 1).clamp(0, W - 1)
    y1 = (y0 + 1).clamp(0, H - 1)
    wx = (x - x0.to(x.dtype)).unsqueeze(-1)
    wy = (y - y0.to(y.dtype)).unsqueeze(-1)
    flat = image.reshape(H * W, -1)
    def gather(yy, xx):
        return flat[(yy * W + xx).reshape(-1)].reshape(*xx.shape, flat.shape[-1])
    v00 = gather(y0, x0)
    v01 = gather(y0, x1)
    v10 = gather(y1, x0)
    v11 = gather(y1, x1)
    top = v00 * (1 - wx) + v01 * wx
    bot = v10 * (1 - wx) + v11 * wx
    out = top * (1 - wy) + bot * wy
    if single_channel:
        out = out[..., 0]
    return out, in_bounds


def warp_at_pixels(image_i: torch.Tensor, pixels_j: torch.Tensor,
                   depth_j: torch.Tensor, cam_j: Camera, cam_i: Camera):
    """Inverse-warp core: sample ``image_i`` at the reprojection of view-j
    pixels. Returns (colors, in_bounds) with in_bounds also covering
    points that land behind camera i."""
    coords, valid = reproject(pixels_j, depth_j, cam_j, cam_i)
    colors, inb = bilinear_sample(image_i, coords)
    return colors, inb & valid


def warp_image(image_i: torch.Tensor, depth_j: torch.Tensor,
               cam_j: Camera, cam_i: Camera):
    """Warp ``image_i`` into view j driven by view j's depth map.

    ``depth_j`` must match cam_j's resolution. Gradients flow into
    ``depth_j`` through the sampling coordinates; callers decide whether
    to detach the depth beforehand.
    """
    if tuple(depth_j.shape) != (cam_j.height, cam_j.width):
        raise ValueError(
            f"depth shape {tuple(depth_j.shape)} does not match camera "
            f"resolution {(cam_j.height, cam_j.width)}")
    pixels = pixel_grid(cam_j.height, cam_j.width, dtype=depth_j.dtype)
    return warp_at_pixels(image_i, pixels, depth_j, cam_j, cam_i)


def occlusion_mask(depth_j: torch.Tensor, depth_i: torch.Tensor,
                   cam_j: Camera, cam_i: Camera, tau: float,
                   pixels_j: torch.Tensor | None = None,
                   point_distance: bool = True) -> OcclusionMask:
    """Depth-consistency mask between a target view j and a source view i.

    A view-j pixel is kept when the 3-D point backprojected from view j
    agrees (within ``tau``) with the point backprojected from view i's
    depth map, sampled bilinearly at the reprojected location. Pixels
    whose reprojection is invalid or out of bounds are masked out.

    ``point_distance=False`` switches to the scalar depth-difference
    criterion (ablation only).
    """
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    if tuple(depth_i.shape) != (cam_i.height, cam_i.width):
        raise ValueError("depth_i must match cam_i resolution")
    if pixels_j is None:
        if tuple(depth_j.shape) != (cam_j.height, cam_j.width):
            raise ValueError("depth_j must match cam_j resolution")
        pixels_j = pixel_grid(cam_j.height, cam_j.width, dtype=depth_j.dtype)
    points_j = backproject(pixels_j, depth_j, cam_j)
    coords_i, valid = project(points_j, cam_i)
    d_i, inb = bilinear_sample(depth_i, coords_i)
    if point_distance:
        points_i = backproject(coords_i, d_i, cam_i)
        dist = (points_j - points_i).norm(dim=-1)
    else:
        dist = (depth_j - d_i).abs()
    # <= so that tau = 0 keeps exactly-zero distances
    keep = (dist <= tau) & valid & inb
    return OcclusionMask(values=keep.to(depth_j.dtype), threshold_used=float(tau))


def downsample_mask(mask, target_hw) -> torch.Tensor:
    """Nearest-neighbor mask downsampling with a top-left anchor."""
    values = mask.values if isinstance(mask, OcclusionMask) else mask
    H, W = values.shape
    th, tw = int(target_hw[0]), int(target_hw[1])
    if th > H or tw > W:
        raise ValueError(f"cannot upsample mask {H}x{W} to {th}x{tw}")
    ys = (torch.arange(th) * H) // th
    xs = (torch.arange(tw) * W) // tw
    return values[ys][:, xs]


def pose_to_euler_deg(pose: np.ndarray) -> np.ndarray:
    """Intrinsic X-Y-Z Euler angles (degrees); the Z component is roll."""
    return Rotation.from_matrix(pose[:3, :3]).as_euler("XYZ", degrees=True)


def euler_deg_to_rotation(euler_deg: np.ndarray) -> np.ndarray:
    return Rotation.from_euler("XYZ", euler_deg, degrees=True).as_matrix()


def sample_novel_pose(sampler: PoseSampler, step: int,
                      rng: np.random.Generator) -> Camera:
    """Draw a perturbed copy of a random reference pose.

    Uniform noise in [-d, +d] degrees is added to the x and y Euler
    components only; the z (roll) component is left untouched. d grows
    linearly with ``step`` between the sampler's range endpoints.
    """
    if not sampler.reference_poses:
        raise ValueError("pose sampler has no reference poses")
    d = sampler.range_at(step)
    ref = sampler.reference_poses[int(rng.integers(len(sampler.reference_poses)))]
    euler = pose_to_euler_deg(ref.pose)
    euler[:2] += rng.uniform(-d, d, size=2)
    pose = ref.pose.copy()
    pose[:3, :3] = euler_deg_to_rotation(euler)
    return Camera(K=ref.K, pose=pose, width=ref.width, height=ref.height)
