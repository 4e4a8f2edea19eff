"""Dataset ingestion: Blender-synthetic and LLFF layouts plus analytic
synthetic scenes that double as test oracles."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .geometry import Camera, camera_ray_directions, pixel_grid

BACKGROUNDS = {
    "black": (0.0, 0.0, 0.0),
    "white": (1.0, 1.0, 1.0),
    "gray": (0.5, 0.5, 0.5),
}


@dataclass
class SceneDataset:
    images: list          # (H, W, 3) float tensors in [0, 1]
    cameras: list         # Camera per image
    near: float
    far: float
    train_indices: list
    test_indices: list
    background: tuple = (0.0, 0.0, 0.0)
    scene_id: str = ""

    def __post_init__(self):
        if len(self.images) != len(self.cameras):
            raise ValueError("images and cameras must pair up")
        shapes = {tuple(im.shape) for im in self.images}
        if len(shapes) > 1:
            raise ValueError(f"mixed image resolutions: {shapes}")
        if set(self.train_indices) & set(self.test_indices):
            raise ValueError("train and test splits overlap")

    @property
    def resolution(self):
        return tuple(self.images[0].shape[:2])

    def content_hash(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for im, cam in zip(self.images, self.cameras):
            h.update(np.asarray(im, dtype=np.float32).tobytes())
            h.update(cam.K.tobytes())
            h.update(cam.pose.tobytes())
        h.update(repr((self.near, self.far, self.train_indices,
                       self.test_indices, self.background)).encode())
        return h.hexdigest()


def look_at_camera(eye, target, up, K, width: int, height: int) -> Camera:
    """Camera at ``eye`` looking at ``target`` (camera -z toward target)."""
    eye = np.asarray(eye, dtype=np.float64)
    backward = eye - np.asarray(target, dtype=np.float64)
    backward = backward / np.linalg.norm(backward)
    right = np.cross(np.asarray(up, dtype=np.float64), backward)
    right = right / np.linalg.norm(right)
    true_up = np.cross(backward, right)
    pose = np.eye(4)
    pose[:3, 0] = right
    pose[:3, 1] = true_up
    pose[:3, 2] = backward
    pose[:3, 3] = eye
    return Camera(K=K, pose=pose, width=width, height=height)


def intrinsics_from_fov(fov_x_deg: float, width: int, height: int) -> np.ndarray:
    fx = 0.5 * width / math.tan(0.5 * math.radians(fov_x_deg))
    return np.array([[fx, 0, width / 2.0],
                     [0, fx, height / 2.0],
                     [0, 0, 1.0]])


class _SmoothTexture:
    """Low-frequency procedural RGB texture (smooth 3-D scalar fields);
    low frequencies keep bilinear-interpolation error well below 1e-3."""

    def __init__(self, rng: np.random.Generator, n_terms: int = 3,
                 max_freq: float = 3.0):
        self.freqs = rng.uniform(0.5, max_freq, size=(3, n_terms, 3))
        self.phases = rng.uniform(0, 2 * np.pi, size=(3, n_terms))
        amps = rng.uniform(0.15, 0.4, size=(3, n_terms))
        # keep the sum inside [0.05, 0.95] so no clamping kinks appear
        self.amps = amps * (0.45 / amps.sum(axis=1, keepdims=True))

    def __call__(self, points: torch.Tensor) -> torch.Tensor:
        freqs = torch.as_tensor(self.freqs, dtype=points.dtype)
        phases = torch.as_tensor(self.phases, dtype=points.dtype)
        amps = torch.as_tensor(self.amps, dtype=points.dtype)
        # (..., 1, n_terms) phase per channel/term
        arg = (points[..., None, None, :] * freqs).sum(-1) + phases
        vals = 0.5 + (amps * torch.sin(arg)).sum(-1)
        return vals.clamp(0.02, 0.98)


@dataclass
class SyntheticScene:
    """Analytic scene with exact ray casting, depths and visibility."""

    kind: str
    textures: list
    near: float
    far: float
    background: tuple = (0.5, 0.5, 0.5)
    front_z: float = 0.9
    front_halfwidth: float = 0.55
    cube_half: float = 0.8

    def cast(self, origins: torch.Tensor, dirs: torch.Tensor):
        """First hit along unit-norm rays. Returns (t, color, hit); t is
        ``far`` and color the background where nothing is hit."""
        if self.kind == "textured-plane":
            t, pts, hit = _plane_hit(origins, dirs, 0.0)
            color = self.textures[0](pts)
        elif self.kind == "two-plane-occluder":
            t_b, pts_b, hit_b = _plane_hit(origins, dirs, 0.0)
            t_f, pts_f, hit_f = _plane_hit(origins, dirs, self.front_z)
            inside = (pts_f[..., 0].abs() <= self.front_halfwidth) & \
                     (pts_f[..., 1].abs() <= self.front_halfwidth)
            hit_f = hit_f & inside
            front_first = hit_f & (~hit_b | (t_f < t_b))
            t = torch.where(front_first, t_f, t_b)
            hit = hit_f | hit_b
            color = torch.where(front_first[..., None],
                                self.textures[1](pts_f),
                                self.textures[0](pts_b))
        elif self.kind == "textured-cube":
            t, pts, hit = _cube_hit(origins, dirs, self.cube_half)
            color = self.textures[0](pts)
        else:
            raise ValueError(f"unknown synthetic scene kind: {self.kind!r}")
        bg = torch.tensor(self.background, dtype=dirs.dtype)
        color = torch.where(hit[..., None], color, bg)
        t = torch.where(hit, t, torch.full_like(t, self.far))
        return t, color, hit

    def render(self, camera: Camera, dtype=torch.float64):
        """Exact (image, depth, hit) maps for a camera; depth is the
        euclidean ray distance, ``far`` where nothing is hit."""
        pixels = pixel_grid(camera.height, camera.width, dtype=dtype)
        dirs = camera_ray_directions(pixels, camera)
        origins = torch.as_tensor(camera.origin, dtype=dtype).expand_as(dirs)
        t, color, hit = self.cast(origins, dirs)
        return color, t, hit

    def visibility(self, cam_j: Camera, cam_i: Camera,
                   dtype=torch.float64) -> torch.Tensor:
        """Per-pixel bool map for view j: the surface point seen by a
        view-j pixel is also the first hit along camera i's ray to it."""
        _, depth_j, hit_j = self.render(cam_j, dtype=dtype)
        pixels = pixel_grid(cam_j.height, cam_j.width, dtype=dtype)
        dirs_j = camera_ray_directions(pixels, cam_j)
        o_j = torch.as_tensor(cam_j.origin, dtype=dtype)
        points = o_j + depth_j[..., None] * dirs_j
        o_i = torch.as_tensor(cam_i.origin, dtype=dtype)
        to_point = points - o_i
        dist = to_point.norm(dim=-1)
        dirs_i = to_point / dist[..., None]
        t_i, _, hit_i = self.cast(o_i.expand_as(dirs_i), dirs_i)
        same_surface = hit_i & ((t_i - dist).abs() < 1e-6 * (1 + dist))
        return hit_j & same_surface


def _plane_hit(origins, dirs, z_plane):
    dz = dirs[..., 2]
    safe = torch.where(dz.abs() > 1e-12, dz, torch.full_like(dz, 1e-12))
    t = (z_plane - origins[..., 2]) / safe
    hit = (dz.abs() > 1e-12) & (t > 1e-9)
    pts = origins + t[..., None] * dirs
    return t, pts, hit


def _cube_hit(origins, dirs, half):
    inv = 1.0 / torch.where(dirs.abs() > 1e-12, dirs,
                            torch.full_like(dirs, 1e-12))
    t1 = (-half - origins) * inv
    t2 = (half - origins) * inv
    t_near = torch.minimum(t1, t2).max(dim=-1).values
    t_far = torch.maximum(t1, t2).min(dim=-1).values
    hit = (t_far >= t_near) & (t_far > 0) & (t_near > 1e-9)
    t = t_near
    pts = origins + t[..., None] * dirs
    return t, pts, hit


def ring_cameras(n: int, radius: float, elevation_deg: float, K: np.ndarray,
                 width: int, height: int, azimuth_span_deg: float = 360.0,
                 azimuth_start_deg: float = 0.0,
                 rng: np.random.Generator | None = None) -> list:
    """Cameras on a circle around +z looking at the origin."""
    cams = []
    elev = math.radians(elevation_deg)
    for k in range(n):
        if rng is not None:
            az = math.radians(azimuth_start_deg +
                              rng.uniform(0, azimuth_span_deg))
            el = elev + math.radians(rng.uniform(-5, 5))
        else:
            az = math.radians(azimuth_start_deg +
                              azimuth_span_deg * k / max(n, 1))
            el = elev
        eye = radius * np.array([math.cos(az) * math.cos(el),
                                 math.sin(az) * math.cos(el),
                                 math.sin(el)])
        cams.append(look_at_camera(eye, (0, 0, 0), (0, 0, 1), K, width, height))
    return cams


def make_synthetic_scene(kind: str, n_views: int, resolution: int,
                         rng: np.random.Generator, n_test: int = 4,
                         fov_deg: float = 45.0, radius: float = 4.0,
                         elevation_deg: float = 55.0,
                         azimuth_span_deg: float = 70.0,
                         background: str = "gray",
                         texture_max_freq: float = 2.5,
                         dtype=torch.float32):
    """Analytic scene dataset plus its oracle. Train views are drawn
    from a limited azimuth arc (few-shot regime); test views interleave
    within the same arc."""
    if kind not in ("textured-plane", "two-plane-occluder", "textured-cube"):
        raise ValueError(f"unknown synthetic scene kind: {kind!r}")
    K = intrinsics_from_fov(fov_deg, resolution, resolution)
    # oblique rays to an infinite plane travel farther than cube hits
    far = radius + (4.0 if kind != "textured-cube" else 2.0)
    scene = SyntheticScene(kind=kind,
                           textures=[_SmoothTexture(rng, max_freq=texture_max_freq),
                                     _SmoothTexture(rng, max_freq=texture_max_freq)],
                           near=radius - 2.0, far=far,
                           background=BACKGROUNDS[background])
    train_cams = ring_cameras(n_views, radius, elevation_deg, K, resolution,
                              resolution, azimuth_span_deg=azimuth_span_deg)
    test_cams = ring_cameras(n_test, radius, elevation_deg + 4.0, K,
                             resolution, resolution,
                             azimuth_span_deg=azimuth_span_deg,
                             azimuth_start_deg=azimuth_span_deg /
                             max(2 * n_test, 1))
    cameras = train_cams + test_cams
    images = [scene.render(c, dtype=dtype)[0] for c in cameras]
    dataset = SceneDataset(images=images, cameras=cameras,
                           near=scene.near, far=scene.far,
                           train_indices=list(range(n_views)),
                           test_indices=list(range(n_views, n_views + n_test)),
                           background=scene.background,
                           scene_id=f"synthetic:{kind}")
    return dataset, scene


def _load_image(path: str, background) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im).astype(np.float32) / 255.0
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=-1)
    if arr.shape[-1] == 4:
        rgb, a = arr[..., :3], arr[..., 3:]
        bg = np.asarray(background, dtype=np.float32)
        arr = rgb * a + bg * (1 - a)
    return arr[..., :3]


def load_blender(scene_dir: str, n_train_views: int, seed: int,
                 background: str = "white", near: float = 2.0,
                 far: float = 6.0, max_test_views: int | None = None) -> SceneDataset:
    """Blender-synthetic layout: transforms_{train,test}.json with a
    horizontal FOV and per-frame 4x4 camera-to-world transforms."""
    bg = BACKGROUNDS[background]
    splits = {}
    for split in ("train", "test"):
        manifest = os.path.join(scene_dir, f"transforms_{split}.json")
        if not os.path.exists(manifest):
            raise FileNotFoundError(f"missing camera manifest: {manifest}")
        with open(manifest) as f:
            splits[split] = json.load(f)

    images, cameras = [], []
    split_ranges = {}
    for split in ("train", "test"):
        meta = splits[split]
        start = len(images)
        frames = meta["frames"]
        if split == "test" and max_test_views is not None:
            frames = frames[:max_test_views]
        for frame in frames:
            rel = frame["file_path"]
            path = os.path.join(scene_dir, rel)
            if not os.path.splitext(path)[1]:
                path += ".png"
            if not os.path.exists(path):
                raise FileNotFoundError(f"missing image file: {path}")
            arr = _load_image(path, bg)
            h, w = arr.shape[:2]
            fov_deg = math.degrees(float(meta["camera_angle_x"]))
            K = intrinsics_from_fov(fov_deg, w, h)
            images.append(torch.from_numpy(arr))
            cameras.append(Camera(K=K, pose=np.asarray(frame["transform_matrix"],
                                                       dtype=np.float64),
                                  width=w, height=h))
        split_ranges[split] = list(range(start, len(images)))

    rng = np.random.default_rng(seed)
    train_pool = split_ranges["train"]
    chosen = sorted(rng.choice(len(train_pool), size=n_train_views,
                               replace=False).tolist())
    return SceneDataset(images=images, cameras=cameras, near=near, far=far,
                        train_indices=[train_pool[i] for i in chosen],
                        test_indices=split_ranges["test"], background=bg,
                        scene_id=f"blender:{os.path.basename(scene_dir.rstrip('/'))}")


# LLFF pose rows store rotation columns as [down, right, back]; ours are
# [right, up, back].
def llff_pose_to_camera(row: np.ndarray, width: int, height: int) -> Camera:
    m = row[:15].reshape(3, 5)
    h, w, f = m[:, 4]
    R = np.stack([m[:, 1], -m[:, 0], m[:, 2]], axis=1)
    pose = np.eye(4)
    pose[:3, :3] = R
    pose[:3, 3] = m[:, 3]
    sx, sy = width / w, height / h
    K = np.array([[f * sx, 0, width / 2.0],
                  [0, f * sy, height / 2.0],
                  [0, 0, 1.0]])
    return Camera(K=K, pose=pose, width=width, height=height)


def camera_to_llff_row(camera: Camera, near: float, far: float) -> np.ndarray:
    R = camera.rotation
    m = np.empty((3, 5))
    m[:, 0] = -R[:, 1]
    m[:, 1] = R[:, 0]
    m[:, 2] = R[:, 2]
    m[:, 3] = camera.origin
    m[:, 4] = (camera.height, camera.width, camera.K[0, 0])
    return np.concatenate([m.reshape(-1), [near, far]])


def load_llff(scene_dir: str, n_train_views: int, seed: int,
              bound_margin: float = 0.9) -> SceneDataset:
    """LLFF layout: an images/ directory plus the standard pose-bounds
    array (N x 17: flattened 3x5 pose+hwf rows and near/far bounds).
    Every 8th image goes to the test split."""
    poses_path = os.path.join(scene_dir, "poses_bounds.npy")
    if not os.path.exists(poses_path):
        raise FileNotFoundError(f"missing pose-bounds file: {poses_path}")
    arr = np.load(poses_path)
    if arr.ndim != 2 or arr.shape[1] != 17:
        raise ValueError(
            f"malformed pose-bounds array: expected (N, 17), got {arr.shape}")
    img_dir = os.path.join(scene_dir, "images")
    if not os.path.isdir(img_dir):
        raise FileNotFoundError(f"missing image directory: {img_dir}")
    files = sorted(f for f in os.listdir(img_dir)
                   if f.lower().endswith((".png", ".jpg", ".jpeg")))
    if len(files) != arr.shape[0]:
        raise ValueError(
            f"pose-bounds rows ({arr.shape[0]}) != image count ({len(files)})")
    images, cameras = [], []
    for fname, row in zip(files, arr):
        img = _load_image(os.path.join(img_dir, fname), (0, 0, 0))
        h, w = img.shape[:2]
        images.append(torch.from_numpy(img))
        cameras.append(llff_pose_to_camera(row, w, h))
    test_idx = list(range(0, len(images), 8))
    remainder = [i for i in range(len(images)) if i not in test_idx]
    rng = np.random.default_rng(seed)
    chosen = sorted(rng.choice(len(remainder), size=n_train_views,
                               replace=False).tolist())
    bounds = arr[:, 15:]
    near = float(bounds.min()) * bound_margin
    far = float(bounds.max()) / bound_margin
    return SceneDataset(images=images, cameras=cameras, near=near, far=far,
                        train_indices=[remainder[i] for i in chosen],
                        test_indices=test_idx, background=(0, 0, 0),
                        scene_id=f"llff:{os.path.basename(scene_dir.rstrip('/'))}")
