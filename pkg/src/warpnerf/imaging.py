"""PNG input/output helpers (8-bit color, 16-bit depth with sidecar)."""

from __future__ import annotations

import numpy as np


def _to_numpy(image) -> np.ndarray:
    return np.asarray(image.detach().cpu() if hasattr(image, "detach") else image,
                      dtype=np.float64)


def save_png(path: str, image) -> None:
    """Write a [0, 1] float image as 8-bit PNG (no gamma handling)."""
    from PIL import Image

    arr = np.clip(_to_numpy(image), 0, 1)
    data = (arr * 255.0 + 0.5).astype(np.uint8)
    mode = "L" if data.ndim == 2 else "RGB"
    Image.fromarray(data, mode=mode).save(path)


def load_png(path: str) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im).astype(np.float32) / 255.0


def save_depth_png16(path: str, depth, near: float, far: float) -> None:
    """Write depth as 16-bit PNG, linearly mapped from [near, far]; the
    mapping is recorded in a sidecar text file next to the image."""
    from PIL import Image

    arr = np.clip((_to_numpy(depth) - near) / (far - near), 0, 1)
    data = (arr * 65535.0 + 0.5).astype(np.uint16)
    Image.fromarray(data).save(path)
    with open(path + ".txt", "w") as f:
        f.write(f"near = {near}\nfar = {far}\n"
                "encoding: value/65535 * (far - near) + near\n")


def load_depth_png16(path: str) -> tuple[np.ndarray, float, float]:
    from PIL import Image

    with Image.open(path) as im:
        raw = np.asarray(im).astype(np.float64) / 65535.0
    near = far = None
    with open(path + ".txt") as f:
        for line in f:
            if line.startswith("near"):
                near = float(line.split("=")[1])
            elif line.startswith("far"):
                far = float(line.split("=")[1])
    return raw * (far - near) + near, near, far
