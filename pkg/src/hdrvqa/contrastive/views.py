"""Training views: random crop, half-scale counterpart, horizontal flips, patch tiling."""
from __future__ import annotations

import numpy as np

from hdrvqa.media import resize_plane


def hflip(img: np.ndarray) -> np.ndarray:
    return img[:, ::-1]


def half_scale(img: np.ndarray, filter: str = "lanczos3") -> np.ndarray:
    """Downscale an (H, W, C) image by two, clipped to [0, 1]."""
    h, w = img.shape[:2]
    size = (w // 2, h // 2)
    out = np.stack([resize_plane(img[..., c], size, filter) for c in range(img.shape[2])], axis=-1)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def random_crop(img: np.ndarray, crop_size: int, rng: np.random.Generator) -> np.ndarray:
    h, w = img.shape[:2]
    if h < crop_size or w < crop_size:
        raise ValueError(f"frame {w}x{h} is smaller than the {crop_size}x{crop_size} crop")
    top = int(rng.integers(0, h - crop_size + 1))
    left = int(rng.integers(0, w - crop_size + 1))
    return img[top:top + crop_size, left:left + crop_size]


def build_views(rgb: np.ndarray, crop_size: int, rng: np.random.Generator,
                flip_prob: float = 0.5, half_scale_prob: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Anchor and positive view of one frame.

    The anchor is a random ``crop_size`` crop at native scale; the positive is
    the same crop, at half scale with probability ``half_scale_prob`` and at
    native scale otherwise. Each view is flipped horizontally on its own coin
    toss.
    """
    crop = random_crop(np.asarray(rgb, dtype=np.float32), crop_size, rng)
    anchor = crop
    positive = half_scale(crop) if rng.random() < half_scale_prob else crop
    if rng.random() < flip_prob:
        anchor = hflip(anchor)
    if rng.random() < flip_prob:
        positive = hflip(positive)
    return np.ascontiguousarray(anchor), np.ascontiguousarray(positive)


def patchify(view: np.ndarray, patch_size: int = 64) -> list[np.ndarray]:
    """Non-overlapping tiles of a view, row-major.

    The count follows from the sizes: a 256 px crop gives 16 tiles of 64 px,
    and its 128 px half-scale counterpart gives 4.
    """
    h, w = view.shape[:2]
    if h % patch_size or w % patch_size:
        raise ValueError(f"view {w}x{h} is not divisible into {patch_size}x{patch_size} patches")
    return [view[r:r + patch_size, c:c + patch_size]
            for r in range(0, h, patch_size) for c in range(0, w, patch_size)]


def unpatchify(patches: list[np.ndarray], height: int, width: int) -> np.ndarray:
    p = patches[0].shape[0]
    cols = width // p
    rows = [np.concatenate(patches[r * cols:(r + 1) * cols], axis=1) for r in range(height // p)]
    return np.concatenate(rows, axis=0)
