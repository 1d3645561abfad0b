"""Global/local view construction and the photometric transforms.

Views are square area-scaled random crops resized to the spec size, then
flipped / grayscaled at the configured probabilities. All randomness comes
from a per-image seed, so (image, seed, specs) fully determines the crop
set. Random draws are consumed in a fixed order per view: area fraction,
top offset, left offset, flip, grayscale (then the optional extras).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, ShapeError
from .seeding import derive_rng

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class ViewSpec:
    """One family of views: how many, their crop area range, output size."""

    kind: str  # "global" or "local"
    count: int
    scale: tuple[float, float]
    size: int

    def __post_init__(self):
        if self.kind not in ("global", "local"):
            raise ConfigError(f"view kind must be global or local, got {self.kind!r}")
        lo, hi = self.scale
        if not (0.0 < lo <= hi <= 1.0):
            raise ConfigError(f"scale range must satisfy 0 < lo <= hi <= 1, got {self.scale}")
        if self.count < 1:
            raise ConfigError(f"view count must be >= 1, got {self.count}")
        if self.size < 1:
            raise ConfigError(f"view size must be >= 1, got {self.size}")


@dataclass
class CropSet:
    """The global and local views cut from one source image."""

    globals_: list[np.ndarray]
    locals_: list[np.ndarray]
    source_id: str = ""
    seed: int = 0


@dataclass(frozen=True)
class ChannelStats:
    """Per-channel mean and std over the training manifest, in [0,1] units."""

    mean: tuple[float, ...]
    std: tuple[float, ...]

    @classmethod
    def identity(cls, channels: int) -> "ChannelStats":
        return cls(mean=(0.0,) * channels, std=(1.0,) * channels)


def _to_unit_float(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3:
        raise ShapeError(f"expected an HxWxC image, got shape {img.shape}")
    if img.size == 0:
        raise ShapeError(f"empty image of shape {img.shape}")
    if np.issubdtype(img.dtype, np.integer):
        return img.astype(np.float32) / 255.0
    return img.astype(np.float32)


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample with half-pixel-center sampling, edges clamped."""
    img = np.asarray(img)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    h, w, _ = img.shape
    if h == out_h and w == out_w:
        out = img.copy()
        return out[:, :, 0] if squeeze else out

    def axis_coords(n_src, n_dst):
        coords = (np.arange(n_dst) + 0.5) * (n_src / n_dst) - 0.5
        coords = np.clip(coords, 0.0, n_src - 1.0)
        lo = np.floor(coords).astype(np.int64)
        hi = np.minimum(lo + 1, n_src - 1)
        frac = (coords - lo).astype(img.dtype if img.dtype.kind == "f" else np.float32)
        return lo, hi, frac

    r0, r1, rf = axis_coords(h, out_h)
    c0, c1, cf = axis_coords(w, out_w)
    rf = rf[:, None, None]
    cf = cf[None, :, None]
    rows0, rows1 = img[r0], img[r1]
    top = rows0[:, c0] * (1 - cf) + rows0[:, c1] * cf
    bottom = rows1[:, c0] * (1 - cf) + rows1[:, c1] * cf
    out = top * (1 - rf) + bottom * rf
    out = out.astype(img.dtype if img.dtype.kind == "f" else np.float32)
    return out[:, :, 0] if squeeze else out


def resize_square(raw: np.ndarray, base_size: int) -> np.ndarray:
    """Scale the short side to ``base_size``, then center-crop to a square.

    Returns float32 in [0,1] regardless of the input dtype.
    """
    img = _to_unit_float(raw)
    h, w, _ = img.shape
    scale = base_size / min(h, w)
    new_h = max(base_size, int(round(h * scale)))
    new_w = max(base_size, int(round(w * scale)))
    img = resize_bilinear(img, new_h, new_w)
    top = (new_h - base_size) // 2
    left = (new_w - base_size) // 2
    return img[top : top + base_size, left : left + base_size]


def compute_channel_stats(images: Sequence[np.ndarray]) -> ChannelStats:
    """Mean/std per channel over every pixel of the given [0,1] images.

    A zero-variance channel falls back to a unit divisor with a warning.
    """
    if not len(images):
        raise ShapeError("cannot compute statistics over zero images")
    channels = images[0].shape[-1]
    total = np.zeros(channels, dtype=np.float64)
    total_sq = np.zeros(channels, dtype=np.float64)
    count = 0
    for img in images:
        flat = img.reshape(-1, channels).astype(np.float64)
        total += flat.sum(axis=0)
        total_sq += (flat**2).sum(axis=0)
        count += flat.shape[0]
    mean = total / count
    var = np.maximum(total_sq / count - mean**2, 0.0)
    std = np.sqrt(var)
    if np.any(std == 0.0):
        warnings.warn("zero-variance channel in dataset statistics; using unit divisor")
        std = np.where(std == 0.0, 1.0, std)
    return ChannelStats(mean=tuple(float(m) for m in mean), std=tuple(float(s) for s in std))


def standardize_image(raw: np.ndarray, base_size: int, stats: ChannelStats) -> np.ndarray:
    """Resize-then-center-crop to a square, then normalize per channel."""
    img = resize_square(raw, base_size)
    channels = img.shape[-1]
    if len(stats.mean) != channels:
        raise ShapeError(
            f"image has {channels} channels but statistics cover {len(stats.mean)}"
        )
    mean = np.asarray(stats.mean, dtype=np.float32)
    std = np.asarray(stats.std, dtype=np.float32)
    return (img - mean) / std


def _random_crop_resized(img: np.ndarray, spec: ViewSpec, rng: np.random.Generator) -> np.ndarray:
    h, w, _ = img.shape
    lo, hi = spec.scale
    if math.sqrt(lo * h * w) < 1.0:
        raise ConfigError(
            f"scale range {spec.scale} yields sub-pixel crops on a {h}x{w} image"
        )
    frac = rng.uniform(lo, hi)
    side = int(round(math.sqrt(frac * h * w)))
    side = max(1, min(side, min(h, w)))
    top = int(rng.integers(0, h - side + 1))
    left = int(rng.integers(0, w - side + 1))
    crop = img[top : top + side, left : left + side]
    return resize_bilinear(crop, spec.size, spec.size)


def to_grayscale(view: np.ndarray) -> np.ndarray:
    """Replace every channel by luminance (0.299/0.587/0.114 weights)."""
    if view.shape[-1] == 1:
        return view.copy()
    if view.shape[-1] != 3:
        raise ShapeError(f"grayscale conversion expects 1 or 3 channels, got {view.shape}")
    luma = view @ LUMA_WEIGHTS.astype(view.dtype)
    return np.repeat(luma[:, :, None], 3, axis=2).astype(view.dtype)


def apply_photometric(
    view: np.ndarray,
    rng: np.random.Generator,
    p_flip: float,
    p_gray: float,
    extra: bool = False,
) -> np.ndarray:
    """Random horizontal flip, then random grayscale; draws in that order.

    With ``extra`` enabled, a brightness jitter and a box blur follow (both
    p=0.5). They are off by default.
    """
    if not (0.0 <= p_flip <= 1.0 and 0.0 <= p_gray <= 1.0):
        raise ConfigError(f"probabilities must lie in [0,1], got {p_flip}, {p_gray}")
    out = view
    if rng.uniform() < p_flip:
        out = out[:, ::-1, :].copy()
    if rng.uniform() < p_gray:
        out = to_grayscale(out)
    if extra:
        if rng.uniform() < 0.5:
            out = out * np.float32(rng.uniform(0.8, 1.2))
        if rng.uniform() < 0.5:
            padded = np.pad(out, ((1, 1), (1, 1), (0, 0)), mode="edge")
            out = sum(
                padded[i : i + out.shape[0], j : j + out.shape[1]]
                for i in range(3)
                for j in range(3)
            ) / np.float32(9.0)
    return np.ascontiguousarray(out)


def make_views(
    image: np.ndarray,
    global_spec: ViewSpec,
    local_spec: ViewSpec,
    seed: int,
    source_id: str = "",
    p_flip: float = 0.5,
    p_gray: float = 0.2,
    extra: bool = False,
) -> CropSet:
    """Cut the configured global and local views from one standardized image."""
    if global_spec.size < local_spec.size:
        raise ConfigError(
            f"global size {global_spec.size} must be >= local size {local_spec.size}"
        )
    img = np.asarray(image)
    if img.ndim != 3 or img.size == 0:
        raise ShapeError(f"expected a nonempty HxWxC image, got shape {img.shape}")
    rng = derive_rng(seed, "views")
    globals_ = []
    for _ in range(global_spec.count):
        view = _random_crop_resized(img, global_spec, rng)
        globals_.append(apply_photometric(view, rng, p_flip, p_gray, extra))
    locals_ = []
    for _ in range(local_spec.count):
        view = _random_crop_resized(img, local_spec, rng)
        locals_.append(apply_photometric(view, rng, p_flip, p_gray, extra))
    return CropSet(globals_=globals_, locals_=locals_, source_id=source_id, seed=seed)
