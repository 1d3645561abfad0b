"""Patch-based vision transformer backbone with a projection head.

The model maps a batch of square images to a class-token embedding, the
projection-head logits used by the distillation objective, and the final
block's attention weights (kept for attention-map export). Views smaller
than the configured image size are handled by bilinearly interpolating
the positional embeddings onto the smaller patch grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import AttentionParams, multi_head_attention
from .augment import resize_bilinear
from .errors import ConfigError, ShapeError
from .seeding import derive_rng
from .tensor import Tensor

HEAD_HIDDEN = 256

PRESETS = {
    "tiny": dict(image_size=32, patch_size=8, depth=4, d_model=64, heads=4),
    "deit-b": dict(image_size=256, patch_size=16, depth=12, d_model=768, heads=12),
}


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    depth: int = 4
    d_model: int = 64
    heads: int = 4
    mlp_ratio: float = 4.0
    proto_dim: int = 256
    preset: str = "tiny"

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image size {self.image_size} not divisible by patch size {self.patch_size}"
            )
        if self.d_model % self.heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by {self.heads} heads")
        for name in ("channels", "depth", "proto_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    @classmethod
    def from_preset(cls, name: str, channels: int = 3, proto_dim: int = 256) -> "ViTConfig":
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return cls(preset=name, channels=channels, proto_dim=proto_dim, **PRESETS[name])

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def tokens(self) -> int:
        return self.grid**2 + 1

    @property
    def patch_dim(self) -> int:
        return self.patch_size**2 * self.channels

    @property
    def mlp_dim(self) -> int:
        return int(self.mlp_ratio * self.d_model)

    def param_count_formula(self) -> int:
        """Closed-form parameter count; cross-checked against the built model."""
        d, h = self.d_model, self.heads
        d_k = d // h
        patch = self.patch_dim * d + d
        cls_and_pos = d + self.tokens * d
        attn = h * (2 * d * d_k + d * d_k) + (h * d_k) * d + d
        mlp = d * self.mlp_dim + self.mlp_dim + self.mlp_dim * d + d
        block = 2 * d + attn + 2 * d + mlp
        head = d * HEAD_HIDDEN + HEAD_HIDDEN + HEAD_HIDDEN * self.proto_dim + self.proto_dim
        return patch + cls_and_pos + self.depth * block + 2 * d + head


@dataclass
class _Block:
    ln1_gain: Tensor
    ln1_bias: Tensor
    attn: AttentionParams
    ln2_gain: Tensor
    ln2_bias: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor


class ViTModel:
    """Weights plus the forward pass; parameter order is fixed and named."""

    def __init__(self, config: ViTConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        rng = derive_rng(seed, "vit-init")
        d = config.d_model

        def normal(shape, sigma=0.02):
            return Tensor(rng.normal(0.0, sigma, shape).astype(dtype), requires_grad=True)

        def zeros(shape):
            return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

        def ones(shape):
            return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)

        self.patch_w = normal((config.patch_dim, d))
        self.patch_b = zeros((d,))
        self.cls_token = normal((1, d))
        self.pos_embed = normal((config.tokens, d))
        self.blocks: list[_Block] = []
        for _ in range(config.depth):
            self.blocks.append(
                _Block(
                    ln1_gain=ones((d,)),
                    ln1_bias=zeros((d,)),
                    attn=AttentionParams.create(rng, d_model=d, heads=config.heads, dtype=dtype),
                    ln2_gain=ones((d,)),
                    ln2_bias=zeros((d,)),
                    mlp_w1=normal((d, config.mlp_dim)),
                    mlp_b1=zeros((config.mlp_dim,)),
                    mlp_w2=normal((config.mlp_dim, d)),
                    mlp_b2=zeros((d,)),
                )
            )
        self.final_gain = ones((d,))
        self.final_bias = zeros((d,))
        # wider output layer so sharpened teacher targets carry per-image
        # structure at init instead of collapsing to uniform
        self.head_w1 = normal((d, HEAD_HIDDEN))
        self.head_b1 = zeros((HEAD_HIDDEN,))
        self.head_w2 = normal((HEAD_HIDDEN, config.proto_dim), sigma=0.1)
        self.head_b2 = zeros((config.proto_dim,))
        self._pos_interp_cache: dict[int, np.ndarray] = {}

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [
            ("patch.w", self.patch_w),
            ("patch.b", self.patch_b),
            ("cls", self.cls_token),
            ("pos", self.pos_embed),
        ]
        for i, blk in enumerate(self.blocks):
            out.append((f"block.{i}.ln1.gain", blk.ln1_gain))
            out.append((f"block.{i}.ln1.bias", blk.ln1_bias))
            out.extend(blk.attn.named_parameters(prefix=f"block.{i}.attn."))
            out.append((f"block.{i}.ln2.gain", blk.ln2_gain))
            out.append((f"block.{i}.ln2.bias", blk.ln2_bias))
            out.append((f"block.{i}.mlp.w1", blk.mlp_w1))
            out.append((f"block.{i}.mlp.b1", blk.mlp_b1))
            out.append((f"block.{i}.mlp.w2", blk.mlp_w2))
            out.append((f"block.{i}.mlp.b2", blk.mlp_b2))
        out.append(("final.gain", self.final_gain))
        out.append(("final.bias", self.final_bias))
        out.append(("head.w1", self.head_w1))
        out.append(("head.b1", self.head_b1))
        out.append(("head.w2", self.head_w2))
        out.append(("head.b2", self.head_b2))
        return out

    def param_count(self) -> int:
        return sum(t.size for _, t in self.named_parameters())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_parameters()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, t in self.named_parameters():
            if name not in arrays:
                raise ShapeError(f"missing parameter {name!r} in state")
            if arrays[name].shape != t.shape:
                raise ShapeError(
                    f"parameter {name!r}: expected shape {t.shape}, got {arrays[name].shape}"
                )
            t.data = arrays[name].astype(t.data.dtype, copy=True)

    def copy(self) -> "ViTModel":
        clone = ViTModel(self.config, seed=0, dtype=self.dtype)
        clone.load_state_arrays(self.state_arrays())
        clone.set_requires_grad(True)
        return clone

    def set_requires_grad(self, flag: bool) -> None:
        for _, t in self.named_parameters():
            t.requires_grad = flag

    def zero_grad(self) -> None:
        for _, t in self.named_parameters():
            t.zero_grad()

    def _pos_for_grid(self, grid: int) -> Tensor:
        """Positional embeddings for a ``grid`` x ``grid`` patch layout.

        The class-token row is kept; patch rows are bilinearly interpolated
        from the native grid. Interpolation is a constant linear map, so
        gradients flow back to the stored embedding table.
        """
        base = self.config.grid
        if grid == base:
            return self.pos_embed
        if grid not in self._pos_interp_cache:
            weights = np.zeros((grid * grid, base * base), dtype=self.dtype)
            scale = base / grid
            for r in range(grid):
                for c in range(grid):
                    src_r = np.clip((r + 0.5) * scale - 0.5, 0.0, base - 1.0)
                    src_c = np.clip((c + 0.5) * scale - 0.5, 0.0, base - 1.0)
                    r0, c0 = int(np.floor(src_r)), int(np.floor(src_c))
                    r1, c1 = min(r0 + 1, base - 1), min(c0 + 1, base - 1)
                    fr, fc = src_r - r0, src_c - c0
                    row = r * grid + c
                    weights[row, r0 * base + c0] += (1 - fr) * (1 - fc)
                    weights[row, r0 * base + c1] += (1 - fr) * fc
                    weights[row, r1 * base + c0] += fr * (1 - fc)
                    weights[row, r1 * base + c1] += fr * fc
            self._pos_interp_cache[grid] = weights
        cls_row = T.slice_axis0(self.pos_embed, 0, 1)
        patch_rows = T.slice_axis0(self.pos_embed, 1, None)
        interpolated = T.matmul(Tensor(self._pos_interp_cache[grid]), patch_rows)
        return T.concat([cls_row, interpolated], axis=0)


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """Square images to patch token rows, top-left patch first.

    Accepts (H,W,C) or (B,H,W,C); returns (B,T,p*p*C) with patches ordered
    row-major over the grid and each patch flattened row-major with the
    channel axis last (pixel order fixed and documented here).
    """
    arr = np.asarray(images)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    if arr.ndim != 4:
        raise ShapeError(f"expected (B,H,W,C) images, got shape {arr.shape}")
    b, h, w, c = arr.shape
    if h % patch_size or w % patch_size:
        raise ShapeError(f"image {h}x{w} not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    tokens = arr.reshape(b, gh, patch_size, gw, patch_size, c)
    tokens = tokens.transpose(0, 1, 3, 2, 4, 5)
    tokens = tokens.reshape(b, gh * gw, patch_size * patch_size * c)
    return tokens[0] if single else tokens


def vit_forward(model: ViTModel, batch: np.ndarray):
    """Run the backbone on a batch of square images.

    Returns (cls_embed B x d_model, proto_logits B x K, attn_last as a
    B x heads x T x T numpy array from the final block).
    """
    cfg = model.config
    arr = np.asarray(batch, dtype=model.dtype)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ShapeError(f"expected (B,H,W,C) images, got {arr.shape}")
    b, h, w, c = arr.shape
    if c != cfg.channels:
        raise ShapeError(f"model expects {cfg.channels} channels, got {c}")
    if h != w:
        raise ShapeError(f"images must be square, got {h}x{w}")
    if h % cfg.patch_size:
        raise ShapeError(f"image size {h} not divisible by patch size {cfg.patch_size}")
    grid = h // cfg.patch_size

    tokens = Tensor(patchify(arr, cfg.patch_size))
    x = T.matmul(tokens, model.patch_w) + model.patch_b
    cls = Tensor(np.zeros((b, 1, cfg.d_model), dtype=model.dtype)) + model.cls_token
    x = T.concat([cls, x], axis=1)
    x = x + model._pos_for_grid(grid)

    attn_last = None
    for blk in model.blocks:
        normed = T.layer_norm(x, blk.ln1_gain, blk.ln1_bias)
        attended, weights = multi_head_attention(normed, normed, blk.attn, return_weights=True)
        attn_last = weights
        x = x + attended
        normed = T.layer_norm(x, blk.ln2_gain, blk.ln2_bias)
        hidden = T.gelu(T.matmul(normed, blk.mlp_w1) + blk.mlp_b1)
        x = x + (T.matmul(hidden, blk.mlp_w2) + blk.mlp_b2)

    x = T.layer_norm(x, model.final_gain, model.final_bias)
    cls_embed = T.take_token(x, 0)
    hidden = T.gelu(T.matmul(cls_embed, model.head_w1) + model.head_b1)
    proto_logits = T.matmul(hidden, model.head_w2) + model.head_b2
    attn_stack = np.stack([w.data for w in attn_last], axis=1)
    return cls_embed, proto_logits, attn_stack


def extract_attention_map(model: ViTModel, image: np.ndarray) -> np.ndarray:
    """Class-token attention over patches as an H x W heatmap in [0,1].

    Final-block weights are averaged over heads, reshaped to the patch
    grid, bilinearly upsampled to the image size, then min-max normalized.
    A constant map (min == max) normalizes to all zeros.
    """
    arr = np.asarray(image, dtype=model.dtype)
    if arr.ndim != 3:
        raise ShapeError(f"expected one HxWxC image, got shape {arr.shape}")
    h, w, _ = arr.shape
    with T.no_grad():
        _, _, attn = vit_forward(model, arr[None])
    cls_to_patch = attn[0, :, 0, 1:].mean(axis=0)
    grid = int(round(np.sqrt(cls_to_patch.size)))
    heat = cls_to_patch.reshape(grid, grid).astype(np.float64)
    heat = resize_bilinear(heat, h, w)
    lo, hi = heat.min(), heat.max()
    if hi - lo <= 0:
        return np.zeros((h, w))
    return (heat - lo) / (hi - lo)
