"""Manifest loading, image IO, and the synthetic dataset generator.

Images travel as uint8 numpy arrays shaped (H, W, C) with C of 1 or 3,
channels in RGB order, rows top to bottom. Supported file formats are
8-bit PNG (grayscale or RGB) and binary PPM (P6); everything else is
rejected by magic bytes before any pixel decoding happens.
"""

from __future__ import annotations

import csv
import io
import math
import os
import warnings
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, UnidentifiedImageError

from .augment import ChannelStats, compute_channel_stats, resize_square
from .errors import ConfigError, FormatError, ShapeError, UnsupportedFormatError
from .seeding import derive_rng

MANIFEST_HEADER = ["path", "label", "dataset", "split"]
PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    label: int
    dataset: str
    split: str = ""


@dataclass
class Manifest:
    """Ordered image records plus the class count declared per dataset."""

    records: tuple[ManifestRecord, ...]
    class_counts: dict[str, int]
    root: str = ""

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def resolve(self, record: ManifestRecord) -> str:
        if os.path.isabs(record.path) or not self.root:
            return record.path
        return os.path.join(self.root, record.path)

    def filter_split(self, split: str) -> "Manifest":
        kept = tuple(r for r in self.records if r.split == split)
        return Manifest(kept, dict(self.class_counts), self.root)

    def datasets(self) -> list[str]:
        seen = []
        for r in self.records:
            if r.dataset not in seen:
                seen.append(r.dataset)
        return seen

    def subset(self, records) -> "Manifest":
        return Manifest(tuple(records), dict(self.class_counts), self.root)


def load_manifest(path: str, class_counts: dict[str, int] | None = None) -> Manifest:
    """Parse a ``path,label,dataset,split`` CSV into a validated Manifest.

    Class counts default to max(label)+1 per dataset when not declared.
    Rows are kept in file order; duplicate paths within a dataset and
    out-of-range labels are rejected, naming the offender.
    """
    records: list[ManifestRecord] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file, expected header {','.join(MANIFEST_HEADER)}")
        if [h.strip() for h in header] != MANIFEST_HEADER:
            raise FormatError(
                f"{path}: bad header {header!r}, expected {','.join(MANIFEST_HEADER)}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise FormatError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            img_path, label_text, dataset, split = (f.strip() for f in row)
            if not img_path:
                raise FormatError(f"{path}:{lineno}: empty image path")
            try:
                label = int(label_text)
            except ValueError:
                raise FormatError(f"{path}:{lineno}: label {label_text!r} is not an integer")
            if label < 0:
                raise FormatError(f"{path}:{lineno}: label {label} is negative")
            records.append(ManifestRecord(img_path, label, dataset, split))

    seen: set[tuple[str, str]] = set()
    for r in records:
        key = (r.dataset, r.path)
        if key in seen:
            raise FormatError(f"{path}: duplicate path {r.path!r} in dataset {r.dataset!r}")
        seen.add(key)

    counts: dict[str, int] = {}
    for r in records:
        counts[r.dataset] = max(counts.get(r.dataset, 0), r.label + 1)
    if class_counts is not None:
        for dataset, declared in class_counts.items():
            if counts.get(dataset, 0) > declared:
                bad = max(r.label for r in records if r.dataset == dataset)
                raise FormatError(
                    f"{path}: dataset {dataset!r} declares {declared} classes but has label {bad}"
                )
        counts.update(class_counts)

    return Manifest(tuple(records), counts, root=os.path.dirname(os.path.abspath(path)))


def save_manifest(manifest: Manifest, path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for r in manifest.records:
            writer.writerow([r.path, r.label, r.dataset, r.split])


# ---------------------------------------------------------------------------
# image codecs


def decode_image(path: str) -> np.ndarray:
    """Decode one PNG or binary-PPM file to a (H, W, C) uint8 array."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise FormatError(f"{path}: file too short ({len(blob)} bytes)")
    if blob[:8] == PNG_MAGIC:
        return _decode_png(blob, path)
    if blob[:2] == b"P6":
        return _decode_ppm(blob, path)
    raise UnsupportedFormatError(f"{path}: unsupported format, magic bytes {blob[:8]!r}")


def _decode_png(blob: bytes, path: str) -> np.ndarray:
    try:
        with Image.open(io.BytesIO(blob)) as img:
            img.load()
            mode = img.mode
            if mode not in ("L", "RGB"):
                raise UnsupportedFormatError(
                    f"{path}: PNG mode {mode!r} unsupported (need 8-bit L or RGB)"
                )
            arr = np.asarray(img, dtype=np.uint8)
    except (OSError, UnidentifiedImageError, SyntaxError) as exc:
        raise FormatError(f"{path}: corrupt PNG data ({exc})") from None
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def _decode_ppm(blob: bytes, path: str) -> np.ndarray:
    pos = 2
    fields: list[int] = []

    def skip_space(p):
        while p < len(blob):
            if blob[p : p + 1].isspace():
                p += 1
            elif blob[p : p + 1] == b"#":
                while p < len(blob) and blob[p : p + 1] != b"\n":
                    p += 1
            else:
                break
        return p

    while len(fields) < 3:
        pos = skip_space(pos)
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        token = blob[start:pos]
        if not token:
            raise FormatError(f"{path}: truncated PPM header")
        try:
            fields.append(int(token))
        except ValueError:
            raise FormatError(f"{path}: bad PPM header token {token!r}")
    width, height, maxval = fields
    if maxval != 255:
        raise UnsupportedFormatError(f"{path}: PPM maxval {maxval} unsupported (need 255)")
    pos += 1  # single whitespace after maxval
    expected = width * height * 3
    raw = blob[pos : pos + expected]
    if len(raw) != expected:
        raise FormatError(f"{path}: truncated PPM pixel data ({len(raw)} of {expected} bytes)")
    return np.frombuffer(raw, dtype=np.uint8).reshape(height, width, 3).copy()


def write_png(path: str, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.uint8)
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ShapeError(f"write_png expects (H,W,1) or (H,W,3) uint8, got {arr.shape}")
    mode = "L" if arr.shape[2] == 1 else "RGB"
    img = Image.fromarray(arr[:, :, 0] if mode == "L" else arr, mode=mode)
    img.save(path, format="PNG")


def write_ppm(path: str, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.uint8)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeError(f"write_ppm expects (H,W,3) uint8, got {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(f"P6\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


# ---------------------------------------------------------------------------
# synthetic dataset


@dataclass(frozen=True)
class ClassRecipe:
    """Generative parameters for one class; structures stand in for lesions."""

    blob_count: int = 0
    blob_intensity: float = 0.0
    ring_radius: float = 0.0
    ring_intensity: float = 0.0
    line_count: int = 0
    line_intensity: float = 0.0
    phase: float = 0.0


_BASE_RECIPES = (
    ClassRecipe(blob_count=3, blob_intensity=0.75),
    ClassRecipe(ring_radius=0.32, ring_intensity=0.75),
    ClassRecipe(line_count=3, line_intensity=0.6, phase=0.3),
    ClassRecipe(blob_count=6, blob_intensity=0.5, phase=1.1),
    ClassRecipe(ring_radius=0.18, ring_intensity=0.7, phase=0.5),
    ClassRecipe(line_count=5, line_intensity=0.5, phase=0.9),
)


def default_recipes(class_count: int) -> tuple[ClassRecipe, ...]:
    if not 1 <= class_count <= len(_BASE_RECIPES):
        raise ConfigError(f"default recipes cover 1..{len(_BASE_RECIPES)} classes, got {class_count}")
    return _BASE_RECIPES[:class_count]


@dataclass(frozen=True)
class SyntheticSpec:
    image_size: int = 32
    class_count: int = 2
    recipes: tuple[ClassRecipe, ...] = field(default_factory=tuple)
    noise_level: float = 1.0
    seed: int = 0
    train_count: int = 200
    val_count: int = 0
    test_count: int = 50
    dataset_name: str = "synthetic"

    def __post_init__(self):
        if not self.recipes:
            object.__setattr__(self, "recipes", default_recipes(self.class_count))
        if len(self.recipes) != self.class_count:
            raise ConfigError(
                f"{self.class_count} classes need {self.class_count} recipes, got {len(self.recipes)}"
            )
        if len(set(self.recipes)) != len(self.recipes):
            raise ConfigError("distinct classes must have distinct generative parameters")
        if self.noise_level < 0:
            raise ConfigError(f"noise level must be >= 0, got {self.noise_level}")


def _class_structure(recipe: ClassRecipe, size: int, shift: np.ndarray) -> np.ndarray:
    rr, cc = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64), indexing="ij")
    center_r = size / 2.0 + shift[0]
    center_c = size / 2.0 + shift[1]
    out = np.zeros((size, size))
    if recipe.blob_count:
        sigma = 0.07 * size
        for k in range(recipe.blob_count):
            angle = 2.39996 * (k + 1) + recipe.phase
            radius = 0.30 * size * math.sqrt((k + 1) / recipe.blob_count)
            br = center_r + radius * math.sin(angle)
            bc = center_c + radius * math.cos(angle)
            out += recipe.blob_intensity * np.exp(
                -((rr - br) ** 2 + (cc - bc) ** 2) / (2 * sigma**2)
            )
    if recipe.ring_radius > 0:
        dist = np.sqrt((rr - center_r) ** 2 + (cc - center_c) ** 2)
        width = 0.04 * size
        out += recipe.ring_intensity * np.exp(
            -((dist - recipe.ring_radius * size) ** 2) / (2 * width**2)
        )
    if recipe.line_count:
        for j in range(recipe.line_count):
            theta = math.pi * j / recipe.line_count + recipe.phase
            dist = np.abs(
                -(rr - center_r) * math.sin(theta) + (cc - center_c) * math.cos(theta)
            )
            out += recipe.line_intensity * np.exp(-(dist**2) / (2 * 1.4**2))
    return out


def render_synthetic_image(spec: SyntheticSpec, class_idx: int, rng: np.random.Generator) -> np.ndarray:
    """One uint8 RGB sample of the class; all variation scales with noise_level.

    Draw order: structure shift (2 normals), brightness factor (1 normal),
    then per-pixel noise. With noise_level 0 every image of a class is the
    class template exactly.
    """
    size = spec.image_size
    noise = spec.noise_level
    shift = noise * rng.normal(0.0, 0.15 * size, size=2)
    brightness = 1.0 + noise * rng.normal(0.0, 0.35)
    structure = _class_structure(spec.recipes[class_idx], size, shift)
    rr, cc = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64), indexing="ij")
    r2 = ((rr - size / 2) ** 2 + (cc - size / 2) ** 2) / (size / 2) ** 2
    background = 0.08 + 0.20 * np.clip(1.0 - r2, 0.0, 1.0)
    img = background + brightness * structure
    img = np.repeat(img[:, :, None], 3, axis=2)
    img = img + noise * 0.30 * rng.normal(size=img.shape)
    return (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8)


def generate_synthetic(spec: SyntheticSpec, out_dir: str) -> Manifest:
    """Write the synthetic images plus manifest.csv under ``out_dir``.

    Deterministic for a fixed spec: per-image streams are derived from
    (seed, split, index), so reruns are byte-identical.
    """
    image_dir = os.path.join(out_dir, "images")
    os.makedirs(image_dir, exist_ok=True)
    records: list[ManifestRecord] = []
    for split, count in (
        ("train", spec.train_count),
        ("val", spec.val_count),
        ("test", spec.test_count),
    ):
        for i in range(count):
            label = i % spec.class_count
            rng = derive_rng(spec.seed, "synthetic", split, i)
            img = render_synthetic_image(spec, label, rng)
            rel = os.path.join("images", f"{split}_{i:05d}.png")
            write_png(os.path.join(out_dir, rel), img)
            records.append(ManifestRecord(rel, label, spec.dataset_name, split))
    manifest = Manifest(tuple(records), {spec.dataset_name: spec.class_count}, root=out_dir)
    save_manifest(manifest, os.path.join(out_dir, "manifest.csv"))
    return manifest


# ---------------------------------------------------------------------------
# manifest -> arrays


@dataclass
class ImageDataset:
    """Decoded, standardized images in manifest order."""

    images: list[np.ndarray]
    ids: list[str]
    labels: np.ndarray
    dataset_names: list[str]
    stats: ChannelStats
    base_size: int
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.images)

    @classmethod
    def from_manifest(
        cls,
        manifest: Manifest,
        base_size: int,
        stats: ChannelStats | None = None,
    ) -> "ImageDataset":
        """Decode every record, skipping failures with a warning.

        When ``stats`` is None, channel statistics are computed once over
        the decoded images (the training-manifest path); pass the training
        stats for every later stage.
        """
        resized: list[np.ndarray] = []
        ids: list[str] = []
        labels: list[int] = []
        names: list[str] = []
        skipped = 0
        for record in manifest:
            full = manifest.resolve(record)
            try:
                raw = decode_image(full)
            except (FormatError, OSError) as exc:
                warnings.warn(f"skipping undecodable image {record.path}: {exc}")
                skipped += 1
                continue
            resized.append(resize_square(raw, base_size))
            ids.append(record.path)
            labels.append(record.label)
            names.append(record.dataset)
        if not resized:
            raise ShapeError("no decodable images in manifest")
        if stats is None:
            stats = compute_channel_stats(resized)
        mean = np.asarray(stats.mean, dtype=np.float32)
        std = np.asarray(stats.std, dtype=np.float32)
        images = [(img - mean) / std for img in resized]
        return cls(
            images=images,
            ids=ids,
            labels=np.asarray(labels, dtype=np.int64),
            dataset_names=names,
            stats=stats,
            base_size=base_size,
            skipped=skipped,
        )

    @classmethod
    def from_arrays(
        cls,
        arrays,
        base_size: int,
        stats: ChannelStats | None = None,
        labels=None,
    ) -> "ImageDataset":
        resized = [resize_square(np.asarray(a), base_size) for a in arrays]
        if not resized:
            raise ShapeError("no images given")
        if stats is None:
            stats = compute_channel_stats(resized)
        mean = np.asarray(stats.mean, dtype=np.float32)
        std = np.asarray(stats.std, dtype=np.float32)
        images = [(img - mean) / std for img in resized]
        n = len(images)
        return cls(
            images=images,
            ids=[str(i) for i in range(n)],
            labels=np.asarray(labels if labels is not None else [-1] * n, dtype=np.int64),
            dataset_names=["array"] * n,
            stats=stats,
            base_size=base_size,
        )
