"""Dataset ingestion, offline augmentation, and the synthetic concept dataset.

On-disk layout is class-per-subdirectory under split directories:
``root/<split>/<class_name>/<image files>``. The synthetic generator adds
a parallel ``root/masks/<split>/<class_name>/`` tree of grayscale concept
masks marking which pixels carry each image's class concept.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
import torch
from PIL import Image, ImageDraw

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}


@dataclass(frozen=True)
class ImageRecord:
    path: Path
    image_id: str
    class_id: int
    class_name: str
    crop: tuple[int, int, int, int] | None = None


@dataclass
class DatasetManifest:
    root: Path
    classes: list[str]
    resolution: int
    splits: dict[str, list[ImageRecord]]
    mask_root: Path | None = None

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def records(self, split: str) -> list[ImageRecord]:
        try:
            return self.splits[split]
        except KeyError:
            raise ValueError(f"manifest has no split {split!r}; have {sorted(self.splits)}") from None


def parse_crop_table(path: str | Path) -> dict[str, tuple[int, int, int, int]]:
    """Read per-image crop boxes: one ``image_path x1 y1 x2 y2`` line each."""

    table: dict[str, tuple[int, int, int, int]] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 5:
            raise ValueError(f"{path}:{lineno}: expected 'image_path x1 y1 x2 y2'")
        table[parts[0]] = tuple(int(v) for v in parts[1:])  # type: ignore[assignment]
    return table


def load_directory_dataset(
    root: str | Path,
    resolution: int,
    crop_table: dict[str, tuple[int, int, int, int]] | str | Path | None = None,
    splits: Sequence[str] = ("train", "test"),
) -> DatasetManifest:
    """Build a manifest over a class-per-subdirectory image tree.

    File ordering is lexicographic throughout, so manifests are
    deterministic for a given tree. Crops (when given) are keyed by the
    image path relative to ``root`` and applied before resizing.
    """

    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    if isinstance(crop_table, (str, Path)):
        crop_table = parse_crop_table(crop_table)

    class_names: set[str] = set()
    for split in splits:
        split_dir = root / split
        if not split_dir.is_dir():
            raise FileNotFoundError(f"split directory {split_dir} does not exist")
        class_names.update(p.name for p in split_dir.iterdir() if p.is_dir())
    classes = sorted(class_names)
    class_ids = {name: i for i, name in enumerate(classes)}

    manifest_splits: dict[str, list[ImageRecord]] = {}
    for split in splits:
        records: list[ImageRecord] = []
        for name in classes:
            class_dir = root / split / name
            if not class_dir.is_dir():
                continue
            files = sorted(p for p in class_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
            if not files:
                raise ValueError(f"class directory {class_dir} contains no images")
            for f in files:
                rel = f.relative_to(root).as_posix()
                records.append(
                    ImageRecord(
                        path=f,
                        image_id=rel,
                        class_id=class_ids[name],
                        class_name=name,
                        crop=(crop_table or {}).get(rel),
                    )
                )
        manifest_splits[split] = records

    mask_root = root / "masks"
    return DatasetManifest(
        root=root,
        classes=classes,
        resolution=resolution,
        splits=manifest_splits,
        mask_root=mask_root if mask_root.is_dir() else None,
    )


def load_image(record: ImageRecord, resolution: int) -> np.ndarray:
    """Load one record as float32 CHW in [0, 1], cropping then resizing."""

    try:
        with Image.open(record.path) as img:
            img = img.convert("RGB")
            if record.crop is not None:
                img = img.crop(record.crop)
            if img.size != (resolution, resolution):
                img = img.resize((resolution, resolution), Image.BILINEAR)
            arr = np.asarray(img, dtype=np.float32) / 255.0
    except OSError as exc:
        raise OSError(f"cannot read image {record.path}: {exc}") from exc
    return arr.transpose(2, 0, 1)


def load_split_tensors(manifest: DatasetManifest, split: str) -> tuple[torch.Tensor, torch.Tensor]:
    """Eagerly load a whole split as ``(images, labels)`` tensors."""

    records = manifest.records(split)
    if not records:
        raise ValueError(f"split {split!r} is empty")
    images = np.stack([load_image(r, manifest.resolution) for r in records])
    labels = np.array([r.class_id for r in records], dtype=np.int64)
    return torch.from_numpy(images), torch.from_numpy(labels)


def iter_image_batches(
    manifest: DatasetManifest, split: str, batch_size: int
) -> Iterator[tuple[torch.Tensor, torch.Tensor, list[ImageRecord]]]:
    """Stream a split in manifest order without holding it all in memory."""

    records = manifest.records(split)
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        images = np.stack([load_image(r, manifest.resolution) for r in chunk])
        labels = np.array([r.class_id for r in chunk], dtype=np.int64)
        yield torch.from_numpy(images), torch.from_numpy(labels), chunk


def manifest_fingerprint(manifest: DatasetManifest, split: str) -> str:
    """Stable digest of a split's identity (ids, paths, class ids)."""

    h = hashlib.sha256()
    for r in manifest.records(split):
        h.update(f"{r.image_id}|{r.path}|{r.class_id}|{r.crop}\n".encode())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Offline augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentationSpec:
    """Symmetric jitter ranges (degrees) and the number of copies per image."""

    rotation: float = 15.0
    shear: float = 10.0
    skew: float = 10.0
    horizontal_flip: bool = True
    copies: int = 4

    def __post_init__(self) -> None:
        if self.copies < 0:
            raise ValueError(f"copies must be >= 0, got {self.copies}")
        for name in ("rotation", "shear", "skew"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} range must be >= 0 (it is applied symmetrically)")


def hflip(img: Image.Image) -> Image.Image:
    """Horizontal mirror; applying it twice reproduces the original pixels."""

    return img.transpose(Image.FLIP_LEFT_RIGHT)


def _affine_jitter(img: Image.Image, rotation: float, shear_x: float, shear_y: float) -> Image.Image:
    w, h = img.size
    cx, cy = w / 2.0, h / 2.0
    cos_r, sin_r = math.cos(math.radians(rotation)), math.sin(math.radians(rotation))
    tan_x, tan_y = math.tan(math.radians(shear_x)), math.tan(math.radians(shear_y))
    # rotation followed by x/y shear, all about the image center
    a = cos_r + tan_x * sin_r
    b = -sin_r + tan_x * cos_r
    d = sin_r + tan_y * cos_r
    e = cos_r + tan_y * -sin_r
    c = cx - a * cx - b * cy
    f = cy - d * cx - e * cy
    return img.transform((w, h), Image.AFFINE, (a, b, c, d, e, f), resample=Image.BILINEAR)


def augment_offline(
    manifest: DatasetManifest,
    spec: AugmentationSpec,
    out_root: str | Path,
    seed: int = 0,
) -> DatasetManifest:
    """Write jittered copies of every training image; the test split is untouched.

    The returned manifest keeps the originals and appends the new copies.
    Each copy's transform parameters are drawn from a generator keyed by
    (seed, image index, copy index), so regeneration is deterministic.
    """

    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    train_records = list(manifest.records("train"))
    augmented: list[ImageRecord] = list(train_records)
    for idx, record in enumerate(train_records):
        if spec.copies == 0:
            break
        with Image.open(record.path) as img:
            img = img.convert("RGB")
            if record.crop is not None:
                img = img.crop(record.crop)
            for copy_idx in range(spec.copies):
                rng = np.random.default_rng((seed, idx, copy_idx))
                rot = float(rng.uniform(-spec.rotation, spec.rotation))
                shx = float(rng.uniform(-spec.shear, spec.shear))
                shy = float(rng.uniform(-spec.skew, spec.skew))
                variant = _affine_jitter(img, rot, shx, shy)
                if spec.horizontal_flip and rng.random() < 0.5:
                    variant = hflip(variant)
                class_dir = out_root / record.class_name
                class_dir.mkdir(parents=True, exist_ok=True)
                out_path = class_dir / f"{record.path.stem}_aug{copy_idx}{record.path.suffix}"
                variant.save(out_path)
                augmented.append(
                    ImageRecord(
                        path=out_path,
                        image_id=f"{record.image_id}#aug{copy_idx}",
                        class_id=record.class_id,
                        class_name=record.class_name,
                    )
                )
    splits = dict(manifest.splits)
    splits["train"] = augmented
    return DatasetManifest(
        root=manifest.root,
        classes=list(manifest.classes),
        resolution=manifest.resolution,
        splits=splits,
        mask_root=manifest.mask_root,
    )


# ---------------------------------------------------------------------------
# Synthetic concept dataset
# ---------------------------------------------------------------------------

PALETTE: dict[str, tuple[float, float, float]] = {
    "red": (0.82, 0.18, 0.16),
    "green": (0.22, 0.65, 0.28),
    "blue": (0.20, 0.35, 0.80),
    "yellow": (0.88, 0.80, 0.20),
    "slate": (0.45, 0.50, 0.58),
    "white": (0.92, 0.92, 0.92),
}

SHAPES = ("disk", "square", "triangle", "cross", "ring", "bar")

DEFAULT_CLASSES: tuple[tuple[str, str], ...] = (
    ("disk", "red"),
    ("square", "red"),
    ("triangle", "red"),
    ("cross", "red"),
)


@dataclass(frozen=True)
class SyntheticConceptSpec:
    """Recipe for the shapes-on-noise dataset with per-pixel concept masks."""

    classes: tuple[tuple[str, str], ...] = DEFAULT_CLASSES
    image_size: int = 64
    train_per_class: int = 200
    test_per_class: int = 100
    noise: float = 0.35
    seed: int = 0

    def __post_init__(self) -> None:
        if len(set(self.classes)) != len(self.classes):
            raise ValueError("each class's (shape, color) pair must be unique")
        for shape, color in self.classes:
            if shape not in SHAPES:
                raise ValueError(f"unknown shape {shape!r}; have {SHAPES}")
            if color not in PALETTE:
                raise ValueError(f"unknown color {color!r}; have {sorted(PALETTE)}")
        if self.image_size < 16:
            raise ValueError("image_size must be at least 16")


def _rotated(points: list[tuple[float, float]], cx: float, cy: float, angle: float) -> list[tuple[float, float]]:
    cos_a, sin_a = math.cos(angle), math.sin(angle)
    return [
        (cx + (x - cx) * cos_a - (y - cy) * sin_a, cy + (x - cx) * sin_a + (y - cy) * cos_a)
        for x, y in points
    ]


def _draw_shape_mask(shape: str, size: int, cx: float, cy: float, s: float, angle: float) -> np.ndarray:
    mask_img = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(mask_img)
    if shape == "disk":
        draw.ellipse((cx - s, cy - s, cx + s, cy + s), fill=255)
    elif shape == "ring":
        draw.ellipse((cx - s, cy - s, cx + s, cy + s), fill=255)
        draw.ellipse((cx - 0.55 * s, cy - 0.55 * s, cx + 0.55 * s, cy + 0.55 * s), fill=0)
    elif shape == "square":
        pts = [(cx - s, cy - s), (cx + s, cy - s), (cx + s, cy + s), (cx - s, cy + s)]
        draw.polygon(_rotated(pts, cx, cy, angle), fill=255)
    elif shape == "triangle":
        pts = [(cx, cy - s), (cx + s * 0.95, cy + s * 0.75), (cx - s * 0.95, cy + s * 0.75)]
        draw.polygon(_rotated(pts, cx, cy, angle), fill=255)
    elif shape == "cross":
        t = s * 0.38
        bar1 = [(cx - s, cy - t), (cx + s, cy - t), (cx + s, cy + t), (cx - s, cy + t)]
        bar2 = [(cx - t, cy - s), (cx + t, cy - s), (cx + t, cy + s), (cx - t, cy + s)]
        draw.polygon(_rotated(bar1, cx, cy, angle), fill=255)
        draw.polygon(_rotated(bar2, cx, cy, angle), fill=255)
    elif shape == "bar":
        t = s * 0.34
        pts = [(cx - s, cy - t), (cx + s, cy - t), (cx + s, cy + t), (cx - s, cy + t)]
        draw.polygon(_rotated(pts, cx, cy, angle), fill=255)
    else:  # pragma: no cover - guarded by SyntheticConceptSpec validation
        raise ValueError(f"unknown shape {shape!r}")
    return np.asarray(mask_img, dtype=np.float32) / 255.0


def _textured_background(rng: np.random.Generator, size: int, noise: float) -> np.ndarray:
    base = rng.uniform(0.30, 0.55)
    coarse = rng.uniform(-1.0, 1.0, size=(8, 8)).astype(np.float32)
    coarse_img = Image.fromarray(((coarse + 1.0) * 127.5).astype(np.uint8)).resize((size, size), Image.BILINEAR)
    texture = (np.asarray(coarse_img, dtype=np.float32) / 127.5) - 1.0
    fine = rng.uniform(-1.0, 1.0, size=(size, size)).astype(np.float32)
    gray = base + 0.5 * noise * texture + 0.25 * noise * fine
    tint = rng.uniform(-0.03, 0.03, size=3).astype(np.float32)
    bg = gray[..., None] + tint[None, None, :]
    return np.clip(bg, 0.0, 1.0)


def _render_synthetic_image(
    spec: SyntheticConceptSpec, split_idx: int, class_idx: int, image_idx: int
) -> tuple[np.ndarray, np.ndarray]:
    """One (image HWC float, mask HW float) pair, reproducible from indices."""

    rng = np.random.default_rng((spec.seed, split_idx, class_idx, image_idx))
    size = spec.image_size
    shape, color = spec.classes[class_idx]
    bg = _textured_background(rng, size, spec.noise)
    s = rng.uniform(0.16, 0.25) * size
    cx = rng.uniform(s + 2, size - s - 2)
    cy = rng.uniform(s + 2, size - s - 2)
    angle = rng.uniform(0.0, 2.0 * math.pi)
    mask = _draw_shape_mask(shape, size, cx, cy, s, angle)
    rgb = np.array(PALETTE[color], dtype=np.float32) * rng.uniform(0.85, 1.15)
    img = bg * (1.0 - mask[..., None]) + np.clip(rgb, 0, 1)[None, None, :] * mask[..., None]
    img = img + rng.uniform(-0.02, 0.02, size=img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0), mask


def synthetic_class_name(shape: str, color: str) -> str:
    return f"{shape}_{color}"


def generate_synthetic(spec: SyntheticConceptSpec, root: str | Path) -> DatasetManifest:
    """Render the dataset plus concept masks under ``root`` and load its manifest.

    Every pixel of the rendered class shape is marked in the grayscale
    mask stored in the parallel ``masks/`` tree.
    """

    root = Path(root)
    counts = {"train": spec.train_per_class, "test": spec.test_per_class}
    for split_idx, (split, per_class) in enumerate(counts.items()):
        for class_idx, (shape, color) in enumerate(spec.classes):
            class_name = synthetic_class_name(shape, color)
            img_dir = root / split / class_name
            mask_dir = root / "masks" / split / class_name
            img_dir.mkdir(parents=True, exist_ok=True)
            mask_dir.mkdir(parents=True, exist_ok=True)
            for image_idx in range(per_class):
                img, mask = _render_synthetic_image(spec, split_idx, class_idx, image_idx)
                name = f"img_{image_idx:04d}.png"
                Image.fromarray((img * 255.0).round().astype(np.uint8)).save(img_dir / name)
                Image.fromarray((mask * 255.0).round().astype(np.uint8), mode="L").save(mask_dir / name)
    manifest = load_directory_dataset(root, spec.image_size)
    return manifest


def concept_mask_path(manifest: DatasetManifest, record: ImageRecord) -> Path | None:
    if manifest.mask_root is None:
        return None
    candidate = manifest.mask_root / record.image_id
    return candidate if candidate.is_file() else None


def load_concept_mask(manifest: DatasetManifest, record: ImageRecord) -> np.ndarray | None:
    """Binary concept mask for a record, or None when the dataset has no masks."""

    path = concept_mask_path(manifest, record)
    if path is None:
        return None
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"), dtype=np.float32) / 255.0
    return (arr >= 0.5).astype(np.float32)


def cell_pixel_box(row: int, col: int, grid_shape: tuple[int, int], image_size: int) -> tuple[int, int, int, int]:
    """Pixel rectangle (left, top, right, bottom) of one latent grid cell."""

    grid_h, grid_w = grid_shape
    top = round(row * image_size / grid_h)
    bottom = round((row + 1) * image_size / grid_h)
    left = round(col * image_size / grid_w)
    right = round((col + 1) * image_size / grid_w)
    return left, top, right, bottom


def cell_concept_fraction(mask: np.ndarray, row: int, col: int, grid_shape: tuple[int, int]) -> float:
    """Fraction of one grid cell's pixels covered by the concept mask."""

    left, top, right, bottom = cell_pixel_box(row, col, grid_shape, mask.shape[0])
    cell = mask[top:bottom, left:right]
    if cell.size == 0:
        return 0.0
    return float(cell.mean())
