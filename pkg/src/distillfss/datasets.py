"""Episodes, support sets, directory datasets and the synthetic-shapes corpus.

Images are float32 tensors of shape (3, H, W) in [0, 1]. Masks are integer
grids where 0 is background and 1..N are foreground classes; on disk they are
single-channel 8-bit index images (pixel value == class index).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image, ImageDraw

IMAGE_DIR = "images"
MASK_DIR = "masks"


@dataclass(frozen=True)
class MultiClassMask:
    """Integer class grid covering every class present in one image."""

    grid: torch.Tensor  # (H, W) long, values in {0..num_classes}
    num_classes: int

    def __post_init__(self):
        if self.grid.ndim != 2:
            raise ValueError(f"mask grid must be 2-D, got shape {tuple(self.grid.shape)}")
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {self.num_classes}")
        grid = self.grid.to(torch.long)
        lo, hi = int(grid.min()), int(grid.max())
        if lo < 0 or hi > self.num_classes:
            raise ValueError(
                f"mask values must lie in [0, {self.num_classes}], found range [{lo}, {hi}]"
            )
        object.__setattr__(self, "grid", grid)

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape[0], self.grid.shape[1]

    def classes_present(self) -> list[int]:
        vals = torch.unique(self.grid).tolist()
        return [int(v) for v in vals if v != 0]


def binarize_mask(mask: MultiClassMask, class_id: int) -> torch.Tensor:
    """Return the {0,1} float indicator grid of one foreground class."""
    if not 1 <= class_id <= mask.num_classes:
        raise ValueError(
            f"class_id must be in [1, {mask.num_classes}], got {class_id}"
        )
    return (mask.grid == class_id).to(torch.float32)


def recombine_masks(binary_grids: Sequence[torch.Tensor], num_classes: int) -> MultiClassMask:
    """Inverse of per-class binarization for non-overlapping indicator grids."""
    if len(binary_grids) != num_classes:
        raise ValueError(f"expected {num_classes} grids, got {len(binary_grids)}")
    grid = torch.zeros_like(binary_grids[0], dtype=torch.long)
    for class_id, binary in enumerate(binary_grids, start=1):
        grid[binary > 0.5] = class_id
    return MultiClassMask(grid=grid, num_classes=num_classes)


@dataclass(frozen=True)
class SupportSet:
    """The labelled images a few-shot model is conditioned on.

    Construction fails unless every class 1..num_classes has foreground in at
    least one entry, so a valid SupportSet always covers the full label set.
    """

    entries: tuple[tuple[torch.Tensor, MultiClassMask], ...]
    num_classes: int

    def __post_init__(self):
        if len(self.entries) < 1:
            raise ValueError("a support set needs at least one entry")
        for image, mask in self.entries:
            if mask.num_classes != self.num_classes:
                raise ValueError(
                    f"all entries must share num_classes={self.num_classes}, "
                    f"found {mask.num_classes}"
                )
            if image.shape[-2:] != mask.grid.shape:
                raise ValueError(
                    f"image size {tuple(image.shape[-2:])} does not match "
                    f"mask size {tuple(mask.grid.shape)}"
                )
        missing = self.uncovered_classes()
        if missing:
            raise ValueError(f"support set has no foreground for classes {missing}")

    @property
    def size(self) -> int:
        return len(self.entries)

    def uncovered_classes(self) -> list[int]:
        covered = set()
        for _, mask in self.entries:
            covered.update(mask.classes_present())
        return [c for c in range(1, self.num_classes + 1) if c not in covered]


@dataclass(frozen=True)
class Episode:
    query_image: torch.Tensor
    support: SupportSet
    query_mask: Optional[MultiClassMask] = None  # absent at inference

    def __post_init__(self):
        if self.query_mask is not None and self.query_mask.num_classes != self.support.num_classes:
            raise ValueError("query and support must share num_classes")


@dataclass(frozen=True)
class SegDataset:
    split: str  # "train" or "test"
    items: tuple[tuple[torch.Tensor, MultiClassMask], ...]
    num_classes: int

    def __post_init__(self):
        for _, mask in self.items:
            if mask.num_classes != self.num_classes:
                raise ValueError("all dataset masks must share the dataset num_classes")

    def __len__(self) -> int:
        return len(self.items)


def load_dataset(root: str | Path, num_classes: int, split: str = "test") -> SegDataset:
    """Load filename-matched image/mask pairs from ``root/{images,masks}``.

    Pairs are matched by file stem and iterated in lexicographic filename
    order. Any orphan file or out-of-range mask value is a hard error.
    """
    root = Path(root)
    image_dir = root / IMAGE_DIR
    mask_dir = root / MASK_DIR
    for d in (image_dir, mask_dir):
        if not d.is_dir():
            raise FileNotFoundError(f"dataset directory missing: {d}")

    images = {p.stem: p for p in sorted(image_dir.iterdir()) if p.is_file()}
    masks = {p.stem: p for p in sorted(mask_dir.iterdir()) if p.is_file()}
    for stem, path in images.items():
        if stem not in masks:
            raise ValueError(f"image without mask: {path}")
    for stem, path in masks.items():
        if stem not in images:
            raise ValueError(f"mask without image: {path}")

    items = []
    for stem in sorted(images):
        image = _read_image(images[stem])
        grid = _read_mask_grid(masks[stem])
        hi = int(grid.max())
        if hi > num_classes:
            raise ValueError(
                f"mask {masks[stem]} contains value {hi} but num_classes is {num_classes}"
            )
        if grid.shape != image.shape[-2:]:
            raise ValueError(
                f"mask {masks[stem]} size {tuple(grid.shape)} does not match its image"
            )
        items.append((image, MultiClassMask(grid=grid, num_classes=num_classes)))
    return SegDataset(split=split, items=tuple(items), num_classes=num_classes)


def save_dataset(dataset: SegDataset, root: str | Path) -> Path:
    """Materialize a dataset to the ``root/{images,masks}`` layout as PNGs."""
    root = Path(root)
    (root / IMAGE_DIR).mkdir(parents=True, exist_ok=True)
    (root / MASK_DIR).mkdir(parents=True, exist_ok=True)
    width = max(4, len(str(len(dataset.items))))
    for i, (image, mask) in enumerate(dataset.items):
        name = f"{i:0{width}d}.png"
        arr = (image.clamp(0, 1).numpy() * 255.0).round().astype(np.uint8)
        Image.fromarray(np.moveaxis(arr, 0, -1)).save(root / IMAGE_DIR / name)
        Image.fromarray(mask.grid.numpy().astype(np.uint8), mode="L").save(
            root / MASK_DIR / name
        )
    return root


def build_support_set(dataset: SegDataset, m: int, seed: int) -> SupportSet:
    """Pick M support entries deterministically from a dataset.

    The selection order is fixed once per (dataset, seed): a seeded shuffle,
    stably reordered so that entries adding uncovered classes come first.
    Prefixes of that order are returned, so supports nest across increasing M
    and class coverage is reached as early as the dataset allows.
    """
    if m < 1:
        raise ValueError(f"support size must be >= 1, got {m}")
    if m > len(dataset.items):
        raise ValueError(
            f"support size {m} exceeds dataset size {len(dataset.items)}"
        )
    order = _selection_order(dataset, seed)
    chosen = [dataset.items[i] for i in order[:m]]

    covered = set()
    for _, mask in chosen:
        covered.update(mask.classes_present())
    missing = [c for c in range(1, dataset.num_classes + 1) if c not in covered]
    if missing:
        raise ValueError(
            f"cannot cover classes {missing} with {m} support images"
        )
    return SupportSet(entries=tuple(chosen), num_classes=dataset.num_classes)


def _selection_order(dataset: SegDataset, seed: int) -> list[int]:
    rng = np.random.default_rng(seed)
    shuffled = list(rng.permutation(len(dataset.items)))
    present = {i: set(dataset.items[i][1].classes_present()) for i in shuffled}

    covering: list[int] = []
    covered: set[int] = set()
    remaining = list(shuffled)
    while True:
        best, best_gain = None, 0
        for i in remaining:
            gain = len(present[i] - covered)
            if gain > best_gain:  # ties keep the earliest shuffle position
                best, best_gain = i, gain
        if best is None:
            break
        covering.append(best)
        covered |= present[best]
        remaining.remove(best)
    return covering + remaining


# Synthetic corpus: one shape family per class on a noisy textured
# background. Placement, scale, orientation and instance count all vary and
# class hue ranges overlap under the per-instance jitter, so a handful of
# examples never spans the appearance distribution and foreground is not
# recoverable by a global color threshold.
_SHAPE_BASE_COLORS = {
    1: (0.72, 0.40, 0.35),  # circles
    2: (0.38, 0.44, 0.72),  # rectangles
    3: (0.40, 0.66, 0.40),  # triangles
}
_COLOR_JITTER = 0.16


def synth_shapes(
    num_items: int,
    image_size: int,
    num_classes: int,
    seed: int,
    split: str = "train",
) -> SegDataset:
    """Generate a deterministic dataset of colored geometric shapes."""
    if num_classes not in (1, 2, 3):
        raise ValueError(f"num_classes must be 1, 2 or 3, got {num_classes}")
    if image_size < 32:
        raise ValueError(f"image_size must be >= 32, got {image_size}")
    rng = np.random.default_rng(seed)
    items = []
    for _ in range(num_items):
        image, grid = _synth_item(rng, image_size, num_classes)
        items.append(
            (
                torch.from_numpy(image),
                MultiClassMask(grid=torch.from_numpy(grid), num_classes=num_classes),
            )
        )
    return SegDataset(split=split, items=tuple(items), num_classes=num_classes)


def _synth_item(rng: np.random.Generator, size: int, num_classes: int):
    base = 0.52 + rng.uniform(-0.12, 0.12, size=3)
    image = np.tile(base.astype(np.float64)[:, None, None], (1, size, size))
    # low-frequency diagonal shading plus pixel noise as background texture
    yy, xx = np.mgrid[0:size, 0:size] / size
    angle = rng.uniform(0, 2 * np.pi)
    shade = 0.10 * np.sin(2 * np.pi * (np.cos(angle) * xx + np.sin(angle) * yy))
    image += shade[None]
    image += rng.normal(0.0, 0.06, size=(3, size, size))

    # 1-2 free-floating instances per class; placements are rejection-sampled
    # away from existing foreground, later classes overwrite on rare overlap
    grid = np.zeros((size, size), dtype=np.int64)
    for class_id in range(1, num_classes + 1):
        instances = 1 + int(rng.uniform() < 0.4)
        for _ in range(instances):
            shape_mask = _place_shape(rng, size, class_id, occupied=grid > 0)
            color = np.array(_SHAPE_BASE_COLORS[class_id]) + rng.uniform(
                -_COLOR_JITTER, _COLOR_JITTER, size=3
            )
            noise = rng.normal(0.0, 0.04, size=(3, size, size))
            sel = shape_mask.astype(bool)
            for ch in range(3):
                image[ch][sel] = color[ch] + noise[ch][sel]
            grid[sel] = class_id

    return np.clip(image, 0.0, 1.0).astype(np.float32), grid


def _place_shape(
    rng: np.random.Generator, size: int, class_id: int, occupied: np.ndarray
) -> np.ndarray:
    for _ in range(12):
        candidate = _draw_shape(rng, size, class_id)
        if not (candidate.astype(bool) & occupied).any():
            return candidate
    return candidate  # rare: accept the overlap, the new class wins


def _draw_shape(rng: np.random.Generator, size: int, class_id: int) -> np.ndarray:
    canvas = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(canvas)
    margin = max(2, size // 20)

    def center(extent: float) -> tuple[float, float]:
        lo, hi = margin + extent, size - margin - extent
        return rng.uniform(lo, hi), rng.uniform(lo, hi)

    if class_id == 1:  # circle
        r = size * rng.uniform(0.08, 0.15)
        cx, cy = center(r)
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=1)
    elif class_id == 2:  # rotated rectangle
        w = size * rng.uniform(0.14, 0.30)
        h = size * rng.uniform(0.14, 0.30)
        half_span = math.hypot(w, h) / 2
        cx, cy = center(half_span)
        theta = rng.uniform(-math.pi / 4, math.pi / 4)
        draw.polygon(_rotated_corners(cx, cy, w, h, theta), fill=1)
    else:  # rotated triangle
        b = size * rng.uniform(0.16, 0.34)
        h = size * rng.uniform(0.16, 0.34)
        half_span = math.hypot(b, h) / 2
        cx, cy = center(half_span)
        theta = rng.uniform(0, 2 * math.pi)
        apex_shift = b * rng.uniform(-0.25, 0.25)
        points = [(-b / 2, h / 2), (b / 2, h / 2), (apex_shift, -h / 2)]
        draw.polygon(_rotate_points(points, cx, cy, theta), fill=1)
    return np.asarray(canvas, dtype=np.uint8)


def _rotated_corners(cx, cy, w, h, theta):
    points = [(-w / 2, -h / 2), (w / 2, -h / 2), (w / 2, h / 2), (-w / 2, h / 2)]
    return _rotate_points(points, cx, cy, theta)


def _rotate_points(points, cx, cy, theta):
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    return [
        (cx + x * cos_t - y * sin_t, cy + x * sin_t + y * cos_t) for x, y in points
    ]


def _read_image(path: Path) -> torch.Tensor:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(np.moveaxis(arr, -1, 0).copy())


def _read_mask_grid(path: Path) -> torch.Tensor:
    with Image.open(path) as img:
        if img.mode not in ("L", "P", "I", "I;16"):
            raise ValueError(
                f"mask {path} must be a single-channel index image, got mode {img.mode}"
            )
        arr = np.asarray(img)
    if arr.ndim != 2:
        raise ValueError(f"mask {path} must be single-channel, got shape {arr.shape}")
    return torch.from_numpy(arr.astype(np.int64))
