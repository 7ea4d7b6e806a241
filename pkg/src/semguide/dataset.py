"""Synthetic shapes dataset, VOC-style directory I/O and training augmentation.

Every synthetic class is a (shape kind, color) pair drawn on a low-saturation
textured background. Masks use the VOC convention: 0 is background and class
``c`` (0-based) is stored as ``c + 1``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

# (shape kind, RGB) per class; background never uses these saturated colors.
PALETTE: list[tuple[str, tuple[float, float, float]]] = [
    ("circle", (0.90, 0.10, 0.10)),
    ("square", (0.10, 0.80, 0.15)),
    ("triangle", (0.15, 0.25, 0.95)),
    ("diamond", (0.95, 0.85, 0.10)),
    ("cross", (0.85, 0.10, 0.85)),
    ("ring", (0.10, 0.85, 0.85)),
]


class DatasetError(ValueError):
    """Raised for invalid dataset specs and malformed on-disk datasets."""


@dataclass
class LabeledImage:
    pixels: np.ndarray  # H x W x 3, float32 in [0, 1]
    label: np.ndarray  # K, multi-hot {0, 1}
    gt_mask: np.ndarray | None = None  # H x W, uint8 in {0..K}
    image_id: str = ""

    @property
    def num_classes(self) -> int:
        return int(self.label.shape[0])


@dataclass
class DatasetSpec:
    num_images: int = 200
    image_size: int = 64
    num_classes: int = 3
    min_shapes: int = 1
    max_shapes: int = 3
    min_shape_size: int = 14
    max_shape_size: int = 26
    patch_size: int = 8
    seed: int = 0
    palette: list = field(default_factory=lambda: list(PALETTE))

    def validate(self) -> None:
        if self.num_classes < 2:
            raise DatasetError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.num_classes > len(self.palette):
            raise DatasetError(
                f"num_classes={self.num_classes} exceeds palette size {len(self.palette)}"
            )
        if self.image_size % self.patch_size:
            raise DatasetError(
                f"image_size {self.image_size} not divisible by patch size {self.patch_size}"
            )
        if not 1 <= self.min_shapes <= self.max_shapes:
            raise DatasetError("need 1 <= min_shapes <= max_shapes")
        if self.max_shapes > self.num_classes:
            raise DatasetError("max_shapes cannot exceed num_classes (classes are distinct)")
        if self.max_shape_size >= self.image_size:
            raise DatasetError("max_shape_size must be smaller than image_size")


# ---------------------------------------------------------------------------
# rasterizer


def rasterize(kind: str, size: int, top: int, left: int, shape: tuple[int, int]) -> np.ndarray:
    """Boolean mask of a shape inscribed in the ``size`` x ``size`` box at (top, left)."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    # pixel centers, relative to the box
    y = yy - top + 0.5
    x = xx - left + 0.5
    inside = (y > 0) & (y < size) & (x > 0) & (x < size)
    r = size / 2.0
    cy = y - r
    cx = x - r
    if kind == "square":
        m = inside
    elif kind == "circle":
        m = cx**2 + cy**2 <= r**2
    elif kind == "triangle":
        # apex at top center, base along the bottom edge
        m = inside & (np.abs(cx) <= y / 2.0)
    elif kind == "diamond":
        m = np.abs(cx) + np.abs(cy) <= r
    elif kind == "cross":
        arm = size / 6.0
        m = inside & ((np.abs(cx) <= arm) | (np.abs(cy) <= arm))
    elif kind == "ring":
        d2 = cx**2 + cy**2
        m = (d2 <= r**2) & (d2 >= (0.5 * r) ** 2)
    else:
        raise DatasetError(f"unknown shape kind {kind!r}")
    return m & inside


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    # dark backgrounds included: soft-masked probe images are mostly black
    base = rng.uniform(0.0, 0.6)
    angle = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:size, 0:size] / size - 0.5
    grad = rng.uniform(0.0, 0.4) * (np.cos(angle) * xx + np.sin(angle) * yy)
    gray = base + grad
    # faint, nearly gray color cast so the background is not pure gray
    tint = rng.uniform(-0.03, 0.03, size=3)
    img = gray[..., None] + tint[None, None, :]
    img = img + rng.normal(0.0, 0.03, size=(size, size, 3))
    return img


def _draw_one(spec: DatasetSpec, rng: np.random.Generator, index: int) -> LabeledImage:
    size = spec.image_size
    pixels = _background(rng, size)
    mask = np.zeros((size, size), dtype=np.uint8)
    n = int(rng.integers(spec.min_shapes, spec.max_shapes + 1))
    classes = rng.choice(spec.num_classes, size=n, replace=False)
    occupied = np.zeros((size, size), dtype=bool)
    label = np.zeros(spec.num_classes, dtype=np.float32)
    for c in classes:
        kind, color = spec.palette[int(c)]
        for _ in range(50):
            s = int(rng.integers(spec.min_shape_size, spec.max_shape_size + 1))
            top = int(rng.integers(0, size - s + 1))
            left = int(rng.integers(0, size - s + 1))
            m = rasterize(kind, s, top, left, (size, size))
            # keep a one-pixel gap between shapes
            grown = m.copy()
            grown[1:] |= m[:-1]
            grown[:-1] |= m[1:]
            grown[:, 1:] |= grown[:, :-1].copy()
            grown[:, :-1] |= grown[:, 1:].copy()
            if not (grown & occupied).any() and m.any():
                break
        else:
            continue
        jitter = rng.uniform(-0.05, 0.05, size=3)
        pixels[m] = np.asarray(color) + jitter + rng.normal(0.0, 0.03, size=(int(m.sum()), 3))
        mask[m] = int(c) + 1
        occupied |= m
        label[int(c)] = 1.0
    pixels = np.clip(pixels, 0.0, 1.0).astype(np.float32)
    return LabeledImage(pixels=pixels, label=label, gt_mask=mask, image_id=f"{index:06d}")


def generate_synthetic(spec: DatasetSpec) -> list[LabeledImage]:
    """Generate ``spec.num_images`` images; a pure function of ``spec``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    return [_draw_one(spec, rng, i) for i in range(spec.num_images)]


# ---------------------------------------------------------------------------
# VOC-style directories


def voc_colormap(n: int = 256) -> np.ndarray:
    def bit(v, i):
        return (v >> i) & 1

    cmap = np.zeros((n, 3), dtype=np.uint8)
    for i in range(n):
        r = g = b = 0
        c = i
        for j in range(8):
            r |= bit(c, 0) << (7 - j)
            g |= bit(c, 1) << (7 - j)
            b |= bit(c, 2) << (7 - j)
            c >>= 3
        cmap[i] = (r, g, b)
    return cmap


def save_mask_png(mask: np.ndarray, path: str | os.PathLike) -> None:
    img = Image.fromarray(mask.astype(np.uint8), mode="P")
    img.putpalette(voc_colormap().flatten().tolist())
    img.save(path)


def export_voc_style(dataset: list[LabeledImage], root: str | os.PathLike, split: str) -> None:
    """Write ``images/``, ``masks/``, ``labels.txt`` and ``<split>.txt`` under ``root``.

    Pixels are quantized to 8 bits on export.
    """
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    has_masks = any(item.gt_mask is not None for item in dataset)
    if has_masks:
        (root / "masks").mkdir(exist_ok=True)
    ids = []
    label_lines = []
    for i, item in enumerate(dataset):
        image_id = item.image_id or f"{i:06d}"
        ids.append(image_id)
        rgb = np.round(np.clip(item.pixels, 0, 1) * 255).astype(np.uint8)
        Image.fromarray(rgb, mode="RGB").save(root / "images" / f"{image_id}.png")
        if item.gt_mask is not None:
            save_mask_png(item.gt_mask, root / "masks" / f"{image_id}.png")
        flags = " ".join(str(int(v)) for v in item.label)
        label_lines.append(f"{image_id} {flags}")
    # merge with labels already present from other splits
    labels_path = root / "labels.txt"
    existing = _read_labels(labels_path) if labels_path.exists() else {}
    for line in label_lines:
        key, *_ = line.split()
        existing[key] = line
    labels_path.write_text("".join(v + "\n" for v in existing.values()))
    (root / f"{split}.txt").write_text("".join(i + "\n" for i in ids))


def _read_labels(path: Path) -> dict[str, str]:
    out = {}
    for raw in path.read_text().splitlines():
        line = raw.strip()
        if line:
            out[line.split()[0]] = line
    return out


def load_voc_style(
    root_dir: str | os.PathLike, split: str, num_classes: int | None = None
) -> list[LabeledImage]:
    root = Path(root_dir)
    list_path = root / f"{split}.txt"
    labels_path = root / "labels.txt"
    for p in (list_path, labels_path):
        if not p.exists():
            raise DatasetError(f"missing dataset file: {p}")
    ids = [ln.strip() for ln in list_path.read_text().splitlines() if ln.strip()]
    rows = _read_labels(labels_path)
    mask_dir = root / "masks"
    out = []
    for image_id in ids:
        if image_id not in rows:
            raise DatasetError(f"{labels_path}: no label row for image id {image_id!r}")
        flags = rows[image_id].split()[1:]
        k = num_classes if num_classes is not None else len(flags)
        if len(flags) != k:
            raise DatasetError(
                f"{labels_path}: label for {image_id!r} has {len(flags)} entries, expected {k}"
            )
        num_classes = k
        try:
            label = np.array([int(f) for f in flags], dtype=np.float32)
        except ValueError as err:
            raise DatasetError(f"{labels_path}: bad label row for {image_id!r}") from err
        if not set(np.unique(label)) <= {0.0, 1.0}:
            raise DatasetError(f"{labels_path}: label flags must be 0/1 for {image_id!r}")
        img_path = root / "images" / f"{image_id}.png"
        if not img_path.exists():
            raise DatasetError(f"missing image file: {img_path}")
        pixels = np.asarray(Image.open(img_path).convert("RGB"), dtype=np.float32) / 255.0
        gt = None
        mask_path = mask_dir / f"{image_id}.png"
        if mask_dir.is_dir():
            if not mask_path.exists():
                raise DatasetError(f"missing mask file: {mask_path}")
            gt = np.asarray(Image.open(mask_path), dtype=np.uint8)
            if gt.shape != pixels.shape[:2]:
                raise DatasetError(f"{mask_path}: mask shape {gt.shape} != image shape")
        out.append(LabeledImage(pixels=pixels, label=label, gt_mask=gt, image_id=image_id))
    return out


# ---------------------------------------------------------------------------
# augmentation


def _resize(arr: np.ndarray, size: tuple[int, int], nearest: bool) -> np.ndarray:
    h, w = size
    if nearest:
        return np.asarray(Image.fromarray(arr).resize((w, h), Image.NEAREST))
    chans = [
        np.asarray(Image.fromarray(arr[..., k], mode="F").resize((w, h), Image.BILINEAR))
        for k in range(arr.shape[-1])
    ]
    return np.stack(chans, axis=-1)


def augment(
    img: LabeledImage,
    scale_range: tuple[float, float],
    crop_size: int,
    flip_prob: float,
    rng: np.random.Generator,
    crop_origin: tuple[int, int] | None = None,
) -> LabeledImage:
    """Random rescale, random ``crop_size`` crop and horizontal flip.

    If the sampled scale makes the shorter side smaller than ``crop_size`` the
    image is rescaled up so that the shorter side equals ``crop_size``.
    Labels are never changed; a crop may cut a shape out entirely, in which
    case the label still lists it (the image-level label is a property of the
    source image).
    """
    h, w = img.pixels.shape[:2]
    s = float(rng.uniform(*scale_range))
    nh, nw = int(round(h * s)), int(round(w * s))
    if min(nh, nw) < crop_size:
        up = crop_size / min(nh, nw)
        nh, nw = max(crop_size, int(round(nh * up))), max(crop_size, int(round(nw * up)))
    pixels = img.pixels
    mask = img.gt_mask
    if (nh, nw) != (h, w):
        pixels = np.clip(_resize(pixels.astype(np.float32), (nh, nw), nearest=False), 0, 1)
        if mask is not None:
            mask = _resize(mask, (nh, nw), nearest=True)
    if crop_origin is None:
        top = int(rng.integers(0, nh - crop_size + 1))
        left = int(rng.integers(0, nw - crop_size + 1))
    else:
        top, left = crop_origin
    pixels = pixels[top : top + crop_size, left : left + crop_size]
    if mask is not None:
        mask = mask[top : top + crop_size, left : left + crop_size]
    if rng.random() < flip_prob:
        pixels = pixels[:, ::-1]
        if mask is not None:
            mask = mask[:, ::-1]
    return LabeledImage(
        pixels=np.ascontiguousarray(pixels, dtype=np.float32),
        label=img.label.copy(),
        gt_mask=None if mask is None else np.ascontiguousarray(mask),
        image_id=img.image_id,
    )


def stack_batch(items: list[LabeledImage]):
    """Stack into (pixels B x 3 x H x W, labels B x K) torch tensors."""
    import torch

    pix = np.stack([it.pixels for it in items]).transpose(0, 3, 1, 2)
    lab = np.stack([it.label for it in items])
    return torch.from_numpy(np.ascontiguousarray(pix)), torch.from_numpy(lab)
