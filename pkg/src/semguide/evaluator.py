"""Pseudo masks from activation maps and segmentation metrics (mIoU, FP, FN)."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .dataset import LabeledImage, save_mask_png, stack_batch
from .segnet import upsample


@dataclass
class SegMetrics:
    per_class_iou: np.ndarray  # K+1, NaN where the class never occurs in pred or gt
    miou: float
    fp_rate: float
    fn_rate: float

    def summary(self) -> str:
        return f"miou={self.miou:.3f} fp={self.fp_rate:.3f} fn={self.fn_rate:.3f}"


def pseudo_mask(maps: np.ndarray, label: np.ndarray, tau_bg: float = 0.25) -> np.ndarray:
    """Argmax over {background at ``tau_bg``} and the present classes.

    ``maps`` is K x H x W at image resolution; output uses 0 for background
    and ``c + 1`` for class ``c``.
    """
    if not 0.0 <= tau_bg <= 1.0:
        raise ValueError("tau_bg must be in [0, 1]")
    maps = np.asarray(maps, dtype=np.float64)
    present = np.asarray(label) > 0.5
    scores = np.where(present[:, None, None], maps, -np.inf)
    bg = np.full((1, *maps.shape[1:]), tau_bg)
    # ties go to background (first index)
    return np.argmax(np.concatenate([bg, scores]), axis=0).astype(np.uint8)


def confusion(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    """(K+1) x (K+1) counts; entry (g, p) counts pixels with truth g predicted p."""
    pred = np.asarray(pred).astype(np.int64)
    gt = np.asarray(gt).astype(np.int64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    n = num_classes + 1
    for name, arr in (("pred", pred), ("gt", gt)):
        bad = (arr < 0) | (arr >= n)
        if bad.any():
            pix = tuple(int(i) for i in np.argwhere(bad)[0])
            raise ValueError(f"{name} label {arr[pix]} out of range [0, {n}) at pixel {pix}")
    return np.bincount(gt.ravel() * n + pred.ravel(), minlength=n * n).reshape(n, n)


def metrics_from_confusion(conf: np.ndarray) -> SegMetrics:
    conf = np.asarray(conf, dtype=np.float64)
    total = conf.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    tp = np.diag(conf)
    fp = conf.sum(0) - tp
    fn = conf.sum(1) - tp
    den = tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(den > 0, tp / den, np.nan)
    return SegMetrics(
        per_class_iou=iou,
        miou=float(np.nanmean(iou)),
        fp_rate=float(fp[1:].sum() / total),
        fn_rate=float(fn[1:].sum() / total),
    )


# ---------------------------------------------------------------------------
# running a trained network


@torch.no_grad()
def infer_maps(net, dataset: list[LabeledImage], U: int, batch_size: int = 16) -> list[dict]:
    """Per image: raw maps ``M``, attention ``A`` and ``fused``, each K x H x W."""
    net.eval()
    dtype = next(net.parameters()).dtype
    out = []
    for i in range(0, len(dataset), batch_size):
        items = dataset[i : i + batch_size]
        pixels, _ = stack_batch(items)
        res = net.maps(pixels.to(dtype), U)
        size = tuple(pixels.shape[-2:])
        up = {k: upsample(v, size).numpy().astype(np.float64) for k, v in res.items()}
        for j in range(len(items)):
            out.append({k: v[j] for k, v in up.items()})
    return out


def evaluate_maps(
    maps: list[np.ndarray], dataset: list[LabeledImage], tau_bg: float = 0.25
) -> SegMetrics:
    K = dataset[0].num_classes
    conf = np.zeros((K + 1, K + 1), dtype=np.int64)
    for m, item in zip(maps, dataset):
        if item.gt_mask is None:
            raise ValueError(f"image {item.image_id!r} has no ground-truth mask")
        conf += confusion(pseudo_mask(m, item.label, tau_bg), item.gt_mask, K)
    return metrics_from_confusion(conf)


def select_threshold(
    maps: list[np.ndarray], dataset: list[LabeledImage], candidates=None
) -> tuple[float, SegMetrics]:
    """Background score with the best mIoU on ``dataset``; ties keep the smaller value."""
    if candidates is None:
        candidates = np.round(np.arange(0.025, 0.99, 0.025), 3)
    best = None
    for tau in candidates:
        m = evaluate_maps(maps, dataset, float(tau))
        if best is None or m.miou > best[1].miou:
            best = (float(tau), m)
    return best


def write_metrics_csv(metrics: SegMetrics, path: str | os.PathLike) -> None:
    lines = ["class,iou"]
    for c, v in enumerate(metrics.per_class_iou):
        lines.append(f"{c},{'' if np.isnan(v) else f'{v:.6f}'}")
    lines.append(f"# {metrics.summary()}")
    Path(path).write_text("\n".join(lines) + "\n")


def export_maps(maps: np.ndarray, label: np.ndarray, out_dir, image_id: str, tau_bg: float = 0.25):
    """Write one grayscale PNG per class plus a palette pseudo-mask PNG.

    Returns the written paths (K + 1 of them).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for c, m in enumerate(np.asarray(maps)):
        q = np.floor(255 * np.clip(m, 0, 1)).astype(np.uint8)
        p = out_dir / f"{image_id}_class{c}.png"
        Image.fromarray(q, mode="L").save(p)
        paths.append(p)
    p = out_dir / f"{image_id}_mask.png"
    save_mask_png(pseudo_mask(maps, label, tau_bg), p)
    paths.append(p)
    return paths


def load_map_png(path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.float64) / 255.0


def save_maps_npz(path, maps: dict[str, np.ndarray]) -> None:
    np.savez(path, **maps)
