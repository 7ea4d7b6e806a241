"""
Synthetic shapes with image-level labels
========================================

Each image holds one to three coloured shapes on a dark textured
background. Training only ever sees the multi-hot label; the pixel masks are
kept for scoring.

Run with ``python3 demos/plot_synthetic_shapes.py``; the figure is written
next to this file.
"""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from semguide.dataset import DatasetSpec, generate_synthetic, voc_colormap

data = generate_synthetic(DatasetSpec(num_images=8, seed=0))
item = data[0]
print(item.image_id, item.pixels.shape, "label", item.label, "mask values", np.unique(item.gt_mask))

# %%
# Class frequencies over a larger draw: every class appears in a healthy
# share of images, and most images carry more than one class.
labels = np.stack([d.label for d in generate_synthetic(DatasetSpec(num_images=200, seed=0))])
print("images per class:", labels.sum(0), " mean classes per image:", labels.sum(1).mean())

# %%
# Top row pixels, bottom row masks in the usual palette (0 = background).
cmap = voc_colormap()
fig, axes = plt.subplots(2, 8, figsize=(12, 3.4))
for ax_img, ax_mask, d in zip(axes[0], axes[1], data):
    ax_img.imshow(d.pixels)
    ax_img.set_title(" ".join(str(int(v)) for v in d.label), fontsize=8)
    ax_mask.imshow(cmap[d.gt_mask])
for ax in axes.ravel():
    ax.axis("off")
fig.tight_layout()
out = Path(__file__).with_suffix(".png")
fig.savefig(out, dpi=90)
print("wrote", out)
