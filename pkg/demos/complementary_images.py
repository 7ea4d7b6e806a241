"""
Complementary foreground and background images
==============================================

For a present class ``c`` the map ``M_c`` is upsampled to image size and
splits the image into two parts that add back to it exactly. A frozen
autoencoder then checks that the first part looks like class ``c`` and the
second does not.
"""

import numpy as np
import torch

from semguide.dataset import DatasetSpec, generate_synthetic
from semguide.segnet import complementary_pair

item = generate_synthetic(DatasetSpec(num_images=1, seed=3))[0]
image = torch.from_numpy(item.pixels).permute(2, 0, 1).float()
c = int(np.flatnonzero(item.label)[0])

# %%
# Use the true mask, downsampled to the 8 x 8 patch grid, as a stand-in for
# a perfect activation map.
truth = torch.from_numpy((item.gt_mask == c + 1).astype(np.float32))
M_c = truth.reshape(8, 8, 8, 8).mean((1, 3))
I_F, I_B, M_up = complementary_pair(image, M_c)

print("exact split:", torch.equal(I_F + I_B, image))
print("foreground keeps %.0f%% of the class pixels' intensity" % (
    100 * (I_F * truth).sum() / (image * truth).sum()))
print("background keeps %.0f%% of the rest" % (
    100 * (I_B * (1 - truth)).sum() / (image * (1 - truth)).sum()))
