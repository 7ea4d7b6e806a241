"""Class-aware autoencoder: per-class embeddings, global class semantics, reconstruction."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .transformer import Backbone, BackboneConfig, Block, run_blocks, unpatchify

EPS = 1e-7
MERGE_MODES = ("sum", "mean", "max")


@dataclass
class CAAEConfig:
    image_size: int = 64
    patch_size: int = 8
    dim: int = 96
    depth: int = 6
    heads: int = 3
    mlp_ratio: float = 4.0
    decoder_depth: int = 4
    num_classes: int = 3
    class_dim: int = 64
    token_merge: str = "sum"

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    def encoder_config(self) -> BackboneConfig:
        return BackboneConfig(
            patch_size=self.patch_size,
            dim=self.dim,
            depth=self.depth,
            heads=self.heads,
            mlp_ratio=self.mlp_ratio,
            num_class_tokens=0,
            num_patches=self.grid**2,
        )


# ---------------------------------------------------------------------------
# functional pieces


def primary_tokens(t_last: torch.Tensor, w1: torch.Tensor, num_classes: int) -> torch.Tensor:
    """ReLU(t_last @ w1) reshaped to (..., hw, K, D)."""
    if t_last.shape[-1] != w1.shape[0] or w1.shape[1] % num_classes:
        raise ValueError(f"shape mismatch: tokens {tuple(t_last.shape)} vs W1 {tuple(w1.shape)}")
    out = F.relu(t_last @ w1)
    return out.reshape(*out.shape[:-1], num_classes, w1.shape[1] // num_classes)


def reduce_to_embeddings(T: torch.Tensor, mode: str = "sum") -> torch.Tensor:
    """Merge primary tokens over the token axis (-3): (..., hw, K, D) -> (..., K, D)."""
    if mode == "sum":
        return T.sum(dim=-3)
    if mode == "mean":
        return T.mean(dim=-3)
    if mode == "max":
        return T.amax(dim=-3)
    raise ValueError(f"unknown token merge mode {mode!r}; expected one of {MERGE_MODES}")


def cosine_sim(a: torch.Tensor, b: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Cosine similarity along the last axis.

    Inputs are expected nonnegative, so the result lies in [0, 1]. Two zero
    vectors give 0 because of the ``eps`` in the denominator.
    """
    num = (a * b).sum(-1)
    den = a.norm(dim=-1) * b.norm(dim=-1) + eps
    return num / den


def bce_similarity(sim: torch.Tensor, y: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Mean-over-classes BCE of similarities against multi-hot ``y``; batch-averaged."""
    s = sim.clamp(eps, 1 - eps)
    per = -(y * torch.log(s) + (1 - y) * torch.log(1 - s))
    return per.mean(-1).mean()


def ss_loss(E: torch.Tensor, S: torch.Tensor, Y: torch.Tensor) -> torch.Tensor:
    return bce_similarity(cosine_sim(E, S), Y)


def recover_tokens(T: torch.Tensor, w2: torch.Tensor) -> torch.Tensor:
    """(..., hw, K, D) -> (..., hw, d) through the bias-free ``w2``."""
    flat = T.reshape(*T.shape[:-2], T.shape[-2] * T.shape[-1])
    if flat.shape[-1] != w2.shape[0]:
        raise ValueError(f"shape mismatch: T gives {flat.shape[-1]} features, W2 expects {w2.shape[0]}")
    return flat @ w2


def recon_loss(image: torch.Tensor, recon: torch.Tensor) -> torch.Tensor:
    if image.shape != recon.shape:
        raise ValueError(f"shape mismatch {tuple(image.shape)} vs {tuple(recon.shape)}")
    return ((image - recon) ** 2).mean()


def caae_loss(ss: torch.Tensor, recon: torch.Tensor) -> torch.Tensor:
    return ss + recon


# ---------------------------------------------------------------------------
# module


class ClassAwareAutoEncoder(nn.Module):
    def __init__(self, config: CAAEConfig):
        super().__init__()
        if config.token_merge not in MERGE_MODES:
            raise ValueError(f"unknown token merge mode {config.token_merge!r}")
        self.config = config
        K, D, d = config.num_classes, config.class_dim, config.dim
        self.encoder = Backbone(config.encoder_config())
        self.w1 = nn.Parameter(torch.empty(d, K * D))
        self.w2 = nn.Parameter(torch.empty(K * D, d))
        self.w_s = nn.Parameter(torch.empty(K, D))
        self.dec_pos_embed = nn.Parameter(torch.zeros(1, config.grid**2, d))
        self.decoder = nn.ModuleList(
            Block(d, config.heads, config.mlp_ratio) for _ in range(config.decoder_depth)
        )
        self.dec_norm = nn.LayerNorm(d)
        self.dec_head = nn.Linear(d, config.patch_size**2 * 3)
        nn.init.trunc_normal_(self.w1, std=0.02)
        nn.init.trunc_normal_(self.w2, std=0.02)
        nn.init.normal_(self.w_s, std=0.02)
        nn.init.trunc_normal_(self.dec_pos_embed, std=0.02)
        nn.init.trunc_normal_(self.dec_head.weight, std=0.02)
        nn.init.zeros_(self.dec_head.bias)

    @property
    def semantics(self) -> torch.Tensor:
        return F.relu(self.w_s)

    def primary(self, pixels: torch.Tensor) -> torch.Tensor:
        tokens = self.encoder(pixels).tokens
        return primary_tokens(tokens, self.w1, self.config.num_classes)

    def embed(self, pixels: torch.Tensor) -> torch.Tensor:
        """Class embeddings E (B x K x D) of a batch of images."""
        return reduce_to_embeddings(self.primary(pixels), self.config.token_merge)

    def decode(self, T: torch.Tensor, h: int, w: int) -> torch.Tensor:
        """Reconstruct images from primary tokens laid out on an h x w grid."""
        g = self.config.grid
        x = recover_tokens(T, self.w2)
        pos = self.dec_pos_embed
        if (h, w) != (g, g):
            pos = F.interpolate(
                pos.reshape(1, g, g, -1).permute(0, 3, 1, 2), size=(h, w), mode="bicubic", align_corners=False
            ).permute(0, 2, 3, 1).reshape(1, h * w, -1)
        x = self.dec_norm(run_blocks(self.decoder, x + pos).tokens)
        return unpatchify(self.dec_head(x), self.config.patch_size, h, w)

    def forward(self, pixels: torch.Tensor):
        P = self.config.patch_size
        T = self.primary(pixels)
        E = reduce_to_embeddings(T, self.config.token_merge)
        return E, self.decode(T, pixels.shape[-2] // P, pixels.shape[-1] // P)

    def losses(self, pixels: torch.Tensor, labels: torch.Tensor, use_recon: bool = True) -> dict:
        E, recon = self(pixels)
        ss = ss_loss(E, self.semantics, labels)
        rl = recon_loss(pixels, recon)
        total = caae_loss(ss, rl) if use_recon else ss
        return {"ss": ss, "recon": rl, "total": total}

    def config_dict(self) -> dict:
        return asdict(self.config)
