"""Minimal ViT backbone that keeps the attention matrix of every block."""

from __future__ import annotations

import io
import json
import os
import zipfile
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

CHECKPOINT_VERSION = 1


@dataclass
class BackboneConfig:
    patch_size: int = 8
    dim: int = 96
    depth: int = 6
    heads: int = 3
    mlp_ratio: float = 4.0
    num_class_tokens: int = 0
    num_patches: int = 64

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.depth < 0:
            raise ValueError("depth must be >= 0")


@dataclass
class TokenSet:
    tokens: torch.Tensor  # B x N x dim
    attn_records: list  # per block, B x heads x N x N


def patchify(pixels: torch.Tensor, patch_size: int) -> torch.Tensor:
    """B x 3 x H x W -> B x (h*w) x (P*P*3), patches in row-major order."""
    _, _, H, W = pixels.shape
    if H % patch_size or W % patch_size:
        raise ValueError(f"image {H}x{W} not divisible by patch size {patch_size}")
    return rearrange(pixels, "b c (h p1) (w p2) -> b (h w) (p1 p2 c)", p1=patch_size, p2=patch_size)


def unpatchify(patches: torch.Tensor, patch_size: int, h: int, w: int) -> torch.Tensor:
    return rearrange(
        patches, "b (h w) (p1 p2 c) -> b c (h p1) (w p2)", h=h, w=w, p1=patch_size, p2=patch_size
    )


class PatchEmbed(nn.Module):
    def __init__(self, patch_size: int, dim: int):
        super().__init__()
        self.patch_size = patch_size
        self.proj = nn.Linear(patch_size * patch_size * 3, dim)

    def forward(self, pixels: torch.Tensor) -> torch.Tensor:
        return self.proj(patchify(pixels, self.patch_size))


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor):
        q, k, v = rearrange(self.qkv(x), "b n (three h d) -> three b h n d", three=3, h=self.heads)
        attn = torch.softmax((q @ k.transpose(-2, -1)) * self.scale, dim=-1)
        out = rearrange(attn @ v, "b h n d -> b n (h d)")
        return self.proj(out), attn


class Block(nn.Module):
    """Pre-norm transformer block: x + MHSA(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        y, attn = self.attn(self.norm1(x))
        x = x + y
        x = x + self.mlp(self.norm2(x))
        return x, attn


class Backbone(nn.Module):
    """Patch embedding, optional class tokens, position embeddings and blocks.

    Class tokens (if any) are prepended, so token layout is
    ``[cls_1 .. cls_K, patch_1 .. patch_hw]``.
    """

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        self.patch_embed = PatchEmbed(config.patch_size, config.dim)
        n_cls = config.num_class_tokens
        self.cls_tokens = nn.Parameter(torch.zeros(1, n_cls, config.dim)) if n_cls else None
        self.pos_embed = nn.Parameter(torch.zeros(1, n_cls + config.num_patches, config.dim))
        self.blocks = nn.ModuleList(
            Block(config.dim, config.heads, config.mlp_ratio) for _ in range(config.depth)
        )
        self.norm = nn.LayerNorm(config.dim)
        _init_weights(self)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        if self.cls_tokens is not None:
            nn.init.trunc_normal_(self.cls_tokens, std=0.02)

    def position_embedding(self, h: int, w: int) -> torch.Tensor:
        """Position embeddings for an h x w patch grid.

        The patch part is bicubically resized when the grid differs from the
        square grid the backbone was built for.
        """
        n_cls = self.config.num_class_tokens
        pos = self.pos_embed
        if h * w == self.config.num_patches:
            return pos
        g = int(round(self.config.num_patches**0.5))
        if g * g != self.config.num_patches:
            raise ValueError("position embeddings can only be resized for square grids")
        grid = pos[:, n_cls:].reshape(1, g, g, -1).permute(0, 3, 1, 2)
        grid = F.interpolate(grid, size=(h, w), mode="bicubic", align_corners=False)
        return torch.cat([pos[:, :n_cls], grid.permute(0, 2, 3, 1).reshape(1, h * w, -1)], dim=1)

    def embed(self, pixels: torch.Tensor) -> torch.Tensor:
        x = self.patch_embed(pixels)
        P = self.config.patch_size
        h, w = pixels.shape[-2] // P, pixels.shape[-1] // P
        if self.cls_tokens is not None:
            x = torch.cat([self.cls_tokens.expand(x.shape[0], -1, -1), x], dim=1)
        return x + self.position_embedding(h, w)

    def forward_tokens(self, x: torch.Tensor) -> TokenSet:
        records = []
        for blk in self.blocks:
            x, attn = blk(x)
            records.append(attn)
        return TokenSet(self.norm(x), records)

    def forward(self, pixels: torch.Tensor) -> TokenSet:
        return self.forward_tokens(self.embed(pixels))


def run_blocks(blocks, x: torch.Tensor) -> TokenSet:
    """Apply ``blocks`` in order without any final norm."""
    records = []
    for blk in blocks:
        x, attn = blk(x)
        records.append(attn)
    return TokenSet(x, records)


def mean_head_attention(attn_records: list, block: int) -> torch.Tensor:
    """Average one block's attention over heads: B x heads x N x N -> B x N x N."""
    if not -len(attn_records) <= block < len(attn_records):
        raise IndexError(f"block {block} out of range for {len(attn_records)} blocks")
    return attn_records[block].mean(dim=1)


def _init_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


# ---------------------------------------------------------------------------
# checkpoint archive: zip of .npy arrays plus a JSON metadata member


def save_archive(path: str | os.PathLike, arrays: dict, meta: dict) -> None:
    """Atomically write a zip with one ``.npy`` per array and ``meta.json``.

    Member timestamps are fixed so identical inputs give identical bytes.
    """
    meta = dict(meta)
    meta.setdefault("version", CHECKPOINT_VERSION)
    path = os.fspath(path)
    tmp = path + ".tmp"
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("meta.json", date_time=(1980, 1, 1, 0, 0, 0))
        zf.writestr(info, json.dumps(meta, sort_keys=True, indent=1))
        for name in sorted(arrays):
            buf = io.BytesIO()
            arr = arrays[name]
            if isinstance(arr, torch.Tensor):
                arr = arr.detach().cpu().numpy()
            np.save(buf, np.ascontiguousarray(arr), allow_pickle=False)
            info = zipfile.ZipInfo(f"arrays/{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())
    os.replace(tmp, path)


def load_archive(path: str | os.PathLike) -> tuple[dict, dict]:
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    arrays = {}
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if "version" not in meta:
            raise ValueError(f"{path}: checkpoint has no version field")
        for name in zf.namelist():
            if name.startswith("arrays/"):
                key = name[len("arrays/") : -len(".npy")]
                arrays[key] = np.load(io.BytesIO(zf.read(name)), allow_pickle=False)
    return arrays, meta


def save_backbone(path, model: Backbone) -> None:
    save_archive(path, model.state_dict(), {"backbone": asdict(model.config)})


def load_backbone(path) -> Backbone:
    arrays, meta = load_archive(path)
    model = Backbone(BackboneConfig(**meta["backbone"]))
    model.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
    return model
