"""Segmentation network, class-relative attention and the semantic guidance losses.

Activation maps ``M`` come from the patch tokens, class embeddings from the
class tokens. Training probes a frozen class-aware autoencoder with the
soft-masked foreground/background images of every present class.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .caae import EPS, bce_similarity, cosine_sim
from .transformer import Backbone, BackboneConfig, mean_head_attention

LOSS_TERMS = ("cf", "cb", "as", "ac", "ss")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, value: float):
        super().__init__(f"non-finite {term} loss: {value}")
        self.term = term


@dataclass
class SegNetConfig:
    image_size: int = 64
    patch_size: int = 8
    dim: int = 96
    depth: int = 6
    heads: int = 3
    mlp_ratio: float = 4.0
    num_classes: int = 3
    class_dim: int = 64

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(
            patch_size=self.patch_size,
            dim=self.dim,
            depth=self.depth,
            heads=self.heads,
            mlp_ratio=self.mlp_ratio,
            num_class_tokens=self.num_classes,
            num_patches=self.grid**2,
        )


@dataclass
class SegLossBundle:
    cf: torch.Tensor
    cb: torch.Tensor
    as_: torch.Tensor
    ac: torch.Tensor
    ss: torch.Tensor
    total: torch.Tensor
    sigma: float = 0.075
    num_present: float = 0.0  # mean available-class count over the batch

    def as_dict(self) -> dict[str, float]:
        return {
            "cf": float(self.cf.detach()),
            "cb": float(self.cb.detach()),
            "as": float(self.as_.detach()),
            "ac": float(self.ac.detach()),
            "ss": float(self.ss.detach()),
            "total": float(self.total.detach()),
        }


# ---------------------------------------------------------------------------
# maps


def activation_maps(
    patch_tokens: torch.Tensor, w_patch: torch.Tensor, bias: torch.Tensor | None, h: int, w: int
) -> torch.Tensor:
    """sigmoid(tokens @ w_patch + bias), transposed to B x K x h x w."""
    if patch_tokens.shape[-2] != h * w or patch_tokens.shape[-1] != w_patch.shape[0]:
        raise ValueError(
            f"shape mismatch: tokens {tuple(patch_tokens.shape)}, W {tuple(w_patch.shape)}, grid {h}x{w}"
        )
    logits = patch_tokens @ w_patch
    if bias is not None:
        logits = logits + bias
    M = torch.sigmoid(logits).transpose(-1, -2)
    return M.reshape(*M.shape[:-1], h, w)


def class_relative_attention(attn_records: list, U: int, K: int, h: int, w: int) -> torch.Tensor:
    """Class-to-patch attention of the last ``U`` blocks, averaged and min-max normalized.

    Normalization is per class over spatial positions. A class whose
    attention is constant over the image gets an all-zero map.
    """
    L = len(attn_records)
    if not 1 <= U <= L:
        raise ValueError(f"U={U} must be in [1, {L}]")
    slices = [mean_head_attention(attn_records, l)[:, :K, K : K + h * w] for l in range(L - U, L)]
    A = torch.stack(slices).mean(0)
    lo = A.amin(-1, keepdim=True)
    hi = A.amax(-1, keepdim=True)
    span = hi - lo
    A = torch.where(span > EPS, (A - lo) / span.clamp_min(EPS), torch.zeros_like(A))
    return A.reshape(A.shape[0], K, h, w)


def fuse(M: torch.Tensor, A: torch.Tensor) -> torch.Tensor:
    return M * A


def upsample(maps: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinear resize of ... x h x w maps to ``size``."""
    lead = maps.shape[:-2]
    x = maps.reshape(-1, 1, *maps.shape[-2:])
    x = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
    return x.reshape(*lead, *size)


def complementary_pair(image: torch.Tensor, M_c: torch.Tensor):
    """Soft class-foreground and class-background images.

    ``image`` is ... x 3 x H x W and ``M_c`` is ... x h x w. Returns
    ``(I_F, I_B, M_up)`` with ``I_F + I_B == image`` exactly in floating point:
    ``I_B = I - M_up*I`` and then ``I_F = I - I_B`` (both differences are
    exact by Sterbenz's lemma in the relevant range).
    """
    M_up = upsample(M_c, image.shape[-2:]).unsqueeze(-3)
    I_B = image - M_up * image
    I_F = image - I_B
    return I_F, I_B, M_up.squeeze(-3)


def background_map(M: torch.Tensor) -> torch.Tensor:
    """N_c = max over the other channels c' != c of M_{c'}; zeros when K == 1."""
    K = M.shape[-3]
    if K == 1:
        return torch.zeros_like(M)
    out = []
    for c in range(K):
        others = torch.cat([M[..., :c, :, :], M[..., c + 1 :, :, :]], dim=-3)
        out.append(others.amax(dim=-3))
    return torch.stack(out, dim=-3)


# ---------------------------------------------------------------------------
# losses; every function takes a batch and returns the batch mean


def _pair_mask(Y: torch.Tensor) -> torch.Tensor:
    K = Y.shape[-1]
    off = 1.0 - torch.eye(K, dtype=Y.dtype, device=Y.device)
    return Y[..., :, None] * Y[..., None, :] * off


def _cross_norm(C: torch.Tensor, pair_average: bool) -> torch.Tensor:
    norm = (C - 1).clamp_min(1)
    return norm * C if pair_average else norm


def probe_similarity(E_probe: torch.Tensor, S: torch.Tensor) -> torch.Tensor:
    """B x K(probe) x K x D embeddings -> B x K x K similarities to ``S``."""
    return cosine_sim(E_probe, S.expand_as(E_probe))


def cf_loss(E_fg: torch.Tensor, S: torch.Tensor, Y: torch.Tensor, pair_average: bool = False):
    """Class-foreground loss.

    ``E_fg[b, c]`` holds the K x D embeddings of the foreground image of
    class ``c``; rows for absent classes are ignored.
    """
    sim = probe_similarity(E_fg, S)
    C = Y.sum(-1)
    own = (Y * (1 - torch.diagonal(sim, dim1=-2, dim2=-1))).sum(-1) / C
    cross = (_pair_mask(Y) * sim).sum((-2, -1)) / _cross_norm(C, pair_average)
    return (own + cross).mean()


def cb_loss(E_bg: torch.Tensor, S: torch.Tensor, Y: torch.Tensor, pair_average: bool = False):
    """Class-background loss; same layout as :func:`cf_loss`."""
    sim = probe_similarity(E_bg, S)
    C = Y.sum(-1)
    own = (Y * torch.diagonal(sim, dim1=-2, dim2=-1)).sum(-1) / C
    cross = (_pair_mask(Y) * (1 - sim)).sum((-2, -1)) / _cross_norm(C, pair_average)
    return (own + cross).mean()


def as_loss(M: torch.Tensor, sigma: float = 0.075) -> torch.Tensor:
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    return sigma * M.mean()


def ac_loss(M: torch.Tensor, Y: torch.Tensor) -> torch.Tensor:
    N = background_map(M)
    err = ((M + N - 1) ** 2).mean((-2, -1))  # B x K
    return ((Y * err).sum(-1) / Y.sum(-1)).mean()


def seg_ss_loss(E_cls: torch.Tensor, S: torch.Tensor, Y: torch.Tensor) -> torch.Tensor:
    return bce_similarity(cosine_sim(E_cls, S.detach()), Y)


def seg_total_loss(cf, cb, as_, ac, ss, sigma: float = 0.075, num_present: float = 0.0) -> SegLossBundle:
    for name, v in zip(LOSS_TERMS, (cf, cb, as_, ac, ss)):
        val = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        if not math.isfinite(val):
            raise NonFiniteLossError(name, val)
    total = cf + cb + as_ + ac + ss
    return SegLossBundle(cf, cb, as_, ac, ss, total, sigma, num_present)


# ---------------------------------------------------------------------------
# network


class SegmentationNet(nn.Module):
    def __init__(self, config: SegNetConfig):
        super().__init__()
        self.config = config
        K, D, d = config.num_classes, config.class_dim, config.dim
        self.backbone = Backbone(config.backbone_config())
        self.head = nn.Linear(d, K)
        self.w_class = nn.Parameter(torch.empty(K, d, D))
        nn.init.trunc_normal_(self.head.weight, std=0.02)
        nn.init.zeros_(self.head.bias)
        nn.init.trunc_normal_(self.w_class, std=0.02)

    def forward(self, pixels: torch.Tensor) -> dict:
        K, P = self.config.num_classes, self.config.patch_size
        h, w = pixels.shape[-2] // P, pixels.shape[-1] // P
        out = self.backbone(pixels)
        cls_tok = out.tokens[:, :K]
        patch_tok = out.tokens[:, K:]
        M = activation_maps(patch_tok, self.head.weight.t(), self.head.bias, h, w)
        E_cls = F.relu(torch.einsum("bkd,kde->bke", cls_tok, self.w_class))
        return {"M": M, "E_cls": E_cls, "attn": out.attn_records}

    def maps(self, pixels: torch.Tensor, U: int) -> dict:
        """M, A' and the fused map for evaluation."""
        out = self(pixels)
        h, w = out["M"].shape[-2:]
        A = class_relative_attention(out["attn"], U, self.config.num_classes, h, w)
        return {"M": out["M"], "A": A, "fused": fuse(out["M"], A)}


def probe_embeddings(caae, pixels: torch.Tensor, M: torch.Tensor, Y: torch.Tensor, which=("fg", "bg")):
    """CAAE embeddings of the complementary images of every present class.

    Returns a dict with ``fg``/``bg`` tensors of shape B x K x K x D; entries
    for absent classes are zero. The CAAE runs once on all probes batched.
    """
    B, K = Y.shape
    b_idx, c_idx = torch.nonzero(Y > 0.5, as_tuple=True)
    I_F, I_B, _ = complementary_pair(pixels[b_idx], M[b_idx, c_idx])
    parts = [I_F if w == "fg" else I_B for w in which]
    E = caae.embed(torch.cat(parts, dim=0))
    D = E.shape[-1]
    out = {}
    n = len(b_idx)
    for i, w in enumerate(which):
        full = E.new_zeros(B, K, K, D)
        full = full.index_put((b_idx, c_idx), E[i * n : (i + 1) * n])
        out[w] = full
    return out


def compute_seg_losses(
    net: SegmentationNet,
    caae,
    pixels: torch.Tensor,
    Y: torch.Tensor,
    sigma: float = 0.075,
    flags: dict | None = None,
    pair_average: bool = False,
) -> SegLossBundle:
    flags = {t: True for t in LOSS_TERMS} | dict(flags or {})
    out = net(pixels)
    M = out["M"]
    S = caae.semantics.detach()
    zero = M.new_zeros(())
    which = tuple(w for w, t in (("fg", "cf"), ("bg", "cb")) if flags[t])
    probes = probe_embeddings(caae, pixels, M, Y, which) if which else {}
    cf = cf_loss(probes["fg"], S, Y, pair_average) if flags["cf"] else zero
    cb = cb_loss(probes["bg"], S, Y, pair_average) if flags["cb"] else zero
    a_s = as_loss(M, sigma) if flags["as"] else zero
    ac = ac_loss(M, Y) if flags["ac"] else zero
    ss = seg_ss_loss(out["E_cls"], S, Y) if flags["ss"] else zero
    return seg_total_loss(cf, cb, a_s, ac, ss, sigma, float(Y.sum(-1).mean()))
