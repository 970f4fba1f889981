"""Semantic bottleneck: multi-scale patch embedding plus semantic aggregation.

MS-PEM partitions each pyramid level into patches (sizes 4/2/1) so all three
levels yield token sequences of the stage-3 length N, sums the projections,
and adds a learnable position encoding. SAM is a transformer encoder-decoder
over that grid plus learnable semantic token sets; its output is the pair
(global semantic representation, original patch representation).

Variants
--------
PS    one spatial semantic token set before the encoder
PGS   one global token before the encoder, a spatial set before the decoder
PSS   spatial semantic token sets before both encoder and decoder (default)
NOSAM plain encoder-decoder over patch tokens only; both outputs are the
      decoded patch tokens (the ablation baseline without semantic tokens)
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .backbone import FeaturePyramid
from .errors import ConfigError, NumericFaultError
from .layers import TransformerBlock

VARIANTS = ("PS", "PGS", "PSS", "NOSAM")


@dataclass
class BottleneckConfig:
    dim: int = 64
    depth: int = 6
    heads: int = 4
    variant: str = "PSS"
    patch_sizes: tuple[int, int, int] = (4, 2, 1)
    use_levels: tuple[int, ...] = (1, 2, 3)  # (3,) ablates MS-PEM
    # semantic-token queries may not attend patch latents directly, so the
    # semantic route stays a pure two-hop aggregation; False restores full
    # decoder attention
    mask_patch_latents: bool = True

    def __post_init__(self):
        if self.depth % 2 != 0:
            raise ConfigError(f"depth must be even for a balanced split, got {self.depth}")
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown SAM variant {self.variant!r}, expected one of {VARIANTS}")
        if not self.use_levels or any(l not in (1, 2, 3) for l in self.use_levels):
            raise ConfigError(f"use_levels must be a non-empty subset of (1,2,3), got {self.use_levels}")


@dataclass
class TokenGrid:
    tokens: torch.Tensor  # B x N x D
    grid_shape: tuple[int, int]

    def __post_init__(self):
        H, W = self.grid_shape
        if self.tokens.shape[1] != H * W:
            raise ConfigError(
                f"token count {self.tokens.shape[1]} != grid {H}x{W}"
            )


@dataclass
class BottleneckOutput:
    theta: torch.Tensor  # global semantic representation, B x N x D
    omega: torch.Tensor  # original patch representation, B x N x D


class MultiScalePatchEmbed(nn.Module):
    """Fuse the three pyramid levels into one token grid of length N."""

    def __init__(self, cfg: BottleneckConfig, stage_channels: tuple[int, int, int],
                 grid_shape: tuple[int, int]):
        super().__init__()
        self.cfg = cfg
        self.grid_shape = grid_shape
        n = grid_shape[0] * grid_shape[1]
        self.projections = nn.ModuleDict()
        for lvl in cfg.use_levels:
            p = cfg.patch_sizes[lvl - 1]
            proj = nn.Conv2d(stage_channels[lvl - 1], cfg.dim, kernel_size=p, stride=p)
            nn.init.zeros_(proj.bias)
            self.projections[str(lvl)] = proj
        self.pos_embed = nn.Parameter(torch.zeros(1, n, cfg.dim))
        nn.init.normal_(self.pos_embed, std=0.02)

    def forward(self, pyramid: FeaturePyramid) -> TokenGrid:
        H3, W3 = self.grid_shape
        total = None
        for lvl in self.cfg.use_levels:
            feat = pyramid.levels[lvl - 1]
            p = self.cfg.patch_sizes[lvl - 1]
            if feat.shape[2] % p or feat.shape[3] % p:
                raise ConfigError(
                    f"level {lvl} resolution {tuple(feat.shape[2:])} not divisible "
                    f"by patch size {p}"
                )
            if (feat.shape[2] // p, feat.shape[3] // p) != (H3, W3):
                raise ConfigError(
                    f"level {lvl} embeds to grid {(feat.shape[2] // p, feat.shape[3] // p)}, "
                    f"expected {(H3, W3)}"
                )
            tok = self.projections[str(lvl)](feat)  # B x D x H3 x W3
            tok = tok.flatten(2).transpose(1, 2)
            total = tok if total is None else total + tok
        return TokenGrid(tokens=total + self.pos_embed, grid_shape=(H3, W3))


def _block_stack(cfg: BottleneckConfig, count: int) -> nn.ModuleList:
    return nn.ModuleList(TransformerBlock(cfg.dim, cfg.heads) for _ in range(count))


class SemanticAggregation(nn.Module):
    """Encoder-decoder producing (theta, omega) from the patch token grid."""

    def __init__(self, cfg: BottleneckConfig, n_tokens: int):
        super().__init__()
        self.cfg = cfg
        self.n_tokens = n_tokens
        half = cfg.depth // 2
        self.encoder = _block_stack(cfg, half)
        self.decoder = _block_stack(cfg, half)
        d = cfg.dim
        if cfg.variant == "PS":
            self.s_tokens = nn.Parameter(torch.zeros(1, n_tokens, d))
        elif cfg.variant == "PGS":
            self.g_token = nn.Parameter(torch.zeros(1, 1, d))
            self.s_tokens = nn.Parameter(torch.zeros(1, n_tokens, d))
        elif cfg.variant == "PSS":
            self.s1_tokens = nn.Parameter(torch.zeros(1, n_tokens, d))
            self.s2_tokens = nn.Parameter(torch.zeros(1, n_tokens, d))
        for name in ("s_tokens", "g_token", "s1_tokens", "s2_tokens"):
            if hasattr(self, name):
                nn.init.normal_(getattr(self, name), std=0.02)

    def _decoder_mask(self, seq_len: int, sem_len: int, patch_start: int,
                      device, dtype) -> torch.Tensor | None:
        """Forbid semantic-token queries from attending patch latents directly."""
        if not self.cfg.mask_patch_latents:
            return None
        mask = torch.zeros(seq_len, seq_len, device=device, dtype=dtype)
        mask[:sem_len, patch_start:] = float("-inf")
        return mask

    def forward(self, grid: TokenGrid, pos_embed: torch.Tensor) -> BottleneckOutput:
        x = grid.tokens
        B, N, D = x.shape
        if N != self.n_tokens:
            raise ConfigError(f"grid has {N} tokens, module built for {self.n_tokens}")
        v = self.cfg.variant

        if v == "PS":
            seq = torch.cat([(self.s_tokens + pos_embed).expand(B, -1, -1), x], dim=1)
            for blk in self.encoder:
                seq = blk(seq)
            mask = self._decoder_mask(2 * N, N, N, x.device, x.dtype)
            for blk in self.decoder:
                seq = blk(seq, mask)
            theta, omega = seq[:, :N], seq[:, N:]
        elif v == "PGS":
            seq = torch.cat([self.g_token.expand(B, -1, -1), x], dim=1)
            for blk in self.encoder:
                seq = blk(seq)
            seq = torch.cat([(self.s_tokens + pos_embed).expand(B, -1, -1), seq], dim=1)
            mask = self._decoder_mask(2 * N + 1, N, N + 1, x.device, x.dtype)
            for blk in self.decoder:
                seq = blk(seq, mask)
            theta, omega = seq[:, :N], seq[:, N + 1:]
        elif v == "PSS":
            seq = torch.cat([(self.s1_tokens + pos_embed).expand(B, -1, -1), x], dim=1)
            for blk in self.encoder:
                seq = blk(seq)
            seq = torch.cat([(self.s2_tokens + pos_embed).expand(B, -1, -1), seq], dim=1)
            mask = self._decoder_mask(3 * N, N, 2 * N, x.device, x.dtype)
            for blk in self.decoder:
                seq = blk(seq, mask)
            theta, omega = seq[:, :N], seq[:, 2 * N:]
        else:  # NOSAM: plain ViT encode-decode, no semantic tokens
            seq = x
            for blk in self.encoder:
                seq = blk(seq)
            for blk in self.decoder:
                seq = blk(seq)
            theta = omega = seq

        if not torch.isfinite(theta).all() or not torch.isfinite(omega).all():
            raise NumericFaultError("semantic aggregation produced non-finite values")
        return BottleneckOutput(theta=theta, omega=omega)


class SemanticBottleneck(nn.Module):
    """MS-PEM followed by SAM; the only path from local features onward."""

    def __init__(self, cfg: BottleneckConfig, stage_channels: tuple[int, int, int],
                 grid_shape: tuple[int, int]):
        super().__init__()
        self.cfg = cfg
        self.ms_pem = MultiScalePatchEmbed(cfg, stage_channels, grid_shape)
        self.sam = SemanticAggregation(cfg, grid_shape[0] * grid_shape[1])

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.ms_pem.grid_shape

    def forward(self, pyramid: FeaturePyramid) -> tuple[TokenGrid, BottleneckOutput]:
        grid = self.ms_pem(pyramid)
        out = self.sam(grid, self.ms_pem.pos_embed)
        return grid, out


def sam_parameter_count(dim: int, depth: int, variant: str, n_tokens: int) -> int:
    """Closed-form parameter count of :class:`SemanticAggregation`."""
    block = 12 * dim * dim + 13 * dim
    tokens = {"PS": n_tokens, "PGS": n_tokens + 1, "PSS": 2 * n_tokens, "NOSAM": 0}[variant]
    return depth * block + tokens * dim
