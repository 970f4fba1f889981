"""Pyramid decoder used by the global correspondence and estimation networks.

One architecture instantiated three times (never sharing parameters): tokens
are reshaped to the stage-3 grid, projected to C3, refined, and emitted;
two (upsample 2x, project channels, refine) rounds then emit the stage-2 and
stage-1 levels, so the output pyramid aligns exactly with the extractor's.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import FeaturePyramid
from .bottleneck import TokenGrid
from .errors import ConfigError
from .layers import WindowBlock, map_to_tokens, tokens_to_map


@dataclass
class DecoderConfig:
    stage_depths: tuple[int, int, int] = (1, 1, 1)  # deepest-to-shallowest
    mode: str = "attention"  # or "conv"
    attention_window: int = 4

    def __post_init__(self):
        if len(self.stage_depths) != 3 or any(d < 0 for d in self.stage_depths):
            raise ConfigError(f"stage_depths must be 3 non-negative ints, got {self.stage_depths}")
        if self.mode not in ("attention", "conv"):
            raise ConfigError(f"unknown decoder mode {self.mode!r}")


class ConvBlock(nn.Module):
    """Residual 3x3 conv block, the non-attention decoder stage option."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.GroupNorm(1, dim)
        self.conv1 = nn.Conv2d(dim, dim, 3, padding=1)
        self.act = nn.GELU()
        self.conv2 = nn.Conv2d(dim, dim, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(self.act(self.conv1(self.norm(x))))


class PyramidDecoder(nn.Module):
    """Decode a token grid into a 3-level pyramid matching the extractor."""

    def __init__(self, token_dim: int, stage_channels: tuple[int, int, int],
                 grid_shape: tuple[int, int], cfg: DecoderConfig | None = None):
        super().__init__()
        cfg = cfg or DecoderConfig()
        self.cfg = cfg
        self.grid_shape = grid_shape
        c1, c2, c3 = stage_channels
        self.proj_in = nn.Linear(token_dim, c3)
        # stages ordered deepest (stage 3) to shallowest (stage 1)
        dims = (c3, c2, c1)
        self.stages = nn.ModuleList(self._make_stage(dims[i], cfg.stage_depths[i]) for i in range(3))
        self.up_projs = nn.ModuleList([nn.Conv2d(c3, c2, 1), nn.Conv2d(c2, c1, 1)])

    def _make_stage(self, dim: int, depth: int) -> nn.ModuleList:
        if self.cfg.mode == "attention":
            heads = max(1, dim // 32)
            return nn.ModuleList(WindowBlock(dim, heads, self.cfg.attention_window)
                                 for _ in range(depth))
        return nn.ModuleList(ConvBlock(dim) for _ in range(depth))

    def _run_stage(self, idx: int, x: torch.Tensor, grid: tuple[int, int]) -> torch.Tensor:
        """x is a B x C x H x W map; returns the refined map."""
        if self.cfg.mode == "attention":
            tokens = map_to_tokens(x)
            for block in self.stages[idx]:
                tokens = block(tokens, grid)
            return tokens_to_map(tokens, grid)
        for block in self.stages[idx]:
            x = block(x)
        return x

    def forward(self, grid: TokenGrid) -> FeaturePyramid:
        if grid.grid_shape != self.grid_shape:
            raise ConfigError(
                f"token grid {grid.grid_shape} does not match decoder stage-3 "
                f"grid {self.grid_shape}"
            )
        h, w = self.grid_shape
        x = tokens_to_map(self.proj_in(grid.tokens), (h, w))
        x = self._run_stage(0, x, (h, w))
        level3 = x
        x = self.up_projs[0](F.interpolate(x, scale_factor=2, mode="nearest"))
        x = self._run_stage(1, x, (2 * h, 2 * w))
        level2 = x
        x = self.up_projs[1](F.interpolate(x, scale_factor=2, mode="nearest"))
        x = self._run_stage(2, x, (4 * h, 4 * w))
        level1 = x
        return FeaturePyramid(levels=[level1, level2, level3])
