"""Frozen local feature extraction network producing a 3-level feature pyramid.

The encoder is a 4-stage hierarchy (patch embed, windowed self-attention
blocks, patch merging between stages) whose stage strides mirror the usual
hierarchical-ViT layout: stage i has resolution H / (stem_patch * 2^(i-1)).
Stages 1-3 are tapped as the pyramid; stage 4 exists but is never evaluated.
Weights come either from a seeded random initialization or from a tensor
archive of externally pretrained weights, and are immutable either way.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .archive import load_tensor_archive
from .errors import ConfigError, MissingInputError, NumericFaultError
from .layers import PatchMerging, WindowBlock, map_to_tokens, tokens_to_map

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class BackboneConfig:
    stem_patch: int = 4
    stage_channels: tuple[int, int, int, int] = (32, 64, 128, 256)
    stage_depths: tuple[int, int, int, int] = (1, 1, 2, 1)
    attention_window: int = 4
    source: str = "random_frozen"  # or "archive"
    seed: int = 0
    archive_path: str | None = None
    # tap stage outputs post-normalization (parameter-free, part of the frozen net)
    norm_stage_outputs: bool = True

    def __post_init__(self):
        if self.stem_patch < 1:
            raise ConfigError(f"stem_patch must be positive, got {self.stem_patch}")
        if len(self.stage_channels) != 4 or any(c <= 0 for c in self.stage_channels):
            raise ConfigError(f"stage_channels must be 4 positive ints, got {self.stage_channels}")
        if len(self.stage_depths) != 4 or any(d < 0 for d in self.stage_depths):
            raise ConfigError(f"stage_depths must be 4 non-negative ints, got {self.stage_depths}")
        if self.source not in ("random_frozen", "archive"):
            raise ConfigError(f"unknown backbone source {self.source!r}")
        if self.source == "archive" and not self.archive_path:
            raise ConfigError("source 'archive' requires archive_path")

    @property
    def divisor(self) -> int:
        """Input H and W must be divisible by this (stages 1-3 integral)."""
        return self.stem_patch * 4


@dataclass
class FeaturePyramid:
    """Three same-batch feature tensors with strictly halving resolution."""

    levels: list[torch.Tensor] = field(default_factory=list)

    def __post_init__(self):
        if len(self.levels) != 3:
            raise ConfigError(f"pyramid needs exactly 3 levels, got {len(self.levels)}")
        for i in range(2):
            a, b = self.levels[i], self.levels[i + 1]
            if a.shape[2] != 2 * b.shape[2] or a.shape[3] != 2 * b.shape[3]:
                raise ConfigError(
                    f"level {i + 2} resolution {tuple(b.shape[2:])} does not halve "
                    f"level {i + 1} resolution {tuple(a.shape[2:])}"
                )

    def shapes(self) -> list[tuple[int, ...]]:
        return [tuple(t.shape) for t in self.levels]


def validate_image_batch(data: torch.Tensor, cfg: BackboneConfig) -> None:
    if data.ndim != 4 or data.shape[1] != 3:
        raise ConfigError(f"image batch must be Bx3xHxW, got {tuple(data.shape)}")
    H, W = data.shape[2], data.shape[3]
    if H % cfg.divisor or W % cfg.divisor:
        raise ConfigError(
            f"input {H}x{W} not divisible by {cfg.divisor} "
            f"(stem_patch {cfg.stem_patch} with 3 halvings)"
        )
    if not torch.isfinite(data).all():
        raise NumericFaultError("image batch contains non-finite values")


def _stage_heads(channels: int) -> int:
    return max(1, channels // 32)


class LocalFeatureEncoder(nn.Module):
    """The frozen multi-scale feature extractor."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        chans = cfg.stage_channels
        self.patch_embed = nn.Conv2d(3, chans[0], kernel_size=cfg.stem_patch, stride=cfg.stem_patch)
        self.embed_norm = nn.LayerNorm(chans[0])
        self.stages = nn.ModuleList(
            nn.ModuleList(
                WindowBlock(chans[i], _stage_heads(chans[i]), cfg.attention_window)
                for _ in range(cfg.stage_depths[i])
            )
            for i in range(4)
        )
        self.merges = nn.ModuleList(
            PatchMerging(chans[i], chans[i + 1]) for i in range(3)
        )

    def forward(self, images: torch.Tensor) -> list[torch.Tensor]:
        """Return stage 1-3 feature maps; stage 4 is never evaluated."""
        x = self.patch_embed(images)
        grid = (x.shape[2], x.shape[3])
        x = self.embed_norm(map_to_tokens(x))
        outs = []
        for i in range(3):
            for block in self.stages[i]:
                x = block(x, grid)
            tap = F.layer_norm(x, (x.shape[-1],)) if self.cfg.norm_stage_outputs else x
            outs.append(tokens_to_map(tap, grid))
            if i < 2:
                x = self.merges[i](x, grid)
                grid = (grid[0] // 2, grid[1] // 2)
        return outs


def seeded_init_(module: nn.Module, seed: int) -> None:
    """Deterministically re-initialize parameters from a dedicated generator.

    Matrix-shaped weights get N(0, 0.02); vectors get the LayerNorm-style
    (ones for *.weight, zeros otherwise). Iteration follows named_parameters
    order, so the result is a pure function of (architecture, seed).
    """
    gen = torch.Generator().manual_seed(seed)
    for name, p in sorted(module.named_parameters()):
        with torch.no_grad():
            if p.ndim >= 2:
                p.copy_(torch.randn(p.shape, generator=gen) * 0.02)
            elif name.endswith(".weight"):
                p.fill_(1.0)
            else:
                p.zero_()


def build_backbone(cfg: BackboneConfig) -> LocalFeatureEncoder:
    """Construct the encoder, load its weights, and freeze it."""
    net = LocalFeatureEncoder(cfg)
    if cfg.source == "random_frozen":
        seeded_init_(net, cfg.seed)
    else:
        tensors, _ = load_tensor_archive(cfg.archive_path)
        state = net.state_dict()
        missing = sorted(set(state) - set(tensors))
        if missing:
            raise MissingInputError(
                f"backbone archive {cfg.archive_path} lacks tensors: {missing[:5]}"
            )
        for key in state:
            arr = tensors[key]
            if tuple(arr.shape) != tuple(state[key].shape):
                raise ConfigError(
                    f"backbone tensor {key!r} has shape {arr.shape}, "
                    f"expected {tuple(state[key].shape)}"
                )
            state[key] = torch.from_numpy(arr)
        net.load_state_dict(state)
    for p in net.parameters():
        p.requires_grad_(False)
    net.eval()
    return net


def extract_features(batch: torch.Tensor, net: LocalFeatureEncoder) -> FeaturePyramid:
    """Run the frozen encoder; targets are detached constants for training."""
    validate_image_batch(batch, net.cfg)
    with torch.no_grad():
        levels = net(batch)
    for lvl in levels:
        if not torch.isfinite(lvl).all():
            raise NumericFaultError("backbone produced non-finite features")
    return FeaturePyramid(levels=[lvl.detach() for lvl in levels])


def parameter_digest(module: nn.Module) -> str:
    """SHA-256 over every parameter's bytes, in name order."""
    h = hashlib.sha256()
    for name, p in sorted(module.named_parameters()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.detach().cpu().numpy()).tobytes())
    return h.hexdigest()
