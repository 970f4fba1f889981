"""Assembly of the four sub-networks and checkpoint (de)serialization.

A checkpoint archive stores only the trainable parameters (prefixes
``bottleneck.``, ``phi_g.``, ``psi_l.``, ``psi_g.``); the frozen extractor is
reconstructed from its recorded seed or external archive, so loading a
checkpoint reproduces bit-identical inference.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import torch
from torch import nn

from .archive import load_tensor_archive, save_tensor_archive
from .backbone import (
    BackboneConfig,
    FeaturePyramid,
    LocalFeatureEncoder,
    build_backbone,
    extract_features,
)
from .bottleneck import BottleneckConfig, BottleneckOutput, SemanticBottleneck, TokenGrid
from .config import dataclass_from_dict, dataclass_to_dict
from .errors import ConfigError, CorruptArchiveError
from .heads import DecoderConfig, PyramidDecoder


@dataclass
class ModelOutputs:
    local_pyramid: FeaturePyramid      # frozen extractor targets
    token_grid: TokenGrid
    bottleneck: BottleneckOutput
    global_pyramid: FeaturePyramid     # correspondence network output
    local_estimate: FeaturePyramid     # estimation of the local pyramid
    global_estimate: FeaturePyramid    # estimation of the global pyramid


class GLCF(nn.Module):
    """Frozen extractor, semantic bottleneck, and the three decoders."""

    def __init__(self, backbone_cfg: BackboneConfig, bottleneck_cfg: BottleneckConfig,
                 decoder_cfg: DecoderConfig, input_size: int):
        super().__init__()
        if input_size % backbone_cfg.divisor:
            raise ConfigError(
                f"input_size {input_size} not divisible by {backbone_cfg.divisor}"
            )
        self.input_size = input_size
        self.backbone_cfg = backbone_cfg
        self.bottleneck_cfg = bottleneck_cfg
        self.decoder_cfg = decoder_cfg

        self.backbone = build_backbone(backbone_cfg)
        side = input_size // (backbone_cfg.stem_patch * 4)
        grid = (side, side)
        chans = backbone_cfg.stage_channels[:3]
        self.bottleneck = SemanticBottleneck(bottleneck_cfg, chans, grid)
        self.phi_g = PyramidDecoder(bottleneck_cfg.dim, chans, grid, decoder_cfg)
        self.psi_l = PyramidDecoder(bottleneck_cfg.dim, chans, grid, decoder_cfg)
        self.psi_g = PyramidDecoder(bottleneck_cfg.dim, chans, grid, decoder_cfg)

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.bottleneck.grid_shape

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def forward(self, images: torch.Tensor) -> ModelOutputs:
        local = extract_features(images, self.backbone)
        grid, out = self.bottleneck(local)
        theta_grid = TokenGrid(tokens=out.theta, grid_shape=grid.grid_shape)
        omega_grid = TokenGrid(tokens=out.omega, grid_shape=grid.grid_shape)
        global_pyr = self.phi_g(theta_grid)
        local_est = self.psi_l(omega_grid)
        global_est = self.psi_g(omega_grid)
        return ModelOutputs(
            local_pyramid=local,
            token_grid=grid,
            bottleneck=out,
            global_pyramid=global_pyr,
            local_estimate=local_est,
            global_estimate=global_est,
        )


@dataclass
class CheckpointMeta:
    backbone: dict
    bottleneck: dict
    decoder: dict
    input_size: int
    training: dict | None = None
    preprocess: dict | None = None  # resolution / mean / std used at train time
    loss_history: list = field(default_factory=list)


def build_model(backbone_cfg: BackboneConfig | None = None,
                bottleneck_cfg: BottleneckConfig | None = None,
                decoder_cfg: DecoderConfig | None = None,
                input_size: int = 64) -> GLCF:
    return GLCF(
        backbone_cfg or BackboneConfig(),
        bottleneck_cfg or BottleneckConfig(),
        decoder_cfg or DecoderConfig(),
        input_size,
    )


def save_checkpoint(model: GLCF, path: str | Path,
                    training: dict | None = None,
                    loss_history: list | None = None,
                    preprocess: dict | None = None) -> None:
    tensors = {
        name: p.detach().cpu().numpy()
        for name, p in model.state_dict().items()
        if not name.startswith("backbone.")
    }
    meta = CheckpointMeta(
        backbone=dataclass_to_dict(model.backbone_cfg),
        bottleneck=dataclass_to_dict(model.bottleneck_cfg),
        decoder=dataclass_to_dict(model.decoder_cfg),
        input_size=model.input_size,
        training=training,
        preprocess=preprocess,
        loss_history=loss_history or [],
    )
    save_tensor_archive(path, tensors, meta={"__config__": dataclass_to_dict(meta)})


def load_checkpoint(path: str | Path) -> tuple[GLCF, CheckpointMeta]:
    tensors, meta = load_tensor_archive(path)
    if "__config__" not in meta:
        raise CorruptArchiveError(f"checkpoint lacks a __config__ snapshot: {path}")
    snapshot = dataclass_from_dict(CheckpointMeta, meta["__config__"], context="__config__")
    model = GLCF(
        dataclass_from_dict(BackboneConfig, snapshot.backbone, context="backbone"),
        dataclass_from_dict(BottleneckConfig, snapshot.bottleneck, context="bottleneck"),
        dataclass_from_dict(DecoderConfig, snapshot.decoder, context="decoder"),
        snapshot.input_size,
    )
    state = model.state_dict()
    expected = {k for k in state if not k.startswith("backbone.")}
    if expected - set(tensors):
        raise CorruptArchiveError(
            f"checkpoint missing tensors: {sorted(expected - set(tensors))[:5]}"
        )
    for key in expected:
        state[key] = torch.from_numpy(tensors[key]).to(state[key].dtype)
    model.load_state_dict(state)
    model.eval()
    return model, snapshot
