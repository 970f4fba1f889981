"""Inference-time anomaly scoring.

Per scale, each branch's anomaly map is the per-pixel squared channel norm
of the difference between a network's features and their estimate. The two
branch maps are normalized with training-set statistics and combined with
branch weights, the three scales are interpolated to the input size and
combined with depth weights (divided by 3), and the result is smoothed with
a Gaussian before the image-level score is read off.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, ContractError, NumericFaultError

SIGMA_FLOOR = 1e-8


@dataclass
class FusionConfig:
    w_local: float = 5.0
    w_global: float = 1.0
    scale_weights: tuple[float, float, float] = (1.0, 3.0, 6.0)
    gaussian_sigma: float = 4.0
    image_score_mode: str = "std"  # or "max"
    local_only: bool = False

    def __post_init__(self):
        if self.w_local < 0 or self.w_global < 0:
            raise ConfigError("branch weights must be non-negative")
        if self.gaussian_sigma <= 0:
            raise ConfigError("gaussian_sigma must be positive")
        if self.image_score_mode not in ("std", "max"):
            raise ConfigError(f"unknown image_score_mode {self.image_score_mode!r}")


@dataclass
class CalibrationStats:
    """Per-branch, per-scale pooled (mean, std) of anomaly-free training maps."""

    mu: dict[str, list[float]] = field(default_factory=dict)     # "L"/"G" -> 3 floats
    sigma: dict[str, list[float]] = field(default_factory=dict)

    def get(self, branch: str, scale: int) -> tuple[float, float]:
        try:
            return self.mu[branch][scale - 1], self.sigma[branch][scale - 1]
        except (KeyError, IndexError):
            raise ContractError(f"no calibration stats for branch {branch!r} scale {scale}")

    def to_dict(self) -> dict:
        return {"mu": self.mu, "sigma": self.sigma}

    @classmethod
    def from_dict(cls, data: dict) -> "CalibrationStats":
        return cls(mu=data["mu"], sigma=data["sigma"])


@dataclass
class AnomalyResult:
    per_scale_local: list[np.ndarray]
    per_scale_global: list[np.ndarray]
    fused_map: np.ndarray
    smoothed_map: np.ndarray
    image_score: float


def squared_channel_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-pixel squared L2 norm over channels of (a - b); (B,C,H,W) -> (B,H,W)."""
    if a.shape != b.shape:
        raise ContractError(f"feature shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return ((a - b) ** 2).sum(dim=1)


def branch_maps_from_outputs(outputs) -> tuple[list[torch.Tensor], list[torch.Tensor]]:
    """Per-scale (local, global) anomaly maps from a model forward pass."""
    local = [
        squared_channel_distance(fl, pl)
        for fl, pl in zip(outputs.local_pyramid.levels, outputs.local_estimate.levels)
    ]
    global_ = [
        squared_channel_distance(fg, pg)
        for fg, pg in zip(outputs.global_pyramid.levels, outputs.global_estimate.levels)
    ]
    return local, global_


def correspondence_maps_from_outputs(outputs) -> list[torch.Tensor]:
    """Raw global-local correspondence error maps (the ablation baseline)."""
    return [
        squared_channel_distance(fl, fg)
        for fl, fg in zip(outputs.local_pyramid.levels, outputs.global_pyramid.levels)
    ]


def branch_anomaly_maps(model, images: torch.Tensor) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Evaluate the model and return per-scale branch maps as float64 arrays."""
    model.eval()
    with torch.no_grad():
        outputs = model(images)
    local, global_ = branch_maps_from_outputs(outputs)
    return (
        [m.double().cpu().numpy() for m in local],
        [m.double().cpu().numpy() for m in global_],
    )


def fuse_scale(al: np.ndarray, ag: np.ndarray, stats: CalibrationStats,
               cfg: FusionConfig, scale: int) -> np.ndarray:
    """Normalize the two branch maps with training stats and combine them."""
    if al.shape != ag.shape:
        raise ContractError(f"branch map shapes differ: {al.shape} vs {ag.shape}")
    mu_l, sigma_l = stats.get("L", scale)
    local_term = (al - mu_l) / sigma_l
    if cfg.local_only:
        return local_term
    mu_g, sigma_g = stats.get("G", scale)
    return cfg.w_local * local_term + cfg.w_global * (ag - mu_g) / sigma_g


def fuse_multiscale(maps: list[np.ndarray], cfg: FusionConfig,
                    out_size: tuple[int, int]) -> np.ndarray:
    """Interpolate each scale to ``out_size``, weight, sum, and divide by 3."""
    if len(maps) != 3:
        raise ContractError(f"expected 3 per-scale maps, got {len(maps)}")
    oh, ow = out_size
    total = np.zeros((oh, ow), dtype=np.float64)
    for weight, m in zip(cfg.scale_weights, maps):
        if m.shape[0] > oh or m.shape[1] > ow:
            raise ConfigError(f"out_size {out_size} smaller than map {m.shape}")
        t = torch.from_numpy(np.ascontiguousarray(m, dtype=np.float64))[None, None]
        up = F.interpolate(t, size=(oh, ow), mode="bilinear", align_corners=False)
        total += weight * up[0, 0].numpy()
    return total / 3.0


def smooth_and_image_score(score_map: np.ndarray, cfg: FusionConfig) -> tuple[np.ndarray, float]:
    """Gaussian-smooth the fused map and reduce it to the image-level score."""
    if not np.isfinite(score_map).all():
        raise NumericFaultError("fused map contains non-finite values")
    radius = math.ceil(3 * cfg.gaussian_sigma)
    smoothed = gaussian_filter(score_map.astype(np.float64), sigma=cfg.gaussian_sigma,
                               mode="reflect", radius=radius)
    if cfg.image_score_mode == "std":
        score = float(smoothed.std())
    else:
        score = float(smoothed.max())
    return smoothed, score


def score_images(model, images: torch.Tensor, stats: CalibrationStats,
                 cfg: FusionConfig) -> list[AnomalyResult]:
    """Full Eq-by-Eq scoring pipeline for a batch of preprocessed images."""
    locals_, globals_ = branch_anomaly_maps(model, images)
    out_size = (images.shape[2], images.shape[3])
    results = []
    for b in range(images.shape[0]):
        al = [m[b] for m in locals_]
        ag = [m[b] for m in globals_]
        fused_scales = [fuse_scale(al[i], ag[i], stats, cfg, i + 1) for i in range(3)]
        fused = fuse_multiscale(fused_scales, cfg, out_size)
        smoothed, score = smooth_and_image_score(fused, cfg)
        results.append(AnomalyResult(
            per_scale_local=al,
            per_scale_global=ag,
            fused_map=fused,
            smoothed_map=smoothed,
            image_score=score,
        ))
    return results


def pooled_map_stats(map_batches: list[list[np.ndarray]]) -> tuple[list[float], list[float]]:
    """Pooled mean and population std per scale over batches of map arrays."""
    n_scales = len(map_batches[0])
    mus, sigmas = [], []
    for i in range(n_scales):
        count = 0
        total = 0.0
        total_sq = 0.0
        for batch in map_batches:
            arr = batch[i].astype(np.float64)
            count += arr.size
            total += float(arr.sum())
            total_sq += float((arr * arr).sum())
        mean = total / count
        var = max(total_sq / count - mean * mean, 0.0)
        sigma = math.sqrt(var)
        if sigma < SIGMA_FLOOR:
            warnings.warn(f"scale {i + 1}: map std {sigma:.3e} below floor, clamping")
            sigma = SIGMA_FLOOR
        mus.append(mean)
        sigmas.append(sigma)
    return mus, sigmas


def write_score_csv(path: str | Path, rows: list[tuple[str, int, float]]) -> None:
    """Per-image scores as ``path,label,score``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "label", "score"])
        for img_path, label, score in rows:
            writer.writerow([img_path, label, f"{score:.10g}"])


def export_score_map(score_map: np.ndarray, out_stem: str | Path) -> None:
    """Write ``<stem>.tiff`` (float32 grayscale) and ``<stem>.png`` (colorized)."""
    from PIL import Image

    out_stem = Path(out_stem)
    out_stem.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(score_map.astype(np.float32), mode="F").save(
        out_stem.with_suffix(".tiff")
    )
    lo, hi = float(score_map.min()), float(score_map.max())
    unit = (score_map - lo) / (hi - lo) if hi > lo else np.zeros_like(score_map)
    import matplotlib

    matplotlib.use("Agg")
    from matplotlib import cm

    rgba = (cm.inferno(unit) * 255).astype(np.uint8)
    Image.fromarray(rgba[..., :3], mode="RGB").save(out_stem.with_suffix(".png"))
