"""Evaluation and ablation harness.

All modes score a held-out MVTec-layout test split and report per-kind image
AUROC plus pixel-level metrics; the ablation grids mirror the comparisons
the architecture is built around: branch roles, estimation vs. raw
correspondence scoring, per-scale vs. fused maps, and bottleneck variants.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import FolderDataset, SampleRecord, load_image_stack, preprocess_mask
from .errors import ConfigError, ContractError, MissingInputError
from .metrics import auroc, pixel_auroc, spro
from .model import GLCF
from .scoring import (
    CalibrationStats,
    FusionConfig,
    branch_maps_from_outputs,
    correspondence_maps_from_outputs,
    fuse_multiscale,
    fuse_scale,
    smooth_and_image_score,
    write_score_csv,
)
from .training import TrainingConfig, calibrate, train_glcf

REPORT_VERSION = 1

ABLATION_MODES = ("branches", "correspondence-vs-estimation", "scales", "sam-variants")


@dataclass
class EvalConfig:
    saturation_fraction: float = 1.0
    fpr_limit: float = 0.05
    batch_size: int = 16

    def __post_init__(self):
        if not 0 < self.fpr_limit <= 1:
            raise ConfigError(f"fpr_limit must be in (0,1], got {self.fpr_limit}")
        if not 0 < self.saturation_fraction <= 1:
            raise ConfigError("saturation_fraction must be in (0,1]")


@dataclass
class ExperimentContext:
    dataset: FolderDataset
    out_dir: Path
    resolution: int
    mean: tuple
    std: tuple
    fusion: FusionConfig = field(default_factory=FusionConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    model: GLCF | None = None
    stats: CalibrationStats | None = None
    training: TrainingConfig | None = None
    # (**bottleneck overrides) -> fresh GLCF; used by the sam-variants grid
    model_factory: "object" = None
    deterministic: bool = False
    log_fn: "object" = None

    def log(self, msg: str) -> None:
        if self.log_fn is not None:
            self.log_fn(msg)


def compute_raw_maps(model: GLCF, records: list[SampleRecord], resolution: int,
                     mean, std, batch_size: int = 16, with_corr: bool = False):
    """Per-image per-scale branch maps (and optionally correspondence maps)."""
    model.eval()
    local_maps: list[list[np.ndarray]] = []
    global_maps: list[list[np.ndarray]] = []
    corr_maps: list[list[np.ndarray]] = []
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        batch = load_image_stack(chunk, resolution, mean, std)
        with torch.no_grad():
            out = model(batch)
        loc, glo = branch_maps_from_outputs(out)
        loc = [m.double().cpu().numpy() for m in loc]
        glo = [m.double().cpu().numpy() for m in glo]
        if with_corr:
            cor = [m.double().cpu().numpy()
                   for m in correspondence_maps_from_outputs(out)]
        for b in range(len(chunk)):
            local_maps.append([m[b] for m in loc])
            global_maps.append([m[b] for m in glo])
            if with_corr:
                corr_maps.append([m[b] for m in cor])
    return local_maps, global_maps, corr_maps


def variant_scores(local_maps, global_maps, stats: CalibrationStats,
                   fusion: FusionConfig, out_size: tuple[int, int],
                   scales: tuple[int, ...] = (1, 2, 3)):
    """Image scores and smoothed maps for one fusion variant.

    ``scales`` restricts the multi-scale combination (other terms dropped
    from the literal weighted sum, divisor 3 kept).
    """
    scores, smoothed_maps = [], []
    for al, ag in zip(local_maps, global_maps):
        per_scale = []
        for i in range(3):
            if (i + 1) in scales:
                per_scale.append(fuse_scale(al[i], ag[i], stats, fusion, i + 1))
            else:
                per_scale.append(np.zeros_like(al[i]))
        fused = fuse_multiscale(per_scale, fusion, out_size)
        sm, score = smooth_and_image_score(fused, fusion)
        scores.append(score)
        smoothed_maps.append(sm)
    return scores, smoothed_maps


def per_kind_auroc(records: list[SampleRecord], scores: list[float]) -> dict[str, float]:
    """Image AUROC of each anomaly kind against the normal test samples."""
    normal_scores = [s for r, s in zip(records, scores) if r.kind == "normal"]
    if not normal_scores:
        raise ContractError("test split has no normal samples")
    out = {}
    for kind in sorted({r.kind for r in records if r.kind != "normal"}):
        kind_scores = [s for r, s in zip(records, scores) if r.kind == kind]
        labels = [0] * len(normal_scores) + [1] * len(kind_scores)
        out[kind] = auroc(normal_scores + kind_scores, labels)
    if out:
        out["mean"] = float(np.mean([v for k, v in out.items() if k != "mean"]))
    return out


def _pixel_metrics(records, smoothed_maps, eval_cfg: EvalConfig,
                   resolution: int) -> dict[str, float]:
    masks = [preprocess_mask(r.mask_path, resolution).numpy() for r in records]
    has_regions = any(m.any() for m in masks)
    out = {}
    if has_regions:
        out["pixel_auroc"] = pixel_auroc(smoothed_maps, masks)
        out["spro"] = spro(smoothed_maps, masks,
                           saturation_fraction=eval_cfg.saturation_fraction,
                           fpr_limit=eval_cfg.fpr_limit)
    return out


def _require(ctx: ExperimentContext, *names: str) -> None:
    for name in names:
        if getattr(ctx, name) is None:
            raise MissingInputError(f"ablation mode needs {name!r}")


def _branch_rows(ctx: ExperimentContext, local_maps, global_maps):
    fusion = ctx.fusion
    variants = {
        "local": dataclasses.replace(fusion, local_only=True),
        "global": dataclasses.replace(fusion, w_local=0.0, w_global=1.0, local_only=False),
        "fused": dataclasses.replace(fusion, local_only=False),
    }
    out_size = (ctx.resolution, ctx.resolution)
    rows, fused_smoothed = {}, None
    for name, fcfg in variants.items():
        scores, smoothed = variant_scores(local_maps, global_maps, ctx.stats, fcfg, out_size)
        rows[name] = per_kind_auroc(ctx.dataset.test, scores)
        if name == "fused":
            fused_smoothed = smoothed
    return rows, fused_smoothed


def run_experiment(mode: str, ctx: ExperimentContext) -> dict:
    """Run one ablation grid; writes report.json/report.csv/chart.png."""
    if mode not in ABLATION_MODES:
        raise ConfigError(f"unknown ablation mode {mode!r}, expected one of {ABLATION_MODES}")
    if not ctx.dataset.test:
        raise MissingInputError("dataset has no test split")
    t0 = time.perf_counter()
    out_size = (ctx.resolution, ctx.resolution)
    results: dict = {}

    if mode == "branches":
        _require(ctx, "model", "stats")
        ctx.log("scoring test split for branch ablation")
        local_maps, global_maps, _ = compute_raw_maps(
            ctx.model, ctx.dataset.test, ctx.resolution, ctx.mean, ctx.std,
            ctx.eval.batch_size)
        rows, fused_smoothed = _branch_rows(ctx, local_maps, global_maps)
        results["image_auroc"] = rows
        results.update(_pixel_metrics(ctx.dataset.test, fused_smoothed,
                                      ctx.eval, ctx.resolution))
        fused_scores, _ = variant_scores(local_maps, global_maps, ctx.stats,
                                         ctx.fusion, out_size)
        write_score_csv(Path(ctx.out_dir) / "scores.csv",
                        [(str(r.image_path), r.label, s)
                         for r, s in zip(ctx.dataset.test, fused_scores)])

    elif mode == "correspondence-vs-estimation":
        _require(ctx, "model", "stats")
        if not ctx.dataset.train:
            raise MissingInputError("correspondence calibration needs the train split")
        local_maps, global_maps, corr_maps = compute_raw_maps(
            ctx.model, ctx.dataset.test, ctx.resolution, ctx.mean, ctx.std,
            ctx.eval.batch_size, with_corr=True)
        ctx.log("calibrating raw correspondence maps on the train split")
        train_images = load_image_stack(ctx.dataset.train, ctx.resolution,
                                        ctx.mean, ctx.std)
        corr_stats = calibrate(ctx.model, train_images,
                               batch_size=ctx.eval.batch_size, kind="correspondence")
        est_scores, _ = variant_scores(local_maps, global_maps, ctx.stats,
                                       ctx.fusion, out_size)
        corr_fusion = dataclasses.replace(ctx.fusion, local_only=True)
        corr_scores, _ = variant_scores(corr_maps, corr_maps, corr_stats,
                                        corr_fusion, out_size)
        results["image_auroc"] = {
            "estimation": per_kind_auroc(ctx.dataset.test, est_scores),
            "correspondence": per_kind_auroc(ctx.dataset.test, corr_scores),
        }

    elif mode == "scales":
        _require(ctx, "model", "stats")
        local_maps, global_maps, _ = compute_raw_maps(
            ctx.model, ctx.dataset.test, ctx.resolution, ctx.mean, ctx.std,
            ctx.eval.batch_size)
        rows = {}
        for i in (1, 2, 3):
            scores, _ = variant_scores(local_maps, global_maps, ctx.stats,
                                       ctx.fusion, out_size, scales=(i,))
            rows[f"scale_{i}"] = per_kind_auroc(ctx.dataset.test, scores)
        scores, _ = variant_scores(local_maps, global_maps, ctx.stats,
                                   ctx.fusion, out_size)
        rows["fused"] = per_kind_auroc(ctx.dataset.test, scores)
        results["image_auroc"] = rows

    else:  # sam-variants
        _require(ctx, "model_factory", "training")
        if not ctx.dataset.train:
            raise MissingInputError("sam-variants ablation needs the train split")
        train_images = load_image_stack(ctx.dataset.train, ctx.resolution,
                                        ctx.mean, ctx.std)
        grid = {
            "PS": {"variant": "PS"},
            "PGS": {"variant": "PGS"},
            "PSS": {"variant": "PSS"},
            "no_sam": {"variant": "NOSAM"},
            "no_ms_pem": {"variant": "PSS", "use_levels": (3,)},
            "no_sb": {"variant": "NOSAM", "use_levels": (3,)},
        }
        rows = {}
        for name, overrides in grid.items():
            ctx.log(f"sam-variants: training row {name}")
            model = ctx.model_factory(**overrides)
            train_glcf(model, train_images, ctx.training)
            stats = calibrate(model, train_images, batch_size=ctx.eval.batch_size)
            local_maps, global_maps, _ = compute_raw_maps(
                model, ctx.dataset.test, ctx.resolution, ctx.mean, ctx.std,
                ctx.eval.batch_size)
            scores, _ = variant_scores(local_maps, global_maps, stats,
                                       ctx.fusion, out_size)
            rows[name] = per_kind_auroc(ctx.dataset.test, scores)
        results["image_auroc"] = rows

    runtime = 0.0 if ctx.deterministic else time.perf_counter() - t0
    report = {
        "report_version": REPORT_VERSION,
        "mode": mode,
        "config": {
            "fusion": dataclasses.asdict(ctx.fusion),
            "eval": dataclasses.asdict(ctx.eval),
            "resolution": ctx.resolution,
        },
        "results": results,
        "runtime": runtime,
    }
    write_report(report, ctx.out_dir)
    return report


def write_report(report: dict, out_dir: str | Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "report.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    rows = report["results"].get("image_auroc", {})
    with open(out_dir / "report.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        kinds = sorted({k for row in rows.values() for k in row})
        writer.writerow(["row"] + kinds)
        for name, row in rows.items():
            writer.writerow([name] + [f"{row.get(k, float('nan')):.6f}" for k in kinds])
    _write_chart(rows, out_dir / "chart.png", title=report["mode"])


def _write_chart(rows: dict, path: Path, title: str) -> None:
    if not rows:
        return
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    kinds = sorted({k for row in rows.values() for k in row if k != "mean"})
    names = list(rows)
    x = np.arange(len(names), dtype=float)
    width = 0.8 / max(len(kinds), 1)
    fig, ax = plt.subplots(figsize=(1.8 * len(names) + 2, 4))
    for j, kind in enumerate(kinds):
        vals = [rows[n].get(kind, np.nan) for n in names]
        ax.bar(x + (j - (len(kinds) - 1) / 2) * width, vals, width, label=kind)
    means = [rows[n].get("mean", np.nan) for n in names]
    ax.scatter(x, means, color="black", zorder=3, label="mean")
    ax.set_xticks(x, names)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("image AUROC")
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, metadata={})
    plt.close(fig)
