"""Losses, the training loop over anomaly-free samples, and calibration.

The objective sums three terms of identical functional form: the global
correspondence error, the local-space estimation error, and the global-space
estimation error. Each is the squared channel norm summed over all pixels of
all three scales, reduced by batch mean so learning-rate semantics do not
depend on batch size. Only the bottleneck and the three decoders train; the
extractor stays frozen throughout.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import torch

from .errors import ConfigError, ContractError, MissingInputError, NumericFaultError
from .model import GLCF, save_checkpoint
from .scoring import (
    CalibrationStats,
    SIGMA_FLOOR,
    branch_maps_from_outputs,
    correspondence_maps_from_outputs,
    pooled_map_stats,
)


@dataclass
class TrainingConfig:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    learning_rate: float = 2e-3  # desk-scale default; 1e-4 suits paper-scale runs
    batch_size: int = 8
    epochs: int = 50
    weight_decay: float = 1e-2
    seed: int = 0
    optimizer: str = "adamw"
    checkpoint_every: int = 0          # additionally checkpoint every n epochs
    stop_gradient_global_target: bool = False  # ablation: detach the target in the global estimation term
    deterministic: bool = False

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.optimizer != "adamw":
            raise ConfigError(f"unsupported optimizer {self.optimizer!r}")


def _levels(pyramid) -> list[torch.Tensor]:
    return pyramid.levels if hasattr(pyramid, "levels") else list(pyramid)


def _pyramid_sq_error(target, output) -> torch.Tensor:
    tgt, out = _levels(target), _levels(output)
    if len(tgt) != len(out):
        raise ContractError(f"pyramids have {len(tgt)} vs {len(out)} levels")
    total = None
    for a, b in zip(tgt, out):
        if a.shape != b.shape:
            raise ContractError(f"level shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
        per_image = ((a - b) ** 2).sum(dim=(1, 2, 3))
        total = per_image if total is None else total + per_image
    return total.mean()


def loss_correspondence(local_pyramid, global_pyramid) -> torch.Tensor:
    """Squared-norm correspondence objective, summed over scales and pixels."""
    return _pyramid_sq_error(local_pyramid, global_pyramid)


def loss_estimation(target_pyramid, estimated_pyramid) -> torch.Tensor:
    """Estimation error; same functional form in both embedding spaces."""
    return _pyramid_sq_error(target_pyramid, estimated_pyramid)


def total_loss(l_corr: torch.Tensor, l_est_local: torch.Tensor,
               l_est_global: torch.Tensor, cfg: TrainingConfig) -> torch.Tensor:
    terms = (l_corr, l_est_local, l_est_global)
    for t in terms:
        if not torch.isfinite(torch.as_tensor(t)).all():
            raise NumericFaultError("loss term is not finite")
    return cfg.lambda1 * l_corr + cfg.lambda2 * l_est_local + cfg.lambda3 * l_est_global


def compute_losses(model: GLCF, batch: torch.Tensor, cfg: TrainingConfig):
    """One forward pass returning (l_corr, l_est_local, l_est_global, total)."""
    out = model(batch)
    l_corr = loss_correspondence(out.local_pyramid, out.global_pyramid)
    l_el = loss_estimation(out.local_pyramid, out.local_estimate)
    target_g = out.global_pyramid
    if cfg.stop_gradient_global_target:
        target_g = [lvl.detach() for lvl in target_g.levels]
    l_eg = loss_estimation(target_g, out.global_estimate)
    return l_corr, l_el, l_eg, total_loss(l_corr, l_el, l_eg, cfg)


def set_deterministic(seed: int) -> None:
    """Single-threaded, seeded numeric paths for reproducible runs."""
    torch.manual_seed(seed)
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


def train_glcf(model: GLCF, train_images: torch.Tensor, cfg: TrainingConfig,
               out_dir: str | Path | None = None,
               log_fn=None, preprocess_info: dict | None = None) -> list[dict]:
    """Optimize bottleneck + heads with AdamW; returns the per-epoch history.

    ``train_images`` is the preprocessed anomaly-free set, N x 3 x H x W.
    Writes ``checkpoint.tnsr`` and ``loss_history.csv`` into ``out_dir``.
    """
    if train_images.ndim != 4 or train_images.shape[0] == 0:
        raise MissingInputError("training set is empty or not N x 3 x H x W")
    if cfg.deterministic:
        set_deterministic(cfg.seed)
    else:
        torch.manual_seed(cfg.seed)

    params = model.trainable_parameters()
    optimizer = torch.optim.AdamW(params, lr=cfg.learning_rate,
                                  weight_decay=cfg.weight_decay)
    shuffler = torch.Generator().manual_seed(cfg.seed)
    n = train_images.shape[0]
    history: list[dict] = []

    def _checkpoint(name: str) -> None:
        if out_dir is not None:
            save_checkpoint(model, Path(out_dir) / name,
                            training=_training_snapshot(cfg), loss_history=history,
                            preprocess=preprocess_info)

    model.train()
    model.backbone.eval()
    for epoch in range(cfg.epochs):
        order = torch.randperm(n, generator=shuffler)
        sums = {"loss_c": 0.0, "loss_el": 0.0, "loss_eg": 0.0, "total": 0.0}
        batches = 0
        for start in range(0, n, cfg.batch_size):
            batch = train_images[order[start:start + cfg.batch_size]]
            l_corr, l_el, l_eg, total = compute_losses(model, batch, cfg)
            if not torch.isfinite(total):
                raise NumericFaultError(
                    f"loss diverged at epoch {epoch}: "
                    f"c={float(l_corr):.4g} el={float(l_el):.4g} eg={float(l_eg):.4g}"
                )
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            sums["loss_c"] += l_corr.item()
            sums["loss_el"] += l_el.item()
            sums["loss_eg"] += l_eg.item()
            sums["total"] += total.item()
            batches += 1
        row = {"epoch": epoch, **{k: v / batches for k, v in sums.items()}}
        history.append(row)
        if log_fn is not None:
            log_fn(f"epoch {epoch}: total={row['total']:.6g} c={row['loss_c']:.6g} "
                   f"el={row['loss_el']:.6g} eg={row['loss_eg']:.6g}")
        if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            _checkpoint(f"checkpoint_ep{epoch + 1:04d}.tnsr")
    model.eval()
    _checkpoint("checkpoint.tnsr")
    if out_dir is not None:
        write_loss_history(Path(out_dir) / "loss_history.csv", history)
    return history


def _training_snapshot(cfg: TrainingConfig) -> dict:
    from .config import dataclass_to_dict

    return dataclass_to_dict(cfg)


def write_loss_history(path: str | Path, history: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss_c", "loss_el", "loss_eg", "total"])
        for row in history:
            writer.writerow([row["epoch"], row["loss_c"], row["loss_el"],
                             row["loss_eg"], row["total"]])


def calibrate(model: GLCF, train_images: torch.Tensor, batch_size: int = 16,
              kind: str = "estimation") -> CalibrationStats:
    """Pooled per-branch, per-scale (mean, population std) of training maps.

    ``kind='correspondence'`` calibrates the raw global-local error maps
    instead (used by the correspondence-vs-estimation ablation); the result
    then carries identical stats under both branch keys.
    """
    if train_images.ndim != 4 or train_images.shape[0] == 0:
        raise MissingInputError("calibration set is empty")
    if kind not in ("estimation", "correspondence"):
        raise ConfigError(f"unknown calibration kind {kind!r}")
    model.eval()
    local_batches: list[list] = []
    global_batches: list[list] = []
    with torch.no_grad():
        for start in range(0, train_images.shape[0], batch_size):
            out = model(train_images[start:start + batch_size])
            if kind == "estimation":
                local, global_ = branch_maps_from_outputs(out)
            else:
                local = correspondence_maps_from_outputs(out)
                global_ = local
            local_batches.append([m.double().cpu().numpy() for m in local])
            global_batches.append([m.double().cpu().numpy() for m in global_])
    mu_l, sigma_l = pooled_map_stats(local_batches)
    mu_g, sigma_g = pooled_map_stats(global_batches)
    return CalibrationStats(mu={"L": mu_l, "G": mu_g},
                            sigma={"L": sigma_l, "G": sigma_g})


def sigma_floor() -> float:
    return SIGMA_FLOOR
