"""Command-line entry point wiring all modules into reproducible runs.

Subcommands: generate-data, train, calibrate, score, eval, ablate. Every
command writes ``resolved_config.json`` and ``run.log`` into its output
directory and exits with a stable code on failure (2 bad config, 3 missing
input, 4 numeric fault, 5 contract violation), printing one machine-parsable
error line to stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .backbone import BackboneConfig
from .bottleneck import BottleneckConfig
from .config import dataclass_from_dict, dataclass_to_dict
from .data import (
    LogicShapesSpec,
    generate_logicshapes,
    load_folder_dataset,
    load_image_stack,
    preprocess,
    resolve_norm_constants,
    spec_from_dict,
)
from .errors import ConfigError, GlcfError, MissingInputError
from .experiments import ABLATION_MODES, EvalConfig, ExperimentContext, run_experiment
from .heads import DecoderConfig
from .model import GLCF, load_checkpoint
from .scoring import (
    CalibrationStats,
    FusionConfig,
    export_score_map,
    score_images,
    write_score_csv,
)
from .training import TrainingConfig, calibrate, set_deterministic, train_glcf

_ERROR_CATEGORY = {2: "config", 3: "missing-input", 4: "numeric-fault", 5: "contract"}


@dataclass
class DataConfig:
    resolution: int = 64
    normalization: str = "auto"  # auto | dataset | imagenet | none
    mean: tuple[float, float, float] | None = None
    std: tuple[float, float, float] | None = None

    def __post_init__(self):
        if self.resolution < 16:
            raise ConfigError(f"resolution must be >= 16, got {self.resolution}")
        if self.normalization not in ("auto", "dataset", "imagenet", "none"):
            raise ConfigError(f"unknown normalization {self.normalization!r}")


@dataclass
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    bottleneck: BottleneckConfig = field(default_factory=BottleneckConfig)
    heads: DecoderConfig = field(default_factory=DecoderConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


_SECTIONS = {
    "backbone": BackboneConfig,
    "bottleneck": BottleneckConfig,
    "heads": DecoderConfig,
    "training": TrainingConfig,
    "fusion": FusionConfig,
    "data": DataConfig,
    "eval": EvalConfig,
}


def load_run_config(path: str | None) -> RunConfig:
    """Strictly parse the sectioned JSON config; unknown keys are rejected."""
    if path is None:
        return RunConfig()
    cfg_path = Path(path)
    if not cfg_path.is_file():
        raise MissingInputError(f"config file not found: {cfg_path}")
    try:
        raw = json.loads(cfg_path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config does not parse as JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object of sections")
    unknown = sorted(set(raw) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config sections {unknown}")
    kwargs = {
        name: dataclass_from_dict(cls, raw.get(name, {}), context=name)
        for name, cls in _SECTIONS.items()
    }
    return RunConfig(**kwargs)


def run_config_to_dict(cfg: RunConfig) -> dict:
    return {name: dataclass_to_dict(getattr(cfg, name)) for name in _SECTIONS}


def _setup_out_dir(out: str, resolved: dict) -> logging.Logger:
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "resolved_config.json", "w") as fh:
        json.dump(resolved, fh, indent=2, sort_keys=True)
    logger = logging.getLogger(f"glcf.{out_dir.name}")
    logger.setLevel(logging.INFO)
    logger.handlers.clear()
    fh_handler = logging.FileHandler(out_dir / "run.log", mode="w")
    fh_handler.setFormatter(logging.Formatter("%(asctime)s %(message)s"))
    logger.addHandler(fh_handler)
    stream = logging.StreamHandler(sys.stderr)
    stream.setFormatter(logging.Formatter("%(message)s"))
    logger.addHandler(stream)
    logger.propagate = False
    return logger


def _cache_dir() -> Path:
    return Path(os.environ.get("GLCF_CACHE", Path.home() / ".cache" / "glcf"))


def _load_spec(path: str | None, seed: int | None) -> LogicShapesSpec:
    if path is None:
        spec = LogicShapesSpec()
    else:
        spec_path = Path(path)
        if not spec_path.is_file():
            raise MissingInputError(f"spec file not found: {spec_path}")
        spec = spec_from_dict(json.loads(spec_path.read_text()))
    if seed is not None:
        spec = dataclasses.replace(spec, seed=seed)
    return spec


def _resolve_preprocess(cfg: RunConfig, dataset) -> tuple[int, tuple, tuple]:
    mean, std = resolve_norm_constants(cfg.data.normalization, dataset,
                                       cfg.data.mean, cfg.data.std)
    return cfg.data.resolution, mean, std


def _preprocess_from_checkpoint(meta, dataset) -> tuple[int, tuple, tuple]:
    if meta.preprocess:
        return (meta.preprocess["resolution"], tuple(meta.preprocess["mean"]),
                tuple(meta.preprocess["std"]))
    mean, std = resolve_norm_constants("auto", dataset)
    return meta.input_size, mean, std


def _load_stats(path: str) -> CalibrationStats:
    stats_path = Path(path)
    if not stats_path.is_file():
        raise MissingInputError(f"stats file not found: {stats_path}")
    return CalibrationStats.from_dict(json.loads(stats_path.read_text()))


# --------------------------------------------------------------------------
# commands


def cmd_generate_data(args) -> int:
    spec = _load_spec(args.spec, args.seed)
    out = args.out or str(_cache_dir() / "datasets" / f"logicshapes_seed{spec.seed}")
    from .data import spec_to_dict

    logger = _setup_out_dir(out, {"logicshapes": spec_to_dict(spec)})
    logger.info("generating LogicShapes dataset -> %s", out)
    generate_logicshapes(spec, out)
    logger.info("done: %d train / %d+%d+%d test samples", spec.n_train,
                spec.n_test_normal, spec.n_test_structural, spec.n_test_logical)
    print(out)
    return 0


def _apply_common_overrides(cfg: RunConfig, args) -> RunConfig:
    training = cfg.training
    if getattr(args, "seed", None) is not None:
        training = dataclasses.replace(training, seed=args.seed)
    if getattr(args, "deterministic", False):
        training = dataclasses.replace(training, deterministic=True)
    if getattr(args, "epochs", None) is not None:
        training = dataclasses.replace(training, epochs=args.epochs)
    return dataclasses.replace(cfg, training=training)


def cmd_train(args) -> int:
    cfg = _apply_common_overrides(load_run_config(args.config), args)
    dataset = load_folder_dataset(args.data)
    if not dataset.train:
        raise MissingInputError(f"no train/good images under {args.data}")
    resolution, mean, std = _resolve_preprocess(cfg, dataset)
    resolved = run_config_to_dict(cfg)
    resolved["resolved_preprocess"] = {"resolution": resolution,
                                       "mean": list(mean), "std": list(std)}
    logger = _setup_out_dir(args.out, resolved)
    if cfg.training.deterministic:
        set_deterministic(cfg.training.seed)
    logger.info("loading %d training images at %dx%d", len(dataset.train),
                resolution, resolution)
    images = load_image_stack(dataset.train, resolution, mean, std)
    model = GLCF(cfg.backbone, cfg.bottleneck, cfg.heads, input_size=resolution)
    logger.info("training %s variant for %d epochs", cfg.bottleneck.variant,
                cfg.training.epochs)
    train_glcf(model, images, cfg.training, out_dir=args.out, log_fn=logger.info,
               preprocess_info={"resolution": resolution, "mean": list(mean),
                                "std": list(std)})
    logger.info("checkpoint written to %s", Path(args.out) / "checkpoint.tnsr")
    return 0


def cmd_calibrate(args) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    dataset = load_folder_dataset(args.data)
    if not dataset.train:
        raise MissingInputError(f"no train/good images under {args.data}")
    resolution, mean, std = _preprocess_from_checkpoint(meta, dataset)
    logger = _setup_out_dir(args.out, {"checkpoint": str(args.checkpoint),
                                       "resolution": resolution,
                                       "mean": list(mean), "std": list(std)})
    if args.deterministic:
        set_deterministic(args.seed if args.seed is not None else 0)
    images = load_image_stack(dataset.train, resolution, mean, std)
    logger.info("calibrating on %d anomaly-free samples", images.shape[0])
    stats = calibrate(model, images)
    with open(Path(args.out) / "stats.json", "w") as fh:
        json.dump(stats.to_dict(), fh, indent=2, sort_keys=True)
    logger.info("stats written to %s", Path(args.out) / "stats.json")
    return 0


def cmd_score(args) -> int:
    if (args.image is None) == (args.dir is None):
        raise ConfigError("provide exactly one of --image or --dir")
    model, meta = load_checkpoint(args.checkpoint)
    stats = _load_stats(args.stats)
    cfg = _apply_common_overrides(load_run_config(args.config), args)
    resolution, mean, std = _preprocess_from_checkpoint(meta, None)
    logger = _setup_out_dir(args.out, {
        "checkpoint": str(args.checkpoint), "stats": str(args.stats),
        "fusion": dataclass_to_dict(cfg.fusion),
        "resolution": resolution, "mean": list(mean), "std": list(std)})
    if args.deterministic:
        set_deterministic(args.seed if args.seed is not None else 0)

    if args.image:
        paths = [Path(args.image)]
    else:
        src = Path(args.dir)
        if not src.is_dir():
            raise MissingInputError(f"image directory not found: {src}")
        paths = sorted(p for p in src.iterdir()
                       if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp"))
        if not paths:
            raise MissingInputError(f"no images in {src}")

    import torch

    batch = torch.stack([preprocess(p, resolution, mean, std) for p in paths])
    results = score_images(model, batch, stats, cfg.fusion)
    rows = []
    for path, res in zip(paths, results):
        print(f"{res.image_score:.10g}")
        export_score_map(res.smoothed_map, Path(args.out) / "maps" / path.stem)
        rows.append((str(path), -1, res.image_score))
    write_score_csv(Path(args.out) / "scores.csv", rows)
    logger.info("scored %d image(s)", len(paths))
    return 0


def _build_context(args, cfg: RunConfig, dataset, model, stats,
                   logger) -> ExperimentContext:
    if model is not None and getattr(model, "_ckpt_meta", None) is not None:
        resolution, mean, std = _preprocess_from_checkpoint(model._ckpt_meta, dataset)
    else:
        resolution, mean, std = _resolve_preprocess(cfg, dataset)
    deterministic = getattr(args, "deterministic", False)

    def factory(**overrides):
        bcfg = dataclasses.replace(cfg.bottleneck, **overrides)
        return GLCF(cfg.backbone, bcfg, cfg.heads, input_size=resolution)

    return ExperimentContext(
        dataset=dataset,
        out_dir=Path(args.out),
        resolution=resolution,
        mean=mean,
        std=std,
        fusion=cfg.fusion,
        eval=cfg.eval,
        model=model,
        stats=stats,
        training=cfg.training,
        model_factory=factory,
        deterministic=deterministic,
        log_fn=logger.info,
    )


def cmd_eval(args) -> int:
    cfg = _apply_common_overrides(load_run_config(args.config), args)
    model, meta = load_checkpoint(args.checkpoint)
    model._ckpt_meta = meta
    stats = _load_stats(args.stats)
    dataset = load_folder_dataset(args.data)
    logger = _setup_out_dir(args.out, run_config_to_dict(cfg))
    if args.deterministic:
        set_deterministic(cfg.training.seed)
    ctx = _build_context(args, cfg, dataset, model, stats, logger)
    report = run_experiment("branches", ctx)
    logger.info("report written to %s", Path(args.out) / "report.json")
    fused = report["results"]["image_auroc"]["fused"]
    for kind, value in sorted(fused.items()):
        logger.info("fused image AUROC [%s] = %.4f", kind, value)
    return 0


def cmd_ablate(args) -> int:
    cfg = _apply_common_overrides(load_run_config(args.config), args)
    dataset = load_folder_dataset(args.data)
    model = stats = None
    if args.checkpoint:
        model, meta = load_checkpoint(args.checkpoint)
        model._ckpt_meta = meta
    if args.stats:
        stats = _load_stats(args.stats)
    logger = _setup_out_dir(args.out, run_config_to_dict(cfg))
    if args.deterministic:
        set_deterministic(cfg.training.seed)
    ctx = _build_context(args, cfg, dataset, model, stats, logger)
    run_experiment(args.mode, ctx)
    logger.info("ablation %s written to %s", args.mode, Path(args.out) / "report.json")
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="glcf",
        description="Train and evaluate the global-local correspondence "
                    "anomaly detector on MVTec-layout datasets.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the run seed")
        p.add_argument("--deterministic", action="store_true",
                       help="single-threaded, fully seeded numeric paths")

    p = sub.add_parser("generate-data", help="write a synthetic LogicShapes dataset")
    p.add_argument("--spec", default=None, help="LogicShapesSpec JSON (defaults used if omitted)")
    p.add_argument("--out", default=None,
                   help="dataset directory (default: under $GLCF_CACHE)")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="train on the anomaly-free split")
    p.add_argument("--config", default=None, help="RunConfig JSON")
    p.add_argument("--data", required=True, help="MVTec-layout dataset root")
    p.add_argument("--epochs", type=int, default=None, help="override training epochs")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("calibrate", help="compute normalization stats on train data")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    common(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("score", help="score one image or a directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--stats", required=True, help="stats.json from calibrate")
    p.add_argument("--image", default=None)
    p.add_argument("--dir", default=None)
    p.add_argument("--config", default=None)
    common(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="full evaluation report on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--stats", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run one ablation grid")
    p.add_argument("--mode", required=True, choices=ABLATION_MODES)
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--stats", default=None)
    p.add_argument("--epochs", type=int, default=None,
                   help="override the training budget for sam-variants")
    common(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except GlcfError as exc:
        category = _ERROR_CATEGORY.get(exc.exit_code, "internal")
        print(f"GLCF-ERROR code={exc.exit_code} category={category} "
              f"message={str(exc)!r}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
