import hashlib
import json
import os
import shutil
from pathlib import Path

import pytest
import torch

from glcf.backbone import BackboneConfig
from glcf.bottleneck import BottleneckConfig
from glcf.data import (
    LogicShapesSpec,
    generate_logicshapes,
    load_folder_dataset,
    load_image_stack,
    resolve_norm_constants,
)
from glcf.heads import DecoderConfig
from glcf.model import GLCF, load_checkpoint
from glcf.training import TrainingConfig, calibrate, train_glcf

# Expensive artifacts (reference dataset + training run) are cached on disk so
# repeated test sessions reuse them; training is deterministic, so a cache hit
# is bit-identical to a fresh run. Remove the directory (or set
# GLCF_TEST_CACHE) to force a rebuild.
CACHE_ROOT = Path(os.environ.get("GLCF_TEST_CACHE", "/tmp/glcf_test_cache"))

REFERENCE_SPEC = LogicShapesSpec()  # repo-pinned desk defaults
REFERENCE_TRAINING = TrainingConfig(epochs=50, batch_size=8, seed=0, deterministic=True)


def _config_key(*parts) -> str:
    payload = json.dumps([repr(p) for p in parts], sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


@pytest.fixture(scope="session")
def small_spec() -> LogicShapesSpec:
    return LogicShapesSpec(n_train=24, n_test_normal=8, n_test_structural=8,
                           n_test_logical=8, seed=11)


@pytest.fixture(scope="session")
def small_dataset_dir(small_spec) -> Path:
    out = CACHE_ROOT / f"small_{_config_key(small_spec)}"
    if not (out / "meta.jsonl").exists():
        shutil.rmtree(out, ignore_errors=True)
        generate_logicshapes(small_spec, out)
    return out


@pytest.fixture(scope="session")
def reference_dataset_dir() -> Path:
    out = CACHE_ROOT / f"reference_{_config_key(REFERENCE_SPEC)}"
    if not (out / "meta.jsonl").exists():
        shutil.rmtree(out, ignore_errors=True)
        generate_logicshapes(REFERENCE_SPEC, out)
    return out


def train_reference(dataset_dir: Path, seed: int) -> Path:
    """Train the reference desk configuration; cached by (config, seed)."""
    cfg = TrainingConfig(epochs=REFERENCE_TRAINING.epochs, batch_size=8,
                         seed=seed, deterministic=True)
    out = CACHE_ROOT / f"run_{_config_key(REFERENCE_SPEC, cfg)}"
    ckpt = out / "checkpoint.tnsr"
    if not ckpt.exists():
        shutil.rmtree(out, ignore_errors=True)
        out.mkdir(parents=True)
        dataset = load_folder_dataset(dataset_dir)
        mean, std = resolve_norm_constants("auto", dataset)
        images = load_image_stack(dataset.train, 64, mean, std)
        model = GLCF(BackboneConfig(), BottleneckConfig(variant="PSS"),
                     DecoderConfig(), input_size=64)
        train_glcf(model, images, cfg, out_dir=out,
                   preprocess_info={"resolution": 64, "mean": list(mean),
                                    "std": list(std)})
        stats = calibrate(model, images)
        with open(out / "stats.json", "w") as fh:
            json.dump(stats.to_dict(), fh)
    return out


@pytest.fixture(scope="session")
def reference_run(reference_dataset_dir) -> Path:
    return train_reference(reference_dataset_dir, seed=0)


@pytest.fixture(scope="session")
def reference_model(reference_run):
    model, meta = load_checkpoint(reference_run / "checkpoint.tnsr")
    return model, meta, reference_run


@pytest.fixture(autouse=True)
def fixed_torch_seed():
    torch.manual_seed(1234)
