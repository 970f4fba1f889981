"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s``. The heavyweight criteria
(5-8, 10) share one reference desk run (LogicShapes defaults, 50 epochs, PSS)
built by the session fixtures in conftest; it is cached on disk and trains
deterministically, so reruns are cheap after the first session.
"""

import dataclasses
import json
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from glcf.backbone import BackboneConfig, parameter_digest
from glcf.bottleneck import BottleneckConfig
from glcf.cli import main as cli_main
from glcf.data import load_folder_dataset, load_image_stack, resolve_norm_constants
from glcf.errors import GlcfError
from glcf.experiments import EvalConfig, ExperimentContext, run_experiment
from glcf.heads import DecoderConfig
from glcf.metrics import auroc, spro
from glcf.model import GLCF, load_checkpoint, save_checkpoint
from glcf.scoring import (
    CalibrationStats,
    FusionConfig,
    branch_maps_from_outputs,
    fuse_multiscale,
    fuse_scale,
    squared_channel_distance,
)
from glcf.training import (
    TrainingConfig,
    compute_losses,
    loss_correspondence,
    loss_estimation,
    train_glcf,
)

from conftest import train_reference


def _report(criterion: int, ok: bool, detail: str) -> None:
    print(f"[acceptance {criterion}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, f"criterion {criterion}: {detail}"


# ---------------------------------------------------------------------------
# independent nested-loop oracles (deliberately dumb implementations)


def _loss_oracle(targets, outputs):
    batch = targets[0].shape[0]
    total = 0.0
    for b in range(batch):
        acc = 0.0
        for a, o in zip(targets, outputs):
            _, C, H, W = a.shape
            for h in range(H):
                for w in range(W):
                    sq = 0.0
                    for c in range(C):
                        d = float(a[b, c, h, w]) - float(o[b, c, h, w])
                        sq += d * d
                    acc += sq
        total += acc
    return total / batch


def _map_oracle(a, b):
    B, C, H, W = a.shape
    out = np.zeros((B, H, W))
    for n in range(B):
        for h in range(H):
            for w in range(W):
                s = 0.0
                for c in range(C):
                    d = float(a[n, c, h, w]) - float(b[n, c, h, w])
                    s += d * d
                out[n, h, w] = s
    return out


def _fuse_scale_oracle(al, ag, mu_l, s_l, mu_g, s_g, wl, wg):
    H, W = al.shape
    out = np.zeros((H, W))
    for h in range(H):
        for w in range(W):
            out[h, w] = wl * (al[h, w] - mu_l) / s_l + wg * (ag[h, w] - mu_g) / s_g
    return out


def _bilinear_oracle(src, oh, ow):
    h, w = src.shape
    out = np.zeros((oh, ow))
    for i in range(oh):
        for j in range(ow):
            y = (i + 0.5) * h / oh - 0.5
            x = (j + 0.5) * w / ow - 0.5
            y0, x0 = int(np.floor(y)), int(np.floor(x))
            dy, dx = y - y0, x - x0
            ys = (min(max(y0, 0), h - 1), min(max(y0 + 1, 0), h - 1))
            xs = (min(max(x0, 0), w - 1), min(max(x0 + 1, 0), w - 1))
            out[i, j] = (src[ys[0], xs[0]] * (1 - dy) * (1 - dx)
                         + src[ys[1], xs[0]] * dy * (1 - dx)
                         + src[ys[0], xs[1]] * (1 - dy) * dx
                         + src[ys[1], xs[1]] * dy * dx)
    return out


def _fuse_multiscale_oracle(maps, weights, oh, ow):
    total = np.zeros((oh, ow))
    for k, m in zip(weights, maps):
        total += k * _bilinear_oracle(m, oh, ow)
    return total / 3.0


def _auroc_pair_oracle(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    wins = 0.0
    for p in pos:
        for n in neg:
            wins += 1.0 if p > n else (0.5 if p == n else 0.0)
    return wins / (len(pos) * len(neg))


def _flood_regions(mask):
    mask = np.asarray(mask) > 0
    seen = np.zeros_like(mask, dtype=bool)
    regions = []
    H, W = mask.shape
    for sy in range(H):
        for sx in range(W):
            if not mask[sy, sx] or seen[sy, sx]:
                continue
            stack, pixels = [(sy, sx)], []
            seen[sy, sx] = True
            while stack:
                y, x = stack.pop()
                pixels.append((y, x))
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        ny, nx = y + dy, x + dx
                        if 0 <= ny < H and 0 <= nx < W and mask[ny, nx] and not seen[ny, nx]:
                            seen[ny, nx] = True
                            stack.append((ny, nx))
            regions.append(pixels)
    return regions


def _spro_oracle(m, g, saturation, fpr_limit):
    m = np.asarray(m, dtype=float)
    g = np.asarray(g) > 0
    regions = _flood_regions(g)
    n_normal = int((~g).sum())
    points = [(0.0, 0.0)]
    for t in sorted({float(v) for v in m.ravel()}, reverse=True):
        det = m >= t
        fpr = int(det[~g].sum()) / n_normal
        overlaps = [min(1.0, sum(1 for y, x in pixels if det[y, x])
                        / (saturation * len(pixels))) for pixels in regions]
        points.append((fpr, float(np.mean(overlaps))))
    points.append((1.0, 1.0))
    points.sort()
    area, (prev_f, prev_s) = 0.0, points[0]
    for f, s in points[1:]:
        if f <= fpr_limit:
            area += (f - prev_f) * (s + prev_s) / 2.0
            prev_f, prev_s = f, s
        else:
            if fpr_limit > prev_f:
                frac = (fpr_limit - prev_f) / (f - prev_f)
                cut = prev_s + frac * (s - prev_s)
                area += (fpr_limit - prev_f) * (cut + prev_s) / 2.0
            break
    return area / fpr_limit


# ---------------------------------------------------------------------------
# shared reference evaluation


@pytest.fixture(scope="module")
def reference_reports(reference_dataset_dir, tmp_path_factory):
    """Branch / correspondence / scales reports for seeds, computed lazily."""
    cache: dict[int, dict] = {}
    out_root = tmp_path_factory.mktemp("reports")

    def for_seed(seed: int) -> dict:
        if seed in cache:
            return cache[seed]
        run_dir = train_reference(reference_dataset_dir, seed)
        model, _ = load_checkpoint(run_dir / "checkpoint.tnsr")
        stats = CalibrationStats.from_dict(
            json.loads((run_dir / "stats.json").read_text()))
        dataset = load_folder_dataset(reference_dataset_dir)
        mean, std = resolve_norm_constants("auto", dataset)
        reports = {}
        for mode in ("branches", "correspondence-vs-estimation", "scales"):
            ctx = ExperimentContext(
                dataset=dataset, out_dir=out_root / f"s{seed}_{mode}",
                resolution=64, mean=mean, std=std, model=model, stats=stats,
                eval=EvalConfig(batch_size=16), deterministic=True)
            reports[mode] = run_experiment(mode, ctx)["results"]["image_auroc"]
        cache[seed] = reports
        return reports

    return for_seed


# ---------------------------------------------------------------------------
# criteria


def test_criterion_1_equation_oracles():
    rng = np.random.default_rng(0)
    t0 = time.time()
    for _ in range(100):
        shape = (int(rng.integers(1, 3)), int(rng.integers(1, 4)),
                 int(rng.integers(1, 4)), int(rng.integers(1, 4)))
        a = [torch.from_numpy(rng.normal(size=shape)),
             torch.from_numpy(rng.normal(size=shape))]
        b = [torch.from_numpy(rng.normal(size=shape)) for _ in a]
        want = _loss_oracle(a, b)
        for fn in (loss_correspondence, loss_estimation):
            got = float(fn(a, b))
            assert got == pytest.approx(want, rel=1e-6)

        got_map = squared_channel_distance(a[0], b[0]).numpy()
        np.testing.assert_allclose(got_map, _map_oracle(a[0], b[0]), rtol=1e-6)

        mu_l, mu_g = rng.normal(size=2)
        s_l, s_g = rng.uniform(0.5, 2, size=2)
        wl, wg = rng.uniform(0, 5, size=2)
        al, ag = rng.normal(size=(2, 3, 3))
        stats = CalibrationStats(mu={"L": [mu_l] * 3, "G": [mu_g] * 3},
                                 sigma={"L": [s_l] * 3, "G": [s_g] * 3})
        cfg = FusionConfig(w_local=wl, w_global=wg)
        got_fused = fuse_scale(al, ag, stats, cfg, 1)
        np.testing.assert_allclose(
            got_fused, _fuse_scale_oracle(al, ag, mu_l, s_l, mu_g, s_g, wl, wg),
            rtol=1e-6, atol=1e-12)

        sizes = [int(rng.integers(1, 4)) * 4, 0, 0]
        sizes[1], sizes[2] = sizes[0] // 2, sizes[0] // 4
        maps = [rng.normal(size=(s, s)) for s in sizes]
        ks = tuple(rng.uniform(0, 6, size=3))
        out = int(rng.integers(sizes[0], 2 * sizes[0]))
        got_ms = fuse_multiscale(maps, FusionConfig(scale_weights=ks), (out, out))
        np.testing.assert_allclose(
            got_ms, _fuse_multiscale_oracle(maps, ks, out, out), rtol=1e-6, atol=1e-12)
    elapsed = time.time() - t0
    _report(1, elapsed < 60,
            f"5 equation implementations match nested-loop oracles on 100 random "
            f"tensors at 1e-6 rel ({elapsed:.1f}s)")


def test_criterion_2_gradient_check():
    t0 = time.time()
    torch.manual_seed(0)
    model = GLCF(BackboneConfig(), BottleneckConfig(), DecoderConfig(),
                 input_size=16).double()
    batch = torch.randn(2, 3, 16, 16, dtype=torch.float64)
    cfg = TrainingConfig()

    def loss_value():
        *_, total = compute_losses(model, batch, cfg)
        return total

    total = loss_value()
    params = [p for p in model.trainable_parameters()]
    grads = torch.autograd.grad(total, params)

    rng = np.random.default_rng(1)
    checked = 0
    eps = 1e-5
    while checked < 10:
        pi = int(rng.integers(len(params)))
        p, g = params[pi], grads[pi]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        analytic = float(g[idx])
        with torch.no_grad():
            original = float(p[idx])
            p[idx] = original + eps
            plus = float(loss_value())
            p[idx] = original - eps
            minus = float(loss_value())
            p[idx] = original
        numeric = (plus - minus) / (2 * eps)
        denom = max(abs(analytic), abs(numeric))
        if denom < 1e-8:
            continue  # degenerate coordinate; sample another
        rel = abs(analytic - numeric) / denom
        assert rel < 1e-3, f"param {pi} idx {idx}: analytic {analytic} vs numeric {numeric}"
        checked += 1
    elapsed = time.time() - t0
    _report(2, elapsed < 120,
            f"autodiff matches central differences at 1e-3 rel on 10 sampled "
            f"coordinates (64-bit, 16x16 inputs, {elapsed:.1f}s)")


def test_criterion_3_freeze_invariant(reference_dataset_dir):
    dataset = load_folder_dataset(reference_dataset_dir)
    mean, std = resolve_norm_constants("auto", dataset)
    images = load_image_stack(dataset.train[:120], 64, mean, std)
    torch.manual_seed(0)
    model = GLCF(BackboneConfig(), BottleneckConfig(), DecoderConfig(), input_size=64)
    before = parameter_digest(model.backbone)
    train_glcf(model, images, TrainingConfig(epochs=5, batch_size=8, seed=0))
    after = parameter_digest(model.backbone)
    _report(3, before == after,
            f"extractor digest unchanged across 5-epoch desk run ({before[:12]}...)")


@pytest.mark.parametrize("size", [64, 224])
@pytest.mark.parametrize("variant", ["PS", "PGS", "PSS"])
def test_criterion_4_shape_contracts(size, variant, tmp_path):
    torch.manual_seed(0)
    model = GLCF(BackboneConfig(), BottleneckConfig(variant=variant),
                 DecoderConfig(), input_size=size)
    batch = torch.randn(1, 3, size, size)
    with torch.no_grad():
        out = model(batch)
    n = (size // 16) ** 2
    assert out.bottleneck.theta.shape == (1, n, 64)
    assert out.bottleneck.omega.shape == (1, n, 64)
    ref_shapes = [tuple(t.shape) for t in out.local_pyramid.levels]
    for pyr in (out.global_pyramid, out.local_estimate, out.global_estimate):
        assert [tuple(t.shape) for t in pyr.levels] == ref_shapes

    save_checkpoint(model, tmp_path / "c.tnsr")
    loaded, _ = load_checkpoint(tmp_path / "c.tnsr")
    with torch.no_grad():
        again = loaded(batch)
    for a, b in zip(out.global_estimate.levels, again.global_estimate.levels):
        assert torch.equal(a, b)
    _report(4, True, f"theta/omega and pyramid shapes + checkpoint roundtrip "
                     f"bit-equality hold for size={size} variant={variant}")


def _branch_margins(rows) -> dict:
    return {
        "local_structural_margin": rows["local"]["structural"] - rows["global"]["structural"],
        "global_logical_margin": rows["global"]["logical"] - rows["local"]["logical"],
        "fused_structural_slack": rows["fused"]["structural"]
            - max(rows["local"]["structural"], rows["global"]["structural"]) + 0.02,
        "fused_logical_slack": rows["fused"]["logical"]
            - max(rows["local"]["logical"], rows["global"]["logical"]) + 0.02,
    }


def _branch_roles_hold(rows) -> bool:
    m = _branch_margins(rows)
    return (m["local_structural_margin"] >= 0.03
            and m["global_logical_margin"] >= 0.03
            and m["fused_structural_slack"] >= 0.0
            and m["fused_logical_slack"] >= 0.0)


def test_criterion_5_branch_roles(reference_reports):
    rows0 = reference_reports(0)["branches"]
    if _branch_roles_hold(rows0):
        _report(5, True, f"seed 0 margins {_branch_margins(rows0)}")
        return
    # pinned-seed run failed: fall back to the allowed 3-seed majority
    verdicts = [_branch_roles_hold(rows0)]
    for seed in (1, 2):
        verdicts.append(_branch_roles_hold(reference_reports(seed)["branches"]))
    _report(5, sum(verdicts) >= 2,
            f"3-seed majority {verdicts}; seed-0 margins {_branch_margins(rows0)}")


def test_criterion_6_detectability_floor(reference_reports):
    fused = reference_reports(0)["branches"]["fused"]
    ok = fused["structural"] >= 0.85 and fused["logical"] >= 0.80
    _report(6, ok, f"fused AUROC structural={fused['structural']:.3f} (>=0.85), "
                   f"logical={fused['logical']:.3f} (>=0.80)")


def test_criterion_7_estimation_beats_correspondence(reference_reports):
    rows = reference_reports(0)["correspondence-vs-estimation"]
    est, corr = rows["estimation"]["mean"], rows["correspondence"]["mean"]
    _report(7, est >= corr,
            f"mean AUROC estimation={est:.3f} >= correspondence={corr:.3f}")


def test_criterion_8_multiscale_gain(reference_reports):
    rows = reference_reports(0)["scales"]
    best_single = max(rows[f"scale_{i}"]["mean"] for i in (1, 2, 3))
    fused = rows["fused"]["mean"]
    _report(8, fused >= best_single - 0.01,
            f"fused mean AUROC {fused:.3f} >= best single scale {best_single:.3f} - 0.01")


def test_criterion_9_metric_oracles():
    rng = np.random.default_rng(42)
    count = 0
    while count < 1000:
        n = int(rng.integers(2, 51))
        scores = rng.integers(0, 12, size=n).astype(float)
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            continue
        assert auroc(scores, labels) == _auroc_pair_oracle(scores, labels)
        count += 1

    corpus = 0
    rng = np.random.default_rng(7)
    while corpus < 120:
        h, w = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        mask = rng.random((h, w)) < 0.45
        if not mask.any() or mask.all():
            continue
        m = rng.integers(0, 5, size=(h, w)).astype(float)
        for sat in (1.0, 0.5):
            for limit in (0.05, 0.3, 1.0):
                got = spro([m], [mask], saturation_fraction=sat, fpr_limit=limit)
                want = _spro_oracle(m, mask, sat, limit)
                assert got == pytest.approx(want, abs=1e-12)
        corpus += 1
    _report(9, True, "auroc exact on 1000 pair-counting instances; spro matches "
                     "exhaustive sweep oracle on 120 <=4x4 cases")


def test_criterion_10_calibration_property(reference_model, reference_dataset_dir):
    model, meta, run_dir = reference_model
    stats = CalibrationStats.from_dict(json.loads((run_dir / "stats.json").read_text()))
    dataset = load_folder_dataset(reference_dataset_dir)
    mean, std = resolve_norm_constants("auto", dataset)
    images = load_image_stack(dataset.train, 64, mean, std)
    sums = {("L", i): [0.0, 0.0, 0] for i in range(3)}
    sums.update({("G", i): [0.0, 0.0, 0] for i in range(3)})
    with torch.no_grad():
        for start in range(0, images.shape[0], 16):
            out = model(images[start:start + 16])
            local, global_ = branch_maps_from_outputs(out)
            for branch, maps in (("L", local), ("G", global_)):
                for i, m in enumerate(maps):
                    mu = stats.mu[branch][i]
                    sigma = stats.sigma[branch][i]
                    z = (m.double().numpy() - mu) / sigma
                    acc = sums[(branch, i)]
                    acc[0] += z.sum()
                    acc[1] += (z * z).sum()
                    acc[2] += z.size
    worst_mean, worst_std = 0.0, 0.0
    for (branch, i), (s, sq, n) in sums.items():
        mean_z = s / n
        std_z = np.sqrt(max(sq / n - mean_z ** 2, 0.0))
        worst_mean = max(worst_mean, abs(mean_z))
        worst_std = max(worst_std, abs(std_z - 1.0))
    ok = worst_mean < 1e-6 and worst_std < 1e-6
    _report(10, ok, f"normalized training maps pooled |mean| {worst_mean:.2e} < 1e-6, "
                    f"|std-1| {worst_std:.2e} < 1e-6")


def test_criterion_11_determinism(tmp_path):
    spec = {"n_train": 8, "n_test_normal": 4, "n_test_structural": 4,
            "n_test_logical": 4, "seed": 33}
    cfg = {
        "backbone": {"stage_channels": [8, 16, 32, 64], "stage_depths": [1, 1, 1, 1]},
        "bottleneck": {"dim": 16, "depth": 2, "heads": 2},
        "training": {"epochs": 2, "batch_size": 8},
        "data": {"resolution": 32},
        "eval": {"batch_size": 8},
    }
    spec_path = tmp_path / "spec.json"
    spec_path.write_text(json.dumps(spec))
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))

    def pipeline(tag: str) -> bytes:
        base = tmp_path / tag
        data = base / "data"
        assert cli_main(["generate-data", "--spec", str(spec_path),
                         "--out", str(data)]) == 0
        assert cli_main(["train", "--config", str(cfg_path), "--data", str(data),
                         "--out", str(base / "run"), "--seed", "5",
                         "--deterministic"]) == 0
        assert cli_main(["calibrate", "--checkpoint", str(base / "run" / "checkpoint.tnsr"),
                         "--data", str(data), "--out", str(base / "calib"),
                         "--deterministic"]) == 0
        assert cli_main(["eval", "--checkpoint", str(base / "run" / "checkpoint.tnsr"),
                         "--stats", str(base / "calib" / "stats.json"),
                         "--data", str(data), "--config", str(cfg_path),
                         "--out", str(base / "eval"), "--seed", "5",
                         "--deterministic"]) == 0
        return (base / "eval" / "report.json").read_bytes()

    a = pipeline("a")
    b = pipeline("b")
    _report(11, a == b, "two deterministic end-to-end pipeline runs produced "
                        "byte-identical report JSON")
