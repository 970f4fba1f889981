"""LogicShapes: a deterministic synthetic dataset with checkable logic rules.

Normal scenes place colored shapes on a grid so that every rule holds.
Structural anomalies corrupt one object locally (blob, scratch, or texture
patch) with an exact pixel mask; logical anomalies break exactly one rule
(missing or extra object, swapped cells, wrong color pairing) and mask the
violated cell. Output follows the MVTec folder convention, so the folder
loader below reads the generator's own output as well as external datasets.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw

from .backbone import IMAGENET_MEAN, IMAGENET_STD
from .errors import ConfigError, ContractError, MissingInputError

SHAPES = ("circle", "square", "triangle")
PALETTE = {
    "red": (200, 60, 50),
    "green": (70, 170, 80),
    "blue": (60, 90, 200),
    "yellow": (220, 200, 60),
}
BACKGROUND = (228, 228, 228)
NOISE_AMPLITUDE = 0  # uniform per-pixel background jitter, +/- this many levels


@dataclass
class Rule:
    kind: str  # exact_count | cell_binding | color_pairing
    shape: str | None = None
    color: str | None = None
    count: int | None = None
    cell: int | None = None

    def __post_init__(self):
        if self.kind == "exact_count":
            if self.shape not in SHAPES or self.count is None or self.count < 0:
                raise ConfigError(f"bad exact_count rule: {self}")
        elif self.kind == "cell_binding":
            if self.cell is None or self.shape not in SHAPES or self.color not in PALETTE:
                raise ConfigError(f"bad cell_binding rule: {self}")
        elif self.kind == "color_pairing":
            if self.shape not in SHAPES or self.color not in PALETTE:
                raise ConfigError(f"bad color_pairing rule: {self}")
        else:
            raise ConfigError(f"unknown rule kind {self.kind!r}")

    @property
    def rule_id(self) -> str:
        if self.kind == "exact_count":
            return f"exact_count({self.shape},{self.count})"
        if self.kind == "cell_binding":
            return f"cell_binding({self.cell},{self.shape},{self.color})"
        return f"color_pairing({self.shape},{self.color})"

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}


def default_rules() -> list[Rule]:
    return [
        Rule(kind="exact_count", shape="circle", count=2),
        Rule(kind="exact_count", shape="square", count=1),
        Rule(kind="color_pairing", shape="square", color="blue"),
    ]


def default_vocabulary() -> list[tuple[str, str]]:
    """Desk default: a compact vocabulary so 500 normals cover the scene space."""
    return [("circle", "red"), ("circle", "yellow"),
            ("square", "blue"), ("triangle", "green")]


def full_vocabulary() -> list[tuple[str, str]]:
    return [(s, c) for s in SHAPES for c in sorted(PALETTE)]


@dataclass
class LogicShapesSpec:
    canvas: int = 64
    grid: tuple[int, int] = (2, 2)
    vocabulary: list[tuple[str, str]] = field(default_factory=default_vocabulary)
    rules: list[Rule] = field(default_factory=default_rules)
    n_train: int = 500
    n_test_normal: int = 100
    n_test_structural: int = 100
    n_test_logical: int = 100
    seed: int = 0
    # scene-distribution knobs: an entangled normal manifold (aligned
    # placement, one color per shape and scene, no random decoration) keeps
    # compositions from factorizing into independent per-cell content
    placement: str = "aligned"  # aligned | free
    shared_shape_color: bool = True
    fill_free_cells: float = 0.0

    def __post_init__(self):
        if isinstance(self.grid, list):
            self.grid = tuple(self.grid)
        self.vocabulary = [tuple(v) for v in self.vocabulary]
        self.rules = [r if isinstance(r, Rule) else Rule(**r) for r in self.rules]
        for n in (self.n_train, self.n_test_normal, self.n_test_structural,
                  self.n_test_logical):
            if n <= 0:
                raise ConfigError("all split sizes must be positive")
        for shape, color in self.vocabulary:
            if shape not in SHAPES or color not in PALETTE:
                raise ConfigError(f"vocabulary entry ({shape}, {color}) is invalid")
        if self.placement not in ("aligned", "free"):
            raise ConfigError(f"unknown placement {self.placement!r}")
        if not 0 <= self.fill_free_cells <= 1:
            raise ConfigError("fill_free_cells must be in [0, 1]")
        self._check_satisfiable()

    def allowed_colors(self, shape: str) -> list[str]:
        paired = self.pairings().get(shape)
        colors = [c for s, c in self.vocabulary if s == shape]
        return [paired] if paired else colors

    def _check_satisfiable(self) -> None:
        rows, cols = self.grid
        n_cells = rows * cols
        bindings: dict[int, tuple[str, str]] = {}
        for r in self.rules:
            if r.kind == "cell_binding":
                if r.cell < 0 or r.cell >= n_cells:
                    raise ConfigError(f"cell_binding cell {r.cell} outside grid")
                if r.cell in bindings and bindings[r.cell] != (r.shape, r.color):
                    raise ConfigError(f"conflicting cell_bindings for cell {r.cell}")
                bindings[r.cell] = (r.shape, r.color)
        pairings = {r.shape: r.color for r in self.rules if r.kind == "color_pairing"}
        for cell, (shape, color) in bindings.items():
            if shape in pairings and pairings[shape] != color:
                raise ConfigError(
                    f"cell_binding({cell}) color {color} conflicts with "
                    f"color_pairing({shape},{pairings[shape]})"
                )
        counts = {r.shape: r.count for r in self.rules if r.kind == "exact_count"}
        required = 0
        vocab_shapes = {s for s, _ in self.vocabulary}
        for shape, count in counts.items():
            if count > 0 and shape not in vocab_shapes:
                raise ConfigError(f"exact_count mentions {shape!r} missing from vocabulary")
            bound = sum(1 for s, _ in bindings.values() if s == shape)
            if bound > count:
                raise ConfigError(f"cell_bindings demand more {shape}s than exact_count allows")
            required += count
        for shape, color in pairings.items():
            if (shape, color) not in self.vocabulary:
                raise ConfigError(f"color_pairing({shape},{color}) not in vocabulary")
        unbound_extra = sum(1 for c in bindings if bindings[c][0] not in counts)
        if required + unbound_extra > n_cells:
            raise ConfigError("rules demand more objects than grid cells")

    def counted_shapes(self) -> dict[str, int]:
        return {r.shape: r.count for r in self.rules if r.kind == "exact_count"}

    def pairings(self) -> dict[str, str]:
        return {r.shape: r.color for r in self.rules if r.kind == "color_pairing"}

    def bindings(self) -> dict[int, tuple[str, str]]:
        return {r.cell: (r.shape, r.color)
                for r in self.rules if r.kind == "cell_binding"}


@dataclass
class SceneObject:
    cell: int
    shape: str
    color: str

    def to_dict(self) -> dict:
        return {"cell": self.cell, "shape": self.shape, "color": self.color}


def verify_rules(objects: list[SceneObject] | list[dict],
                 spec: LogicShapesSpec) -> list[str]:
    """Return the ids of violated rules (empty list = scene passes)."""
    objs = [o if isinstance(o, SceneObject) else SceneObject(**o) for o in objects]
    violated = []
    for rule in spec.rules:
        if rule.kind == "exact_count":
            n = sum(1 for o in objs if o.shape == rule.shape)
            if n != rule.count:
                violated.append(rule.rule_id)
        elif rule.kind == "cell_binding":
            match = [o for o in objs if o.cell == rule.cell]
            ok = len(match) == 1 and match[0].shape == rule.shape and match[0].color == rule.color
            if not ok:
                violated.append(rule.rule_id)
        else:  # color_pairing
            if any(o.shape == rule.shape and o.color != rule.color for o in objs):
                violated.append(rule.rule_id)
    return violated


def _sample_rng(seed: int, split: str, index: int) -> np.random.Generator:
    split_code = {"train": 0, "test_normal": 1, "test_structural": 2,
                  "test_logical": 3}[split]
    return np.random.default_rng(np.random.SeedSequence([seed, split_code, index]))


def _free_color(rng: np.random.Generator, shape: str, spec: LogicShapesSpec) -> str:
    colors = spec.allowed_colors(shape)
    if not colors:
        raise ConfigError(f"vocabulary offers no color for shape {shape!r}")
    return str(colors[int(rng.integers(len(colors)))])


def _aligned_groups(rows: int, cols: int, count: int) -> list[tuple[int, ...]]:
    """Contiguous cell groups of the given size on a row, column, or diagonal."""
    lines = [[r * cols + c for c in range(cols)] for r in range(rows)]
    lines += [[r * cols + c for r in range(rows)] for c in range(cols)]
    if rows == cols and rows > 1:
        lines.append([i * cols + i for i in range(rows)])
        lines.append([i * cols + (cols - 1 - i) for i in range(rows)])
    groups: list[tuple[int, ...]] = []
    for line in lines:
        for start in range(len(line) - count + 1):
            g = tuple(line[start:start + count])
            if g not in groups:
                groups.append(g)
    return groups


def sample_normal_scene(spec: LogicShapesSpec, rng: np.random.Generator) -> list[SceneObject]:
    """Scene satisfying every rule, built constructively."""
    rows, cols = spec.grid
    n_cells = rows * cols
    objects: dict[int, SceneObject] = {}
    for cell, (shape, color) in spec.bindings().items():
        objects[cell] = SceneObject(cell=cell, shape=shape, color=color)

    scene_colors: dict[str, str] = {}

    def pick_color(shape: str) -> str:
        if spec.shared_shape_color:
            if shape not in scene_colors:
                scene_colors[shape] = _free_color(rng, shape, spec)
            return scene_colors[shape]
        return _free_color(rng, shape, spec)

    for shape, count in sorted(spec.counted_shapes().items(),
                               key=lambda kv: -kv[1]):
        have = sum(1 for o in objects.values() if o.shape == shape)
        free = [c for c in range(n_cells) if c not in objects]
        need = count - have
        if need > len(free):
            raise ConfigError(f"cannot place {count} {shape}s on {n_cells} cells")
        cells: list[int] = []
        if spec.placement == "aligned" and need > 1:
            fits = [g for g in _aligned_groups(rows, cols, need)
                    if all(c in free for c in g)]
            if fits:
                cells = list(fits[int(rng.integers(len(fits)))])
        if not cells:
            cells = [int(c) for c in rng.permutation(free)[:need]]
        for cell in cells:
            objects[cell] = SceneObject(cell, shape, pick_color(shape))

    # optionally decorate remaining cells with shapes no count rule mentions
    counted = set(spec.counted_shapes())
    free_shapes = sorted({s for s, _ in spec.vocabulary} - counted)
    if free_shapes and spec.fill_free_cells > 0:
        for cell in [c for c in range(n_cells) if c not in objects]:
            if rng.random() < spec.fill_free_cells:
                shape = str(free_shapes[int(rng.integers(len(free_shapes)))])
                objects[cell] = SceneObject(cell, shape, pick_color(shape))
    return [objects[c] for c in sorted(objects)]


def _cell_box(spec: LogicShapesSpec, cell: int) -> tuple[int, int, int, int]:
    rows, cols = spec.grid
    ch, cw = spec.canvas // rows, spec.canvas // cols
    r, c = divmod(cell, cols)
    return c * cw, r * ch, (c + 1) * cw, (r + 1) * ch


def _draw_object(draw: ImageDraw.ImageDraw, spec: LogicShapesSpec,
                 obj: SceneObject, rng: np.random.Generator) -> tuple[int, int, int, int]:
    """Draw one object with jitter; returns its bounding box."""
    x0, y0, x1, y1 = _cell_box(spec, obj.cell)
    cw, ch = x1 - x0, y1 - y0
    # half-extent + jitter stays under 0.5 of the cell, so masks stay cell-local
    size = rng.uniform(0.68, 0.80) * min(cw, ch) / 2
    cx = (x0 + x1) / 2 + rng.uniform(-0.03, 0.03) * cw
    cy = (y0 + y1) / 2 + rng.uniform(-0.03, 0.03) * ch
    color = PALETTE[obj.color]
    box = (round(cx - size), round(cy - size), round(cx + size), round(cy + size))
    if obj.shape == "circle":
        draw.ellipse(box, fill=color)
    elif obj.shape == "square":
        draw.rectangle(box, fill=color)
    else:  # triangle
        draw.polygon([(round(cx), box[1]), (box[0], box[3]), (box[2], box[3])], fill=color)
    return box


def render_scene(spec: LogicShapesSpec, objects: list[SceneObject],
                 rng: np.random.Generator) -> tuple[Image.Image, dict[int, tuple[int, int, int, int]]]:
    """Render objects over a lightly noised background; returns per-cell boxes."""
    img = Image.new("RGB", (spec.canvas, spec.canvas), BACKGROUND)
    noise = rng.integers(-NOISE_AMPLITUDE, NOISE_AMPLITUDE + 1,
                         size=(spec.canvas, spec.canvas, 3))
    arr = np.clip(np.asarray(img, dtype=np.int16) + noise, 0, 255).astype(np.uint8)
    img = Image.fromarray(arr)
    draw = ImageDraw.Draw(img)
    boxes = {}
    for obj in objects:
        boxes[obj.cell] = _draw_object(draw, spec, obj, rng)
    return img, boxes


def _apply_structural_corruption(img: Image.Image, box: tuple[int, int, int, int],
                                 rng: np.random.Generator) -> np.ndarray:
    """Corrupt the region inside ``box``; returns the binary pixel mask."""
    w, h = img.size
    mask = Image.new("L", (w, h), 0)
    mdraw = ImageDraw.Draw(mask)
    draw = ImageDraw.Draw(img)
    x0, y0, x1, y1 = box
    kind = rng.choice(["blob", "scratch", "patch"])
    dark = (40, 40, 40) if rng.random() < 0.5 else (250, 250, 250)
    if kind == "blob":
        bw = max(3, round((x1 - x0) * rng.uniform(0.25, 0.5)))
        bh = max(3, round((y1 - y0) * rng.uniform(0.25, 0.5)))
        bx = round(rng.uniform(x0, max(x0, x1 - bw)))
        by = round(rng.uniform(y0, max(y0, y1 - bh)))
        draw.ellipse((bx, by, bx + bw, by + bh), fill=dark)
        mdraw.ellipse((bx, by, bx + bw, by + bh), fill=255)
    elif kind == "scratch":
        if rng.random() < 0.5:
            ya, yb = sorted(rng.uniform(y0, y1, size=2))
            xa, xb = x0, x1
        else:
            xa, xb = sorted(rng.uniform(x0, x1, size=2))
            ya, yb = y0, y1
        width = int(rng.integers(1, 3))
        draw.line((xa, ya, xb, yb), fill=dark, width=width)
        mdraw.line((xa, ya, xb, yb), fill=255, width=width)
    else:  # patch of noise texture
        pw = max(3, round((x1 - x0) * rng.uniform(0.3, 0.55)))
        ph = max(3, round((y1 - y0) * rng.uniform(0.3, 0.55)))
        px = round(rng.uniform(x0, max(x0, x1 - pw)))
        py = round(rng.uniform(y0, max(y0, y1 - ph)))
        texture = rng.integers(0, 256, size=(ph, pw, 3)).astype(np.uint8)
        img.paste(Image.fromarray(texture), (px, py))
        mdraw.rectangle((px, py, px + pw - 1, py + ph - 1), fill=255)
    out = np.asarray(mask)
    if not out.any():
        raise ContractError("structural corruption produced an empty mask")
    return out


def _logical_builders(spec: LogicShapesSpec, objects: list[SceneObject]):
    """Applicable single-rule violations for this scene.

    Each entry is (rule_id, build(rng) -> (new_objects, mask_cell)).
    """
    rows, cols = spec.grid
    n_cells = rows * cols
    counts = spec.counted_shapes()
    pairings = spec.pairings()
    bindings = spec.bindings()
    occupied = {o.cell for o in objects}
    free_cells = [c for c in range(n_cells) if c not in occupied]
    builders = []

    for shape, count in sorted(counts.items()):
        count_id = f"exact_count({shape},{count})"
        removable = [o for o in objects if o.shape == shape and o.cell not in bindings]
        if count >= 1 and removable:
            def build_missing(rng, _cands=removable):
                victim = _cands[int(rng.integers(len(_cands)))]
                return [o for o in objects if o is not victim], victim.cell
            builders.append((count_id, build_missing))
        if free_cells:
            def build_extra(rng, _shape=shape):
                cell = int(free_cells[int(rng.integers(len(free_cells)))])
                # reuse the scene's color for this shape so only the count is off
                present = [o.color for o in objects if o.shape == _shape]
                color = present[0] if (present and spec.shared_shape_color) \
                    else _free_color(rng, _shape, spec)
                return objects + [SceneObject(cell, _shape, color)], cell
            builders.append((count_id, build_extra))

    scene_shapes = {o.shape for o in objects}
    for shape, color in sorted(pairings.items()):
        pair_id = f"color_pairing({shape},{color})"
        recolorable = [o for o in objects if o.shape == shape and o.cell not in bindings]
        # prefer hues that appear on this scene's other shapes, so the
        # violation is the pairing itself rather than a never-seen color
        wrong = sorted({c for s, c in spec.vocabulary
                        if c != color and s in scene_shapes})
        if not wrong:
            wrong = sorted({c for _, c in spec.vocabulary if c != color})
        if not wrong:
            wrong = [c for c in sorted(PALETTE) if c != color]
        if recolorable and wrong:
            def build_recolor(rng, _cands=recolorable, _wrong=wrong):
                victim = _cands[int(rng.integers(len(_cands)))]
                new_color = str(_wrong[int(rng.integers(len(_wrong)))])
                new = [SceneObject(o.cell, o.shape, new_color) if o is victim else o
                       for o in objects]
                return new, victim.cell
            builders.append((pair_id, build_recolor))

    for cell, (shape, color) in sorted(bindings.items()):
        bind_id = f"cell_binding({cell},{shape},{color})"
        partners = [o for o in objects
                    if o.cell != cell and o.cell not in bindings
                    and (o.shape, o.color) != (shape, color)]
        if cell in occupied and partners:
            def build_swap(rng, _cell=cell, _partners=partners):
                partner = _partners[int(rng.integers(len(_partners)))]
                bound = next(o for o in objects if o.cell == _cell)
                new = []
                for o in objects:
                    if o is bound:
                        new.append(SceneObject(partner.cell, o.shape, o.color))
                    elif o is partner:
                        new.append(SceneObject(_cell, o.shape, o.color))
                    else:
                        new.append(o)
                return new, _cell
            builders.append((bind_id, build_swap))
    return builders


def make_sample(spec: LogicShapesSpec, split: str, index: int,
                kind: str) -> tuple[Image.Image, np.ndarray | None, dict]:
    """Produce one (image, mask, metadata) sample deterministically."""
    rng = _sample_rng(spec.seed, split, index)
    objects = sample_normal_scene(spec, rng)

    if kind == "normal":
        img, _ = render_scene(spec, objects, rng)
        return img, None, {"kind": kind, "violated_rule": None,
                           "objects": [o.to_dict() for o in objects]}

    if kind == "structural":
        img, boxes = render_scene(spec, objects, rng)
        target = objects[int(rng.integers(len(objects)))]
        mask = _apply_structural_corruption(img, boxes[target.cell], rng)
        return img, mask, {"kind": kind, "violated_rule": None,
                           "objects": [o.to_dict() for o in objects]}

    if kind == "logical":
        builders = _logical_builders(spec, objects)
        if not builders:
            raise ConfigError("no single-rule violation is constructible for this spec")
        rule_id, build = builders[int(rng.integers(len(builders)))]
        new_objects, mask_cell = build(rng)
        violated = verify_rules(new_objects, spec)
        if violated != [rule_id]:
            raise ContractError(
                f"logical builder for {rule_id} violated {violated} instead"
            )
        img, _ = render_scene(spec, new_objects, rng)
        mask = np.zeros((spec.canvas, spec.canvas), dtype=np.uint8)
        x0, y0, x1, y1 = _cell_box(spec, mask_cell)
        mask[y0:y1, x0:x1] = 255
        return img, mask, {"kind": kind, "violated_rule": rule_id,
                           "objects": [o.to_dict() for o in new_objects]}

    raise ConfigError(f"unknown sample kind {kind!r}")


def generate_logicshapes(spec: LogicShapesSpec, out_dir: str | Path) -> Path:
    """Write the full dataset tree; deterministic in (spec, seed)."""
    out = Path(out_dir)
    plan = [
        ("train", "normal", spec.n_train, "train/good", None),
        ("test_normal", "normal", spec.n_test_normal, "test/good", None),
        ("test_structural", "structural", spec.n_test_structural,
         "test/structural_anomalies", "ground_truth/structural_anomalies"),
        ("test_logical", "logical", spec.n_test_logical,
         "test/logical_anomalies", "ground_truth/logical_anomalies"),
    ]
    meta_rows = []
    channel_sum = np.zeros(3)
    channel_sq = np.zeros(3)
    n_px = 0
    for split, kind, count, img_rel, mask_rel in plan:
        img_dir = out / img_rel
        img_dir.mkdir(parents=True, exist_ok=True)
        if mask_rel:
            (out / mask_rel).mkdir(parents=True, exist_ok=True)
        for i in range(count):
            img, mask, meta = make_sample(spec, split, i, kind)
            name = f"{i:06d}.png"
            img.save(img_dir / name)
            mask_path = None
            if mask is not None:
                mask_path = f"{mask_rel}/{i:06d}_mask.png"
                Image.fromarray(mask, mode="L").save(out / mask_path)
            if split == "train":
                arr = np.asarray(img, dtype=np.float64) / 255.0
                channel_sum += arr.sum(axis=(0, 1))
                channel_sq += (arr * arr).sum(axis=(0, 1))
                n_px += arr.shape[0] * arr.shape[1]
            meta_rows.append({
                "split": split, "index": i, "path": f"{img_rel}/{name}",
                "mask": mask_path, **meta,
            })
    mean = channel_sum / n_px
    std = np.sqrt(np.maximum(channel_sq / n_px - mean * mean, 1e-12))
    with open(out / "stats.json", "w") as fh:
        json.dump({"mean": mean.tolist(), "std": std.tolist()}, fh, indent=2)
    with open(out / "meta.jsonl", "w") as fh:
        for row in meta_rows:
            fh.write(json.dumps(row) + "\n")
    with open(out / "spec.json", "w") as fh:
        json.dump(spec_to_dict(spec), fh, indent=2)
    return out


def spec_to_dict(spec: LogicShapesSpec) -> dict:
    return {
        "canvas": spec.canvas, "grid": list(spec.grid),
        "vocabulary": [list(v) for v in spec.vocabulary],
        "rules": [r.to_dict() for r in spec.rules],
        "n_train": spec.n_train, "n_test_normal": spec.n_test_normal,
        "n_test_structural": spec.n_test_structural,
        "n_test_logical": spec.n_test_logical, "seed": spec.seed,
        "placement": spec.placement,
        "shared_shape_color": spec.shared_shape_color,
        "fill_free_cells": spec.fill_free_cells,
    }


def spec_from_dict(data: dict) -> LogicShapesSpec:
    known = {"canvas", "grid", "vocabulary", "rules", "n_train", "n_test_normal",
             "n_test_structural", "n_test_logical", "seed", "placement",
             "shared_shape_color", "fill_free_cells"}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"LogicShapesSpec: unknown keys {unknown}")
    return LogicShapesSpec(**data)


# ---------------------------------------------------------------------------
# Folder loading (MVTec-style layout) and preprocessing


@dataclass
class SampleRecord:
    image_path: Path
    mask_path: Path | None
    kind: str  # normal | structural | logical
    label: int  # 0 normal, 1 anomalous

    @property
    def is_anomalous(self) -> bool:
        return self.label == 1


@dataclass
class FolderDataset:
    root: Path
    train: list[SampleRecord]
    test: list[SampleRecord]
    stats: dict | None = None  # channel mean/std from stats.json if present


_IMG_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


def _list_images(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir()
                  if p.suffix.lower() in _IMG_SUFFIXES)


def load_folder_dataset(root: str | Path) -> FolderDataset:
    """Read an MVTec-layout tree into train/test sample records."""
    root = Path(root)
    if not root.is_dir():
        raise MissingInputError(f"dataset root not found: {root}")
    train = []
    train_good = root / "train" / "good"
    if train_good.is_dir():
        train = [SampleRecord(p, None, "normal", 0) for p in _list_images(train_good)]

    test: list[SampleRecord] = []
    missing_masks: list[str] = []
    test_dir = root / "test"
    if test_dir.is_dir():
        for sub in sorted(p for p in test_dir.iterdir() if p.is_dir()):
            for img in _list_images(sub):
                if sub.name == "good":
                    test.append(SampleRecord(img, None, "normal", 0))
                    continue
                kind = "logical" if "logical" in sub.name else "structural"
                mask = root / "ground_truth" / sub.name / f"{img.stem}_mask{img.suffix}"
                if not mask.is_file():
                    candidates = list((root / "ground_truth" / sub.name).glob(f"{img.stem}_mask.*")) \
                        if (root / "ground_truth" / sub.name).is_dir() else []
                    if candidates:
                        mask = candidates[0]
                    else:
                        missing_masks.append(str(img))
                        continue
                test.append(SampleRecord(img, mask, kind, 1))
    if missing_masks:
        raise MissingInputError(
            "anomalous test images without ground-truth masks: "
            + ", ".join(missing_masks)
        )
    stats = None
    stats_path = root / "stats.json"
    if stats_path.is_file():
        stats = json.loads(stats_path.read_text())
    return FolderDataset(root=root, train=train, test=test, stats=stats)


def resolve_norm_constants(mode: str, dataset: FolderDataset | None = None,
                           mean=None, std=None) -> tuple[tuple, tuple]:
    """Pick normalization constants: explicit > dataset stats > imagenet > none."""
    if mean is not None and std is not None:
        return tuple(mean), tuple(std)
    if mode == "auto":
        mode = "dataset" if dataset is not None and dataset.stats is not None else "imagenet"
    if mode == "dataset":
        if dataset is None or dataset.stats is None:
            raise MissingInputError("normalization 'dataset' needs a stats.json")
        return tuple(dataset.stats["mean"]), tuple(dataset.stats["std"])
    if mode == "imagenet":
        return IMAGENET_MEAN, IMAGENET_STD
    if mode == "none":
        return (0.0, 0.0, 0.0), (1.0, 1.0, 1.0)
    raise ConfigError(f"unknown normalization mode {mode!r}")


def preprocess(image: str | Path | Image.Image, resolution: int,
               mean=IMAGENET_MEAN, std=IMAGENET_STD) -> torch.Tensor:
    """Decode, bilinear-resize, scale to [0,1], and channel-normalize."""
    if not isinstance(image, Image.Image):
        path = Path(image)
        if not path.is_file():
            raise MissingInputError(f"image not found: {path}")
        try:
            image = Image.open(path)
            image.load()
        except Exception as exc:
            raise MissingInputError(f"cannot decode image: {path}") from exc
    image = image.convert("RGB")
    if image.size != (resolution, resolution):
        image = image.resize((resolution, resolution), Image.BILINEAR)
    arr = np.asarray(image, dtype=np.float32) / 255.0
    arr = (arr - np.asarray(mean, dtype=np.float32)) / np.asarray(std, dtype=np.float32)
    return torch.from_numpy(arr.transpose(2, 0, 1).copy())


def preprocess_mask(mask: str | Path | Image.Image | None, resolution: int) -> torch.Tensor:
    """Nearest-neighbor resize; output stays strictly binary {0,1}."""
    if mask is None:
        return torch.zeros(resolution, resolution)
    if not isinstance(mask, Image.Image):
        path = Path(mask)
        if not path.is_file():
            raise MissingInputError(f"mask not found: {path}")
        mask = Image.open(path)
    mask = mask.convert("L")
    if mask.size != (resolution, resolution):
        mask = mask.resize((resolution, resolution), Image.NEAREST)
    arr = (np.asarray(mask) > 0).astype(np.float32)
    return torch.from_numpy(arr)


def load_image_stack(records: list[SampleRecord], resolution: int,
                     mean, std) -> torch.Tensor:
    """Preprocess a list of records into one N x 3 x H x W tensor."""
    if not records:
        raise MissingInputError("no samples to load")
    return torch.stack([preprocess(r.image_path, resolution, mean, std)
                        for r in records])
