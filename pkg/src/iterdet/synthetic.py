"""Crowded toy scenes: colored shapes with exact full-extent boxes.

Boxes annotate each shape's whole mask before occlusion, so objects hidden
behind later ones keep their true extent.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import BBox, iou, iou_matrix

SCHEMA_VERSION = "toy-crowd-1"
SHAPES = ("disk", "square", "triangle")
CROWDING_THRESHOLDS = (0.3, 0.4, 0.5, 0.6)

_IOU_TOLERANCE = 0.05
_PLACEMENT_TRIES = 50
_MIN_COLOR_GAP = 0.25


class DatasetError(Exception):
    pass


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 64
    objects_min: int = 6
    objects_max: int = 16
    object_size_min: int = 8
    object_size_max: int = 20
    overlap_boost: float = 0.6
    shape_set: tuple = SHAPES
    noise_sigma: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.shape_set, list):
            object.__setattr__(self, "shape_set", tuple(self.shape_set))
        if self.objects_min < 0 or self.objects_max < self.objects_min:
            raise ValueError(f"bad object count range {self.objects_min}..{self.objects_max}")
        if not 2 <= self.object_size_min <= self.object_size_max < self.image_size:
            raise ValueError(
                f"object sizes {self.object_size_min}..{self.object_size_max} must be "
                f">= 2 and smaller than image_size {self.image_size}"
            )
        if not 0.0 <= self.overlap_boost <= 1.0:
            raise ValueError(f"overlap_boost must lie in [0, 1], got {self.overlap_boost}")
        if not self.shape_set or set(self.shape_set) - set(SHAPES):
            raise ValueError(f"shape_set must be a non-empty subset of {SHAPES}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shape_set"] = list(self.shape_set)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown scene config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class PlacedShape:
    shape: str
    x: int  # top-left of the size x size template, image coordinates
    y: int
    size: int
    color: tuple


@dataclass
class SceneSample:
    image: np.ndarray  # [3, H, W] in [0, 1]
    boxes: list
    crowding: dict = field(default_factory=dict)
    objects: list = field(default_factory=list)

    @property
    def width(self) -> int:
        return self.image.shape[2]

    @property
    def height(self) -> int:
        return self.image.shape[1]


def shape_mask(shape: str, size: int) -> np.ndarray:
    """Boolean ``size x size`` template for a shape, indexed ``[row, col]``."""
    r, c = np.mgrid[0:size, 0:size].astype(np.float64)
    mid = (size - 1) / 2.0
    if shape == "square":
        return np.ones((size, size), dtype=bool)
    if shape == "disk":
        rad = size / 2.0
        return (r - mid) ** 2 + (c - mid) ** 2 <= rad * rad - 0.25
    if shape == "triangle":
        # apex on the top row, base on the bottom row
        half = (r + 1.0) / size * (size / 2.0)
        return np.abs(c - mid) <= half
    raise ValueError(f"unknown shape {shape!r}")


def tight_box(mask: np.ndarray, x: float = 0.0, y: float = 0.0) -> BBox:
    """Tight box around the set pixels of ``mask`` placed with top-left at ``(x, y)``."""
    rows = np.nonzero(mask.any(axis=1))[0]
    cols = np.nonzero(mask.any(axis=0))[0]
    return BBox(x + cols[0], y + rows[0], float(cols[-1] - cols[0]), float(rows[-1] - rows[0]))


def _template_box(shape, size, x, y):
    local = _TEMPLATE_BOXES.get((shape, size))
    if local is None:
        local = tight_box(shape_mask(shape, size))
        _TEMPLATE_BOXES[(shape, size)] = local
    return BBox(x + local.x, y + local.y, local.w, local.h)


_TEMPLATE_BOXES: dict = {}


def _position_range(size, image_size):
    # keeps boxes within [-size/4, image_size + size/4]
    lo = int(np.ceil(-size / 4.0))
    hi = int(np.floor(image_size - 1 + size / 4.0 - (size - 1)))
    return lo, max(lo, hi)


def _pick_color(rng, taken):
    color = None
    for _ in range(100):
        color = rng.uniform(0.15, 1.0, size=3)
        if all(np.abs(color - t).max() >= _MIN_COLOR_GAP for t in taken):
            break
    return tuple(float(v) for v in color)


def crowding_counts(boxes, thresholds=CROWDING_THRESHOLDS) -> dict:
    """Unordered box pairs with IoU above each threshold."""
    out = {f"{t:.1f}": 0 for t in thresholds}
    if len(boxes) < 2:
        return out
    m = iou_matrix(boxes, boxes)
    upper = m[np.triu_indices(len(boxes), k=1)]
    for t in thresholds:
        out[f"{t:.1f}"] = int((upper > t).sum())
    return out


def generate_scene(spec: SceneSpec, rng: np.random.Generator) -> SceneSample:
    size = spec.image_size
    n_obj = int(rng.integers(spec.objects_min, spec.objects_max + 1))
    background = tuple(float(v) for v in rng.uniform(0.0, 0.1, size=3))
    colors = [background]
    placed: list[PlacedShape] = []
    boxes: list[BBox] = []
    for _ in range(n_obj):
        shape = spec.shape_set[int(rng.integers(len(spec.shape_set)))]
        s = int(rng.integers(spec.object_size_min, spec.object_size_max + 1))
        lo, hi = _position_range(s, size)
        pos = None
        if boxes and rng.random() < spec.overlap_boost:
            anchor = boxes[int(rng.integers(len(boxes)))]
            target = rng.uniform(0.3, 0.7)
            for _ in range(_PLACEMENT_TRIES):
                px = int(rng.integers(int(anchor.x) - s + 1, int(anchor.x2)))
                py = int(rng.integers(int(anchor.y) - s + 1, int(anchor.y2)))
                if not (lo <= px <= hi and lo <= py <= hi):
                    continue
                if abs(iou(_template_box(shape, s, px, py), anchor) - target) <= _IOU_TOLERANCE:
                    pos = (px, py)
                    break
        if pos is None:
            pos = (int(rng.integers(lo, hi + 1)), int(rng.integers(lo, hi + 1)))
        color = _pick_color(rng, colors)
        colors.append(color)
        placed.append(PlacedShape(shape, pos[0], pos[1], s, color))
        boxes.append(_template_box(shape, s, *pos))

    image = np.empty((3, size, size))
    image[:] = np.asarray(background)[:, None, None]
    for obj in placed:  # later objects occlude earlier ones
        mask = shape_mask(obj.shape, obj.size)
        x0, y0 = max(obj.x, 0), max(obj.y, 0)
        x1, y1 = min(obj.x + obj.size, size), min(obj.y + obj.size, size)
        if x0 >= x1 or y0 >= y1:
            continue
        sub = mask[y0 - obj.y:y1 - obj.y, x0 - obj.x:x1 - obj.x]
        for ch in range(3):
            region = image[ch, y0:y1, x0:x1]
            region[sub] = obj.color[ch]
    if spec.noise_sigma > 0:
        image += rng.normal(0.0, spec.noise_sigma, size=image.shape)
    np.clip(image, 0.0, 1.0, out=image)
    return SceneSample(image, boxes, crowding_counts(boxes), placed)


def scene_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for scene ``index`` under dataset seed ``seed``."""
    return np.random.default_rng([int(seed), int(index)])


def _generate_one(args):
    spec, seed, index = args
    return generate_scene(spec, scene_rng(seed, index))


def generate_dataset(spec: SceneSpec, n_scenes: int, seed: int | None = None, start: int = 0,
                     jobs: int = 1) -> list[SceneSample]:
    """Scenes ``start .. start + n_scenes - 1`` of the stream for ``seed``.

    Scene ``i`` depends only on ``(spec, seed, i)``, so disjoint index ranges
    give disjoint, reproducible splits regardless of ``jobs``.
    """
    if n_scenes < 1:
        raise ValueError("n_scenes must be at least 1")
    seed = spec.seed if seed is None else seed
    work = [(spec, seed, i) for i in range(start, start + n_scenes)]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_generate_one, work, chunksize=32))
    return [_generate_one(w) for w in work]


def to_uint8(image: np.ndarray) -> np.ndarray:
    """The 8-bit quantization used on disk: ``round(255 * v)``, as ``[H, W, 3]``."""
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def quantize(image: np.ndarray) -> np.ndarray:
    """``image`` as it reads back after a save/load round trip."""
    return to_uint8(image).transpose(2, 0, 1).astype(np.float64) / 255.0


def read_image(path) -> np.ndarray:
    path = Path(path)
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot read image {path}: {exc}") from exc
    return arr.transpose(2, 0, 1) / 255.0


def save_dataset(samples: list[SceneSample], path) -> Path:
    """Write ``images/*.png`` plus ``annotations.json`` under ``path``."""
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(samples):
        name = f"images/{i:06d}.png"
        Image.fromarray(to_uint8(s.image), mode="RGB").save(root / name, optimize=False)
        entries.append({
            "file": name,
            "width": s.width,
            "height": s.height,
            "boxes": [[b.x, b.y, b.w, b.h] for b in s.boxes],
        })
    ann = root / "annotations.json"
    ann.write_text(json.dumps({"version": SCHEMA_VERSION, "images": entries}, indent=1))
    return ann


def load_dataset(path) -> list[SceneSample]:
    root = Path(path)
    ann = root / "annotations.json" if root.is_dir() else root
    root = ann.parent
    try:
        doc = json.loads(ann.read_text())
    except OSError as exc:
        raise DatasetError(f"cannot read annotations {ann}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DatasetError(f"corrupt annotations {ann}: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("images"), list):
        raise DatasetError(f"{ann}: expected an object with an 'images' list")
    version = doc.get("version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise DatasetError(f"{ann}: unsupported schema version {version!r}")
    out = []
    for k, entry in enumerate(doc["images"]):
        try:
            file, width, height = entry["file"], int(entry["width"]), int(entry["height"])
            boxes = [BBox(*map(float, b)) for b in entry["boxes"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{ann}: malformed entry {k}: {exc}") from exc
        image = read_image(root / file)
        if image.shape[1:] != (height, width):
            raise DatasetError(
                f"{root / file}: image is {image.shape[2]}x{image.shape[1]}, "
                f"annotation says {width}x{height}"
            )
        out.append(SceneSample(image, boxes, crowding_counts(boxes)))
    return out
