"""Synthetic shape scenes, referring expressions, and JSON-lines manifests.

A scene is a flat-colored canvas holding 1-5 shapes. Each sample picks one
object as the referent and describes it with color/size/shape words plus, in
the ``loc`` flavor, a spatial word when appearance alone is ambiguous. The
``app`` flavor never uses spatial words.
"""
from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .geometry import BoxXYWH, iou
from .grounder import AttributeVocab
from .text import tokenize

log = logging.getLogger(__name__)

SHAPES = ("circle", "square", "triangle")
COLORS = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.75, 0.2),
    "blue": (0.1, 0.2, 0.9),
    "yellow": (0.95, 0.9, 0.1),
    "white": (1.0, 1.0, 1.0),
    "black": (0.0, 0.0, 0.0),
}
SIZES = ("small", "large")
BACKGROUND = (0.5, 0.5, 0.5)
SPATIAL_WORDS = ("left", "right", "top", "bottom", "middle", "leftmost", "rightmost", "second")
SPLITS = ("train", "val", "test")


class SceneGenerationError(RuntimeError):
    pass


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    size: str
    x: int
    y: int
    extent: int

    @property
    def box(self) -> BoxXYWH:
        return BoxXYWH(self.x, self.y, self.extent, self.extent)

    @property
    def cx(self) -> float:
        return self.x + 0.5 * self.extent

    @property
    def cy(self) -> float:
        return self.y + 0.5 * self.extent


@dataclass(frozen=True)
class SceneSpec:
    canvas: int
    objects: tuple[SceneObject, ...]

    def to_dict(self) -> dict:
        return {"canvas": self.canvas, "objects": [asdict(o) for o in self.objects]}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(int(d["canvas"]), tuple(SceneObject(**o) for o in d["objects"]))


@dataclass(frozen=True)
class SceneConfig:
    canvas: int = 64
    min_objects: int = 1
    max_objects: int = 5
    small: tuple[int, int] = (10, 14)
    large: tuple[int, int] = (18, 24)
    max_overlap: float = 0.1
    # chance that a new object copies the color and shape of an earlier one
    twin_prob: float = 0.35
    flavor: str = "loc"
    expressions_per_referent: int = 2
    # referents drawn from each scene; 0 takes every describable object
    referents_per_scene: int = 1
    # minimum center gap in pixels for a spatial word to be used
    spatial_margin: float = 4.0

    def __post_init__(self) -> None:
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")
        if self.flavor not in ("loc", "app"):
            raise ValueError(f"unknown dataset flavor {self.flavor!r}")
        if self.large[1] > self.canvas:
            raise ValueError("objects larger than the canvas")
        if self.expressions_per_referent < 1:
            raise ValueError("expressions_per_referent must be >= 1")
        if self.referents_per_scene < 0:
            raise ValueError("referents_per_scene must be >= 0")


def generate_scene(seed: int | Sequence[int] | np.random.Generator, config: SceneConfig = SceneConfig()) -> SceneSpec:
    """Rejection-sample a scene; deterministic per seed."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n = int(rng.integers(config.min_objects, config.max_objects + 1))
    objects: list[SceneObject] = []
    attempts = 0
    while len(objects) < n:
        attempts += 1
        if attempts > 1000:
            raise SceneGenerationError(f"could not place {n} objects on a {config.canvas}px canvas")
        if objects and rng.random() < config.twin_prob:
            twin = objects[int(rng.integers(len(objects)))]
            shape, color = twin.shape, twin.color
        else:
            shape = SHAPES[int(rng.integers(len(SHAPES)))]
            color = list(COLORS)[int(rng.integers(len(COLORS)))]
        size = SIZES[int(rng.integers(len(SIZES)))]
        lo, hi = config.small if size == "small" else config.large
        extent = int(rng.integers(lo, hi + 1))
        x = int(rng.integers(0, config.canvas - extent + 1))
        y = int(rng.integers(0, config.canvas - extent + 1))
        cand = SceneObject(shape, color, size, x, y, extent)
        if all(iou(cand.box, o.box) < config.max_overlap for o in objects):
            objects.append(cand)
    return SceneSpec(config.canvas, tuple(objects))


def render(scene: SceneSpec) -> np.ndarray:
    """Rasterize to a (p, p, 3) float32 array in [0, 1]; no anti-aliasing."""
    p = scene.canvas
    img = np.empty((p, p, 3), dtype=np.float32)
    img[:] = BACKGROUND
    # pixel centers
    py, px = np.mgrid[0:p, 0:p] + 0.5
    for obj in scene.objects:
        e = obj.extent
        if obj.shape == "square":
            mask = (px >= obj.x) & (px < obj.x + e) & (py >= obj.y) & (py < obj.y + e)
        elif obj.shape == "circle":
            mask = (px - obj.cx) ** 2 + (py - obj.cy) ** 2 <= (0.5 * e) ** 2
        elif obj.shape == "triangle":
            # apex at top-center, base along the bottom edge
            depth = py - obj.y
            mask = (depth >= 0) & (depth <= e) & (np.abs(px - obj.cx) <= 0.5 * depth)
        else:
            raise ValueError(f"unknown shape {obj.shape!r}")
        img[mask] = COLORS[obj.color]
    return img


# -- expressions ------------------------------------------------------------


@dataclass(frozen=True)
class Description:
    color: str
    shape: str
    size: str | None = None
    spatial: str | None = None

    def text(self, article: bool = False) -> str:
        words = ["the"] if article else []
        if self.spatial:
            words.append(self.spatial)
        if self.size:
            words.append(self.size)
        words += [self.color, self.shape]
        if self.spatial == "second":
            words += ["from", "left"]
        return " ".join(words)

    @property
    def attributes(self) -> tuple[str, ...]:
        return tuple(w for w in (self.color, self.size) if w)


def parse_expression(expression: str) -> Description:
    """Recover the predicates from an expression produced by the grammar."""
    words = [w for w in tokenize(expression) if w != "the"]
    color = next((w for w in words if w in COLORS), None)
    shape = next((w for w in words if w in SHAPES), None)
    if color is None or shape is None:
        raise ValueError(f"expression lacks a color or shape word: {expression!r}")
    size = next((w for w in words if w in SIZES), None)
    spatial = "second" if "second" in words else next((w for w in words if w in SPATIAL_WORDS), None)
    return Description(color, shape, size, spatial)


def _extreme(values: list[float], pick: str) -> list[int]:
    if pick == "min":
        best = min(values)
    elif pick == "max":
        best = max(values)
    else:
        raise ValueError(pick)
    return [i for i, v in enumerate(values) if v == best]


def select(scene: SceneSpec, desc: Description) -> list[int]:
    """Brute-force evaluation of a description; returns indices of every match."""
    cand = [
        i
        for i, o in enumerate(scene.objects)
        if o.color == desc.color and o.shape == desc.shape and (desc.size is None or o.size == desc.size)
    ]
    if desc.spatial is None or not cand:
        return cand
    xs = [scene.objects[i].cx for i in cand]
    ys = [scene.objects[i].cy for i in cand]
    s = desc.spatial
    if s in ("left", "leftmost"):
        picked = _extreme(xs, "min")
    elif s in ("right", "rightmost"):
        picked = _extreme(xs, "max")
    elif s == "top":
        picked = _extreme(ys, "min")
    elif s == "bottom":
        picked = _extreme(ys, "max")
    elif s in ("middle", "second"):
        order = sorted(set(xs))
        if s == "middle":
            if len(cand) % 2 == 0 or len(order) != len(xs):
                return []
            target = order[len(order) // 2]
        else:
            if len(order) < 2:
                return []
            target = order[1]
        picked = [i for i, v in enumerate(xs) if v == target]
    else:
        raise ValueError(f"unknown spatial word {s!r}")
    return [cand[i] for i in picked]


def _spatial_options(scene: SceneSpec, cand: list[int], target: int, margin: float) -> list[str]:
    """Spatial words that pick ``target`` out of ``cand`` with a clear gap."""
    if len(cand) < 2:
        return []
    objs = scene.objects
    t = objs[target]
    others = [objs[i] for i in cand if i != target]
    xs = sorted(o.cx for o in others)
    opts = []
    if all(o.cx - t.cx >= margin for o in others):
        opts.append("left" if len(cand) == 2 else "leftmost")
    if all(t.cx - o.cx >= margin for o in others):
        opts.append("right" if len(cand) == 2 else "rightmost")
    if all(o.cy - t.cy >= margin for o in others):
        opts.append("top")
    if all(t.cy - o.cy >= margin for o in others):
        opts.append("bottom")
    if len(cand) >= 3:
        below = [x for x in xs if x < t.cx]
        above = [x for x in xs if x > t.cx]
        gaps_ok = all(abs(x - t.cx) >= margin for x in xs)
        if gaps_ok and len(below) == 1:
            opts.append("second")
        if gaps_ok and len(cand) == 3 and len(below) == 1 and len(above) == 1:
            opts.append("middle")
    return opts


def describe(scene: SceneSpec, target: int, config: SceneConfig = SceneConfig()) -> list[Description]:
    """All grammar descriptions that single out ``target``, shortest first."""
    t = scene.objects[target]
    out: list[Description] = []
    for size in (None, t.size):
        base = Description(t.color, t.shape, size)
        cand = select(scene, base)
        if cand == [target]:
            out.append(base)
        elif config.flavor == "loc":
            for word in _spatial_options(scene, cand, target, config.spatial_margin):
                desc = Description(t.color, t.shape, size, word)
                if select(scene, desc) == [target]:
                    out.append(desc)
    return sorted(out, key=lambda d: len(d.text().split()))


def generate_expression(
    scene: SceneSpec, target: int, rng: np.random.Generator, config: SceneConfig = SceneConfig(), k: int = 1
) -> list[tuple[str, tuple[str, ...]]]:
    """Up to ``k`` distinct expressions for the target with their attribute words.

    The first is one of the shortest valid descriptions; further ones vary the
    description or add a leading article.
    """
    if not 0 <= target < len(scene.objects):
        raise IndexError(f"target {target} not in scene")
    descs = describe(scene, target, config)
    if not descs:
        raise SceneGenerationError("no unambiguous description under the grammar")
    shortest = len(descs[0].text().split())
    minimal = [d for d in descs if len(d.text().split()) == shortest]
    first = minimal[int(rng.integers(len(minimal)))]
    variants = [(d, art) for d in descs for art in (False, True) if (d, art) != (first, False)]
    order = rng.permutation(len(variants))
    chosen = [(first, False)] + [variants[i] for i in order[: k - 1]]
    return [(d.text(article=art), d.attributes) for d, art in chosen]


# -- samples and manifests -----------------------------------------------------


def _compact(v: float) -> float | int:
    """Integral coordinates serialize as ints so manifests round-trip byte for byte."""
    return int(v) if float(v).is_integer() else float(v)


@dataclass(frozen=True)
class ReferringSample:
    id: str
    image: str | SceneSpec
    width: int
    height: int
    expression: str
    bbox: BoxXYWH
    attributes: tuple[str, ...] = ()
    split: str = "train"

    def __post_init__(self) -> None:
        if not self.expression.strip():
            raise ValueError(f"sample {self.id}: empty expression")
        b = self.bbox
        if b.x < 0 or b.y < 0 or b.x + b.w > self.width or b.y + b.h > self.height:
            raise ValueError(f"sample {self.id}: box {b.to_list()} outside {self.width}x{self.height}")

    @property
    def image_key(self) -> str:
        if isinstance(self.image, SceneSpec):
            return json.dumps(self.image.to_dict(), sort_keys=True)
        return self.image

    @property
    def referent_key(self) -> tuple[str, tuple[float, ...]]:
        return self.image_key, tuple(self.bbox.to_list())

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "image": self.image.to_dict() if isinstance(self.image, SceneSpec) else self.image,
            "width": self.width,
            "height": self.height,
            "expression": self.expression,
            "bbox": [_compact(v) for v in self.bbox],
            "attributes": list(self.attributes),
            "split": self.split,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "ReferringSample":
        image = rec["image"]
        if isinstance(image, dict):
            image = SceneSpec.from_dict(image)
        elif not isinstance(image, str):
            raise TypeError("image must be a path string or an inline scene")
        return cls(
            id=str(rec["id"]),
            image=image,
            width=int(rec["width"]),
            height=int(rec["height"]),
            expression=str(rec["expression"]),
            bbox=BoxXYWH.from_seq(rec["bbox"]),
            attributes=tuple(rec.get("attributes", ())),
            split=str(rec.get("split", "train")),
        )


@dataclass
class DatasetManifest:
    samples: list[ReferringSample]
    config: dict = field(default_factory=dict)
    seed: int | None = None
    rejected: int = 0

    def __post_init__(self) -> None:
        ids = [s.id for s in self.samples]
        if len(ids) != len(set(ids)):
            raise ManifestError("duplicate sample ids")

    def split(self, name: str) -> list[ReferringSample]:
        return [s for s in self.samples if s.split == name]

    def __len__(self) -> int:
        return len(self.samples)

    def lines(self) -> Iterator[str]:
        yield json.dumps({"header": {"config": self.config, "seed": self.seed}}, sort_keys=True)
        for s in self.samples:
            yield json.dumps(s.to_record(), sort_keys=True)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(line + "\n" for line in self.lines()))


def export_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    manifest.save(path)


def import_refcoco_style(path: str | Path) -> DatasetManifest:
    """Load and validate a JSON-lines annotation file.

    Malformed lines raise :class:`ManifestError` naming the line number. Boxes
    outside their declared image are dropped and counted in ``rejected``.
    """
    samples: list[ReferringSample] = []
    config: dict = {}
    seed = None
    rejected = 0
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as err:
                raise ManifestError(f"line {lineno}: invalid JSON ({err.msg})") from None
            if not isinstance(rec, dict):
                raise ManifestError(f"line {lineno}: expected a JSON object")
            if "header" in rec:
                config = rec["header"].get("config", {})
                seed = rec["header"].get("seed")
                continue
            missing = {"id", "image", "width", "height", "expression", "bbox"} - rec.keys()
            if missing:
                raise ManifestError(f"line {lineno}: missing keys {sorted(missing)}")
            if not isinstance(rec["bbox"], list) or len(rec["bbox"]) != 4:
                raise ManifestError(f"line {lineno}: bbox must be a list of 4 numbers")
            if rec.get("split", "train") not in SPLITS:
                raise ManifestError(f"line {lineno}: unknown split {rec['split']!r}")
            try:
                bbox = BoxXYWH.from_seq(rec["bbox"])
                w, h = int(rec["width"]), int(rec["height"])
            except (TypeError, ValueError) as err:
                raise ManifestError(f"line {lineno}: {err}") from None
            if bbox.x < 0 or bbox.y < 0 or bbox.x + bbox.w > w or bbox.y + bbox.h > h:
                rejected += 1
                continue
            try:
                samples.append(ReferringSample.from_record(rec))
            except (TypeError, ValueError, KeyError) as err:
                raise ManifestError(f"line {lineno}: {err}") from None
    if rejected:
        log.warning("%s: rejected %d samples with out-of-bounds boxes", path, rejected)
    try:
        return DatasetManifest(samples, config, seed, rejected)
    except ManifestError as err:
        raise ManifestError(f"{path}: {err}") from None


def make_sample(
    rng: np.random.Generator, config: SceneConfig, split: str, index: int
) -> list[ReferringSample]:
    """One scene and the samples of its referents.

    Each referent gets up to ``expressions_per_referent`` expressions. With a
    single referent per scene ids read ``split-index-j``; otherwise the object
    index is inserted, ``split-index-o<k>-j``.
    """
    for _ in range(100):
        scene = generate_scene(rng, config)
        n = len(scene.objects)
        if config.referents_per_scene == 1:
            targets = [int(rng.integers(n))]
        else:
            targets = sorted(int(i) for i in rng.permutation(n)[: config.referents_per_scene or n])
        samples: list[ReferringSample] = []
        for target in targets:
            try:
                exprs = generate_expression(scene, target, rng, config, config.expressions_per_referent)
            except SceneGenerationError:
                continue
            box = scene.objects[target].box
            stem = f"{split}-{index:05d}" + ("" if config.referents_per_scene == 1 else f"-o{target}")
            samples += [
                ReferringSample(f"{stem}-{j}", scene, config.canvas, config.canvas, text, box, attrs, split)
                for j, (text, attrs) in enumerate(exprs)
            ]
        if samples:
            return samples
    raise SceneGenerationError(f"no describable scene for {split}/{index} after 100 tries")


def generate_dataset(
    seed: int, config: SceneConfig = SceneConfig(), counts: dict[str, int] | None = None
) -> DatasetManifest:
    """Deterministic in ``(seed, config, counts)``; each scene gets its own RNG stream."""
    counts = counts or {"train": 2000, "val": 300, "test": 300}
    samples: list[ReferringSample] = []
    for split_no, split in enumerate(SPLITS):
        for i in range(counts.get(split, 0)):
            rng = np.random.default_rng([seed, split_no, i])
            samples.extend(make_sample(rng, config, split, i))
    meta = {"scene": asdict(config), "counts": dict(counts)}
    return DatasetManifest(samples, json.loads(json.dumps(meta)), seed)


def extract_attribute_vocab(samples: Iterable[ReferringSample], n_attr: int = 50) -> AttributeVocab:
    """Most frequent attribute words (ties broken alphabetically)."""
    if n_attr < 1:
        raise ValueError("n_attr must be >= 1")
    counts = Counter(a for s in samples for a in s.attributes)
    top = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:n_attr]
    if not top:
        raise ValueError("no attribute words in the training samples")
    return AttributeVocab(tuple(w for w, _ in top), tuple(c for _, c in top))


def sample_image(sample: ReferringSample, p: int, root: str | Path | None = None) -> tuple[np.ndarray, BoxXYWH]:
    """(p, p, 3) image for a sample and its box in that frame."""
    if isinstance(sample.image, SceneSpec):
        if sample.image.canvas != p:
            raise ValueError(f"scene canvas {sample.image.canvas} differs from model input {p}")
        return render(sample.image), sample.bbox
    from .image import load_png

    path = Path(sample.image)
    if root is not None and not path.is_absolute():
        path = Path(root) / path
    img, sx, sy = load_png(path, p)
    b = sample.bbox
    box = BoxXYWH(b.x * sx, b.y * sy, b.w * sx, b.h * sy)
    return img, box
