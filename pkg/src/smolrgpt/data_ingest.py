"""Conversation records, region-mask codec and the synthetic desk-scale scene generator."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    LengthMismatch,
    MalformedRecord,
    MaskCountMismatch,
    MissingDepth,
    UnsupportedCategory,
)
from .evaluator import NUMBER_WORDS, QuestionType

MASK_TOKEN = "<mask>"
IMAGE_TOKEN = "<image>"
ROLES = ("user", "assistant")


# ---------------------------------------------------------------------------
# region masks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RegionMask:
    """Binary region mask stored as row-major run lengths (zeros first) or a dense bitmap."""

    height: int
    width: int
    counts: tuple[int, ...] | None = None
    bitmap: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.height <= 0 or self.width <= 0:
            raise LengthMismatch(f"mask size must be positive, got {self.height}x{self.width}")
        if (self.counts is None) == (self.bitmap is None):
            raise ValueError("exactly one of counts / bitmap must be given")

    def decode(self) -> np.ndarray:
        return decode_mask(self)

    def canonical(self) -> "RegionMask":
        return encode_mask(decode_mask(self))


def encode_mask(bitmap: np.ndarray) -> RegionMask:
    bitmap = np.asarray(bitmap)
    if bitmap.ndim != 2:
        raise LengthMismatch(f"mask bitmap must be 2-D, got shape {bitmap.shape}")
    flat = bitmap.reshape(-1).astype(bool)
    counts = []
    current = False
    run = 0
    for v in flat:
        if v == current:
            run += 1
        else:
            counts.append(run)
            current = v
            run = 1
    counts.append(run)
    return RegionMask(int(bitmap.shape[0]), int(bitmap.shape[1]), counts=tuple(counts))


def decode_mask(mask: RegionMask) -> np.ndarray:
    """Dense ``uint8`` grid of shape ``(height, width)``."""
    n = mask.height * mask.width
    if mask.bitmap is not None:
        grid = np.asarray(mask.bitmap)
        if grid.shape != (mask.height, mask.width):
            raise LengthMismatch(f"bitmap shape {grid.shape} != ({mask.height}, {mask.width})")
        if not np.isin(grid, (0, 1)).all():
            raise LengthMismatch("bitmap values must be 0 or 1")
        return grid.astype(np.uint8)
    counts = mask.counts
    if any(c < 0 for c in counts):
        raise LengthMismatch("run lengths must be non-negative")
    if sum(counts) != n:
        raise LengthMismatch(f"run lengths sum to {sum(counts)}, expected {n}")
    values = np.arange(len(counts)) % 2
    return np.repeat(values, counts).astype(np.uint8).reshape(mask.height, mask.width)


# ---------------------------------------------------------------------------
# conversation samples
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Turn:
    role: str
    text: str


@dataclass
class ConversationSample:
    sample_id: str
    image: np.ndarray  # H x W x 3 in [0, 1]
    depth: np.ndarray | None  # H x W meters
    masks: list[RegionMask]
    turns: list[Turn]
    category: QuestionType | None = None

    @property
    def n_mask_placeholders(self) -> int:
        return sum(t.text.count(MASK_TOKEN) for t in self.turns if t.role == "user")

    @property
    def has_image(self) -> bool:
        return any(IMAGE_TOKEN in t.text for t in self.turns)


def validate_sample(sample: ConversationSample) -> None:
    sid = sample.sample_id
    if not sample.turns:
        raise MalformedRecord(0, f"sample {sid!r} has no turns")
    for i, turn in enumerate(sample.turns):
        if turn.role != ROLES[i % 2]:
            raise MalformedRecord(0, f"sample {sid!r}: roles must alternate starting with user")
    if any(MASK_TOKEN in t.text for t in sample.turns if t.role == "assistant"):
        raise MalformedRecord(0, f"sample {sid!r}: <mask> is only allowed in user turns")
    n_image = sum(t.text.count(IMAGE_TOKEN) for t in sample.turns)
    if n_image > 1:
        raise MalformedRecord(0, f"sample {sid!r}: at most one <image> placeholder is allowed")
    if n_image == 1 and IMAGE_TOKEN not in sample.turns[0].text:
        raise MalformedRecord(0, f"sample {sid!r}: <image> must be in the first user turn")
    n_placeholders = sample.n_mask_placeholders
    if n_placeholders != len(sample.masks):
        raise MaskCountMismatch(sid, n_placeholders, len(sample.masks))
    if n_placeholders and sample.depth is None:
        raise MissingDepth(sid)
    image = np.asarray(sample.image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise MalformedRecord(0, f"sample {sid!r}: image must be HxWx3, got {image.shape}")
    if not np.isfinite(image).all() or image.min() < 0 or image.max() > 1:
        raise MalformedRecord(0, f"sample {sid!r}: image values must be finite and in [0, 1]")
    if sample.depth is not None:
        depth = np.asarray(sample.depth)
        if depth.shape != image.shape[:2]:
            raise MalformedRecord(0, f"sample {sid!r}: depth shape {depth.shape} != image {image.shape[:2]}")
        if not np.isfinite(depth).all() or depth.min() < 0:
            raise MalformedRecord(0, f"sample {sid!r}: depth must be finite and >= 0")
    for m in sample.masks:
        decode_mask(m)


def _load_array(value, base: Path, *, depth: bool) -> np.ndarray:
    if isinstance(value, str):
        from PIL import Image

        with Image.open(base / value) as img:
            if depth:
                arr = np.asarray(img, dtype=np.float64)
                return arr if arr.ndim == 2 else arr[..., 0]
            return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return np.asarray(value, dtype=np.float64)


def _parse_mask(obj) -> RegionMask:
    h, w = int(obj["h"]), int(obj["w"])
    if "counts" in obj:
        return RegionMask(h, w, counts=tuple(int(c) for c in obj["counts"]))
    return RegionMask(h, w, bitmap=np.asarray(obj["bitmap"], dtype=np.uint8))


def record_to_sample(rec: dict, base: Path = Path(".")) -> ConversationSample:
    category = rec.get("category")
    return ConversationSample(
        sample_id=str(rec["id"]),
        image=_load_array(rec["image"], base, depth=False),
        depth=None if rec.get("depth") is None else _load_array(rec["depth"], base, depth=True),
        masks=[_parse_mask(m) for m in rec.get("masks", [])],
        turns=[Turn(str(t["role"]), str(t["text"])) for t in rec["turns"]],
        category=None if category is None else QuestionType.parse(category),
    )


def sample_to_record(sample: ConversationSample) -> dict:
    masks = []
    for m in sample.masks:
        if m.counts is not None:
            masks.append({"h": m.height, "w": m.width, "counts": list(m.counts)})
        else:
            masks.append({"h": m.height, "w": m.width, "bitmap": np.asarray(m.bitmap).tolist()})
    return {
        "id": sample.sample_id,
        "image": np.asarray(sample.image, dtype=np.float64).tolist(),
        "depth": None if sample.depth is None else np.asarray(sample.depth, dtype=np.float64).tolist(),
        "masks": masks,
        "turns": [{"role": t.role, "text": t.text} for t in sample.turns],
        "category": None if sample.category is None else sample.category.value,
    }


def load_dataset(path: str | Path) -> list[ConversationSample]:
    """Read and validate a line-delimited JSON dataset; order is preserved."""
    path = Path(path)
    base = path.parent
    samples = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                sample = record_to_sample(rec, base)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise MalformedRecord(line_no, f"{type(exc).__name__}: {exc}") from exc
            except OSError as exc:
                raise MalformedRecord(line_no, f"cannot read referenced file: {exc}") from exc
            try:
                validate_sample(sample)
            except MalformedRecord as exc:
                raise MalformedRecord(line_no, exc.reason) from None
            samples.append(sample)
    return samples


def dumps_dataset(samples: Iterable[ConversationSample]) -> str:
    return "".join(json.dumps(sample_to_record(s), separators=(",", ":")) + "\n" for s in samples)


def save_dataset(samples: Iterable[ConversationSample], path: str | Path) -> None:
    Path(path).write_text(dumps_dataset(samples), encoding="utf-8")


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SceneObject:
    top: int
    left: int
    height: int
    width: int
    intensity: float
    depth_m: float

    @property
    def centroid(self) -> tuple[float, float]:
        """(x, y) in pixels, pixel centres at integer coordinates."""
        return (self.left + (self.width - 1) / 2.0, self.top + (self.height - 1) / 2.0)

    def bitmap(self, canvas: tuple[int, int]) -> np.ndarray:
        grid = np.zeros(canvas, dtype=np.uint8)
        grid[self.top:self.top + self.height, self.left:self.left + self.width] = 1
        return grid


@dataclass(frozen=True)
class SceneSpec:
    canvas: tuple[int, int]
    objects: tuple[SceneObject, ...]
    pixels_per_meter: float = 10.0
    seed: int = 0
    background_depth_m: float = 6.0

    def __post_init__(self):
        h, w = self.canvas
        if self.pixels_per_meter <= 0:
            raise ValueError("pixels_per_meter must be positive")
        for o in self.objects:
            if o.top < 0 or o.left < 0 or o.top + o.height > h or o.left + o.width > w:
                raise ValueError(f"object {o} lies outside the {h}x{w} canvas")
        intensities = [o.intensity for o in self.objects]
        if len(set(intensities)) != len(intensities):
            raise ValueError("object intensities must be pairwise distinct")


def render_scene(scene: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Render (rgb, depth).

    Red carries object identity (intensity on a black floor). Green and blue
    are a fixed horizontal / vertical illumination ramp over the whole canvas,
    which lets a position-free patch encoder see absolute location.
    """
    h, w = scene.canvas
    rgb = np.zeros((h, w, 3), dtype=np.float64)
    rgb[..., 1] = (np.arange(w, dtype=np.float64) / max(w - 1, 1))[None, :]
    rgb[..., 2] = (np.arange(h, dtype=np.float64) / max(h - 1, 1))[:, None]
    depth = np.full((h, w), scene.background_depth_m, dtype=np.float64)
    for o in scene.objects:
        rgb[o.top:o.top + o.height, o.left:o.left + o.width, 0] = o.intensity
        depth[o.top:o.top + o.height, o.left:o.left + o.width] = o.depth_m
    return rgb, depth


def centroid_distance_m(a: SceneObject, b: SceneObject, pixels_per_meter: float) -> float:
    (ax, ay), (bx, by) = a.centroid, b.centroid
    return math.hypot(ax - bx, ay - by) / pixels_per_meter


def count_in_region(objects: Sequence[SceneObject], region: np.ndarray) -> int:
    """Number of objects whose centroid pixel (rounded half up) lies inside ``region``."""
    n = 0
    for o in objects:
        x, y = o.centroid
        if region[int(math.floor(y + 0.5)), int(math.floor(x + 0.5))]:
            n += 1
    return n


def _count_words(n: int) -> str:
    word = {v: k for k, v in NUMBER_WORDS.items() if k != "none"}.get(n, str(n))
    noun = "box" if n == 1 else "boxes"
    verb = "is" if n == 1 else "are"
    return f"There {verb} {word} {noun} in that region."


LEFT_RIGHT_TEMPLATES = (
    "From this viewpoint, does the box <mask> appear on the right-hand side of the box <mask>?",
    "Is the box <mask> to the left of the box <mask>?",
)


def left_right_answer(direction: str) -> str:
    return f"The box [Region 0] is on the {direction} of the box [Region 1]."


@dataclass
class GeneratorConfig:
    canvas: tuple[int, int] = (32, 32)
    min_objects: int = 3
    max_objects: int = 5
    min_size: int = 4
    max_size: int = 7
    pixels_per_meter: float = 10.0
    min_dx: float = 4.0  # minimum |x| separation for left/right pairs
    with_image_token: bool = True


def random_scene(rng: np.random.Generator, cfg: GeneratorConfig, seed: int) -> SceneSpec:
    h, w = cfg.canvas
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    occupied = np.zeros((h, w), dtype=bool)
    objects: list[SceneObject] = []
    intensities = rng.permutation(np.linspace(0.3, 1.0, 8))[:n]
    depths = rng.permutation(np.round(np.linspace(1.0, 4.5, 8), 2))[:n]
    attempts = 0
    while len(objects) < n:
        attempts += 1
        if attempts > 10_000:
            raise RuntimeError("could not place scene objects")
        oh = int(rng.integers(cfg.min_size, cfg.max_size + 1))
        ow = int(rng.integers(cfg.min_size, cfg.max_size + 1))
        top = int(rng.integers(0, h - oh + 1))
        left = int(rng.integers(0, w - ow + 1))
        # one pixel of clearance around every object
        t0, t1 = max(top - 1, 0), min(top + oh + 1, h)
        l0, l1 = max(left - 1, 0), min(left + ow + 1, w)
        if occupied[t0:t1, l0:l1].any():
            continue
        occupied[top:top + oh, left:left + ow] = True
        k = len(objects)
        objects.append(SceneObject(top, left, oh, ow, float(intensities[k]), float(depths[k])))
    return SceneSpec(cfg.canvas, tuple(objects), cfg.pixels_per_meter, seed)


def _object_mask(o: SceneObject, canvas) -> RegionMask:
    return encode_mask(o.bitmap(canvas))


def _make_question(rng, scene: SceneSpec, category: QuestionType, cfg: GeneratorConfig):
    """Return (question text, answer text, masks) with ground truth from scene geometry."""
    objs = scene.objects
    canvas = scene.canvas
    if category is QuestionType.LEFT_RIGHT:
        pairs = [
            (i, j)
            for i in range(len(objs))
            for j in range(len(objs))
            if i != j and abs(objs[i].centroid[0] - objs[j].centroid[0]) >= cfg.min_dx
        ]
        if not pairs:
            return None
        i, j = pairs[int(rng.integers(len(pairs)))]
        template = LEFT_RIGHT_TEMPLATES[int(rng.integers(len(LEFT_RIGHT_TEMPLATES)))]
        direction = "left" if objs[i].centroid[0] < objs[j].centroid[0] else "right"
        return template, left_right_answer(direction), [_object_mask(objs[i], canvas), _object_mask(objs[j], canvas)]

    if category is QuestionType.COUNT:
        h, w = canvas
        rh = int(rng.integers(h // 3, h + 1))
        rw = int(rng.integers(w // 3, w + 1))
        top = int(rng.integers(0, h - rh + 1))
        left = int(rng.integers(0, w - rw + 1))
        region = np.zeros(canvas, dtype=np.uint8)
        region[top:top + rh, left:left + rw] = 1
        n = count_in_region(objs, region)
        return "How many boxes are in the region <mask>?", _count_words(n), [encode_mask(region)]

    if category is QuestionType.DISTANCE:
        i, j = (int(v) for v in rng.choice(len(objs), size=2, replace=False))
        d = centroid_distance_m(objs[i], objs[j], scene.pixels_per_meter)
        return (
            "What is the distance between the box <mask> and the box <mask>?",
            f"The distance is {d:.2f} meters.",
            [_object_mask(objs[i], canvas), _object_mask(objs[j], canvas)],
        )

    if category is QuestionType.MULTI_CHOICE:
        k = min(3, len(objs))
        idx = [int(v) for v in rng.choice(len(objs), size=k, replace=False)]
        opts = ", ".join(["<mask>"] * (k - 1)) + " or <mask>"
        best = min(range(k), key=lambda r: objs[idx[r]].depth_m)
        return (
            f"Which of the boxes {opts} is closest to the camera?",
            f"The closest box is [Region {best}].",
            [_object_mask(objs[t], canvas) for t in idx],
        )

    raise UnsupportedCategory(f"unsupported category {category!r}")


def _parse_categories(categories: Iterable[QuestionType]) -> list[QuestionType]:
    cats = set()
    for c in categories:
        if not isinstance(c, QuestionType):
            try:
                c = QuestionType.parse(str(c))
            except ValueError:
                raise UnsupportedCategory(f"unsupported category {c!r}") from None
        cats.add(c)
    if not cats:
        raise ValueError("categories must be non-empty")
    return [q for q in QuestionType if q in cats]


def _qa_sample(sample_id, scene, qa, category, cfg) -> ConversationSample:
    question, answer, masks = qa
    rgb, depth = render_scene(scene)
    if cfg.with_image_token:
        question = "<image>\n" + question
    return ConversationSample(
        sample_id=sample_id,
        image=rgb,
        depth=depth,
        masks=masks,
        turns=[Turn("user", question), Turn("assistant", answer)],
        category=category,
    )


def generate_toy_dataset(
    spec_seed: int,
    n_samples: int,
    categories: Iterable[QuestionType],
    cfg: GeneratorConfig | None = None,
    id_prefix: str = "toy",
) -> list[ConversationSample]:
    """Deterministic synthetic QA samples, one fresh scene each; categories are cycled in canonical order."""
    cfg = cfg or GeneratorConfig()
    order = _parse_categories(categories)
    if n_samples <= 0:
        raise ValueError("n_samples must be positive")
    rng = np.random.default_rng(spec_seed)
    samples = []
    for i in range(n_samples):
        category = order[i % len(order)]
        while True:
            scene = random_scene(rng, cfg, spec_seed)
            qa = _make_question(rng, scene, category, cfg)
            if qa is not None:
                break
        samples.append(_qa_sample(f"{id_prefix}-{spec_seed}-{i:05d}", scene, qa, category, cfg))
    return samples


def generate_scene_dataset(
    spec_seed: int,
    n_scenes: int,
    categories: Iterable[QuestionType],
    cfg: GeneratorConfig | None = None,
    id_prefix: str = "scene",
) -> list[ConversationSample]:
    """Every requested question type asked about each of ``n_scenes`` scenes.

    Returns ``n_scenes * len(categories)`` samples, scene-major.
    """
    cfg = cfg or GeneratorConfig()
    order = _parse_categories(categories)
    if n_scenes <= 0:
        raise ValueError("n_scenes must be positive")
    rng = np.random.default_rng(spec_seed)
    samples = []
    for i in range(n_scenes):
        while True:
            scene = random_scene(rng, cfg, spec_seed)
            qas = [_make_question(rng, scene, c, cfg) for c in order]
            if all(qa is not None for qa in qas):
                break
        for c, qa in zip(order, qas):
            samples.append(_qa_sample(f"{id_prefix}-{spec_seed}-{i:05d}-{c.value}", scene, qa, c, cfg))
    return samples
