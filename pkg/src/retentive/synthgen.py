"""Seeded micro detection benchmark.

Scenes are 64x64 grayscale rasters of glyphs from a fixed 12-class catalogue.
A seed-driven class split separates abundant ("base") classes from scarce
("novel") ones. Three dataset modes:

  base-train  novel instances drawn but left unannotated
  kshot       exactly k annotated instances of every foreground class
  test        every instance annotated

Every artifact is a pure function of (config, seed); per-image sub-seeds make
parallel and serial generation bitwise identical.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from hashlib import sha256
from pathlib import Path

import numpy as np

from .config import DatasetConfig, canonical_json
from .errors import CorruptArtifactError, GenerationError, ParameterError

_SEED_MASK = 0xFFFFFFFFFFFFFFFF
_TAG_SPLIT = 0x531D
_TAG_IMAGE = 0x1A6E
_TAG_SCENE = 0x5CEE
_TAG_COMPOSE = 0xC0DE

INTENSITY_RANGE = (0.55, 1.0)

IMAGES_MAGIC = b"RRIMG001"
IMAGES_VERSION = 1
MANIFEST_VERSION = 1

GLYPH_NAMES = (
    "disk", "square", "ring", "cross", "bars", "triangle",
    "diamond", "checker", "ell", "dots", "saltire", "frame",
)


def _subseed(*keys: int) -> int:
    return int(np.random.SeedSequence([k & _SEED_MASK for k in keys]).generate_state(1, np.uint64)[0])


def _rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([k & _SEED_MASK for k in keys]))


# ---------------------------------------------------------------------------
# class split
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClassSplit:
    """Disjoint base/novel partition with a fixed logit ordering.

    Logit axis is [base..., novel..., background]; the mapping never changes
    within a run.
    """

    num_classes: int
    base_ids: tuple[int, ...]
    novel_ids: tuple[int, ...]

    def __post_init__(self):
        if set(self.base_ids) & set(self.novel_ids):
            raise ParameterError("base and novel ids overlap")
        if sorted(self.base_ids + self.novel_ids) != list(range(self.num_classes)):
            raise ParameterError("base and novel ids must cover all foreground classes")

    @property
    def background_id(self) -> int:
        return self.num_classes

    @property
    def num_base(self) -> int:
        return len(self.base_ids)

    @property
    def num_novel(self) -> int:
        return len(self.novel_ids)

    def logit_order(self) -> tuple[int, ...]:
        return self.base_ids + self.novel_ids + (self.background_id,)

    def logit_index(self, class_id: int) -> int:
        return self.logit_order().index(class_id)

    def class_of_logit(self, index: int) -> int:
        return self.logit_order()[index]

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "base_ids": list(self.base_ids),
            "novel_ids": list(self.novel_ids),
        }

    @staticmethod
    def from_dict(d: dict) -> "ClassSplit":
        return ClassSplit(int(d["num_classes"]), tuple(d["base_ids"]), tuple(d["novel_ids"]))


def split_classes(num_classes: int, num_novel: int, seed: int) -> ClassSplit:
    """Seed-driven choice of which classes are scarce."""
    if not 0 < num_novel < num_classes:
        raise ParameterError(f"need 0 < num_novel < num_classes, got {num_novel}/{num_classes}")
    rng = _rng(seed, _TAG_SPLIT)
    novel = sorted(int(c) for c in rng.choice(num_classes, size=num_novel, replace=False))
    base = sorted(set(range(num_classes)) - set(novel))
    return ClassSplit(num_classes, tuple(base), tuple(novel))


# ---------------------------------------------------------------------------
# glyph catalogue
# ---------------------------------------------------------------------------

def glyph_stamp(class_id: int, size: int) -> np.ndarray:
    """Binary (size, size) raster of one glyph, evaluated at pixel centers."""
    if not 0 <= class_id < len(GLYPH_NAMES):
        raise ParameterError(f"unknown glyph class {class_id}")
    if size < 6:
        raise ParameterError(f"glyph size must be >= 6, got {size}")
    c = (np.arange(size) + 0.5) / size
    u, v = np.meshgrid(c, c, indexing="xy")  # u: column coord, v: row coord
    name = GLYPH_NAMES[class_id]
    r2 = (u - 0.5) ** 2 + (v - 0.5) ** 2
    if name == "disk":
        mask = r2 <= 0.25
    elif name == "square":
        mask = np.ones_like(u, dtype=bool)
    elif name == "ring":
        mask = (r2 <= 0.25) & (r2 >= 0.25 * 0.25)
    elif name == "cross":
        mask = (np.abs(u - 0.5) <= 0.16) | (np.abs(v - 0.5) <= 0.16)
    elif name == "bars":
        mask = (v <= 0.2) | ((v >= 0.4) & (v <= 0.6)) | (v >= 0.8)
    elif name == "triangle":
        mask = v >= np.abs(2.0 * u - 1.0)
    elif name == "diamond":
        mask = np.abs(u - 0.5) + np.abs(v - 0.5) <= 0.5
    elif name == "checker":
        mask = (np.floor(u * 4) + np.floor(v * 4)) % 2 == 0
    elif name == "ell":
        mask = (u <= 0.35) | (v >= 0.65)
    elif name == "dots":
        mask = np.zeros_like(u, dtype=bool)
        for du, dv in ((0.16, 0.16), (0.84, 0.16), (0.16, 0.84), (0.84, 0.84), (0.5, 0.5)):
            mask |= (u - du) ** 2 + (v - dv) ** 2 <= 0.16 ** 2
    elif name == "saltire":
        mask = (np.abs(u - v) <= 0.12) | (np.abs(u + v - 1.0) <= 0.12)
    else:  # frame
        mask = np.minimum(np.minimum(u, 1.0 - u), np.minimum(v, 1.0 - v)) <= 0.12
    stamp = mask.astype(np.float64)
    # crop to the occupied rows/columns so the placement box is always tight
    rows = np.flatnonzero(stamp.any(axis=1))
    cols = np.flatnonzero(stamp.any(axis=0))
    return np.ascontiguousarray(stamp[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1])


# ---------------------------------------------------------------------------
# scenes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class InstanceSpec:
    """One requested glyph; unset fields are drawn from the scene seed."""

    class_id: int
    size: int | None = None
    center: tuple[float, float] | None = None
    intensity: float | None = None


@dataclass(frozen=True)
class SceneSpec:
    side: int
    instances: tuple[InstanceSpec, ...]
    size_range: tuple[int, int] = (12, 28)
    overlap_iou_cap: float = 0.3
    placement_retries: int = 50
    noise: float = 0.0


@dataclass
class GroundTruth:
    boxes: np.ndarray      # (M, 4) float64 pixel corners
    labels: np.ndarray     # (M,) int64 foreground class ids
    annotated: np.ndarray  # (M,) bool


def _pairwise_iou_ok(box, others, cap: float) -> bool:
    from .tensorops import iou

    return all(iou(box, other) <= cap for other in others)


def render_scene(spec: SceneSpec, seed: int) -> tuple[np.ndarray, GroundTruth]:
    """Rasterize a scene; pure function of (spec, seed)."""
    rng = _rng(seed, _TAG_SCENE)
    side = spec.side
    canvas = np.zeros((side, side))
    boxes: list[tuple[float, float, float, float]] = []
    labels: list[int] = []
    for inst in spec.instances:
        size = inst.size if inst.size is not None else int(rng.integers(spec.size_range[0], spec.size_range[1] + 1))
        intensity = inst.intensity if inst.intensity is not None else float(rng.uniform(*INTENSITY_RANGE))
        stamp = glyph_stamp(inst.class_id, size)
        h, w = stamp.shape
        if h > side or w > side:
            raise GenerationError(f"glyph of size {size} does not fit a {side}px scene")
        if inst.center is not None:
            x0 = int(round(inst.center[0] - w / 2.0))
            y0 = int(round(inst.center[1] - h / 2.0))
            x0 = min(max(x0, 0), side - w)
            y0 = min(max(y0, 0), side - h)
        else:
            for attempt in range(spec.placement_retries + 1):
                if attempt == spec.placement_retries:
                    raise GenerationError(
                        f"could not place a size-{size} glyph below IoU cap "
                        f"{spec.overlap_iou_cap} in {spec.placement_retries} tries"
                    )
                x0 = int(rng.integers(0, side - w + 1))
                y0 = int(rng.integers(0, side - h + 1))
                if _pairwise_iou_ok((x0, y0, x0 + w, y0 + h), boxes, spec.overlap_iou_cap):
                    break
        region = canvas[y0:y0 + h, x0:x0 + w]
        np.maximum(region, stamp * intensity, out=region)
        boxes.append((float(x0), float(y0), float(x0 + w), float(y0 + h)))
        labels.append(inst.class_id)
    if spec.noise > 0.0:
        canvas = np.clip(canvas + rng.uniform(0.0, spec.noise, size=canvas.shape), 0.0, 1.0)
    gt = GroundTruth(
        boxes=np.asarray(boxes, dtype=np.float64).reshape(-1, 4),
        labels=np.asarray(labels, dtype=np.int64),
        annotated=np.ones(len(labels), dtype=bool),
    )
    return canvas, gt


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass
class SceneRecord:
    seed: int
    gt: GroundTruth


@dataclass
class Dataset:
    split: ClassSplit
    mode: str  # base-train | kshot | test
    k: int | None
    seed: int
    side: int
    images: list[np.ndarray]
    records: list[SceneRecord]

    def __len__(self) -> int:
        return len(self.images)

    def manifest_dict(self) -> dict:
        return {
            "version": MANIFEST_VERSION,
            "mode": self.mode,
            "k": self.k,
            "seed": self.seed,
            "side": self.side,
            "split": self.split.to_dict(),
            "items": [
                {
                    "seed": rec.seed,
                    "boxes": [[float(v) for v in row] for row in rec.gt.boxes],
                    "labels": [int(v) for v in rec.gt.labels],
                    "annotated": [bool(v) for v in rec.gt.annotated],
                }
                for rec in self.records
            ],
        }

    def digest(self) -> str:
        h = sha256(canonical_json(self.manifest_dict()).encode("utf-8"))
        for img in self.images:
            h.update(np.ascontiguousarray(img, dtype=np.float64).tobytes())
        return h.hexdigest()


def _scene_spec(cfg: DatasetConfig, instances: tuple[InstanceSpec, ...]) -> SceneSpec:
    return SceneSpec(
        side=cfg.image_side,
        instances=instances,
        size_range=(cfg.min_glyph, cfg.max_glyph),
        overlap_iou_cap=cfg.overlap_iou_cap,
        placement_retries=cfg.placement_retries,
        noise=cfg.noise,
    )


def _mixed_scene(cfg: DatasetConfig, split: ClassSplit, image_seed: int) -> tuple[np.ndarray, GroundTruth]:
    """One scene with a seed-driven base/novel class mix."""
    rng = _rng(image_seed, _TAG_COMPOSE)
    count = int(rng.integers(cfg.min_instances, cfg.max_instances + 1))
    classes = []
    for _ in range(count):
        if rng.random() < cfg.novel_frequency:
            classes.append(int(rng.choice(split.novel_ids)))
        else:
            classes.append(int(rng.choice(split.base_ids)))
    spec = _scene_spec(cfg, tuple(InstanceSpec(class_id=c) for c in classes))
    return render_scene(spec, image_seed)


def build_base_dataset(cfg: DatasetConfig, split: ClassSplit, seed: int,
                       num_images: int | None = None) -> Dataset:
    """Abundant-data stage: novel instances appear but stay unannotated."""
    n = cfg.base_train_images if num_images is None else num_images
    images, records = [], []
    novel_set = set(split.novel_ids)
    for i in range(n):
        image_seed = _subseed(seed, _TAG_IMAGE, i)
        img, gt = _mixed_scene(cfg, split, image_seed)
        gt.annotated = np.asarray([lbl not in novel_set for lbl in gt.labels], dtype=bool)
        images.append(img)
        records.append(SceneRecord(seed=image_seed, gt=gt))
    return Dataset(split=split, mode="base-train", k=None, seed=seed,
                   side=cfg.image_side, images=images, records=records)


def build_test_dataset(cfg: DatasetConfig, split: ClassSplit, seed: int,
                       num_images: int | None = None) -> Dataset:
    """Held-out scenes with every instance annotated."""
    n = cfg.test_images if num_images is None else num_images
    images, records = [], []
    for i in range(n):
        image_seed = _subseed(seed, _TAG_IMAGE, i)
        img, gt = _mixed_scene(cfg, split, image_seed)
        images.append(img)
        records.append(SceneRecord(seed=image_seed, gt=gt))
    return Dataset(split=split, mode="test", k=None, seed=seed,
                   side=cfg.image_side, images=images, records=records)


def build_kshot_dataset(cfg: DatasetConfig, split: ClassSplit, k: int, seed: int) -> Dataset:
    """Balanced adaptation set: exactly k annotated instances per class."""
    if k < 1:
        raise ParameterError(f"k must be >= 1, got {k}")
    rng = _rng(seed, _TAG_COMPOSE)
    pool = [c for c in split.base_ids + split.novel_ids for _ in range(k)]
    order = rng.permutation(len(pool))
    pool = [pool[int(i)] for i in order]
    groups: list[list[int]] = []
    while pool:
        take = int(rng.integers(cfg.min_instances, cfg.max_instances + 1))
        groups.append(pool[:take])
        pool = pool[take:]
    images, records = [], []
    for i, group in enumerate(groups):
        image_seed = _subseed(seed, _TAG_IMAGE, i)
        spec = _scene_spec(cfg, tuple(InstanceSpec(class_id=c) for c in group))
        img, gt = render_scene(spec, image_seed)
        images.append(img)
        records.append(SceneRecord(seed=image_seed, gt=gt))
    return Dataset(split=split, mode="kshot", k=k, seed=seed,
                   side=cfg.image_side, images=images, records=records)


# ---------------------------------------------------------------------------
# on-disk format: manifest.json + images.bin
# ---------------------------------------------------------------------------

def save_dataset(ds: Dataset, dirpath: str | Path) -> str:
    """Write manifest.json and images.bin; returns the dataset digest."""
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    digest = ds.digest()
    manifest = ds.manifest_dict()
    manifest["digest"] = digest
    (dirpath / "manifest.json").write_text(canonical_json(manifest))
    with open(dirpath / "images.bin", "wb") as fh:
        fh.write(IMAGES_MAGIC)
        fh.write(struct.pack("<III", IMAGES_VERSION, ds.side, len(ds.images)))
        for img in ds.images:
            fh.write(np.ascontiguousarray(img, dtype=np.float64).tobytes())
    return digest


def load_dataset(dirpath: str | Path) -> Dataset:
    dirpath = Path(dirpath)
    try:
        manifest = json.loads((dirpath / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CorruptArtifactError(f"cannot read dataset manifest in {dirpath}: {exc}") from exc
    if manifest.get("version") != MANIFEST_VERSION:
        raise CorruptArtifactError(f"unsupported manifest version {manifest.get('version')}")
    blob = (dirpath / "images.bin").read_bytes()
    head = struct.calcsize("<III")
    if blob[:8] != IMAGES_MAGIC:
        raise CorruptArtifactError("bad images.bin magic")
    version, side, count = struct.unpack("<III", blob[8:8 + head])
    if version != IMAGES_VERSION:
        raise CorruptArtifactError(f"unsupported images.bin version {version}")
    frame = side * side * 8
    payload = blob[8 + head:]
    if len(payload) != frame * count:
        raise CorruptArtifactError("images.bin payload length mismatch")
    images = [
        np.frombuffer(payload[i * frame:(i + 1) * frame], dtype=np.float64).reshape(side, side).copy()
        for i in range(count)
    ]
    records = [
        SceneRecord(
            seed=int(item["seed"]),
            gt=GroundTruth(
                boxes=np.asarray(item["boxes"], dtype=np.float64).reshape(-1, 4),
                labels=np.asarray(item["labels"], dtype=np.int64),
                annotated=np.asarray(item["annotated"], dtype=bool),
            ),
        )
        for item in manifest["items"]
    ]
    ds = Dataset(
        split=ClassSplit.from_dict(manifest["split"]),
        mode=manifest["mode"],
        k=manifest["k"],
        seed=int(manifest["seed"]),
        side=side,
        images=images,
        records=records,
    )
    want = manifest.get("digest")
    got = ds.digest()
    if want != got:
        raise CorruptArtifactError(f"dataset digest mismatch: manifest says {want}, payload gives {got}")
    return ds
