"""Dataset indexing, stratified splits, pair construction and preprocessing.

Datasets use the directory-per-class layout::

    root/
      rose/    img001.jpg ...
      tulip/   ...

Pair manifests are JSON lines ``{"anchor": id, "partner": id, "label": 0|1}``
where label 0 means same class. The synthetic generator writes ``boxes.tsv``
with columns ``id class x_min y_min x_max y_max`` (pixel coordinates, max
exclusive).
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image, ImageDraw

from .errors import DataError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp"}

# ImageNet statistics; the pretrained backbone expects them and small-cnn uses
# the same so checkpoints stay interchangeable with the preprocessing.
CHANNEL_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
CHANNEL_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)

SPLITS = ("train", "val", "test")
BOX_MANIFEST = "boxes.tsv"


@dataclass(frozen=True)
class ImageRecord:
    id: str
    path: Path
    class_label: str
    split: str | None = None


@dataclass(frozen=True)
class PairSample:
    anchor: ImageRecord
    partner: ImageRecord
    label: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise DataError(f"pair label must be 0 or 1, got {self.label}")


@dataclass
class PreparedImage:
    pixels: np.ndarray  # float32 [3, H, W]
    source_id: str


@dataclass
class DatasetIndex:
    records: list[ImageRecord]
    warnings: dict[str, str]

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)


def index_dataset(root: str | Path) -> DatasetIndex:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset not found: {root}", code="dataset_not_found")
    records: list[ImageRecord] = []
    warnings: dict[str, str] = {}
    for class_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        n_before = len(records)
        for path in sorted(class_dir.iterdir()):
            if path.suffix.lower() not in IMAGE_SUFFIXES or not path.is_file():
                continue
            try:
                with Image.open(path) as im:
                    im.verify()
            except Exception:
                log.warning("skipping unreadable image %s", path)
                continue
            records.append(ImageRecord(f"{class_dir.name}/{path.name}", path, class_dir.name))
        if len(records) - n_before < 2:
            warnings[class_dir.name] = "insufficient data for pairing"
            log.warning("class %s: insufficient data for pairing", class_dir.name)
    if not records:
        warnings["*"] = "insufficient data for pairing"
    return DatasetIndex(records, warnings)


def by_class(records: Iterable[ImageRecord]) -> dict[str, list[ImageRecord]]:
    groups: dict[str, list[ImageRecord]] = {}
    for r in records:
        groups.setdefault(r.class_label, []).append(r)
    return dict(sorted(groups.items()))


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_counts(n: int, train_fraction: float, val_fraction_of_train: float) -> tuple[int, int, int]:
    """(train, val, test) sizes for a class of ``n`` images.

    The train pool is ``round(n * train_fraction)`` capped at ``n - 1`` so every
    class keeps a test image; validation is carved from the pool and never
    takes its last image.
    """
    pool = min(max(_round_half_up(n * train_fraction), 1), n - 1)
    val = _round_half_up(pool * val_fraction_of_train)
    val = min(val, pool - 1)
    return pool - val, val, n - pool


def stratified_split(records: Sequence[ImageRecord], train_fraction: float,
                     val_fraction_of_train: float, seed: int) -> list[ImageRecord]:
    if not 0.0 < train_fraction < 1.0:
        raise DataError(f"train_fraction must be in (0, 1), got {train_fraction}")
    if not 0.0 <= val_fraction_of_train < 1.0:
        raise DataError(f"val_fraction_of_train must be in [0, 1), got {val_fraction_of_train}")
    rng = np.random.default_rng(seed)
    out: list[ImageRecord] = []
    for name, members in by_class(records).items():
        if len(members) < 2:
            raise DataError(f"cannot stratify class {name}", code="insufficient_data")
        members = sorted(members, key=lambda r: r.id)
        n_train, n_val, _ = split_counts(len(members), train_fraction, val_fraction_of_train)
        order = rng.permutation(len(members))
        for rank, i in enumerate(order):
            split = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
            out.append(replace(members[i], split=split))
    out.sort(key=lambda r: r.id)
    return out


def select_split(records: Iterable[ImageRecord], split: str) -> list[ImageRecord]:
    return [r for r in records if r.split == split]


def build_pairs(records: Sequence[ImageRecord], seed: int) -> list[PairSample]:
    """One same-class and one different-class partner per anchor.

    Partners are drawn uniformly (with reuse across anchors). Anchors are
    visited in id order so the result depends only on the record set and seed.
    """
    records = sorted(records, key=lambda r: r.id)
    splits = {r.split for r in records}
    if len(splits) > 1:
        raise DataError(f"records span several splits: {sorted(map(str, splits))}")
    groups = by_class(records)
    if len(groups) < 2:
        raise DataError("cannot build dissimilar pairs", code="insufficient_data")
    for name, members in groups.items():
        if len(members) < 2:
            raise DataError(f"cannot build similar pairs for class {name}", code="insufficient_data")
    rng = np.random.default_rng(seed)
    pairs: list[PairSample] = []
    for anchor in records:
        same = [r for r in groups[anchor.class_label] if r.id != anchor.id]
        other = [r for r in records if r.class_label != anchor.class_label]
        pairs.append(PairSample(anchor, same[rng.integers(len(same))], 0))
        pairs.append(PairSample(anchor, other[rng.integers(len(other))], 1))
    return pairs


def pairs_by_split(records: Sequence[ImageRecord], seed: int) -> dict[str, list[PairSample]]:
    """Fixed pair sets for train/val/test, built once with per-split seeds
    (seed, seed + 1, seed + 2). Empty splits give empty lists.

    A val split too small to pair (a class with one member) gives an empty
    list with a warning; training then selects on the train pairs.
    """
    out = {}
    for offset, split in enumerate(SPLITS):
        members = select_split(records, split)
        try:
            out[split] = build_pairs(members, seed + offset) if members else []
        except DataError as exc:
            if split != "val" or exc.code != "insufficient_data":
                raise
            log.warning("val split left unpaired: %s", exc)
            out[split] = []
    return out


def write_pair_manifest(pairs: Iterable[PairSample], path: str | Path) -> None:
    with open(path, "w") as fh:
        for p in pairs:
            fh.write(json.dumps({"anchor": p.anchor.id, "partner": p.partner.id,
                                 "label": p.label}) + "\n")


def read_pair_manifest(path: str | Path, records: Iterable[ImageRecord]) -> list[PairSample]:
    lookup = {r.id: r for r in records}
    pairs = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                pairs.append(PairSample(lookup[row["anchor"]], lookup[row["partner"]], int(row["label"])))
    return pairs


def write_split_manifest(records: Iterable[ImageRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["id", "class", "split"])
        for r in records:
            w.writerow([r.id, r.class_label, r.split])


def load_image(path: str | Path) -> Image.Image:
    try:
        with Image.open(path) as im:
            return im.convert("RGB")
    except Exception as exc:
        raise DataError(f"bad image {path}", code="bad_image") from exc


def normalize_pixels(rgb: np.ndarray) -> np.ndarray:
    """uint8 HxWx3 -> standardized float32 3xHxW."""
    x = rgb.astype(np.float32) / 255.0
    x = (x - CHANNEL_MEAN) / CHANNEL_STD
    return np.ascontiguousarray(x.transpose(2, 0, 1))


def denormalize_pixels(pixels: np.ndarray) -> np.ndarray:
    """Inverse of :func:`normalize_pixels`, back to uint8 HxWx3."""
    x = pixels.transpose(1, 2, 0) * CHANNEL_STD + CHANNEL_MEAN
    return np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8)


def resize_rgb(image: Image.Image, image_size: tuple[int, int]) -> Image.Image:
    h, w = image_size
    if image.size == (w, h):
        return image
    return image.resize((w, h), Image.BILINEAR)


def preprocess(path: str | Path, image_size: tuple[int, int], source_id: str | None = None) -> PreparedImage:
    image = resize_rgb(load_image(path), image_size)
    pixels = normalize_pixels(np.asarray(image))
    if not np.all(np.isfinite(pixels)):
        raise DataError(f"bad image {path}", code="bad_image")
    return PreparedImage(pixels, source_id if source_id is not None else str(path))


class ImageCache:
    """Memoises :func:`preprocess` per path; datasets here are desk sized."""

    def __init__(self, image_size: tuple[int, int]):
        self.image_size = tuple(image_size)
        self._cache: dict[Path, np.ndarray] = {}

    def __call__(self, record: ImageRecord) -> np.ndarray:
        key = Path(record.path)
        if key not in self._cache:
            self._cache[key] = preprocess(key, self.image_size, record.id).pixels
        return self._cache[key]


# --- synthetic data -------------------------------------------------------

_COLORS = [(230, 40, 40), (40, 90, 230), (40, 200, 60), (240, 220, 30),
           (200, 40, 220), (30, 210, 220), (250, 140, 20), (250, 250, 250)]
_SHAPES = ["square", "disc", "triangle", "cross", "diamond"]


def synthetic_class_style(k: int) -> tuple[str, tuple[int, int, int]]:
    return _SHAPES[k % len(_SHAPES)], _COLORS[k % len(_COLORS)]


def _draw_object(draw: ImageDraw.ImageDraw, shape: str, box: tuple[int, int, int, int], color) -> None:
    x0, y0, x1, y1 = box
    xe, ye = x1 - 1, y1 - 1  # PIL treats corners as inclusive
    cx, cy = (x0 + xe) / 2, (y0 + ye) / 2
    if shape == "square":
        draw.rectangle([x0, y0, xe, ye], fill=color)
    elif shape == "disc":
        draw.ellipse([x0, y0, xe, ye], fill=color)
    elif shape == "triangle":
        draw.polygon([(cx, y0), (xe, ye), (x0, ye)], fill=color)
    elif shape == "diamond":
        draw.polygon([(cx, y0), (xe, cy), (cx, ye), (x0, cy)], fill=color)
    elif shape == "cross":
        tw, th = max(1, (x1 - x0) // 3), max(1, (y1 - y0) // 3)
        draw.rectangle([x0, y0 + th, xe, ye - th], fill=color)
        draw.rectangle([x0 + tw, y0, xe - tw, ye], fill=color)


def generate_synthetic_dataset(out_root: str | Path, classes: int, per_class: int,
                               image_size: tuple[int, int] = (64, 64), seed: int = 0,
                               noise_level: int = 64, size_range: tuple[float, float] = (0.40, 0.45),
                               color_jitter: int = 0) -> Path:
    """Write a directory-per-class dataset of localized objects on noise.

    Class identity lives only inside the object box (shape and colour); the
    background is per-pixel RGB noise in ``[0, noise_level)``. Object sides are
    drawn from ``size_range`` (fractions of the image side); the default keeps
    every box at or below ~20% of the image area.
    """
    if classes < 2:
        raise DataError("synthetic dataset needs at least 2 classes")
    out_root = Path(out_root)
    try:
        out_root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot write to {out_root}", code="not_writable") from exc
    h, w = image_size
    rng = np.random.default_rng(seed)
    rows = []
    for k in range(classes):
        name = f"class_{k:02d}"
        shape, color = synthetic_class_style(k)
        (out_root / name).mkdir(exist_ok=True)
        for i in range(per_class):
            noise = rng.integers(0, noise_level, size=(h, w, 3), dtype=np.uint8)
            image = Image.fromarray(noise, "RGB")
            bh = int(rng.integers(int(size_range[0] * h), int(size_range[1] * h) + 1))
            bw = int(rng.integers(int(size_range[0] * w), int(size_range[1] * w) + 1))
            y0 = int(rng.integers(0, h - bh + 1))
            x0 = int(rng.integers(0, w - bw + 1))
            jitter = rng.integers(-color_jitter, color_jitter + 1, size=3)
            fill = tuple(int(np.clip(c + j, 0, 255)) for c, j in zip(color, jitter))
            _draw_object(ImageDraw.Draw(image), shape, (x0, y0, x0 + bw, y0 + bh), fill)
            fname = f"{name}_{i:04d}.png"
            image.save(out_root / name / fname, format="PNG")
            rows.append([f"{name}/{fname}", name, x0, y0, x0 + bw, y0 + bh])
    with open(out_root / BOX_MANIFEST, "w", newline="") as fh:
        wr = csv.writer(fh, delimiter="\t", lineterminator="\n")
        wr.writerow(["id", "class", "x_min", "y_min", "x_max", "y_max"])
        wr.writerows(rows)
    return out_root


def read_box_manifest(path: str | Path) -> dict[str, tuple[int, int, int, int]]:
    path = Path(path)
    if path.is_dir():
        path = path / BOX_MANIFEST
    with open(path, newline="") as fh:
        return {row["id"]: (int(row["x_min"]), int(row["y_min"]), int(row["x_max"]), int(row["y_max"]))
                for row in csv.DictReader(fh, delimiter="\t")}
