"""Heatmap-guided dataset refinement.

For each training anchor a random same-class partner is scored; when the
similarity clears the gate, the anchor's factual Grad-CAM map is turned into
a bounding box and the anchor image is replaced by that crop. Anchors that
miss the gate are copied unchanged. The test split is never touched.

The audit manifest ``audit.tsv`` has columns
``anchor partner similarity status x_min y_min x_max y_max`` where status is
``cropped``, ``kept`` (gate missed), ``no_salient_region`` or
``single_member``; box columns are empty unless cropped.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import shutil
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .config import ExperimentConfig
from .data import (ImageCache, ImageRecord, PreparedImage, index_dataset, load_image, normalize_pixels,
                   pairs_by_split, resize_rgb, stratified_split, write_pair_manifest,
                   write_split_manifest)
from .errors import DataError, ExplainError
from .gradcam import FACTUAL, neuron_weights, gradcam_map, normalize_map, upsample
from .metrics import EvaluationReport, evaluate, format_table
from .model import SiameseNetwork, build_model, forward_pair, save_model
from .train import train

log = logging.getLogger(__name__)

AUDIT_MANIFEST = "audit.tsv"


@dataclass(frozen=True)
class BoundingBox:
    x_min: int
    y_min: int
    x_max: int  # exclusive
    y_max: int  # exclusive

    @property
    def width(self) -> int:
        return self.x_max - self.x_min

    @property
    def height(self) -> int:
        return self.y_max - self.y_min

    @property
    def area(self) -> int:
        return self.width * self.height

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


def iou(a, b) -> float:
    ax0, ay0, ax1, ay1 = a.as_tuple() if isinstance(a, BoundingBox) else a
    bx0, by0, bx1, by1 = b.as_tuple() if isinstance(b, BoundingBox) else b
    iw = max(0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union if union else 0.0


def _grow(lo: int, hi: int, target: int, limit: int) -> tuple[int, int]:
    """Widen [lo, hi) to ``target`` around its centre, shifted inside [0, limit)."""
    target = min(target, limit)
    if hi - lo >= target:
        return lo, hi
    centre = (lo + hi) / 2.0
    lo = int(math.floor(centre - target / 2.0))
    lo = min(max(lo, 0), limit - target)
    return lo, lo + target


def bbox_from_heatmap(heatmap: np.ndarray, fraction: float = 0.15,
                      min_area_fraction: float = 0.1) -> BoundingBox:
    """Tight box around the largest 4-connected region with heat >= fraction * max.

    Boxes smaller than ``min_area_fraction`` of the image are grown about the
    region's centre, keeping the region's aspect ratio where the image allows.
    """
    heat = np.asarray(heatmap, dtype=float)
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    peak = float(heat.max()) if heat.size else 0.0
    if peak <= 0.0:
        raise ExplainError("no salient region", code="no_salient_region")
    labels, n = ndimage.label(heat >= fraction * peak)  # default structure is 4-connected
    sizes = np.bincount(labels.ravel())[1:]
    ys, xs = np.nonzero(labels == int(np.argmax(sizes)) + 1)
    x0, x1, y0, y1 = int(xs.min()), int(xs.max()) + 1, int(ys.min()), int(ys.max()) + 1
    H, W = heat.shape
    min_area = math.ceil(min_area_fraction * H * W)
    if (x1 - x0) * (y1 - y0) < min_area:
        scale = math.sqrt(min_area / ((x1 - x0) * (y1 - y0)))
        x0, x1 = _grow(x0, x1, math.ceil((x1 - x0) * scale), W)
        y0, y1 = _grow(y0, y1, math.ceil(min_area / (x1 - x0)), H)
        if (x1 - x0) * (y1 - y0) < min_area:  # height hit the border; widen instead
            x0, x1 = _grow(x0, x1, math.ceil(min_area / (y1 - y0)), W)
    return BoundingBox(x0, y0, x1, y1)


def anchor_heatmap(model: SiameseNetwork, anchor: PreparedImage, partner: PreparedImage,
                   size: tuple[int, int], config: ExperimentConfig) -> tuple[float, np.ndarray]:
    """(d, factual heatmap of the anchor branch normalised at ``size``)."""
    trace = forward_pair(model, anchor, partner, capture=True, layer=config.target_layer)
    alpha = neuron_weights(trace, "a", FACTUAL, target=config.gradcam_target)
    raw = gradcam_map(alpha, trace.activations_a)
    return float(trace.d.detach()), normalize_map(upsample(raw, size))


@dataclass
class AuditRow:
    anchor: str
    partner: str
    similarity: float | None
    status: str
    box: BoundingBox | None = None

    def cells(self) -> list[str]:
        sim = "" if self.similarity is None else f"{self.similarity:.6f}"
        box = [""] * 4 if self.box is None else [str(v) for v in self.box.as_tuple()]
        return [self.anchor, self.partner, sim, self.status, *box]


def _prepared(record: ImageRecord, config: ExperimentConfig) -> tuple[np.ndarray, PreparedImage]:
    source = np.asarray(load_image(record.path))
    pixels = normalize_pixels(np.asarray(resize_rgb(load_image(record.path), config.image_size)))
    return source, PreparedImage(pixels, record.id)


def build_cropped_dataset(model: SiameseNetwork, records: Sequence[ImageRecord], out_root: str | Path,
                          config: ExperimentConfig, seed: int | None = None) -> tuple[Path, list[AuditRow]]:
    """Write the refined copies of ``records`` under ``out_root`` (class/file layout).

    Partners are drawn from ``records`` of the same class and split. Heatmaps
    are computed at the model's input size, then resized to the source image so
    the box is in source pixel coordinates.
    """
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    records = sorted(records, key=lambda r: r.id)
    groups = {}
    for r in records:
        groups.setdefault((r.class_label, r.split), []).append(r)
    rows: list[AuditRow] = []
    for anchor in records:
        target = out_root / anchor.id
        target.parent.mkdir(parents=True, exist_ok=True)
        mates = [r for r in groups[(anchor.class_label, anchor.split)] if r.id != anchor.id]
        if not mates:
            shutil.copyfile(anchor.path, target)
            rows.append(AuditRow(anchor.id, "", None, "single_member"))
            continue
        partner = mates[rng.integers(len(mates))]
        source, prep_a = _prepared(anchor, config)
        _, prep_b = _prepared(partner, config)
        d, heat = anchor_heatmap(model, prep_a, prep_b, source.shape[:2], config)
        sim = 1.0 - d
        if sim <= config.crop_similarity_gate:
            shutil.copyfile(anchor.path, target)
            rows.append(AuditRow(anchor.id, partner.id, sim, "kept"))
            continue
        try:
            box = bbox_from_heatmap(heat, config.bbox_fraction, config.min_box_fraction)
        except ExplainError:
            shutil.copyfile(anchor.path, target)
            rows.append(AuditRow(anchor.id, partner.id, sim, "no_salient_region"))
            continue
        if box.as_tuple() == (0, 0, source.shape[1], source.shape[0]):
            shutil.copyfile(anchor.path, target)
        else:
            crop = load_image(anchor.path).crop(box.as_tuple())
            crop.save(target, format=_format_for(target))
        rows.append(AuditRow(anchor.id, partner.id, sim, "cropped", box))
    write_audit(rows, out_root / AUDIT_MANIFEST)
    return out_root, rows


def _format_for(path: Path) -> str:
    # keep the anchor's container; PNG for anything PIL cannot write by suffix
    return {".jpg": "JPEG", ".jpeg": "JPEG", ".bmp": "BMP", ".tif": "TIFF", ".tiff": "TIFF"}.get(
        path.suffix.lower(), "PNG")


def write_audit(rows: Sequence[AuditRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["anchor", "partner", "similarity", "status", "x_min", "y_min", "x_max", "y_max"])
        for row in rows:
            w.writerow(row.cells())


def crop_split_records(model: SiameseNetwork, records: Sequence[ImageRecord], out_root: str | Path,
                       config: ExperimentConfig) -> tuple[list[ImageRecord], list[AuditRow]]:
    """Crop train and val records into ``out_root``; test records keep their paths."""
    refine = [r for r in records if r.split in ("train", "val")]
    out_root, rows = build_cropped_dataset(model, refine, out_root, config)
    moved = [replace(r, path=out_root / r.id) if r.split in ("train", "val") else r for r in records]
    return moved, rows


@dataclass
class ComparisonResult:
    original: EvaluationReport
    cropped: EvaluationReport
    original_best_epoch: int
    cropped_best_epoch: int
    audit: list[AuditRow]

    def to_dict(self) -> dict:
        return {"original": self.original.to_dict(), "cropped": self.cropped.to_dict(),
                "original_best_epoch": self.original_best_epoch,
                "cropped_best_epoch": self.cropped_best_epoch}

    def table(self) -> str:
        return format_table({"Original": self.original, '"Cropped"': self.cropped}) + \
            f"\nbest epoch: original {self.original_best_epoch}, cropped {self.cropped_best_epoch}"


def compare_original_vs_cropped(config: ExperimentConfig, out_dir: str | Path,
                                data_root: str | Path | None = None) -> ComparisonResult:
    """Train on the original and on the refined training set, test on the same pairs.

    Both models start from the same initial parameters and batch order. Writes
    ``split.tsv``, ``test_pairs.jsonl``, ``cropped/`` (with ``audit.tsv``),
    both checkpoints and ``report.json`` into ``out_dir``.
    """
    data_root = Path(data_root or config.dataset_root or "")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = index_dataset(data_root)
    records = stratified_split(index.records, config.train_fraction,
                               config.val_fraction_of_train, config.seed)
    write_split_manifest(records, out_dir / "split.tsv")
    pairs = pairs_by_split(records, config.seed)
    write_pair_manifest(pairs["test"], out_dir / "test_pairs.jsonl")

    cache = ImageCache(config.image_size)
    original = build_model(config, seed=config.seed)
    original, hist_o = train(original, pairs["train"], pairs["val"], config, cache,
                             log_path=out_dir / "train_original.jsonl")
    save_model(original, out_dir / "original.pt")
    report_o = evaluate(original, pairs["test"], config.threshold, cache)

    cropped_root = out_dir / "cropped"
    if cropped_root.exists():
        shutil.rmtree(cropped_root)
    moved, audit = crop_split_records(original, records, cropped_root, config)
    test_paths = {r.path for r in moved if r.split == "test"}
    if any(Path(cropped_root) in p.parents for p in test_paths):
        raise DataError("test image routed through the cropped dataset", code="leakage")
    cropped_pairs = pairs_by_split(moved, config.seed)
    assert [(p.anchor.id, p.partner.id) for p in cropped_pairs["test"]] == \
           [(p.anchor.id, p.partner.id) for p in pairs["test"]]
    cropped_pairs["test"] = pairs["test"]

    cropped = build_model(config, seed=config.seed)
    cropped, hist_c = train(cropped, cropped_pairs["train"], cropped_pairs["val"], config, cache,
                            log_path=out_dir / "train_cropped.jsonl")
    save_model(cropped, out_dir / "cropped.pt")
    report_c = evaluate(cropped, pairs["test"], config.threshold, cache)

    result = ComparisonResult(report_o, report_c, hist_o.best_epoch, hist_c.best_epoch, audit)
    (out_dir / "report.json").write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n")
    (out_dir / "report.txt").write_text(result.table() + "\n")
    return result
