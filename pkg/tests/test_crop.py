import csv
import filecmp

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from PIL import Image

from conftest import SMALL
from oracles import largest_component_box
from siamcam.crop import (AUDIT_MANIFEST, BoundingBox, bbox_from_heatmap, build_cropped_dataset,
                          crop_split_records, iou)
from siamcam.data import index_dataset, stratified_split
from siamcam.errors import ExplainError
from siamcam.model import build_model


def test_single_plateau():
    heat = np.zeros((20, 30))
    heat[4:10, 7:19] = 1.0
    box = bbox_from_heatmap(heat, 0.15, 0.1)
    assert box.as_tuple() == (7, 4, 19, 10)


def test_two_plateaus_largest_wins():
    heat = np.zeros((40, 40))
    heat[2:12, 2:12] = 1.0    # area 100
    heat[25:30, 25:35] = 1.0  # area 50
    assert bbox_from_heatmap(heat, 0.15, 0.0).as_tuple() == (2, 2, 12, 12)


def test_diagonal_touch_is_not_connected():
    heat = np.zeros((10, 10))
    heat[0:3, 0:3] = 1.0
    heat[3:5, 3:5] = 1.0  # touches only at a corner
    assert bbox_from_heatmap(heat, 0.5, 0.0).as_tuple() == (0, 0, 3, 3)


def test_small_region_grows_to_floor():
    heat = np.zeros((20, 20))
    heat[9:11, 9:11] = 1.0
    box = bbox_from_heatmap(heat, 0.15, 0.1)
    assert box.area >= 40
    assert box.x_min <= 9 and box.y_min <= 9 and box.x_max >= 11 and box.y_max >= 11


def test_growth_at_border_stays_inside():
    heat = np.zeros((20, 20))
    heat[0, 0] = 1.0
    box = bbox_from_heatmap(heat, 0.15, 0.25)
    assert box.x_min == 0 and box.y_min == 0 and box.area >= 100
    assert box.x_max <= 20 and box.y_max <= 20


def test_all_zero_heatmap():
    with pytest.raises(ExplainError, match="no salient region"):
        bbox_from_heatmap(np.zeros((8, 8)))


@settings(max_examples=150, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), h=st.integers(4, 24), w=st.integers(4, 24),
       fraction=st.floats(0.05, 0.95), floor=st.floats(0.0, 0.5))
def test_box_invariants(seed, h, w, fraction, floor):
    heat = np.random.default_rng(seed).random((h, w)) ** 3
    box = bbox_from_heatmap(heat, fraction, floor)
    assert 0 <= box.x_min < box.x_max <= w and 0 <= box.y_min < box.y_max <= h
    assert box.area >= np.ceil(floor * h * w) - 1e-9
    # the component's tight box always lies inside the returned box
    x0, y0, x1, y1 = largest_component_box(heat >= fraction * heat.max())
    assert box.x_min <= x0 and box.y_min <= y0 and box.x_max >= x1 and box.y_max >= y1
    if floor == 0.0:
        assert box.as_tuple() == (x0, y0, x1, y1)


def test_iou():
    assert iou((0, 0, 10, 10), (0, 0, 10, 10)) == 1.0
    assert iou((0, 0, 10, 10), (10, 10, 20, 20)) == 0.0
    assert iou(BoundingBox(0, 0, 2, 2), BoundingBox(1, 0, 3, 2)) == pytest.approx(2 / 6)


def _train_val(tiny_dataset):
    recs = stratified_split(index_dataset(tiny_dataset).records, 0.8, 0.1, 0)
    return [r for r in recs if r.split in ("train", "val")], recs


def _model(weight, bias):
    model = build_model(SMALL, seed=0).eval()
    with torch.no_grad():
        model.head_weight.fill_(weight)
        model.head_bias.fill_(bias)
    return model


def _audit(root):
    with open(root / AUDIT_MANIFEST) as fh:
        return list(csv.DictReader(fh, delimiter="\t"))


def test_gate_never_passes_gives_exact_copy(tiny_dataset, tmp_path):
    refine, _ = _train_val(tiny_dataset)
    out, rows = build_cropped_dataset(_model(1.0, 20.0), refine, tmp_path / "out", SMALL)
    assert all(r.status == "kept" for r in rows)
    for r in refine:
        assert filecmp.cmp(r.path, out / r.id, shallow=False)
    assert len(_audit(out)) == len(refine)


def test_cropped_images_match_boxes(tiny_dataset, tmp_path):
    refine, _ = _train_val(tiny_dataset)
    out, rows = build_cropped_dataset(_model(0.01, -5.0), refine, tmp_path / "out", SMALL)
    assert len(rows) == len(refine) == len(_audit(out))
    cropped = [row for row in rows if row.status == "cropped"]
    assert cropped
    for row in cropped:
        assert row.similarity > SMALL.crop_similarity_gate
        with Image.open(out / row.anchor) as im:
            assert im.size == (row.box.width, row.box.height)
        assert row.box.area >= np.ceil(SMALL.min_box_fraction * 32 * 32)


def test_full_image_box_is_identity(tiny_dataset, tmp_path):
    refine, _ = _train_val(tiny_dataset)
    config = SMALL.replace(min_box_fraction=1.0)
    out, rows = build_cropped_dataset(_model(0.01, -5.0), refine, tmp_path / "out", config)
    full = [row for row in rows if row.status == "cropped"]
    assert full
    for row in full:
        assert row.box.as_tuple() == (0, 0, 32, 32)
        assert filecmp.cmp(tiny_dataset / row.anchor, out / row.anchor, shallow=False)


def test_partner_same_class_and_split(tiny_dataset, tmp_path):
    refine, _ = _train_val(tiny_dataset)
    meta = {r.id: r for r in refine}
    _, rows = build_cropped_dataset(_model(1.0, 20.0), refine, tmp_path / "out", SMALL)
    for row in rows:
        a, p = meta[row.anchor], meta[row.partner]
        assert a.class_label == p.class_label and a.split == p.split and a.id != p.id


def test_singleton_class_copied(tiny_dataset, tmp_path):
    refine, _ = _train_val(tiny_dataset)
    one = [r for r in refine if r.split == "val"][:1]
    out, rows = build_cropped_dataset(_model(1.0, 20.0), one, tmp_path / "out", SMALL)
    assert rows[0].status == "single_member"
    assert filecmp.cmp(one[0].path, out / one[0].id, shallow=False)


def test_test_split_untouched(tiny_dataset, tmp_path):
    _, recs = _train_val(tiny_dataset)
    out = tmp_path / "out"
    moved, rows = crop_split_records(_model(0.01, -5.0), recs, out, SMALL)
    for before, after in zip(recs, moved):
        if before.split == "test":
            assert after.path == before.path
            assert not (out / before.id).exists()
        else:
            assert after.path == out / before.id
    assert len(rows) == sum(r.split != "test" for r in recs)
