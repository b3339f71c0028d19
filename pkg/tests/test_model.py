import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from conftest import SMALL, random_image
from siamcam.config import ExperimentConfig
from siamcam.errors import ModelError
from siamcam.model import (DIFFERENT_CLASS, SAME_CLASS, build_model, decide, embed, forward_pair, load_model,
                           save_model, similarity)


def test_embedding_length_default():
    cfg = ExperimentConfig(image_size=(32, 32))
    model = build_model(cfg, seed=0)
    e = embed(model, random_image(np.random.default_rng(0)))
    assert e.shape == (256,)
    assert np.all(np.isfinite(e)) and np.all(e >= 0)


def test_embedding_deterministic(small_model, rng):
    img = random_image(rng)
    assert np.array_equal(embed(small_model, img), embed(small_model, img))


def test_input_shape_error(small_model):
    bad = random_image(np.random.default_rng(0), size=(16, 16))
    with pytest.raises(ModelError, match="input shape error"):
        embed(small_model, bad)


def test_identical_inputs_give_logistic_bias(small_model, rng):
    with torch.no_grad():
        small_model.head_bias.fill_(0.7)
        small_model.head_weight.fill_(3.0)
    expected = 1 / (1 + math.exp(-0.7))
    for _ in range(3):
        img = random_image(rng)
        trace = forward_pair(small_model, img, img)
        assert float(trace.distance) == 0.0
        assert float(trace.d) == pytest.approx(expected, abs=1e-7)


def test_swap_symmetry(small_model, rng):
    a, b = random_image(rng), random_image(rng)
    assert float(forward_pair(small_model, a, b).d) == pytest.approx(float(forward_pair(small_model, b, a).d),
                                                                     abs=1e-6)


def test_output_range(small_model, rng):
    for _ in range(5):
        d = float(forward_pair(small_model, random_image(rng), random_image(rng)).d)
        assert 0.0 < d < 1.0


def test_head_monotone_in_distance(small_model):
    with torch.no_grad():
        small_model.head_weight.fill_(0.5)
        dist = torch.linspace(0, 10, 50)
        d = torch.sigmoid(small_model.head_logit(dist))
    assert torch.all(d[1:] > d[:-1])


@pytest.mark.parametrize("d,expected", [(0.24, 0.76), (0.781, 0.219), (0.5, 0.5)])
def test_similarity(d, expected):
    assert similarity(d) == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("d,verdict", [(0.24, SAME_CLASS), (0.781, DIFFERENT_CLASS), (0.516, DIFFERENT_CLASS),
                                       (0.5, DIFFERENT_CLASS)])
def test_decide(d, verdict):
    assert decide(d, 0.5) == verdict


@settings(max_examples=100, deadline=None)
@given(d=st.floats(0.001, 0.999), t=st.floats(0.01, 0.99))
def test_decide_strict_less_than(d, t):
    assert (decide(d, t) == SAME_CLASS) == (d < t)


def test_save_load_bit_equal(tmp_path, small_model, rng):
    a, b = random_image(rng), random_image(rng)
    save_model(small_model, tmp_path / "m.pt")
    loaded = load_model(tmp_path / "m.pt")
    assert loaded.config == small_model.config
    for (k1, v1), (k2, v2) in zip(small_model.state_dict().items(), loaded.state_dict().items()):
        assert k1 == k2 and torch.equal(v1, v2)
    assert torch.equal(forward_pair(small_model, a, b).d, forward_pair(loaded, a, b).d)


def test_load_embedding_dim_mismatch(tmp_path, small_model):
    save_model(small_model, tmp_path / "m.pt")
    with pytest.raises(ModelError, match="incompatible checkpoint"):
        load_model(tmp_path / "m.pt", SMALL.replace(embedding_dim=64))


def test_load_missing_file(tmp_path):
    with pytest.raises(ModelError, match="file not found"):
        load_model(tmp_path / "nope.pt")


def test_load_garbage(tmp_path):
    (tmp_path / "junk.pt").write_bytes(b"not a checkpoint")
    with pytest.raises(ModelError, match="incompatible checkpoint"):
        load_model(tmp_path / "junk.pt")


def test_unknown_layer(small_model, rng):
    img = random_image(rng)
    with pytest.raises(ModelError, match="unknown layer block9"):
        forward_pair(small_model, img, img, capture=True, layer="block9")
    with pytest.raises(ModelError, match="unknown layer"):
        build_model(SMALL.replace(target_layer="nope"))


def test_weight_sharing(small_model, rng):
    # the two branches are one module: only the head adds parameters
    n_tower = sum(1 for _ in small_model.tower.parameters())
    assert sum(1 for _ in small_model.parameters()) == n_tower + 2
    img = random_image(rng)
    with torch.no_grad():
        next(small_model.tower.parameters()).mul_(1.5)
    trace = forward_pair(small_model, img, img)
    assert torch.equal(trace.embedding_a, trace.embedding_b)


def test_capture_keeps_both_branches(small_model, rng):
    trace = forward_pair(small_model, random_image(rng), random_image(rng), capture=True)
    assert trace.has_gradients
    assert trace.activations.shape[0] == 2
    assert trace.activations_a.shape == (128, 4, 4)


def test_build_model_seeded():
    a, b = build_model(SMALL, seed=3), build_model(SMALL, seed=3)
    for p, q in zip(a.parameters(), b.parameters()):
        assert torch.equal(p, q)
