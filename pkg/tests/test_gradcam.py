import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st, HealthCheck
from hypothesis.extra.numpy import arrays

from conftest import SMALL, random_image
from oracles import fd_alpha
from siamcam.errors import ExplainError
from siamcam.gradcam import (BRANCHES, COUNTERFACTUAL, FACTUAL, MODES, colorize, explain_pair, gradcam_map,
                             neuron_weights, normalize_map, overlay, overlay_array)
from siamcam.model import ForwardTrace, build_model, forward_pair


def _toy_trace(acts, y):
    z = torch.zeros(())
    return ForwardTrace(y, y, z, z, z, acts, "toy")


def test_toy_mean_head():
    # y = mean(A^1) over branch a: alpha_1 = 1/Z
    acts = torch.rand(2, 1, 3, 5, dtype=torch.float64, requires_grad=True)
    trace = _toy_trace(acts, acts[0].mean())
    alpha = neuron_weights(trace, "a", FACTUAL).alpha
    assert alpha.shape == (1,)
    assert alpha[0] == pytest.approx(1 / 15, abs=1e-15)
    assert neuron_weights(trace, "b", FACTUAL).alpha[0] == 0.0


def test_zero_gradient_path():
    acts = torch.rand(2, 4, 2, 2, requires_grad=True)
    other = torch.tensor(0.3, requires_grad=True)
    trace = _toy_trace(acts, torch.sigmoid(other))
    for mode in MODES:
        np.testing.assert_array_equal(neuron_weights(trace, "a", mode).alpha, np.zeros(4))


def test_no_gradient_capture(small_model, rng):
    trace = forward_pair(small_model, random_image(rng), random_image(rng), capture=False)
    with pytest.raises(ExplainError, match="no gradient capture"):
        neuron_weights(trace, "a")


def test_counterfactual_antisymmetry(small_model, rng):
    trace = forward_pair(small_model, random_image(rng), random_image(rng), capture=True)
    for branch in BRANCHES:
        f = neuron_weights(trace, branch, FACTUAL).alpha
        np.testing.assert_array_equal(neuron_weights(trace, branch, COUNTERFACTUAL).alpha, -f)
        recomputed = neuron_weights(trace, branch, COUNTERFACTUAL, recompute=True).alpha
        np.testing.assert_allclose(recomputed, -f, rtol=0, atol=1e-6)


def test_logit_target_antisymmetry(small_model, rng):
    trace = forward_pair(small_model, random_image(rng), random_image(rng), capture=True)
    f = neuron_weights(trace, "a", FACTUAL, target="logit").alpha
    cf = neuron_weights(trace, "a", COUNTERFACTUAL, target="logit", recompute=True).alpha
    np.testing.assert_allclose(cf, -f, atol=1e-6)


def test_gradcam_map_zero_weights():
    acts = np.random.default_rng(0).random((3, 4, 4))
    np.testing.assert_array_equal(gradcam_map(np.zeros(3), acts), np.zeros((4, 4)))


def test_gradcam_map_identity():
    acts = np.random.default_rng(0).random((1, 5, 6))
    np.testing.assert_array_equal(gradcam_map(np.array([1.0]), acts), acts[0])


def test_gradcam_map_hand_case():
    acts = np.array([[[2.0]], [[3.0]]])
    np.testing.assert_array_equal(gradcam_map(np.array([1.0, -1.0]), acts), np.array([[0.0]]))


def test_gradcam_map_channel_mismatch():
    with pytest.raises(ExplainError, match="channel count mismatch"):
        gradcam_map(np.ones(2), np.ones((3, 2, 2)))


@settings(max_examples=100, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(data=st.data(), k=st.integers(1, 6), h=st.integers(1, 5), w=st.integers(1, 5))
def test_gradcam_map_nonnegative_and_linear(data, k, h, w):
    finite = st.floats(-100, 100, allow_nan=False)
    alpha = data.draw(arrays(np.float64, (k,), elements=finite))
    acts = data.draw(arrays(np.float64, (k, h, w), elements=finite))
    m = gradcam_map(alpha, acts)
    assert m.shape == (h, w) and np.all(m >= 0)
    # independent oracle: explicit loop over channels
    ref = np.zeros((h, w))
    for c in range(k):
        ref += alpha[c] * acts[c]
    np.testing.assert_allclose(m, np.maximum(ref, 0), atol=1e-9)


def test_weights_match_finite_differences(rng):
    model = build_model(SMALL, seed=1).double().eval()
    a, b = random_image(rng), random_image(rng)
    trace = forward_pair(model, a, b, capture=True)
    for row, branch in enumerate(BRANCHES):
        alpha = neuron_weights(trace, branch).alpha
        for k in rng.choice(len(alpha), size=5, replace=False):
            fd = fd_alpha(model, a, b, SMALL.target_layer, row, int(k))
            assert abs(fd - alpha[k]) <= 1e-3 * max(abs(alpha[k]), 1e-8)


def test_normalize_contract():
    np.testing.assert_array_equal(normalize_map(np.zeros((3, 3))), np.zeros((3, 3)))
    m = normalize_map(np.array([[1.0, 3.0], [2.0, 5.0]]))
    assert m.min() == 0.0 and m.max() == 1.0


def test_explain_pair_bundle(small_model, rng):
    a, b = random_image(rng), random_image(rng)
    bundle = explain_pair(small_model, a, b)
    assert set(bundle.heatmaps) == {(m, br) for m in MODES for br in BRANCHES}
    assert bundle.similarity == pytest.approx(1 - bundle.d)
    for hm in bundle.heatmaps.values():
        assert hm.normalized.shape == SMALL.image_size
        assert np.all(hm.raw >= 0)
        assert 0.0 <= hm.normalized.min() and hm.normalized.max() <= 1.0
        assert hm.normalized.max() == 1.0 or not hm.raw.any()
    again = explain_pair(small_model, a, b)
    for key, hm in bundle.heatmaps.items():
        np.testing.assert_array_equal(hm.normalized, again.heatmaps[key].normalized)


def test_identical_inputs_give_equal_branch_maps(small_model, rng):
    img = random_image(rng)
    bundle = explain_pair(small_model, img, img)
    for mode in MODES:
        np.testing.assert_allclose(bundle.heatmap(mode, "a").normalized, bundle.heatmap(mode, "b").normalized,
                                   atol=1e-6)


def test_overlay_alpha_zero_is_source(rng):
    src = rng.integers(0, 256, (8, 10, 3), dtype=np.uint8)
    np.testing.assert_array_equal(overlay_array(src, rng.random((8, 10)), 0.0), src)


def test_overlay_alpha_one_is_colormap(rng):
    heat = rng.random((8, 10))
    src = rng.integers(0, 256, (8, 10, 3), dtype=np.uint8)
    np.testing.assert_array_equal(overlay_array(src, heat, 1.0), colorize(heat))


def test_overlay_zero_map_blends_zero_color(rng):
    from matplotlib import colormaps

    src = rng.integers(0, 256, (6, 6, 3), dtype=np.uint8)
    zero_color = np.rint(np.array(colormaps["jet"](0)[:3]) * 255)
    expected = np.rint(0.5 * src + 0.5 * zero_color).astype(np.uint8)
    np.testing.assert_array_equal(overlay_array(src, np.zeros((6, 6)), 0.5), expected)


def test_overlay_shape_error(rng):
    with pytest.raises(ExplainError, match="overlay shape error"):
        overlay_array(np.zeros((4, 4, 3), np.uint8), np.zeros((5, 4)))


def test_overlay_bytes_deterministic(rng):
    src = rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)
    heat = rng.random((8, 8))
    assert overlay(src, heat) == overlay(src, heat)
    assert overlay(src, heat)[:8] == b"\x89PNG\r\n\x1a\n"
