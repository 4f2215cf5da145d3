import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hdcnn.engine import forward, make_rng
from hdcnn.errors import InvalidInputError
from hdcnn.hierarchy import Hierarchy, aggregate_coarse, single_coarse_hierarchy
from hdcnn.model import (
    assemble,
    coarse_forward,
    embed_partial,
    fine_forward,
    full_forward,
    probabilistic_average,
    shared_forward,
)
from hdcnn.runtime.conditional import ExecPolicy

from helpers import tiny_batch, tiny_model


def test_assemble_copies_block():
    model, block = tiny_model()
    x, _ = tiny_batch(5)
    expected = aggregate_coarse(forward(block, x).output, model.hierarchy.membership)
    np.testing.assert_array_equal(coarse_forward(model, x), expected)
    for k, comp in enumerate(model.fine):
        assert comp.net.label_count == len(model.hierarchy.partial_sets[k])
    # parameters are copies, not views of the block
    model.shared.params[0]["W"][...] = 0
    assert np.any(block.params[0]["W"] != 0)


def test_assemble_deterministic():
    a, _ = tiny_model(seed=1)
    b, _ = tiny_model(seed=1)
    for x, y in zip(a.param_arrays(), b.param_arrays()):
        assert np.array_equal(x, y)


def test_assemble_label_mismatch():
    _, block = tiny_model()
    with pytest.raises(InvalidInputError):
        assemble(block, 3, single_coarse_hierarchy(5), make_rng(0))


def test_coarse_argmax_matches_block_after_assemble():
    model, block = tiny_model()
    x, _ = tiny_batch(20, seed=3)
    fine_pred = forward(model.coarse, shared_forward(model, x)).output
    assert np.array_equal(fine_pred.argmax(1), forward(block, x).output.argmax(1))


def test_single_coarse_is_all_ones():
    model, _ = tiny_model(hierarchy=single_coarse_hierarchy(4))
    np.testing.assert_array_equal(coarse_forward(model, tiny_batch()[0]), np.ones((3, 1)))
    pred = full_forward(model, tiny_batch()[0])
    np.testing.assert_array_equal(pred.probs, fine_forward(model, 0, shared_forward(model, tiny_batch()[0])))


def test_embed_partial_positions():
    out = embed_partial(np.array([[0.6, 0.4]]), np.array([3, 7]), 8)
    expected = np.zeros((1, 8))
    expected[0, 3], expected[0, 7] = 0.6, 0.4
    np.testing.assert_array_equal(out, expected)


def test_fine_forward_zero_classifier_is_uniform_on_partial_set():
    model, _ = tiny_model()
    comp = model.fine[1]
    cls = comp.net.spec.classifier_index()
    comp.net.params[cls]["W"][...] = 0
    comp.net.params[cls]["b"][...] = 0
    out = fine_forward(model, 1, shared_forward(model, tiny_batch()[0]))
    expected = np.zeros(4)
    expected[comp.partial_set] = 1 / len(comp.partial_set)
    np.testing.assert_allclose(out, np.tile(expected, (3, 1)), atol=1e-15)
    with pytest.raises(InvalidInputError):
        fine_forward(model, 2, shared_forward(model, tiny_batch()[0]))


def test_probabilistic_average_examples():
    p1, p2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    comps = np.stack([p1, p2])[None]
    np.testing.assert_allclose(probabilistic_average([[0.6, 0.4]], comps), [[0.6, 0.4]])
    np.testing.assert_array_equal(probabilistic_average([[0.6, 0.4]], comps, [[True, False]]), [[1.0, 0.0]])
    comps3 = np.stack([p1, p2, np.array([0.5, 0.5])])[None]
    np.testing.assert_allclose(probabilistic_average([[0.7, 0.2, 0.1]], comps3, [[True, True, False]]),
                               [[7 / 9, 2 / 9]])
    # zero denominator: falls back to the component with the largest coarse weight
    np.testing.assert_array_equal(probabilistic_average([[0.0, 0.3]], comps, [[True, False]]), [[0.0, 1.0]])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_full_forward_on_simplex(seed):
    model, _ = tiny_model(seed=seed % 7)
    x = make_rng(seed).normal(size=(4, 1, 8, 8))
    pred = full_forward(model, x)
    assert np.all(pred.probs >= 0)
    np.testing.assert_allclose(pred.probs.sum(1), 1.0, atol=1e-6)
    assert np.all(pred.executed_counts == model.num_coarse)


def test_shared_activation_reuse_is_bit_identical():
    model, _ = tiny_model()
    x, _ = tiny_batch(6)
    once = full_forward(model, x).probs
    h = shared_forward(model, x)
    comps = np.stack([fine_forward(model, k, shared_forward(model, x)) for k in range(2)], axis=1)
    b = coarse_forward(model, x)
    recomputed = (b[:, 0, None] * comps[:, 0] + b[:, 1, None] * comps[:, 1]) / (b[:, 0] + b[:, 1])[:, None]
    assert np.array_equal(once, recomputed)
    assert np.array_equal(once, full_forward(model, x, shared_act=h).probs)


def test_huge_beta_equals_all():
    model, _ = tiny_model()
    x, _ = tiny_batch(8)
    a = full_forward(model, x).probs
    assert np.array_equal(full_forward(model, x, ExecPolicy.threshold(1e12)).probs, a)
    assert np.array_equal(full_forward(model, x, ExecPolicy.threshold(np.inf)).probs, a)


def test_threshold_policy_skips_components():
    model, _ = tiny_model()
    x, _ = tiny_batch(16, seed=5)
    pred = full_forward(model, x, ExecPolicy.threshold(0.5))
    assert np.all(pred.executed_counts >= 1)
    b = pred.coarse
    np.testing.assert_array_equal(pred.executed, (b >= 1.0) | (b == b.max(1, keepdims=True)))


def test_permuting_components_leaves_prediction_unchanged():
    model, block = tiny_model()
    x, _ = tiny_batch(5)
    h = model.hierarchy
    swapped = Hierarchy(2, 1 - h.disjoint, h.membership[:, ::-1].copy(), h.gamma)
    other = assemble(block, 3, swapped, make_rng(9))
    other.fine[0].net, other.fine[1].net = model.fine[1].net, model.fine[0].net
    np.testing.assert_allclose(full_forward(other, x).probs, full_forward(model, x).probs, atol=1e-15)
