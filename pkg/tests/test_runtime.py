import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hdcnn.engine import forward, make_rng
from hdcnn.engine.kmeans import kmeans
from hdcnn.errors import FormatError, InvalidInputError
from hdcnn.model import full_forward
from hdcnn.runtime.conditional import ExecPolicy, coarse_threshold, conditional_mask
from hdcnn.runtime.evaluate import (
    averaging_predictor,
    block_predictor,
    crop_views,
    evaluate,
    hdcnn_predictor,
    multiview_predict,
    topk_error,
)
from hdcnn.runtime.pq import (
    PqDescriptor,
    QuantizedMatrix,
    compression_factor,
    dump_quantized,
    model_storage_bytes,
    parse_quantized,
    pq_compress,
    pq_compress_ladder,
    pq_forward,
    quantize_model,
    segment_sse,
    stored_bytes,
)

from helpers import tiny_batch, tiny_model


# ---- conditional execution ---------------------------------------------------

def test_mask_examples():
    np.testing.assert_array_equal(conditional_mask([[0.7, 0.2, 0.1]], 2), [[True, True, False]])
    np.testing.assert_array_equal(conditional_mask([[0.7, 0.2, 0.1]], math.inf), [[True] * 3])
    beta = 1 / (3 * 0.7) - 1e-9
    np.testing.assert_array_equal(conditional_mask([[0.7, 0.2, 0.1]], beta), [[True, False, False]])
    assert coarse_threshold(2, 3) == pytest.approx(1 / 6)


def test_empty_mask_falls_back_to_argmax():
    # threshold 1/(0.5*2) = 1 > every weight
    np.testing.assert_array_equal(conditional_mask([[0.45, 0.55]], 0.5), [[False, True]])


def test_policy_validation():
    with pytest.raises(InvalidInputError):
        ExecPolicy.threshold(0)
    with pytest.raises(InvalidInputError):
        ExecPolicy("sometimes")
    assert ExecPolicy.threshold(math.inf).label() == "beta=inf"


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_mask_monotone_in_beta(k, seed):
    b = np.random.default_rng(seed).dirichlet(np.ones(k), size=5)
    prev = None
    for beta in [0.25, 0.5, 1, 2, 4, 8, 16, math.inf]:
        m = conditional_mask(b, beta)
        assert np.all(m.sum(1) >= 1)
        if prev is not None:
            assert np.all(m >= prev)
        prev = m


# ---- product quantization ------------------------------------------------------

def test_compression_factor_examples():
    assert compression_factor(1024, 3456, 3, 128) == pytest.approx(4.8, abs=0.05)
    assert compression_factor(1024, 1024, 2, 256) == pytest.approx(8 / 3, abs=1e-12)
    assert compression_factor(4096, 25088, 14, 64) == pytest.approx(29.9, abs=0.05)
    assert compression_factor(4096, 4096, 4, 256) == pytest.approx(8.0, abs=1e-12)


def test_identical_rows_reconstruct_exactly():
    w = np.tile(np.array([[0.5, -1.25, 3.0, 2.0]]), (6, 1))
    for s, k in [(1, 1), (2, 3), (4, 6)]:
        q = pq_compress(w, s, k, make_rng(0))
        np.testing.assert_array_equal(q.reconstruct(), w)


def test_pq_errors():
    with pytest.raises(InvalidInputError):
        pq_compress(np.zeros((4, 6)), 4, 2, make_rng(0))
    with pytest.raises(InvalidInputError):
        pq_compress(np.zeros((300, 4)), 2, 257, make_rng(0))
    with pytest.raises(InvalidInputError):
        pq_compress(np.zeros((3, 4)), 2, 4, make_rng(0))


def test_reconstruction_sse_matches_kmeans_sse():
    rng = make_rng(1)
    w = rng.normal(size=(30, 8)).astype(np.float32).astype(np.float64)
    q = pq_compress(w, 4, 5, make_rng(2))
    # recompute SSE from the assignments, segment by segment
    seg_rng = make_rng(2)
    total = 0.0
    for g in range(2):
        res = kmeans(w[:, 4 * g:4 * g + 4], 5, seg_rng)
        np.testing.assert_array_equal(res.assignments, q.indices[:, g])
        total += res.sse
    assert segment_sse(w, q) == pytest.approx(total, rel=1e-5)


def test_pq_forward_examples():
    rng = make_rng(3)
    w = rng.normal(size=(8, 8))
    q = pq_compress(w, 4, 8, make_rng(0))
    x = rng.normal(size=8)
    np.testing.assert_allclose(pq_forward(q, x), pq_forward(q, x, "dense"), atol=1e-10)
    np.testing.assert_allclose(pq_forward(q, x), w.astype(np.float32) @ x, atol=1e-10)
    np.testing.assert_array_equal(pq_forward(q, np.zeros(8)), np.zeros(8))
    with pytest.raises(InvalidInputError):
        pq_forward(q, np.zeros(7))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([1, 2, 3]))
def test_ladder_error_non_increasing_in_k(seed, s):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(16, 3 * s))
    errors = [segment_sse(w, q) for q in pq_compress_ladder(w, s, range(1, 17), make_rng(seed))]
    assert all(b <= a + 1e-9 for a, b in zip(errors, errors[1:]))
    assert errors[-1] <= 1e-10


def test_hdq_round_trip_and_errors():
    q = pq_compress(make_rng(4).normal(size=(6, 6)), 3, 4, make_rng(5))
    data = dump_quantized(q)
    assert len(data) == stored_bytes(6, 6, 3, 4) == 20 + 6 * 2 + 4 * 4 * 6
    back = parse_quantized(data)
    np.testing.assert_array_equal(back.indices, q.indices)
    np.testing.assert_array_equal(back.centers, q.centers)
    with pytest.raises(FormatError, match="offset 0"):
        parse_quantized(b"XXXX" + data[4:])
    with pytest.raises(FormatError):
        parse_quantized(data[:-1])
    with pytest.raises(InvalidInputError):
        QuantizedMatrix(2, 2, 1, 1, np.array([[0, 1], [0, 0]], np.uint8), np.zeros((1, 2), np.float32))


def test_descriptor_text():
    d = PqDescriptor(7, 4, 16, 0)
    assert d.to_text() == "pq layer=L7 s=4 k=16 seed=0"
    assert PqDescriptor.from_text(d.to_text()) == d
    with pytest.raises(FormatError):
        PqDescriptor.from_text("pq layer=fc s=4")


def test_quantized_model_runs_and_shrinks():
    model, _ = tiny_model()
    x, _ = tiny_batch(4)
    qmodel, tables = quantize_model(model, [PqDescriptor(7, 2, 2, 0)])
    assert set(tables) == {"coarse", "fine0", "fine1"}
    p = full_forward(qmodel, x).probs
    np.testing.assert_allclose(p.sum(1), 1.0, atol=1e-12)
    dense, stored = model_storage_bytes(qmodel)
    assert stored < dense
    # lossless when k equals the row count: classifier rows stay exact up to float32
    lossless, _ = quantize_model(model, [PqDescriptor(7, 1, 4, 0)])
    np.testing.assert_allclose(full_forward(lossless, x).probs, full_forward(model, x).probs, atol=1e-5)


# ---- evaluation ------------------------------------------------------------------

def test_topk_ties_go_to_lower_index():
    probs = np.array([[0.25, 0.25, 0.25, 0.25]])
    assert topk_error(probs, [0], 1) == 0.0
    assert topk_error(probs, [1], 1) == 100.0


def test_multiview_geometry():
    model, block = tiny_model()
    pred = block_predictor(block)
    const = np.full((2, 1, 10, 10), 0.3)
    single, _ = pred(const[..., :8, :8])
    multi, _ = multiview_predict(pred, const, 8)
    np.testing.assert_allclose(multi, single, atol=1e-15)
    sym = make_rng(0).normal(size=(2, 1, 10, 10))
    sym = sym + sym[..., ::-1]
    views = crop_views(sym, 8)
    np.testing.assert_array_equal(views[4], views[9][..., ::-1])
    np.testing.assert_allclose(pred(views[0])[0], pred(np.ascontiguousarray(views[6]))[0], atol=1e-14)
    img = make_rng(1).normal(size=(3, 1, 8, 8))
    full, _ = multiview_predict(pred, img, 8)
    expected = 0.5 * (pred(img)[0] + pred(np.ascontiguousarray(img[..., ::-1]))[0])
    np.testing.assert_allclose(full, expected, atol=1e-15)
    with pytest.raises(InvalidInputError):
        crop_views(img, 9)


def test_evaluate_reports():
    model, block = tiny_model()
    x, _ = tiny_batch(7)
    y = forward(block, x).output.argmax(1)
    rep = evaluate(block_predictor(block), x, y)
    assert rep.top1_err == 0.0 and rep.top5_err is None and rep.mean_executed is None
    hd = evaluate(hdcnn_predictor(model), x, y, batch_size=3)
    assert hd.mean_executed == model.num_coarse
    with pytest.raises(InvalidInputError):
        evaluate(block_predictor(block), x[:0], y[:0])


def test_averaging_single_member_equals_block():
    _, block = tiny_model()
    x, _ = tiny_batch(5)
    np.testing.assert_array_equal(averaging_predictor([block])(x)[0], block_predictor(block)(x)[0])
