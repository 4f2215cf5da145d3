import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hdcnn.engine import (
    LayerSpec,
    Network,
    NetworkSpec,
    OptimizerState,
    backward,
    eigh_symmetric,
    forward,
    init_network,
    kmeans,
    make_rng,
    multinomial_logistic_loss,
    sgd_step,
    softmax,
)
from hdcnn.engine.checkpoint import dump_tensors, load_network, parse_tensors, save_network
from hdcnn.engine.network import build_spec, flatten_grads
from hdcnn.errors import FormatError, InvalidInputError, StateError, TrainingDivergedError

from oracles import best_kmeans_partition, central_difference, direct_conv2d, rel_error


def _net(input_shape, lines, seed=0):
    spec = build_spec(input_shape, lines, 0)
    return init_network(spec, make_rng(seed))


# ---- forward -------------------------------------------------------------

def test_softmax_symmetric_logits():
    net = Network(NetworkSpec((2,), (LayerSpec("softmax"),)), [{}])
    out = forward(net, np.zeros((1, 2))).output
    np.testing.assert_array_equal(out, [[0.5, 0.5]])


def test_relu_definition():
    net = Network(NetworkSpec((2,), (LayerSpec("relu"),)), [{}])
    np.testing.assert_array_equal(forward(net, np.array([[-1.0, 2.0]])).output, [[0.0, 2.0]])


def test_conv_matches_nested_loop_example():
    x = np.arange(1, 10, dtype=float).reshape(1, 1, 3, 3)
    w = np.ones((1, 1, 2, 2))
    b = np.zeros(1)
    expected = direct_conv2d(x, w, b)
    np.testing.assert_array_equal(expected[0, 0], [[12, 16], [24, 28]])
    spec = NetworkSpec((1, 3, 3), (LayerSpec("conv2d", {"in": 1, "out": 1, "kernel": 2}),))
    net = Network(spec, [{"W": w, "b": b}])
    np.testing.assert_array_equal(forward(net, x).output, expected)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 2)])
def test_conv_matches_nested_loop_random(stride, pad):
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    spec = NetworkSpec((3, 7, 6), (LayerSpec("conv2d", {"in": 3, "out": 4, "kernel": 3, "stride": stride, "pad": pad}),))
    net = Network(spec, [{"W": w, "b": b}])
    np.testing.assert_allclose(forward(net, x).output, direct_conv2d(x, w, b, stride, pad), rtol=1e-12, atol=1e-12)


def test_forward_rejects_shape_mismatch():
    net = _net((4,), ["fc in=4 out=3", "softmax"])
    with pytest.raises(InvalidInputError):
        forward(net, np.zeros((2, 5)))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_on_simplex(logits):
    p = softmax(np.array([logits]))
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) <= 1e-6


def test_maxpool_tie_goes_to_first_index():
    net = _net((1, 2, 2), ["maxpool size=2 stride=2"])
    x = np.ones((1, 1, 2, 2))
    tr = forward(net, x)
    _, dx = backward(net, tr, np.ones((1, 1, 1, 1)))
    np.testing.assert_array_equal(dx[0, 0], [[1, 0], [0, 0]])


# ---- backward ------------------------------------------------------------

def test_zero_upstream_gives_zero_grads():
    net = _net((1, 6, 6), ["conv2d in=1 out=2 kernel=3 pad=1", "relu", "maxpool size=2", "flatten",
                           "fc in=18 out=3", "softmax"])
    x = make_rng(1).standard_normal((2, 1, 6, 6))
    tr = forward(net, x)
    grads, dx = backward(net, tr, np.zeros((2, 3)))
    for g in flatten_grads(net, grads):
        assert not g.any()
    assert not dx.any()


def test_fc_weight_gradient_hand_expansion():
    w = np.array([[1.0, 2.0], [3.0, 4.0]])
    spec = NetworkSpec((2,), (LayerSpec("fc", {"in": 2, "out": 2}),))
    net = Network(spec, [{"W": w, "b": np.zeros(2)}])
    x = np.array([[5.0, 7.0]])
    g = np.array([[1.0, -2.0]])
    grads, dx = backward(net, forward(net, x), g)
    # dW_ij = g_i * x_j
    np.testing.assert_array_equal(grads[0]["W"], [[5.0, 7.0], [-10.0, -14.0]])
    np.testing.assert_array_equal(grads[0]["b"], [1.0, -2.0])
    np.testing.assert_array_equal(dx, [[1 * 1 - 2 * 3, 1 * 2 - 2 * 4]])


def test_backward_without_forward_is_state_error():
    net = _net((3,), ["fc in=3 out=2", "softmax"])
    with pytest.raises(StateError):
        backward(net, None, np.zeros((1, 2)))


LAYER_CASES = {
    "conv_pad_stride": ((2, 7, 7), ["conv2d in=2 out=3 kernel=3 stride=2 pad=1"]),
    "conv_plain": ((1, 5, 5), ["conv2d in=1 out=2 kernel=2"]),
    "maxpool": ((2, 6, 6), ["maxpool size=2 stride=2"]),
    "maxpool_overlap": ((1, 7, 7), ["maxpool size=3 stride=2"]),
    "avgpool": ((2, 6, 6), ["avgpool size=3 stride=1"]),
    "relu": ((5,), ["relu"]),
    "fc": ((4,), ["fc in=4 out=3"]),
    "softmax": ((4,), ["softmax"]),
    "flatten": ((2, 2, 3), ["flatten"]),
    "chain": ((1, 8, 8), ["conv2d in=1 out=3 kernel=3 pad=1", "relu", "maxpool size=2", "conv2d in=3 out=4 kernel=3 pad=1",
                          "relu", "avgpool size=2", "flatten", "fc in=16 out=5", "softmax"]),
}


@pytest.mark.parametrize("case", sorted(LAYER_CASES))
@pytest.mark.parametrize("seed", [0, 1])
def test_gradients_match_finite_differences(case, seed):
    shape, lines = LAYER_CASES[case]
    net = _net(shape, lines, seed)
    rng = make_rng(seed, "fd")
    x = rng.standard_normal((3,) + shape)
    out_shape = forward(net, x).output.shape
    r = rng.standard_normal(out_shape)

    def f():
        return float(np.sum(forward(net, x).output * r))

    grads, dx = backward(net, forward(net, x), r)
    for arr, g in zip(net.param_arrays(), flatten_grads(net, grads)):
        assert rel_error(g, central_difference(f, arr)) <= 1e-4
    assert rel_error(dx, central_difference(f, x)) <= 1e-4


# ---- optimizer -----------------------------------------------------------

def test_sgd_plain_step():
    w = np.array([1.0])
    st_ = OptimizerState(initial_lr=1.0, momentum=0.0, weight_decay=0.0)
    sgd_step([w], [np.array([0.5])], st_)
    assert w[0] == 0.5
    assert st_.iteration == 1


def test_sgd_zero_gradient_fixed_point():
    w = np.array([1.5, -2.0])
    st_ = OptimizerState(initial_lr=0.3, momentum=0.7, weight_decay=0.0)
    for _ in range(3):
        sgd_step([w], [np.zeros(2)], st_)
    np.testing.assert_array_equal(w, [1.5, -2.0])


def test_lr_schedule_two_drops():
    st_ = OptimizerState(initial_lr=0.01, drop_factor=10, drop_every=100)
    assert math.isclose(st_.lr_at(250), 1e-4, rel_tol=1e-12)
    assert st_.lr_at(99) == 0.01


def test_sgd_rejects_non_finite():
    st_ = OptimizerState(initial_lr=0.1)
    with pytest.raises(TrainingDivergedError):
        sgd_step([np.zeros(1)], [np.array([np.nan])], st_)


# ---- loss ----------------------------------------------------------------

def test_loss_examples():
    assert multinomial_logistic_loss(np.eye(3), [0, 1, 2])[0] == 0.0
    loss, _ = multinomial_logistic_loss(np.full((2, 4), 0.25), [0, 3])
    assert math.isclose(loss, math.log(4), rel_tol=1e-12)
    probs = np.array([[0.5, 0.5], [0.75, 0.25]])
    loss, grad = multinomial_logistic_loss(probs, [0, 1])
    assert math.isclose(loss, (math.log(2) + math.log(4)) / 2, rel_tol=1e-12)
    assert abs(loss - 1.0397) < 1e-4
    np.testing.assert_allclose(grad, [[-1.0, 0.0], [0.0, -2.0]])


def test_loss_floor():
    loss, _ = multinomial_logistic_loss(np.array([[1.0, 0.0]]), [1])
    assert math.isclose(loss, -math.log(1e-12))


# ---- k-means -------------------------------------------------------------

def test_kmeans_four_points_matches_exhaustive_search():
    pts = np.array([[0, 0], [0, 1], [10, 10], [10, 11]], dtype=float)
    best_sse, best_labels = best_kmeans_partition(pts, 2)
    assert best_sse == pytest.approx(1.0)
    for seed in range(20):
        res = kmeans(pts, 2, make_rng(seed))
        assert res.sse == pytest.approx(best_sse)
        centers = sorted(map(tuple, res.centers))
        assert centers == [(0.0, 0.5), (10.0, 10.5)]


def test_kmeans_k_equals_n():
    pts = make_rng(2).standard_normal((7, 3))
    res = kmeans(pts, 7, make_rng(0))
    assert res.sse == 0.0
    assert sorted(res.assignments.tolist()) == list(range(7))


def test_kmeans_identical_points():
    pts = np.tile([[1.5, -2.0]], (6, 1))
    res = kmeans(pts, 4, make_rng(0))
    np.testing.assert_array_equal(res.centers, np.tile([[1.5, -2.0]], (4, 1)))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 40), st.integers(1, 6))
def test_kmeans_sse_non_increasing_and_centers_are_means(seed, n, k):
    k = min(k, n)
    rng = make_rng(seed)
    pts = rng.standard_normal((n, 2)) * rng.uniform(0.1, 5)
    res = kmeans(pts, k, make_rng(seed, 1))
    assert all(b <= a + 1e-9 for a, b in zip(res.sse_trace, res.sse_trace[1:]))
    for c in range(k):
        members = pts[res.assignments == c]
        if len(members):
            np.testing.assert_allclose(res.centers[c], members.mean(0), atol=1e-12)


def test_kmeans_deterministic():
    pts = make_rng(5).standard_normal((50, 3))
    a = kmeans(pts, 5, make_rng(9))
    b = kmeans(pts, 5, make_rng(9))
    np.testing.assert_array_equal(a.centers, b.centers)
    np.testing.assert_array_equal(a.assignments, b.assignments)


# ---- eigensolver ---------------------------------------------------------

def test_eigh_identity():
    w, v = eigh_symmetric(np.eye(3))
    np.testing.assert_allclose(w, [1, 1, 1])
    np.testing.assert_allclose(v.T @ v, np.eye(3), atol=1e-12)


def test_eigh_diagonal():
    w, v = eigh_symmetric(np.diag([3.0, 1.0, 2.0]))
    np.testing.assert_array_equal(w, [1, 2, 3])
    np.testing.assert_array_equal(np.abs(v), np.eye(3)[:, [1, 2, 0]])


def test_eigh_two_by_two():
    w, v = eigh_symmetric(np.array([[2.0, 1.0], [1.0, 2.0]]))
    np.testing.assert_allclose(w, [1.0, 3.0], atol=1e-14)
    r = 1 / math.sqrt(2)
    np.testing.assert_allclose(v[:, 0], [r, -r], atol=1e-14)
    np.testing.assert_allclose(v[:, 1], [r, r], atol=1e-14)


def test_eigh_rejects_asymmetric():
    with pytest.raises(InvalidInputError):
        eigh_symmetric(np.array([[1.0, 2.0], [0.0, 1.0]]))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 64), st.integers(0, 2**32))
def test_eigh_reconstruction_random(n, seed):
    a = np.random.default_rng(seed).standard_normal((n, n))
    m = (a + a.T) / 2
    w, v = eigh_symmetric(m)
    assert np.all(np.diff(w) >= 0)
    assert np.linalg.norm(v @ np.diag(w) @ v.T - m) <= 1e-7 * max(np.linalg.norm(m), 1e-300)
    assert np.max(np.abs(v.T @ v - np.eye(n))) <= 1e-8
    assert np.max(np.linalg.norm(m @ v - v * w, axis=0)) <= 1e-8 * max(1.0, np.abs(w).max())
    np.testing.assert_allclose(w, np.linalg.eigvalsh(m), atol=1e-10 * max(1.0, np.abs(w).max()))


# ---- serialization and determinism --------------------------------------

def test_spec_text_round_trip():
    spec = build_spec((1, 8, 8), ["conv2d in=1 out=2 kernel=3 pad=1", "relu", "maxpool size=2",
                                  "flatten", "fully-connected in=32 out=4", "softmax"], 3)
    again = NetworkSpec.from_text(spec.to_text())
    assert again == spec
    assert again.label_count == 4
    assert again.split_index == 3


def test_spec_rejects_chain_mismatch():
    with pytest.raises(InvalidInputError):
        build_spec((1, 8, 8), ["conv2d in=2 out=2 kernel=3"], 0)
    with pytest.raises(InvalidInputError):
        LayerSpec("conv2d", {"in": 1, "out": 1, "kernel": 3, "pad": 3})


def test_checkpoint_round_trip(tmp_path):
    net = _net((1, 6, 6), ["conv2d in=1 out=2 kernel=3", "flatten", "fc in=32 out=3", "softmax"])
    save_network(net, tmp_path / "n.spec", tmp_path / "n.hdw")
    back = load_network(tmp_path / "n.spec", tmp_path / "n.hdw")
    for a, b in zip(net.param_arrays(), back.param_arrays()):
        np.testing.assert_array_equal(a, b)
    raw = (tmp_path / "n.hdw").read_bytes()
    assert raw[:4] == b"HDW1"
    # first tensor: rank 4, dims 2,1,3,3
    assert raw[4:8] == (4).to_bytes(4, "little")


def test_checkpoint_errors():
    with pytest.raises(FormatError) as exc:
        parse_tensors(b"XXXX")
    assert exc.value.offset == 0
    data = dump_tensors([np.ones((2, 2))])
    with pytest.raises(FormatError):
        parse_tensors(data[:-3])


def _train_steps(seed, steps=5):
    net = _net((1, 6, 6), ["conv2d in=1 out=2 kernel=3 pad=1", "relu", "maxpool size=2", "flatten",
                           "fc in=18 out=3", "softmax"], seed)
    rng = make_rng(seed, "data")
    x = rng.standard_normal((8, 1, 6, 6))
    y = rng.integers(0, 3, 8)
    state = OptimizerState(initial_lr=0.1)
    for _ in range(steps):
        tr = forward(net, x)
        _, g = multinomial_logistic_loss(tr.output, y)
        grads, _ = backward(net, tr, g, input_grad=False)
        sgd_step(net.param_arrays(), flatten_grads(net, grads), state)
    return net


def test_training_is_bit_deterministic():
    a, b = _train_steps(4), _train_steps(4)
    for x, y in zip(a.param_arrays(), b.param_arrays()):
        assert x.tobytes() == y.tobytes()
