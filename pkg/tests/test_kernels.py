import numpy as np
import pytest

from hdcnn import kernels
from hdcnn.kernels import compiled_available, get_backend

pytestmark = pytest.mark.skipif(not compiled_available(), reason="compiled extension not built")

PY = get_backend("python")


@pytest.fixture(scope="module")
def cy():
    return get_backend("cython")


@pytest.mark.parametrize("k,stride,pad", [(5, 1, 2), (3, 2, 1), (2, 1, 0), (3, 3, 0)])
def test_im2col_col2im_bit_identical(cy, k, stride, pad):
    rng = np.random.default_rng(k * 10 + stride)
    x = rng.standard_normal((3, 2, 9, 8))
    a = PY.im2col(x, k, k, stride, pad)
    assert np.array_equal(a, cy.im2col(x, k, k, stride, pad))
    cols = rng.standard_normal(a.shape)
    assert np.array_equal(PY.col2im(cols, x.shape, k, k, stride, pad), cy.col2im(cols, x.shape, k, k, stride, pad))


def test_col2im_is_adjoint_of_im2col():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 7, 7))
    cols = kernels.im2col(x, 3, 3, 2, 1)
    r = rng.standard_normal(cols.shape)
    lhs = np.sum(cols * r)
    rhs = np.sum(x * kernels.col2im(r, x.shape, 3, 3, 2, 1))
    assert lhs == pytest.approx(rhs, rel=1e-12)


@pytest.mark.parametrize("size,stride", [(2, 2), (3, 2), (3, 1)])
def test_maxpool_bit_identical(cy, size, stride):
    rng = np.random.default_rng(size)
    x = np.round(rng.standard_normal((2, 3, 9, 9)), 1)  # rounding creates ties
    o1, a1 = PY.maxpool_forward(x, size, stride)
    o2, a2 = cy.maxpool_forward(x, size, stride)
    assert np.array_equal(o1, o2) and np.array_equal(a1, a2)
    d = rng.standard_normal(o1.shape)
    assert np.array_equal(PY.maxpool_backward(d, a1, x.shape, size, stride),
                          cy.maxpool_backward(d, a2, x.shape, size, stride))


@pytest.mark.parametrize("n", [1, 2, 7, 20])
def test_jacobi_bit_identical(cy, n):
    a = np.random.default_rng(n).standard_normal((n, n))
    m = a + a.T
    w1, v1, s1 = PY.jacobi_eigh(m, 1e-12, 100)
    w2, v2, s2 = cy.jacobi_eigh(m, 1e-12, 100)
    assert s1 == s2
    assert np.array_equal(w1, w2) and np.array_equal(v1, v2)


def test_pq_lookup_bit_identical(cy):
    rng = np.random.default_rng(1)
    idx = rng.integers(0, 16, (12, 10)).astype(np.uint8)
    centers = rng.standard_normal((16, 40)).astype(np.float32)
    x = rng.standard_normal((40, 5))
    assert np.array_equal(PY.pq_lookup(idx, centers, x), cy.pq_lookup(idx, centers, x))
