import itertools

import numpy as np
import pytest

from rgbt_decouple import _pykernels, kernels

compiled = pytest.mark.skipif(not kernels.compiled_available(), reason="compiled kernels not built")


@pytest.fixture
def backend():
    prev = kernels.BACKEND
    yield kernels.use_backend
    kernels.use_backend(prev)


def _shapes():
    return itertools.product((1, 2), (1, 3), (1, 2, 3, 5, 8), (1, 2, 4, 7), (1, 2))


def _im2col_loop(x, stride):
    n, c, h, w = x.shape
    ho, wo = (h - 1) // stride + 1, (w - 1) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.zeros((c * 9, n * ho * wo))
    for b, ch, kh, kw, i, j in itertools.product(range(n), range(c), range(3), range(3), range(ho), range(wo)):
        cols[ch * 9 + kh * 3 + kw, (b * ho + i) * wo + j] = xp[b, ch, i * stride + kh, j * stride + kw]
    return cols


@pytest.mark.parametrize("n,c,h,w,s", list(_shapes()))
def test_python_im2col_matches_loop(n, c, h, w, s):
    x = np.random.default_rng(0).normal(size=(n, c, h, w))
    assert np.array_equal(_pykernels.im2col(x, s), _im2col_loop(x, s))


def test_col2im_is_adjoint_of_im2col():
    rng = np.random.default_rng(1)
    for stride in (1, 2):
        x = rng.normal(size=(2, 3, 5, 6))
        cols = kernels.im2col(x, stride)
        y = rng.normal(size=cols.shape)
        lhs = (cols * y).sum()
        rhs = (x * kernels.col2im(y, x.shape, stride)).sum()
        assert lhs == pytest.approx(rhs, rel=1e-12)


@compiled
@pytest.mark.parametrize("n,c,h,w,s", list(_shapes()))
def test_backends_bit_identical(n, c, h, w, s, backend):
    rng = np.random.default_rng(2)
    x = rng.normal(size=(n, c, h, w))
    backend("python")
    cols_py = kernels.im2col(x, s)
    g = rng.normal(size=cols_py.shape)
    back_py = kernels.col2im(g, x.shape, s)
    backend("compiled")
    assert np.array_equal(kernels.im2col(x, s), cols_py)
    assert np.array_equal(kernels.col2im(g, x.shape, s), back_py)


@pytest.mark.parametrize("name", ["python", pytest.param("compiled", marks=compiled)])
def test_confusion_matrix_backends(name, backend):
    backend(name)
    rng = np.random.default_rng(3)
    label, pred = rng.integers(0, 5, 1000), rng.integers(0, 5, 1000)
    ref = np.zeros((5, 5), dtype=np.int64)
    np.add.at(ref, (label, pred), 1)
    assert np.array_equal(kernels.confusion_matrix(label, pred, 5), ref)
    with pytest.raises(ValueError, match="out of range"):
        kernels.confusion_matrix(np.array([0, 7]), np.array([0, 0]), 5)


@pytest.mark.parametrize("name", ["python", pytest.param("compiled", marks=compiled)])
def test_fnv1a64_reference_values(name, backend):
    backend(name)
    assert kernels.fnv1a64(b"") == 0xCBF29CE484222325
    assert kernels.fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    assert kernels.fnv1a64(b"foobar") == 0x85944171F73967E8


def test_unknown_backend_rejected():
    with pytest.raises(ValueError):
        kernels.use_backend("gpu")


def test_use_backend_returns_previous(backend):
    first = kernels.BACKEND
    assert backend("python") == first
    assert kernels.BACKEND == "python"
