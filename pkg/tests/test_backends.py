"""The numba kernels and the numpy fallback must agree."""

import numpy as np
import pytest

from sparsedecode import _kernels_numpy as npk

nbk = pytest.importorskip("sparsedecode._kernels_numba")


@pytest.fixture
def data(rng):
    return {
        "a": rng.standard_normal((7, 40)).astype(np.float32),
        "b": rng.standard_normal((40, 9)).astype(np.float32),
        "q": rng.standard_normal((3, 16)).astype(np.float32),
        "k": rng.standard_normal((301, 16)).astype(np.float32),
        "v": rng.standard_normal((301, 16)).astype(np.float32),
        "w": rng.standard_normal(40).astype(np.float32),
    }


def test_matmul_bitwise(data):
    np.testing.assert_array_equal(nbk.matmul(data["a"], data["b"]), npk.matmul(data["a"], data["b"]))


def test_rms_norm_bitwise(data):
    eps = np.float32(1e-5)
    np.testing.assert_array_equal(
        nbk.rms_norm_rows(data["a"], data["w"], eps), npk.rms_norm_rows(data["a"], data["w"], eps)
    )


def test_inner_products_bitwise(data):
    np.testing.assert_array_equal(
        nbk.inner_products(data["q"], data["k"]), npk.inner_products(data["q"], data["k"])
    )


@pytest.mark.parametrize("page_size", [1, 5, 16, 400])
@pytest.mark.parametrize("use_max", [False, True])
def test_page_bounds_bitwise(data, page_size, use_max):
    np.testing.assert_array_equal(
        nbk.page_bounds(data["q"], data["k"], page_size, use_max),
        npk.page_bounds(data["q"], data["k"], page_size, use_max),
    )


def test_attend_close(data):
    scale = np.float32(0.25)
    out_nb, s_nb = nbk.attend(data["q"], data["k"], data["v"], scale)
    out_np, s_np = npk.attend(data["q"], data["k"], data["v"], scale)
    np.testing.assert_array_equal(s_nb, s_np)
    np.testing.assert_allclose(out_nb, out_np, atol=1e-6)


def test_top_k_identical(rng):
    for _ in range(50):
        s = rng.integers(0, 20, size=500).astype(np.float32)
        m = int(rng.integers(1, 500))
        np.testing.assert_array_equal(nbk.top_k(s, m), npk.top_k(s, m))
