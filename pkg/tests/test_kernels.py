import numpy as np
import pytest

from magtac import _fallback, kernels

BACKENDS = ["python"] + (["cython"] if kernels.HAVE_CYTHON else [])


def naive_conv(x, w, b, stride, pad):
    """Six nested loops, no tricks."""
    n, c, h, wd = x.shape
    oc, _, k, _ = w.shape
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, oc, oh, ow))
    for ni in range(n):
        for o in range(oc):
            for i in range(oh):
                for j in range(ow):
                    acc = b[o]
                    for ci in range(c):
                        for p in range(k):
                            for q in range(k):
                                yy, xx = i * stride + p - pad, j * stride + q - pad
                                if 0 <= yy < h and 0 <= xx < wd:
                                    acc += x[ni, ci, yy, xx] * w[o, ci, p, q]
                    out[ni, o, i, j] = acc
    return out


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("k,stride,pad", [(3, 1, 0), (3, 2, 1), (7, 2, 3), (5, 2, 2), (1, 1, 0)])
def test_im2col_matmul_matches_naive(backend, k, stride, pad, rng):
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((4, 3, k, k))
    b = rng.standard_normal(4)
    cols = kernels.im2col(x, k, k, stride, pad, backend=backend)
    oh = (8 + 2 * pad - k) // stride + 1
    out = (cols @ w.reshape(4, -1).T + b).reshape(2, oh, oh, 4).transpose(0, 3, 1, 2)
    np.testing.assert_allclose(out, naive_conv(x, w, b, stride, pad), atol=1e-12, rtol=0)


@pytest.mark.parametrize("backend", BACKENDS)
def test_col2im_is_adjoint_of_im2col(backend, rng):
    # <im2col(x), c> == <x, col2im(c)>
    x = rng.standard_normal((2, 3, 9, 7))
    cols = kernels.im2col(x, 3, 3, 2, 1, backend=backend)
    c = rng.standard_normal(cols.shape)
    back = kernels.col2im(c, x.shape, 3, 3, 2, 1, backend=backend)
    assert np.isclose(np.sum(cols * c), np.sum(x * back), rtol=1e-12)


@pytest.mark.skipif(not kernels.HAVE_CYTHON, reason="compiled kernels not built")
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_backends_agree(dtype, rng):
    x = rng.standard_normal((3, 4, 11, 10)).astype(dtype)
    a = kernels.im2col(x, 5, 5, 2, 2, backend="python")
    b = kernels.im2col(x, 5, 5, 2, 2, backend="cython")
    assert a.dtype == b.dtype == dtype
    np.testing.assert_array_equal(a, b)
    c = rng.standard_normal(a.shape).astype(dtype)
    np.testing.assert_allclose(
        kernels.col2im(c, x.shape, 5, 5, 2, 2, backend="python"),
        kernels.col2im(c, x.shape, 5, 5, 2, 2, backend="cython"),
        rtol=1e-5 if dtype == np.float32 else 1e-12,
        atol=1e-5 if dtype == np.float32 else 1e-12,
    )


def test_fallback_importable_directly():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    np.testing.assert_array_equal(_fallback.im2col(x, 1, 1, 1, 0)[:, 0], x.ravel())


def test_unknown_backend():
    with pytest.raises(ValueError):
        kernels.im2col(np.zeros((1, 1, 3, 3)), 1, 1, 1, 0, backend="fortran")


def test_benchmark_runs():
    import importlib.util
    from pathlib import Path

    path = Path(__file__).resolve().parents[1] / "benchmarks" / "bench_kernels.py"
    spec = importlib.util.spec_from_file_location("bench_kernels", path)
    bench = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(bench)
    bench.CASES = bench.CASES[2:3]
    rows = bench.run(repeats=1)
    assert {r[2] for r in rows} == set(BACKENDS)
