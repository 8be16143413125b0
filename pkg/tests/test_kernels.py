import numpy as np
import numpy.testing as npt
import pytest

from ltnn import kernels


def _cases():
    return [
        # (B, C, Hp, Wp, kh, kw, sh, sw)
        (1, 1, 4, 4, 2, 2, 1, 1),
        (2, 3, 9, 9, 3, 3, 2, 2),
        (1, 4, 8, 6, 3, 3, 1, 1),
        (3, 2, 10, 10, 4, 4, 2, 2),
        (1, 1, 5, 5, 5, 5, 1, 1),
        (2, 2, 7, 9, 1, 1, 2, 2),
    ]


def _im2col_loops(x, kh, kw, sh, sw):
    b, c, hp, wp = x.shape
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1
    out = np.zeros((b, c * kh * kw, ho * wo), dtype=x.dtype)
    for n in range(b):
        for ci in range(c):
            for ki in range(kh):
                for kj in range(kw):
                    for oh in range(ho):
                        for ow in range(wo):
                            out[n, (ci * kh + ki) * kw + kj, oh * wo + ow] = x[
                                n, ci, oh * sh + ki, ow * sw + kj
                            ]
    return out


@pytest.mark.parametrize("case", _cases())
def test_im2col_numpy_matches_loop_oracle(case, rng):
    b, c, hp, wp, kh, kw, sh, sw = case
    x = rng.normal(size=(b, c, hp, wp))
    npt.assert_array_equal(kernels.im2col_numpy(x, kh, kw, sh, sw), _im2col_loops(x, kh, kw, sh, sw))


@pytest.mark.parametrize("case", _cases())
def test_col2im_numpy_is_adjoint_of_im2col(case, rng):
    # <im2col(x), cols> == <x, col2im(cols)> defines the scatter exactly
    b, c, hp, wp, kh, kw, sh, sw = case
    x = rng.normal(size=(b, c, hp, wp))
    cols = rng.normal(size=kernels.im2col_numpy(x, kh, kw, sh, sw).shape)
    lhs = (kernels.im2col_numpy(x, kh, kw, sh, sw) * cols).sum()
    rhs = (x * kernels.col2im_numpy(cols, x.shape, kh, kw, sh, sw)).sum()
    npt.assert_allclose(lhs, rhs, rtol=1e-12)


@pytest.mark.skipif(not kernels.HAVE_EXT, reason="compiled kernels not built")
@pytest.mark.parametrize("case", _cases())
def test_ext_matches_numpy_bitwise(case, rng):
    b, c, hp, wp, kh, kw, sh, sw = case
    x = rng.normal(size=(b, c, hp, wp))
    npt.assert_array_equal(
        kernels.im2col_ext(x, kh, kw, sh, sw), kernels.im2col_numpy(x, kh, kw, sh, sw)
    )
    cols = rng.normal(size=kernels.im2col_numpy(x, kh, kw, sh, sw).shape)
    npt.assert_array_equal(
        kernels.col2im_ext(cols, x.shape, kh, kw, sh, sw),
        kernels.col2im_numpy(cols, x.shape, kh, kw, sh, sw),
    )


@pytest.mark.skipif(not kernels.HAVE_EXT, reason="compiled kernels not built")
def test_ext_float32(rng):
    x = rng.normal(size=(2, 3, 8, 8)).astype(np.float32)
    npt.assert_array_equal(kernels.im2col_ext(x, 3, 3, 1, 1), kernels.im2col_numpy(x, 3, 3, 1, 1))


def test_backend_switching(rng):
    before = kernels.current_backend()
    try:
        kernels.set_backend("numpy")
        assert kernels.current_backend() == "numpy"
        x = rng.normal(size=(1, 2, 6, 6))
        got = kernels.im2col(x, 3, 3, 1, 1)
        npt.assert_array_equal(got, kernels.im2col_numpy(x, 3, 3, 1, 1))
        with pytest.raises(ValueError):
            kernels.set_backend("bogus")
    finally:
        kernels.set_backend(before)
