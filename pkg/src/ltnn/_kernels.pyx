# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops for convolution lowering.

im2col gathers sliding windows of a padded NCHW batch into a column matrix so
that convolution becomes one GEMM; col2im is its exact adjoint (scatter-add).
Loop order is fixed, so accumulation order (and therefore floating-point
output) is identical from run to run.
"""
import numpy as np

ctypedef fused floating:
    float
    double


cdef void _im2col_impl(floating[:, :, :, ::1] x, floating[:, :, ::1] out,
                       Py_ssize_t kh, Py_ssize_t kw,
                       Py_ssize_t sh, Py_ssize_t sw) noexcept nogil:
    cdef Py_ssize_t B = x.shape[0]
    cdef Py_ssize_t C = x.shape[1]
    cdef Py_ssize_t Ho = (x.shape[2] - kh) // sh + 1
    cdef Py_ssize_t Wo = (x.shape[3] - kw) // sw + 1
    cdef Py_ssize_t b, c, ki, kj, oh, ow, row, base
    for b in range(B):
        for c in range(C):
            for ki in range(kh):
                for kj in range(kw):
                    row = (c * kh + ki) * kw + kj
                    for oh in range(Ho):
                        base = oh * Wo
                        for ow in range(Wo):
                            out[b, row, base + ow] = x[b, c, oh * sh + ki, ow * sw + kj]


cdef void _col2im_impl(floating[:, :, ::1] cols, floating[:, :, :, ::1] out,
                       Py_ssize_t kh, Py_ssize_t kw,
                       Py_ssize_t sh, Py_ssize_t sw) noexcept nogil:
    cdef Py_ssize_t B = out.shape[0]
    cdef Py_ssize_t C = out.shape[1]
    cdef Py_ssize_t Ho = (out.shape[2] - kh) // sh + 1
    cdef Py_ssize_t Wo = (out.shape[3] - kw) // sw + 1
    cdef Py_ssize_t b, c, ki, kj, oh, ow, row, base
    for b in range(B):
        for c in range(C):
            for ki in range(kh):
                for kj in range(kw):
                    row = (c * kh + ki) * kw + kj
                    for oh in range(Ho):
                        base = oh * Wo
                        for ow in range(Wo):
                            out[b, c, oh * sh + ki, ow * sw + kj] += cols[b, row, base + ow]


def im2col(x, int kh, int kw, int sh, int sw):
    """Gather windows of a padded batch x (B, C, Hp, Wp) into (B, C*kh*kw, Ho*Wo)."""
    B, C, Hp, Wp = x.shape
    Ho = (Hp - kh) // sh + 1
    Wo = (Wp - kw) // sw + 1
    out = np.empty((B, C * kh * kw, Ho * Wo), dtype=x.dtype)
    if x.dtype == np.float64:
        _im2col_impl[double](x, out, kh, kw, sh, sw)
    elif x.dtype == np.float32:
        _im2col_impl[float](x, out, kh, kw, sh, sw)
    else:
        raise TypeError(f"im2col: unsupported dtype {x.dtype}")
    return out


def col2im(cols, out_shape, int kh, int kw, int sh, int sw):
    """Scatter-add columns (B, C*kh*kw, Ho*Wo) back onto a padded batch of out_shape."""
    out = np.zeros(out_shape, dtype=cols.dtype)
    if cols.dtype == np.float64:
        _col2im_impl[double](cols, out, kh, kw, sh, sw)
    elif cols.dtype == np.float32:
        _col2im_impl[float](cols, out, kh, kw, sh, sw)
    else:
        raise TypeError(f"col2im: unsupported dtype {cols.dtype}")
    return out
