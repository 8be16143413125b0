"""Convolution lowering kernels with a compiled fast path.

Both backends implement the same two primitives:

* ``im2col(x, kh, kw, sh, sw)``: gather sliding windows of an already padded
  batch ``x`` of shape (B, C, Hp, Wp) into columns (B, C*kh*kw, Ho*Wo), row
  index ordered as (c, ki, kj).
* ``col2im(cols, out_shape, kh, kw, sh, sw)``: the exact adjoint, scatter-add
  of the columns back onto a zeroed padded batch.

At import time the compiled extension (built from ``_kernels.pyx``) is used
when available; otherwise a pure-numpy fallback based on stride tricks takes
over. Set the environment variable ``LTNN_NO_EXT=1`` before import, or call
``set_backend("numpy")``, to force the fallback. Both backends produce
bit-identical results.
"""

import os

import numpy as np
from numpy.lib.stride_tricks import as_strided

try:
    from . import _kernels as _ext
except ImportError:  # extension not built; numpy fallback only
    _ext = None

if os.environ.get("LTNN_NO_EXT", "") not in ("", "0"):
    _ext = None

HAVE_EXT = _ext is not None


def _out_hw(hp, wp, kh, kw, sh, sw):
    return (hp - kh) // sh + 1, (wp - kw) // sw + 1


def im2col_numpy(x, kh, kw, sh, sw):
    b, c, hp, wp = x.shape
    ho, wo = _out_hw(hp, wp, kh, kw, sh, sw)
    sb, sc, sh_, sw_ = x.strides
    windows = as_strided(
        x,
        shape=(b, c, kh, kw, ho, wo),
        strides=(sb, sc, sh_, sw_, sh_ * sh, sw_ * sw),
    )
    # reshape copies, which also drops the aliasing from as_strided
    return windows.reshape(b, c * kh * kw, ho * wo)


def col2im_numpy(cols, out_shape, kh, kw, sh, sw):
    b, c, hp, wp = out_shape
    ho, wo = _out_hw(hp, wp, kh, kw, sh, sw)
    out = np.zeros(out_shape, dtype=cols.dtype)
    blocks = cols.reshape(b, c, kh, kw, ho, wo)
    for ki in range(kh):
        for kj in range(kw):
            out[:, :, ki : ki + sh * ho : sh, kj : kj + sw * wo : sw] += blocks[:, :, ki, kj]
    return out


def im2col_ext(x, kh, kw, sh, sw):
    if _ext is None:
        raise RuntimeError("compiled kernels are not available")
    return _ext.im2col(np.ascontiguousarray(x), kh, kw, sh, sw)


def col2im_ext(cols, out_shape, kh, kw, sh, sw):
    if _ext is None:
        raise RuntimeError("compiled kernels are not available")
    return _ext.col2im(np.ascontiguousarray(cols), out_shape, kh, kw, sh, sw)


_BACKENDS = {
    "numpy": (im2col_numpy, col2im_numpy),
    "ext": (im2col_ext, col2im_ext),
}

_active = "ext" if HAVE_EXT else "numpy"
im2col, col2im = _BACKENDS[_active]


def set_backend(name):
    """Select the kernel backend ("ext" or "numpy") at runtime."""
    global _active, im2col, col2im
    if name not in _BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "ext" and not HAVE_EXT:
        raise RuntimeError("compiled kernels are not available")
    _active = name
    im2col, col2im = _BACKENDS[name]


def current_backend():
    return _active
