"""Dense NCHW tensors with reverse-mode automatic differentiation.

A deliberately small engine: numpy arrays wrapped in :class:`Tensor`, each
operation recording its inputs and a backward rule on the output node. Calling
``backward()`` on a scalar linearizes the recorded graph into a :class:`Tape`
(operations in execution order, so every op's inputs precede it) and replays
the rules in reverse, accumulating gradients over fan-out.

Conventions:

* convolutions are cross-correlations (no kernel flip),
* 64-bit floats by default; float32 is supported end to end,
* all forward ops are pure functions of their inputs,
* ops never broadcast except bias-add over channels and the documented
  scalar/channel helpers.

Set ``LTNN_DEBUG_NAN=1`` (or call :func:`set_nan_checks`) to assert that every
forward op produces finite values.
"""

from __future__ import annotations

import os
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import kernels

DEFAULT_DTYPE = np.float64
_FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True
_nan_checks = os.environ.get("LTNN_DEBUG_NAN", "") not in ("", "0")


def set_nan_checks(enabled):
    """Toggle per-op finiteness assertions (slow; for debugging)."""
    global _nan_checks
    _nan_checks = bool(enabled)


@contextmanager
def no_grad():
    """Context manager that disables recording; ops run as plain numpy."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled():
    return _grad_enabled


class Tensor:
    """A numpy array plus gradient slot and a link into the recorded graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._op = ""

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        tag = f" op={self._op}" if self._op else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    def item(self):
        return float(self.data)

    def detach(self):
        """A new leaf sharing this tensor's values, cut off from the graph."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def _in_graph(self):
        return self.requires_grad or self._backward is not None

    def backward(self):
        """Reverse-mode pass from this scalar; accumulates into ``.grad``."""
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar output, got shape {self.data.shape}")
        tape = Tape.from_output(self)
        if self.grad is None:
            self.grad = np.ones_like(self.data)
        for node in reversed(tape.nodes):
            if node._backward is not None:
                node._backward(node.grad)

    # -- elementwise arithmetic (same-shape only, plus python scalars) -----

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def sum(self):
        return sum_all(self)

    def abs(self):
        return abs_(self)

    def log(self):
        return log(self)

    def clamp(self, lo, hi):
        return clamp(self, lo, hi)


class Tape:
    """Topologically ordered record of the operations behind one output.

    ``nodes`` lists every tensor reachable backwards from the output, inputs
    before the ops that consume them; replaying backward rules in reverse
    order therefore sees each node's gradient fully accumulated before use.
    """

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out):
        order = []
        seen = set()
        stack = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def operations(self):
        """(op name, input ids, output id) triples in execution order."""
        return [
            (n._op, tuple(id(p) for p in n._parents), id(n))
            for n in self.nodes
            if n._backward is not None
        ]


def _wrap(data, parents, op, backward):
    if _nan_checks and not np.isfinite(data).all():
        raise FloatingPointError(f"non-finite values produced by op {op!r}")
    out = Tensor(data)
    if _grad_enabled and any(p._in_graph() for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


def _acc(t, g):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _check_same_shape(op, a, b):
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: operand shapes differ: {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b):
    _check_same_shape("add", a, b)

    def bw(g):
        _acc(a, g)
        _acc(b, g)

    return _wrap(a.data + b.data, (a, b), "add", bw)


def sub(a, b):
    _check_same_shape("sub", a, b)

    def bw(g):
        _acc(a, g)
        _acc(b, -g)

    return _wrap(a.data - b.data, (a, b), "sub", bw)


def mul(a, b):
    """Hadamard product of same-shape tensors."""
    _check_same_shape("mul", a, b)

    def bw(g):
        _acc(a, g * b.data)
        _acc(b, g * a.data)

    return _wrap(a.data * b.data, (a, b), "mul", bw)


def add_scalar(a, s):
    s = float(s)

    def bw(g):
        _acc(a, g)

    return _wrap(a.data + s, (a,), "add_scalar", bw)


def mul_scalar(a, s):
    s = float(s)

    def bw(g):
        _acc(a, g * s)

    return _wrap(a.data * s, (a,), "mul_scalar", bw)


def sum_all(a):
    """Sum of all elements, as a 0-d tensor."""

    def bw(g):
        _acc(a, np.broadcast_to(g, a.data.shape).copy())

    return _wrap(np.asarray(a.data.sum()), (a,), "sum", bw)


def abs_(a):
    """|a|, with the subgradient at 0 fixed to 0."""

    def bw(g):
        _acc(a, g * np.sign(a.data))

    return _wrap(np.abs(a.data), (a,), "abs", bw)


def log(a):
    def bw(g):
        _acc(a, g / a.data)

    return _wrap(np.log(a.data), (a,), "log", bw)


def clamp(a, lo, hi):
    """Clip to [lo, hi]; gradient passes only where values were not clipped."""
    lo = float(lo)
    hi = float(hi)
    inside = (a.data > lo) & (a.data < hi)

    def bw(g):
        _acc(a, g * inside)

    return _wrap(np.clip(a.data, lo, hi), (a,), "clamp", bw)


def _sigmoid(x):
    # evaluated on the negative half-line to avoid overflow either way
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    s = _sigmoid(a.data)

    def bw(g):
        _acc(a, g * s * (1.0 - s))

    return _wrap(s, (a,), "sigmoid", bw)


def swish(a, beta):
    """x * sigmoid(beta * x) with a trainable scalar beta (shape (1,))."""
    if beta.data.size != 1:
        raise ValueError(f"swish: beta must be a single scalar, got shape {beta.data.shape}")
    b = float(beta.data.reshape(()))
    s = _sigmoid(b * a.data)

    def bw(g):
        sp = s * (1.0 - s)
        _acc(a, g * (s + b * a.data * sp))
        _acc(beta, np.asarray([(g * a.data * a.data * sp).sum()], dtype=beta.data.dtype).reshape(beta.data.shape))

    return _wrap(a.data * s, (a, beta), "swish", bw)


# ---------------------------------------------------------------------------
# structured ops


def conv2d(x, w, b=None, stride=1, padding=0):
    """Cross-correlation of x (B,Cin,H,W) with w (Cout,Cin,kh,kw), bias over Cout.

    Output spatial size is floor((H + 2p - k)/s) + 1 per axis. Lowered onto
    im2col + one GEMM; the backward pass reuses the cached columns.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError(f"conv2d: expected 4-d input and weights, got {x.data.shape} and {w.data.shape}")
    bsz, cin, h, wdt = x.data.shape
    cout, cin_w, kh, kw = w.data.shape
    if cin != cin_w:
        raise ValueError(f"conv2d: input channels {x.data.shape} do not match weights {w.data.shape}")
    s = int(stride)
    p = int(padding)
    if h + 2 * p < kh or wdt + 2 * p < kw:
        raise ValueError(f"conv2d: kernel {w.data.shape} larger than padded input {x.data.shape} (padding={p})")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    ho = (h + 2 * p - kh) // s + 1
    wo = (wdt + 2 * p - kw) // s + 1
    cols = kernels.im2col(xp, kh, kw, s, s)
    wmat = w.data.reshape(cout, cin * kh * kw)
    out = np.matmul(wmat, cols)
    if b is not None:
        out = out + b.data[None, :, None]
    out = out.reshape(bsz, cout, ho, wo)
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        go = g.reshape(bsz, cout, ho * wo)
        if b is not None:
            _acc(b, g.sum(axis=(0, 2, 3)))
        _acc(w, np.matmul(go, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.data.shape))
        gcols = np.matmul(wmat.T, go)
        gxp = kernels.col2im(gcols, xp.shape, kh, kw, s, s)
        _acc(x, gxp[:, :, p : p + h, p : p + wdt] if p else gxp)

    return _wrap(out, parents, "conv2d", bw)


def conv2d_transpose(x, w, b=None, stride=1, padding=0):
    """Transposed convolution: the adjoint of conv2d with the same geometry.

    x is (B,Cin,H,W), w is (Cin,Cout,kh,kw); the output spatial size is
    (H-1)*s - 2p + k per axis. The forward pass equals the
    gradient-of-conv2d-with-respect-to-input operator.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError(
            f"conv2d_transpose: expected 4-d input and weights, got {x.data.shape} and {w.data.shape}"
        )
    bsz, cin, h, wdt = x.data.shape
    cin_w, cout, kh, kw = w.data.shape
    if cin != cin_w:
        raise ValueError(f"conv2d_transpose: input channels {x.data.shape} do not match weights {w.data.shape}")
    s = int(stride)
    p = int(padding)
    ho = (h - 1) * s - 2 * p + kh
    wo = (wdt - 1) * s - 2 * p + kw
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d_transpose: geometry yields empty output {ho}x{wo}")
    wmat = w.data.reshape(cin, cout * kh * kw)
    xflat = x.data.reshape(bsz, cin, h * wdt)
    gcols = np.matmul(wmat.T, xflat)
    padded_shape = (bsz, cout, ho + 2 * p, wo + 2 * p)
    outp = kernels.col2im(gcols, padded_shape, kh, kw, s, s)
    out = outp[:, :, p : p + ho, p : p + wo] if p else outp
    if b is not None:
        out = out + b.data[None, :, None, None]
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        if b is not None:
            _acc(b, g.sum(axis=(0, 2, 3)))
        gp = np.pad(g, ((0, 0), (0, 0), (p, p), (p, p))) if p else g
        cols_g = kernels.im2col(gp, kh, kw, s, s)
        _acc(x, np.matmul(wmat, cols_g).reshape(x.data.shape))
        _acc(w, np.matmul(xflat, cols_g.transpose(0, 2, 1)).sum(axis=0).reshape(w.data.shape))

    return _wrap(out, parents, "conv2d_transpose", bw)


def _interp_matrix(n_out, n_in, dtype):
    # half-pixel centers, edges replicated by clamping both taps
    m = np.zeros((n_out, n_in), dtype=dtype)
    factor = n_out / n_in
    for r in range(n_out):
        src = (r + 0.5) / factor - 0.5
        i0 = int(np.floor(src))
        t = src - i0
        m[r, min(max(i0, 0), n_in - 1)] += 1.0 - t
        m[r, min(max(i0 + 1, 0), n_in - 1)] += t
    return m


def bilinear_upsample(x, factor):
    """Upsample (B,C,H,W) by an integer factor with half-pixel sample centers."""
    factor = int(factor)
    if factor < 1:
        raise ValueError(f"bilinear_upsample: factor must be >= 1, got {factor}")
    bsz, c, h, wdt = x.data.shape
    rmat = _interp_matrix(h * factor, h, x.data.dtype)
    cmat = _interp_matrix(wdt * factor, wdt, x.data.dtype)
    # rows then columns; both passes are small dense matmuls
    out = np.einsum("oi,bcij->bcoj", rmat, x.data, optimize=True)
    out = np.einsum("pj,bcoj->bcop", cmat, out, optimize=True)

    def bw(g):
        gi = np.einsum("pj,bcop->bcoj", cmat, g, optimize=True)
        _acc(x, np.einsum("oi,bcoj->bcij", rmat, gi, optimize=True))

    return _wrap(out, (x,), "bilinear_upsample", bw)


def shift(x, i, j):
    """Shift (B,C,H,W) by (i, j) in {-1,0,1}^2 with replicate boundary.

    out[r, c] = x[clamp(r - i), clamp(c - j)].
    """
    if i not in (-1, 0, 1) or j not in (-1, 0, 1):
        raise ValueError(f"shift: offsets must be in {{-1,0,1}}, got ({i}, {j})")
    bsz, c, h, wdt = x.data.shape
    rows = np.clip(np.arange(h) - i, 0, h - 1)
    cols = np.clip(np.arange(wdt) - j, 0, wdt - 1)
    out = x.data[:, :, rows][:, :, :, cols]

    def bw(g):
        gx = np.zeros_like(x.data)
        # clamped rows/columns scatter back onto the edge they were read from
        np.add.at(gx, (slice(None), slice(None), rows[:, None], cols[None, :]), g)
        _acc(x, gx)

    return _wrap(out, (x,), "shift", bw)


def global_avg_pool(x):
    """Mean over the spatial axes of (B,C,H,W), keeping shape (B,C,1,1)."""
    bsz, c, h, wdt = x.data.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def bw(g):
        _acc(x, np.broadcast_to(g / (h * wdt), x.data.shape).copy())

    return _wrap(out, (x,), "global_avg_pool", bw)


def concat_channels(parts):
    """Concatenate tensors along the channel axis of (B,C,H,W)."""
    parts = list(parts)
    ref = parts[0].data.shape
    for t in parts[1:]:
        if t.data.shape[0] != ref[0] or t.data.shape[2:] != ref[2:]:
            raise ValueError(
                f"concat_channels: incompatible shapes {ref} vs {t.data.shape}"
            )
    widths = [t.data.shape[1] for t in parts]
    out = np.concatenate([t.data for t in parts], axis=1)

    def bw(g):
        start = 0
        for t, width in zip(parts, widths):
            _acc(t, g[:, start : start + width])
            start += width

    return _wrap(out, tuple(parts), "concat_channels", bw)


def channel_scale(x, scale):
    """Multiply each channel of (B,C,H,W) by the matching entry of scale (C,)."""
    if scale.data.shape != (x.data.shape[1],):
        raise ValueError(
            f"channel_scale: scale shape {scale.data.shape} does not match channels of {x.data.shape}"
        )
    sc = scale.data[None, :, None, None]

    def bw(g):
        _acc(x, g * sc)
        _acc(scale, (g * x.data).sum(axis=(0, 2, 3)))

    return _wrap(x.data * sc, (x, scale), "channel_scale", bw)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    passed: bool
    max_error: float
    worst_param: str
    worst_element: int
    errors: dict = field(default_factory=dict)

    def __str__(self):
        verdict = "pass" if self.passed else "FAIL"
        return (
            f"grad_check {verdict}: max error {self.max_error:.3e} "
            f"at parameter '{self.worst_param}', element {self.worst_element}"
        )


def grad_check(build_loss, params, tolerance=1e-4, step=1e-5):
    """Compare reverse-mode gradients against central finite differences.

    ``build_loss`` must rebuild the scalar loss from scratch on every call
    (so perturbed parameter values are picked up). ``params`` maps names to
    the leaf tensors to check; a plain sequence works too and gets positional
    names. Errors are normalized as |a - n| / max(1, |a|, |n|), so the
    tolerance acts absolutely for small gradients and relatively for large
    ones. Returns a report locating the worst parameter/element.
    """
    if isinstance(params, dict):
        names, tensors = list(params.keys()), list(params.values())
    else:
        tensors = list(params)
        names = [f"param{i}" for i in range(len(tensors))]
    for p in tensors:
        p.zero_grad()
    loss = build_loss()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in tensors]

    max_err = 0.0
    worst = (names[0] if names else "", 0)
    errors = {}
    for pi, p in enumerate(tensors):
        flat = p.data.reshape(-1)
        num = np.zeros_like(flat)
        for ei in range(flat.size):
            orig = flat[ei]
            flat[ei] = orig + step
            f_plus = float(build_loss().data)
            flat[ei] = orig - step
            f_minus = float(build_loss().data)
            flat[ei] = orig
            num[ei] = (f_plus - f_minus) / (2.0 * step)
        a = analytic[pi].reshape(-1)
        denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(num)))
        err = np.abs(a - num) / denom
        errors[names[pi]] = float(err.max()) if err.size else 0.0
        if err.size and err.max() > max_err:
            max_err = float(err.max())
            worst = (names[pi], int(err.argmax()))
    return GradCheckReport(
        passed=max_err < tolerance,
        max_error=max_err,
        worst_param=worst[0],
        worst_element=worst[1],
        errors=errors,
    )
