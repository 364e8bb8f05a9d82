"""Differentiable primitives over :class:`~fetrack.numerics.tensor.Tensor`.

Broadcasting is deliberately narrow: binary elementwise ops accept equal
shapes, or a right operand whose shape is a trailing suffix of the left one
(bias-style). Anything else raises :class:`~fetrack.errors.ShapeError`.

Reductions follow numpy's fixed pairwise order along the reduced axis, so
repeated calls on identical inputs are bit-identical.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from fetrack.errors import NumericError, ParameterError, ShapeError
from fetrack.numerics.tensor import Tensor, as_tensor, record


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"{op}: non-finite input")


def _suffix_reduce(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    if len(sb) <= len(sa) and sa[len(sa) - len(sb):] == sb:
        return
    raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


def _pair(a, b):
    a = as_tensor(a, dtype=b.dtype if isinstance(b, Tensor) else None)
    b = as_tensor(b, dtype=a.dtype)
    return a, b


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _binary_shapes(a, b, "add")
    return record("add", a.data + b.data, (a, b),
                  lambda g: (g, _suffix_reduce(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _binary_shapes(a, b, "sub")
    return record("sub", a.data - b.data, (a, b),
                  lambda g: (g, -_suffix_reduce(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _binary_shapes(a, b, "mul")
    ad, bd = a.data, b.data
    return record("mul", ad * bd, (a, b),
                  lambda g: (g * bd, _suffix_reduce(g * ad, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _binary_shapes(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        ga = g / bd
        return ga, _suffix_reduce(-ga * out, b.shape)

    return record("div", out, (a, b), vjp)


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    return record("scale", a.data * a.dtype.type(s), (a,), lambda g: (g * a.dtype.type(s),))


def add_scalar(a, s: float) -> Tensor:
    a = as_tensor(a)
    return record("add_scalar", a.data + a.dtype.type(s), (a,), lambda g: (g,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return record("exp", out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    if np.any(xd <= 0):
        raise NumericError("log: non-positive input")
    return record("log", np.log(xd), (x,), lambda g: (g / xd,))


def abs(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    sgn = np.sign(x.data)
    return record("abs", np.abs(x.data), (x,), lambda g: (g * sgn,))


def _sigmoid(xd: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(xd))
    r = 1.0 / (1.0 + e)
    return np.where(xd >= 0, r, e * r).astype(xd.dtype, copy=False)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    _check_finite(x.data, "sigmoid")
    s = _sigmoid(x.data)
    return record("sigmoid", s, (x,), lambda g: (g * s * (1 - s),))


def silu(x) -> Tensor:
    """x * sigmoid(x)."""
    x = as_tensor(x)
    _check_finite(x.data, "silu")
    xd = x.data
    s = _sigmoid(xd)
    return record("silu", xd * s, (x,), lambda g: (g * s * (1 + xd * (1 - s)),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return record("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def softplus(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    out = (np.maximum(xd, 0) + np.log1p(np.exp(-np.abs(xd)))).astype(xd.dtype, copy=False)
    return record("softplus", out, (x,), lambda g: (g * _sigmoid(xd),))


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only strictly inside the interval."""
    x = as_tensor(x)
    xd = x.data
    mask = (xd > lo) & (xd < hi)
    return record("clip", np.clip(xd, lo, hi), (x,), lambda g: (g * mask,))


def maximum(a, b) -> Tensor:
    """Elementwise max; ties route the gradient to ``a``."""
    a, b = _pair(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"maximum: shapes {a.shape} and {b.shape} differ")
    pick = a.data >= b.data
    return record("maximum", np.where(pick, a.data, b.data), (a, b),
                  lambda g: (g * pick, g * ~pick))


def minimum(a, b) -> Tensor:
    """Elementwise min; ties route the gradient to ``a``."""
    a, b = _pair(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"minimum: shapes {a.shape} and {b.shape} differ")
    pick = a.data <= b.data
    return record("minimum", np.where(pick, a.data, b.data), (a, b),
                  lambda g: (g * pick, g * ~pick))


# ----------------------------------------------------------------- reductions

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return record("sum", np.asarray(out), (x,), vjp)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return scale(sum(x, axis=axes, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------- shaping

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)
    return record("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,),
                  lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def flip(x, axis: int) -> Tensor:
    x = as_tensor(x)
    return record("flip", np.ascontiguousarray(np.flip(x.data, axis)), (x,),
                  lambda g: (np.ascontiguousarray(np.flip(g, axis)),))


def concat(xs: Sequence, axis: int) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    axis = axis % xs[0].ndim
    for x in xs[1:]:
        if x.ndim != xs[0].ndim or any(
                x.shape[i] != xs[0].shape[i] for i in range(x.ndim) if i != axis):
            raise ShapeError(f"concat: shapes {xs[0].shape} and {x.shape} disagree off axis {axis}")
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def vjp(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(xs)))

    return record("concat", np.concatenate([x.data for x in xs], axis=axis), xs, vjp)


def _has_advanced(idx) -> bool:
    if not isinstance(idx, tuple):
        idx = (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in idx)


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)
    out = x.data[idx]
    advanced = _has_advanced(idx)

    def vjp(g):
        full = np.zeros_like(x.data)
        if advanced:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return record("getitem", np.array(out), (x,), vjp)


# ------------------------------------------------------------ linear algebra

def linear(x, W, b=None) -> Tensor:
    """y = x @ W + b over the trailing axis."""
    x = as_tensor(x)
    W = as_tensor(W, dtype=x.dtype)
    if W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise ShapeError(f"linear: input shape {x.shape} incompatible with weight shape {W.shape}")
    if b is not None:
        b = as_tensor(b, dtype=x.dtype)
        if b.shape != (W.shape[1],):
            raise ShapeError(f"linear: bias shape {b.shape} incompatible with weight shape {W.shape}")
    xd, Wd = x.data, W.data
    out = xd @ Wd
    if b is not None:
        out = out + b.data
    inputs = (x, W) if b is None else (x, W, b)

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ Wd.T if x.requires_grad else None
        gW = xd.reshape(-1, xd.shape[-1]).T @ g2 if W.requires_grad else None
        if b is None:
            return gx, gW
        return gx, gW, g2.sum(axis=0)

    return record("linear", out, inputs, vjp)


# ------------------------------------------------------------ normalization

def layer_norm(x, gamma, beta, eps: float = 1e-6) -> Tensor:
    """Normalize over the trailing (channel) axis, then scale and shift."""
    x = as_tensor(x)
    gamma = as_tensor(gamma, dtype=x.dtype)
    beta = as_tensor(beta, dtype=x.dtype)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} vs input {x.shape}")
    _check_finite(x.data, "layer_norm")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def vjp(g):
        dxhat = g * gamma.data
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return record("layer_norm", out.astype(xd.dtype, copy=False), (x, gamma, beta), vjp)


def batch_norm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Channel-last batch norm; statistics over every axis but the last.

    In training mode the running buffers are updated in place (unbiased
    variance, exponential momentum).
    """
    x = as_tensor(x)
    gamma = as_tensor(gamma, dtype=x.dtype)
    beta = as_tensor(beta, dtype=x.dtype)
    xd = x.data
    axes = tuple(range(xd.ndim - 1))
    if training:
        n = xd.size // xd.shape[-1]
        mu = xd.mean(axis=axes)
        xc = xd - mu
        var = (xc * xc).mean(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (n / max(n - 1, 1))
    else:
        mu, var = running_mean, running_var
        xc = xd - mu
    rstd = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def vjp(g):
        dxhat = g * gamma.data
        if training:
            dx = rstd * (dxhat - dxhat.mean(axis=axes) - xhat * (dxhat * xhat).mean(axis=axes))
        else:
            dx = dxhat * rstd
        return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return record("batch_norm", out.astype(xd.dtype, copy=False), (x, gamma, beta), vjp)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    _check_finite(x.data, "softmax")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return record("softmax", s, (x,),
                  lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    _check_finite(x.data, "log_softmax")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    s = np.exp(out)
    return record("log_softmax", out, (x,),
                  lambda g: (g - s * g.sum(axis=axis, keepdims=True),))


# ------------------------------------------------------------- convolution

def depthwise_conv1d(x, kernel, bias=None) -> Tensor:
    """Causal per-channel convolution over the sequence axis.

    ``x`` is (B, L, C), ``kernel`` is (C, K);
    ``y[b, l, c] = sum_k x[b, l - k, c] * kernel[c, k]`` with x zero for
    negative positions, so tap 0 is the current token and length L is kept.
    """
    x = as_tensor(x)
    kernel = as_tensor(kernel, dtype=x.dtype)
    if x.ndim != 3 or kernel.ndim != 2 or kernel.shape[0] != x.shape[2]:
        raise ShapeError(f"depthwise_conv1d: input {x.shape} incompatible with kernel {kernel.shape}")
    B, L, C = x.shape
    K = kernel.shape[1]
    pad = K - 1
    if K < 1 or K > L + pad:
        raise ParameterError(f"depthwise_conv1d: kernel width {K} invalid for length {L}")
    xd, kd = x.data, kernel.data
    out = np.zeros_like(xd)
    for k in range(min(K, L)):
        out[:, k:, :] += xd[:, :L - k, :] * kd[:, k]
    inputs = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias, dtype=x.dtype)
        out += bias.data
        inputs.append(bias)

    def vjp(g):
        gx = np.zeros_like(xd)
        gk = np.zeros_like(kd)
        for k in range(min(K, L)):
            gx[:, :L - k, :] += g[:, k:, :] * kd[:, k]
            gk[:, k] = (g[:, k:, :] * xd[:, :L - k, :]).sum(axis=(0, 1))
        if bias is None:
            return gx, gk
        return gx, gk, g.sum(axis=(0, 1))

    return record("depthwise_conv1d", out, inputs, vjp)


def conv2d(x, W, b=None) -> Tensor:
    """Stride-1 'same' 2-D convolution in channel-last layout.

    ``x`` is (B, H, W, Cin), ``W`` is (Cout, Cin, kh, kw) with odd kernel
    sides, output (B, H, W, Cout). Implemented as im2col + one matmul.
    """
    x = as_tensor(x)
    W = as_tensor(W, dtype=x.dtype)
    if x.ndim != 4 or W.ndim != 4 or W.shape[1] != x.shape[3]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {W.shape}")
    Cout, Cin, kh, kw = W.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ParameterError(f"conv2d: kernel {kh}x{kw} must have odd sides")
    B, H, Wd, _ = x.shape
    ph, pw = kh // 2, kw // 2
    xd = x.data
    xp = np.pad(xd, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    cols = win.reshape(B * H * Wd, Cin * kh * kw)
    Wm = W.data.reshape(Cout, -1)
    out = cols @ Wm.T
    inputs = [x, W]
    if b is not None:
        b = as_tensor(b, dtype=x.dtype)
        out += b.data
        inputs.append(b)
    out = out.reshape(B, H, Wd, Cout)

    def vjp(g):
        g2 = g.reshape(-1, Cout)
        gW = (g2.T @ cols).reshape(W.shape) if W.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ Wm).reshape(B, H, Wd, Cin, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + H, j:j + Wd, :] += gcols[..., i, j]
            gx = gxp[:, ph:ph + H, pw:pw + Wd, :]
        if b is None:
            return gx, gW
        return gx, gW, g2.sum(axis=0)

    return record("conv2d", out, inputs, vjp)
