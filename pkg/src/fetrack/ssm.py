"""Selective state-space scan with additive output-matrix prompts.

Array layout (batch first, sequence second):

    x, delta    (B, L, Cin)
    A           (Cin, N)      diagonal continuous state matrix, entries < 0
    B, C, P     (B, L, N)     input/output matrices and the injected prompt
    D           (Cin,)

The recurrence per channel ``c`` and state ``n`` is

    h[l] = exp(delta[l] * A) * h[l-1] + Bbar[l] * x[l],   h[-1] = 0
    y[l] = sum_n (C[l] + P[l]) * h[l] + D * x[l]

:func:`selective_scan_ref` evaluates it strictly left to right;
:func:`selective_scan_chunked` runs independent local scans per chunk and
stitches them together through each chunk's affine state map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from fetrack.errors import NumericError, ParameterError, ShapeError
from fetrack.numerics import Module, Parameter, Tensor, ops, record

ZOH_SERIES_THRESHOLD = 1e-6


# ----------------------------------------------------------- discretization

def _zoh_phi(A: np.ndarray, delta: np.ndarray):
    """Return ``(z, Abar, phi, series_mask)`` with ``Bbar = phi * B``.

    ``phi = (exp(delta*a) - 1) / a`` is the exact ZOH integral
    ``int_0^delta exp(a s) ds``; for ``|delta*a| <= 1e-6`` it is replaced by
    ``delta * (1 + delta*a/2)`` to stay finite as ``a -> 0``.
    """
    z = delta[..., :, None] * A
    Abar = np.exp(z)
    series = np.abs(z) <= ZOH_SERIES_THRESHOLD
    phi = np.expm1(z)
    with np.errstate(divide="ignore", invalid="ignore"):
        phi /= A
    if series.any():
        idx = np.nonzero(series)
        phi[idx] = delta[idx[:-1]] * (1 + z[idx] / 2)
    return z, Abar, phi, series


def discretize_zoh(A, B_mat, delta):
    """Zero-order-hold discretization of a diagonal SSM.

    Returns ``(Abar, Bbar)`` of shape ``delta.shape + (N,)``.
    """
    A, B_mat, delta = np.asarray(A), np.asarray(B_mat), np.asarray(delta)
    if np.any(delta <= 0):
        raise ParameterError("discretize_zoh: step size delta must be strictly positive")
    _, Abar, phi, _ = _zoh_phi(A, delta)
    return Abar, phi * B_mat[..., None, :]


# --------------------------------------------------------- linear recurrences

def _first_nonfinite_step(h: np.ndarray):
    bad = ~np.isfinite(h.reshape(h.shape[0], h.shape[1], -1)).all(axis=(0, 2))
    idx = np.flatnonzero(bad)
    return int(idx[0]) if idx.size else None


def linear_recurrence_ref(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``h[:, l] = a[:, l] * h[:, l-1] + b[:, l]`` along axis 1, from ``h = 0``."""
    h = np.empty_like(b)
    state = np.zeros_like(b[:, 0])
    for l in range(b.shape[1]):
        state = a[:, l] * state + b[:, l]
        h[:, l] = state
    return h


def linear_recurrence_chunked(a: np.ndarray, b: np.ndarray, chunk: int) -> np.ndarray:
    """Same recurrence as :func:`linear_recurrence_ref`, evaluated in chunks.

    Each chunk is scanned from a zero state (all chunks at once), yielding the
    chunk's local response ``beta`` and cumulative decay ``alpha``. The true
    entry state of chunk ``k+1`` is ``alpha_k * s_k + beta_k``, composed
    sequentially, and broadcast back as ``h = beta_local + alpha_local * s``.
    """
    if chunk < 1:
        raise ParameterError(f"chunk must be >= 1, got {chunk}")
    Bsz, L = b.shape[:2]
    if chunk >= L:
        return linear_recurrence_ref(a, b)
    rest = b.shape[2:]
    n_chunks = -(-L // chunk)
    pad = n_chunks * chunk - L
    if pad:
        a = np.concatenate([a, np.ones((Bsz, pad) + rest, a.dtype)], axis=1)
        b = np.concatenate([b, np.zeros((Bsz, pad) + rest, b.dtype)], axis=1)
    a = a.reshape((Bsz, n_chunks, chunk) + rest)
    b = b.reshape((Bsz, n_chunks, chunk) + rest)
    local = np.empty_like(b)
    decay = np.empty_like(a)
    local[:, :, 0] = b[:, :, 0]
    decay[:, :, 0] = a[:, :, 0]
    for k in range(1, chunk):
        local[:, :, k] = a[:, :, k] * local[:, :, k - 1] + b[:, :, k]
        decay[:, :, k] = a[:, :, k] * decay[:, :, k - 1]
    entry = np.empty((Bsz, n_chunks) + rest, dtype=b.dtype)
    state = np.zeros((Bsz,) + rest, dtype=b.dtype)
    for c in range(n_chunks):
        entry[:, c] = state
        state = decay[:, c, -1] * state + local[:, c, -1]
    h = local + decay * entry[:, :, None]
    return h.reshape((Bsz, n_chunks * chunk) + rest)[:, :L]


# ------------------------------------------------------------------ scans

@dataclass
class ScanInputs:
    """Per-token scan operands; ``prompt`` may be None (treated as zero)."""

    x: np.ndarray
    delta: np.ndarray
    B: np.ndarray
    C: np.ndarray
    prompt: np.ndarray | None = None

    def validate(self, A: np.ndarray, D: np.ndarray) -> None:
        if self.x.ndim != 3 or self.delta.shape != self.x.shape:
            raise ShapeError(f"scan: x {self.x.shape} and delta {self.delta.shape} must match (B, L, Cin)")
        Bsz, L, Cin = self.x.shape
        N = A.shape[-1]
        if A.shape != (Cin, N) or D.shape != (Cin,):
            raise ShapeError(f"scan: A {A.shape} / D {D.shape} incompatible with Cin={Cin}")
        for name in ("B", "C", "prompt"):
            arr = getattr(self, name)
            if arr is not None and arr.shape != (Bsz, L, N):
                raise ShapeError(f"scan: {name} shape {arr.shape} != {(Bsz, L, N)}")
        if np.any(self.delta <= 0):
            raise ParameterError("scan: delta must be strictly positive")

    def output_matrix(self) -> np.ndarray:
        return self.C if self.prompt is None else self.C + self.prompt

    def reversed(self) -> "ScanInputs":
        def rev(a):
            return None if a is None else np.ascontiguousarray(a[:, ::-1])
        return ScanInputs(rev(self.x), rev(self.delta), rev(self.B), rev(self.C), rev(self.prompt))


def _readout(h, Cp, D, x):
    return np.matmul(h, Cp[..., None])[..., 0] + D * x


def _scan(inputs: ScanInputs, A, D, chunk):
    """Return ``(y, cache)``; the cache holds ``h``, ``Abar`` and ``phi``."""
    inputs.validate(A, D)
    _, Abar, phi, series = _zoh_phi(A, inputs.delta)
    drive = phi * inputs.B[:, :, None, :]
    drive *= inputs.x[..., None]
    if chunk is None:
        h = linear_recurrence_ref(Abar, drive)
    else:
        h = linear_recurrence_chunked(Abar, drive, chunk)
    step = _first_nonfinite_step(h)
    if step is not None:
        raise NumericError(f"selective scan: non-finite state at timestep {step}")
    y = _readout(h, inputs.output_matrix(), D, inputs.x)
    return y, {"h": h, "Abar": Abar, "phi": phi, "series": series}


def selective_scan_ref(inputs: ScanInputs, A, D, return_state: bool = False):
    """Strict left-to-right selective scan. Returns ``y`` (and ``h`` if asked)."""
    y, cache = _scan(inputs, np.asarray(A), np.asarray(D), None)
    return (y, cache["h"]) if return_state else y


def selective_scan_chunked(inputs: ScanInputs, A, D, chunk: int, return_state: bool = False):
    """Chunk-composed selective scan; ``chunk >= L`` falls back to the reference path."""
    if chunk < 1:
        raise ParameterError(f"chunk must be >= 1, got {chunk}")
    y, cache = _scan(inputs, np.asarray(A), np.asarray(D), chunk)
    return (y, cache["h"]) if return_state else y


def _adjoint_ref(Abar: np.ndarray, dy: np.ndarray, Cp: np.ndarray) -> np.ndarray:
    """Right-to-left ``g[l] = dy[l] (C+P)[l] + Abar[l+1] g[l+1]``."""
    L = dy.shape[1]
    g = np.empty_like(Abar)
    state = dy[:, L - 1, :, None] * Cp[:, L - 1, None, :]
    g[:, L - 1] = state
    for l in range(L - 2, -1, -1):
        state = Abar[:, l + 1] * state + dy[:, l, :, None] * Cp[:, l, None, :]
        g[:, l] = state
    return g


def selective_scan_backward(inputs: ScanInputs, A, D, dy, h=None, chunk: int | None = None,
                            cache: dict | None = None) -> dict:
    """Analytic reverse-mode gradients of :func:`selective_scan_ref`.

    The state adjoint obeys ``g[l] = dy[l] (C+P)[l] + Abar[l+1] g[l+1]``,
    evaluated right to left. Returns gradients keyed
    ``x, B, C, delta, prompt, A, D``; ``prompt`` and ``C`` are identical
    because they enter the readout as a sum. ``cache`` is the forward pass's
    ``{h, Abar, phi, series}`` and skips recomputing them.
    """
    A, D = np.asarray(A), np.asarray(D)
    dy = np.asarray(dy)
    inputs.validate(A, D)
    if dy.shape != inputs.x.shape:
        raise ShapeError(f"scan backward: dy shape {dy.shape} != output shape {inputs.x.shape}")
    x, delta, Bm = inputs.x, inputs.delta, inputs.B
    Cp = inputs.output_matrix()
    if cache is None:
        _, cache = _scan(inputs, A, D, chunk)
    elif h is not None:
        cache = dict(cache, h=h)
    h, Abar, phi, series = cache["h"], cache["Abar"], cache["phi"], cache["series"]

    if chunk is None:
        g = _adjoint_ref(Abar, dy, Cp)
    else:
        a_next = np.empty_like(Abar)
        a_next[:, :-1] = Abar[:, 1:]
        a_next[:, -1] = 0
        rev_a = np.ascontiguousarray(a_next[:, ::-1])
        rev_b = np.ascontiguousarray((dy[..., None] * Cp[:, :, None, :])[:, ::-1])
        g = linear_recurrence_chunked(rev_a, rev_b, chunk)[:, ::-1]

    # dz = dL/d(delta*A) through Abar; u = dL/dphi / x.
    dz = np.zeros_like(g)
    np.multiply(g[:, 1:], h[:, :-1], out=dz[:, 1:])
    dz *= Abar
    u = g * Bm[:, :, None, :]

    dx = np.einsum("blen,blen->ble", u, phi) + dy * D
    dB = np.einsum("blen,ble->bln", g * phi, x)
    dCp = np.matmul(dy[:, :, None, :], h)[:, :, 0]
    dD = (dy * x).sum(axis=(0, 1))
    dz_delta = np.einsum("blen,ble->en", dz, delta)
    dz_a = np.einsum("blen,en->ble", dz, A)
    if not series.any():
        ux_abar = u * Abar
        ddelta = dz_a + x * ux_abar.sum(axis=-1)
        ua = np.einsum("blen,ble->en", ux_abar, x * delta) - np.einsum("blen,ble->en", u * phi, x)
        dA = dz_delta + ua / A
    else:
        z = delta[..., None] * A
        d = np.broadcast_to(delta[..., None], z.shape)
        safe_a = np.where(series, 1.0, A)
        dphi = u * x[..., None]
        dphi_dd = np.where(series, 1 + z, Abar)
        dphi_da = np.where(series, d * d / 2, (d * Abar - phi) / safe_a)
        ddelta = dz_a + (dphi * dphi_dd).sum(axis=-1)
        dA = dz_delta + (dphi * dphi_da).sum(axis=(0, 1))
    return {"x": dx, "B": dB, "C": dCp, "delta": ddelta, "prompt": dCp.copy(), "A": dA, "D": dD}


def bidirectional_scan(inputs_fwd: ScanInputs, A_f, D_f, A_b, D_b,
                       inputs_bwd: ScanInputs | None = None, chunk: int | None = None):
    """Forward scan over tokens 0..L-1 and backward scan over L-1..0.

    ``inputs_bwd`` holds the backward direction's operands in original token
    order (defaults to ``inputs_fwd``); the result ``y_b`` is returned in
    original order too.
    """
    inputs_bwd = inputs_fwd if inputs_bwd is None else inputs_bwd
    run = selective_scan_ref if chunk is None else (
        lambda i, A, D: selective_scan_chunked(i, A, D, chunk))
    y_f = run(inputs_fwd, A_f, D_f)
    y_b = run(inputs_bwd.reversed(), A_b, D_b)[:, ::-1]
    return y_f, np.ascontiguousarray(y_b)


# ------------------------------------------------------- differentiable op

def selective_scan(x: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor, D: Tensor,
                   prompt: Tensor | None = None, chunk: int | None = None) -> Tensor:
    """Tape-recorded selective scan; backward via :func:`selective_scan_backward`."""
    tensors = [x, delta, A, B, C, D] + ([prompt] if prompt is not None else [])
    inputs = ScanInputs(x.data, delta.data, B.data, C.data, None if prompt is None else prompt.data)
    if chunk is not None and chunk < 1:
        raise ParameterError(f"chunk must be >= 1, got {chunk}")
    y, cache = _scan(inputs, A.data, D.data, chunk)

    def vjp(g):
        grads = selective_scan_backward(inputs, A.data, D.data, g, chunk=chunk, cache=cache)
        out = [grads["x"], grads["delta"], grads["A"], grads["B"], grads["C"], grads["D"]]
        if prompt is not None:
            out.append(grads["prompt"])
        return tuple(out)

    return record("selective_scan", y, tensors, vjp)


def inverse_softplus(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


class SelectiveSSM(Module):
    """One scan direction: projections producing B, C, delta from x' plus A and D.

    ``A = -exp(a_log)`` keeps every state pole strictly negative.
    """

    def __init__(self, d_inner: int, d_state: int, dt_rank: int, rng: np.random.Generator,
                 dtype=np.float64, dt_min: float = 1e-3, dt_max: float = 1e-1):
        self.d_inner, self.d_state, self.dt_rank = d_inner, d_state, dt_rank
        self.a_log = Parameter(np.log(np.tile(np.arange(1, d_state + 1, dtype=np.float64), (d_inner, 1))),
                               dtype=dtype)
        self.D = Parameter(np.ones(d_inner), dtype=dtype)
        bound = 1.0 / math.sqrt(d_inner)
        self.x_proj = Parameter(rng.uniform(-bound, bound, (d_inner, dt_rank + 2 * d_state)), dtype=dtype)
        dt_bound = dt_rank ** -0.5
        self.dt_proj = Parameter(rng.uniform(-dt_bound, dt_bound, (dt_rank, d_inner)), dtype=dtype)
        dt0 = np.exp(rng.uniform(math.log(dt_min), math.log(dt_max), d_inner))
        self.dt_bias = Parameter(inverse_softplus(dt0), dtype=dtype)

    def project(self, xp: Tensor):
        """Return ``(delta, B, C)`` for a (B, L, d_inner) input."""
        R, N = self.dt_rank, self.d_state
        proj = ops.linear(xp, self.x_proj)
        dt_low = ops.getitem(proj, (Ellipsis, slice(0, R)))
        Bm = ops.getitem(proj, (Ellipsis, slice(R, R + N)))
        Cm = ops.getitem(proj, (Ellipsis, slice(R + N, R + 2 * N)))
        delta = ops.softplus(ops.linear(dt_low, self.dt_proj, self.dt_bias))
        return delta, Bm, Cm

    def A(self) -> Tensor:
        return ops.scale(ops.exp(self.a_log), -1.0)

    def __call__(self, xp: Tensor, prompt: Tensor | None = None, chunk: int | None = None) -> Tensor:
        delta, Bm, Cm = self.project(xp)
        return selective_scan(xp, delta, self.A(), Bm, Cm, self.D, prompt, chunk=chunk)
