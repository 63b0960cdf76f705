"""Low-level neural-network primitives on plain numpy arrays.

Every layer comes as a ``*_forward`` returning ``(output, cache)`` and a
``*_backward`` consuming that cache, so the encoder can run exact reverse-mode
differentiation without an autograd framework.  All functions preserve the
dtype of their inputs; tests run them in float64, training normally in
float32.

Feature maps are channels-last ([B, *spatial, C]).  Convolutions accumulate
one GEMM per kernel offset over output-sized slices of the padded input
instead of materialising an im2col buffer; at the small feature-map sizes
used here that keeps the working set in cache and is what makes CPU training
fast enough for the synthetic experiments.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractViolationError


# --- initialisation ----------------------------------------------------------

def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    """Fan-in scaled normal init: std = sqrt(2 / fan_in)."""
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


# --- scalar nonlinearities ---------------------------------------------------

def sigmoid(z):
    """Numerically stable logistic function (works on scalars and arrays)."""
    z = np.asarray(z)
    out = np.empty_like(z, dtype=z.dtype if z.dtype.kind == "f" else np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out if out.ndim else out[()]


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-subtracted softmax; safe for large logits."""
    z = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_backward(a: np.ndarray, da: np.ndarray, axis: int = -1) -> np.ndarray:
    """Jacobian-vector product of softmax: a * (da - <a, da>)."""
    inner = np.sum(a * da, axis=axis, keepdims=True)
    return a * (da - inner)


# --- ReLU ---------------------------------------------------------------------

def relu_forward(x):
    # cache keeps the preactivation so tests can verify finite-difference
    # smoothness (no kink within the probe step)
    return np.maximum(x, 0), x


def relu_backward(cache, dout):
    return dout * (cache > 0)


# --- linear -------------------------------------------------------------------

def linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """x: [B, in], w: [out, in], b: [out]."""
    out = x @ w.T + b
    return out, x


def linear_backward(cache, w, dout):
    x = cache
    dw = dout.T @ x
    db = dout.sum(axis=0)
    dx = dout @ w
    return dx, dw, db


# --- convolution (channels-last) -----------------------------------------------

def _pad_spatial(x: np.ndarray, pad: int) -> np.ndarray:
    """Zero-pad every spatial axis of a channels-last tensor by ``pad``."""
    if pad == 0:
        return x
    shape = (x.shape[0],) + tuple(s + 2 * pad for s in x.shape[1:-1]) + (x.shape[-1],)
    out = np.zeros(shape, dtype=x.dtype)
    center = (slice(None),) + tuple(slice(pad, pad + s) for s in x.shape[1:-1]) + (slice(None),)
    out[center] = x
    return out


def _offsets(kernel_sizes):
    if len(kernel_sizes) == 1:
        return [(i,) for i in range(kernel_sizes[0])]
    return [(i,) + rest for i in range(kernel_sizes[0]) for rest in _offsets(kernel_sizes[1:])]


def _offset_slice(off, stride, out_spatial):
    return tuple(slice(o, o + stride * n, stride) for o, n in zip(off, out_spatial))


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int | None, nd: int):
    Cin, Cout = w.shape[-2:]
    if x.ndim != nd + 2 or x.shape[-1] != Cin:
        raise ContractViolationError(
            f"conv{nd}d: expected [B, *spatial, {Cin}] input, got shape {x.shape}")
    ks = w.shape[:nd]
    if pad is None:
        pad = ks[0] // 2
    xp = _pad_spatial(x, pad)
    out_spatial = tuple((xp.shape[1 + d] - ks[d]) // stride + 1 for d in range(nd))
    B = x.shape[0]
    n_out = B * int(np.prod(out_spatial))
    cache = (xp, x.shape, stride, pad, out_spatial)

    if all(k == 1 for k in ks) and stride == 1:
        return (xp.reshape(n_out, Cin) @ w.reshape(Cin, Cout)).reshape(
            (B,) + out_spatial + (Cout,)), cache

    # one GEMM per kernel offset, accumulated into reused scratch buffers so
    # the working set stays cache-resident
    out = np.empty((n_out, Cout), dtype=xp.dtype)
    term = np.empty_like(out)
    buf = np.empty((B,) + out_spatial + (Cin,), dtype=xp.dtype)
    flat = buf.reshape(n_out, Cin)
    for n, off in enumerate(_offsets(ks)):
        np.copyto(buf, xp[(slice(None),) + _offset_slice(off, stride, out_spatial)])
        if n == 0:
            np.matmul(flat, w[off], out=out)
        else:
            np.matmul(flat, w[off], out=term)
            out += term
    return out.reshape((B,) + out_spatial + (Cout,)), cache


def _conv_backward(cache, w, dout, nd: int, need_dx: bool = True):
    xp, x_shape, stride, pad, out_spatial = cache
    Cin, Cout = w.shape[-2:]
    ks = w.shape[:nd]
    B = x_shape[0]
    n_out = B * int(np.prod(out_spatial))
    dmat = dout.reshape(n_out, Cout)

    if all(k == 1 for k in ks) and stride == 1:
        dw = (xp.reshape(n_out, Cin).T @ dmat).reshape(w.shape)
        dx = (dmat @ w.reshape(Cin, Cout).T).reshape(x_shape) if need_dx else None
        return dx, dw

    dw = np.empty_like(w)
    buf = np.empty((B,) + out_spatial + (Cin,), dtype=xp.dtype)
    flat = buf.reshape(n_out, Cin)
    for off in _offsets(ks):
        np.copyto(buf, xp[(slice(None),) + _offset_slice(off, stride, out_spatial)])
        np.matmul(flat.T, dmat, out=dw[off])
    if not need_dx:
        return None, dw

    if stride == 1 and out_spatial == x_shape[1:-1]:
        # 'same' conv: dx is a full correlation with the flipped,
        # channel-swapped kernel -- reuses the forward machinery, no scatter
        w_flip = np.ascontiguousarray(np.flip(w, axis=tuple(range(nd))).swapaxes(-1, -2))
        dx, _ = _conv_forward(dout, w_flip, 1, ks[0] - 1 - pad, nd)
        return dx, dw

    dxp_shape = (B,) + tuple(s + 2 * pad for s in x_shape[1:-1]) + (Cin,)
    dxp = np.zeros(dxp_shape, dtype=dout.dtype)
    tmp = np.empty((n_out, Cin), dtype=dout.dtype)
    for off in _offsets(ks):
        np.matmul(dmat, w[off].T, out=tmp)
        dxp[(slice(None),) + _offset_slice(off, stride, out_spatial)] += \
            tmp.reshape((B,) + out_spatial + (Cin,))
    if pad:
        center = (slice(None),) + tuple(slice(pad, pad + s) for s in x_shape[1:-1]) + (slice(None),)
        dxp = np.ascontiguousarray(dxp[center])
    return dxp, dw


def conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int = 1, pad: int | None = None):
    """x: [B, H, W, Cin]; w: [kh, kw, Cin, Cout]. pad defaults to kh//2 ('same' at stride 1)."""
    return _conv_forward(x, w, stride, pad, nd=2)


def conv2d_backward(cache, w, dout, need_dx: bool = True):
    return _conv_backward(cache, w, dout, nd=2, need_dx=need_dx)


def conv3d_forward(x: np.ndarray, w: np.ndarray, stride: int = 1, pad: int | None = None):
    """x: [B, D, H, W, Cin]; w: [kd, kh, kw, Cin, Cout]."""
    return _conv_forward(x, w, stride, pad, nd=3)


def conv3d_backward(cache, w, dout, need_dx: bool = True):
    return _conv_backward(cache, w, dout, nd=3, need_dx=need_dx)


# --- normalisation ---------------------------------------------------------------

_NORM_EPS = 1e-5


def _group_reduce(per_channel: np.ndarray, groups: int) -> np.ndarray:
    """Collapse per-channel sums [B, C] into per-group sums [B, G]."""
    B = per_channel.shape[0]
    return per_channel.reshape(B, groups, -1).sum(axis=2)


def group_norm_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, groups: int):
    """x: [B, *spatial, C]. Statistics per (sample, group); independent of batch mix.

    Reductions run channel-sums first (contiguous, fixed per-sample order), so
    outputs are bitwise identical regardless of batch composition.
    """
    B, C = x.shape[0], x.shape[-1]
    if C % groups:
        raise ContractViolationError(f"group_norm: {C} channels not divisible by {groups} groups")
    x3 = x.reshape(B, -1, C)
    n = x3.shape[1] * (C // groups)
    mu = _group_reduce(np.einsum("bsc->bc", x3), groups) / n            # [B, G]
    var = _group_reduce(np.einsum("bsc,bsc->bc", x3, x3), groups) / n - mu * mu
    inv_c = np.repeat(1.0 / np.sqrt(var + _NORM_EPS), C // groups, axis=1)  # [B, C]
    mu_c = np.repeat(mu, C // groups, axis=1)
    xhat = (x3 - mu_c[:, None, :]) * inv_c[:, None, :]
    out = xhat * gamma + beta
    return out.reshape(x.shape), (xhat, inv_c, groups, x.shape)


def group_norm_backward(cache, gamma, dout):
    xhat, inv_c, groups, shape = cache
    B, C = shape[0], shape[-1]
    n = xhat.shape[1] * (C // groups)
    dout3 = dout.reshape(B, -1, C)
    dgamma = np.einsum("bsc,bsc->c", dout3, xhat)
    dbeta = np.einsum("bsc->c", dout3)
    dxhat = dout3 * gamma
    m1_c = np.repeat(_group_reduce(np.einsum("bsc->bc", dxhat), groups) / n,
                     C // groups, axis=1)
    m2_c = np.repeat(_group_reduce(np.einsum("bsc,bsc->bc", dxhat, xhat), groups) / n,
                     C // groups, axis=1)
    dx = inv_c[:, None, :] * (dxhat - m1_c[:, None, :] - xhat * m2_c[:, None, :])
    return dx.reshape(shape), dgamma, dbeta


def batch_norm_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                       running_mean: np.ndarray, running_var: np.ndarray,
                       training: bool, momentum: float = 0.1):
    """x: [B, *spatial, C]; per-channel stats.  Updates running buffers in place
    when training."""
    x2 = x.reshape(-1, x.shape[-1])
    if training:
        mu = x2.mean(axis=0)
        var = x2.var(axis=0)
        running_mean *= (1.0 - momentum)
        running_mean += momentum * mu
        running_var *= (1.0 - momentum)
        running_var += momentum * var
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + _NORM_EPS)
    xhat = (x - mu) * inv
    out = xhat * gamma + beta
    return out, (xhat, inv, training)


def batch_norm_backward(cache, gamma, dout):
    xhat, inv, training = cache
    C = dout.shape[-1]
    dgamma = (dout * xhat).reshape(-1, C).sum(axis=0)
    dbeta = dout.reshape(-1, C).sum(axis=0)
    dxhat = dout * gamma
    if not training:
        return dxhat * inv, dgamma, dbeta
    n = dout.size // C
    m1 = dxhat.reshape(-1, C).sum(axis=0) / n
    m2 = (dxhat * xhat).reshape(-1, C).sum(axis=0) / n
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dgamma, dbeta


# --- global average pool ----------------------------------------------------------

def global_avg_pool_forward(x: np.ndarray):
    """[B, *spatial, C] -> [B, C]."""
    B, C = x.shape[0], x.shape[-1]
    n = x.size // (B * C)
    return x.reshape(B, -1, C).mean(axis=1), (x.shape, n)


def global_avg_pool_backward(cache, dout):
    shape, n = cache
    d = (dout / n).reshape((dout.shape[0],) + (1,) * (len(shape) - 2) + (dout.shape[1],))
    return np.broadcast_to(d, shape).astype(dout.dtype, copy=True)
