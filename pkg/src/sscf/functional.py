"""Differentiable neural-network operations built on :mod:`sscf.tensor`."""

from __future__ import annotations

import itertools

import numpy as np

from .tensor import DTYPE, Tensor, as_tensor, make_op, sum_


class ShapeError(ValueError):
    """Raised when operand dimensions are incompatible."""


# -- convolution -------------------------------------------------------------

_CHUNK_ELEMS = 1 << 22


def _tap_slices(offsets, stride, out_shape):
    return tuple(
        slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(offsets, stride, out_shape)
    )


def _im2col(xp: np.ndarray, ksize, stride, out_sp) -> np.ndarray:
    """``[B, C, *padded] -> [B * prod(out), C * prod(k)]`` patch matrix."""
    nsp = len(ksize)
    win = np.lib.stride_tricks.sliding_window_view(xp, ksize, axis=tuple(range(2, 2 + nsp)))
    win = win[(slice(None), slice(None)) + tuple(slice(None, None, s) for s in stride)]
    win = win[(slice(None), slice(None)) + tuple(slice(0, n) for n in out_sp)]
    # [B, C, *out, *k] -> [B, *out, C, *k]
    order = (0,) + tuple(range(2, 2 + nsp)) + (1,) + tuple(range(2 + nsp, 2 + 2 * nsp))
    return win.transpose(order).reshape(-1, xp.shape[1] * int(np.prod(ksize)))


def _conv_im2col(xp, w, stride, out_sp):
    B = xp.shape[0]
    Co = w.shape[0]
    ksize = w.shape[2:]
    wmat = w.reshape(Co, -1)
    per_item = int(np.prod(out_sp)) * wmat.shape[1]
    step = max(1, _CHUNK_ELEMS // max(per_item, 1))
    out = np.empty((B,) + tuple(out_sp) + (Co,))
    for b0 in range(0, B, step):
        cols = _im2col(xp[b0:b0 + step], ksize, stride, out_sp)
        out[b0:b0 + step] = (cols @ wmat.T).reshape((-1,) + tuple(out_sp) + (Co,))
    return np.ascontiguousarray(np.moveaxis(out, -1, 1))


def _conv_shift(xp, w, stride, out_sp):
    """Project every tap at once over the padded grid, then shift-accumulate.

    Cheaper than im2col when ``Co`` is small relative to ``C`` (e.g. the
    final single-channel 4D conv).
    """
    B, C = xp.shape[:2]
    Co = w.shape[0]
    ksize = w.shape[2:]
    nsp = len(ksize)
    taps = list(itertools.product(*(range(k) for k in ksize)))
    wk = np.moveaxis(w.reshape(Co, C, -1), 2, 0).reshape(len(taps) * Co, C)
    per_item = int(np.prod(xp.shape[2:])) * len(taps) * Co
    step = max(1, _CHUNK_ELEMS // max(per_item, 1))
    out = np.zeros((B, Co) + tuple(out_sp))
    for b0 in range(0, B, step):
        xc = xp[b0:b0 + step]
        nb = xc.shape[0]
        xr = np.moveaxis(xc, 1, 0).reshape(C, -1)
        z = (wk @ xr).reshape((len(taps), Co, nb) + xc.shape[2:])
        oc = np.zeros((Co, nb) + tuple(out_sp))
        for k, tap in enumerate(taps):
            oc += z[(k, slice(None), slice(None)) + _tap_slices(tap, stride, out_sp)]
        out[b0:b0 + step] = np.moveaxis(oc, 0, 1)
    return out


def _conv_raw(xp: np.ndarray, w: np.ndarray, stride, out_sp) -> np.ndarray:
    """Correlate padded ``[B, C, *sp]`` input with ``[Co, C, *k]``; returns ``[B, Co, *out]``."""
    Co, C = w.shape[:2]
    K = int(np.prod(w.shape[2:]))
    im2col_elems = int(np.prod(out_sp)) * C * K
    shift_elems = int(np.prod(xp.shape[2:])) * Co * K
    if shift_elems < im2col_elems:
        return _conv_shift(xp, w, stride, out_sp)
    return _conv_im2col(xp, w, stride, out_sp)


def _conv_weight_grad(xp, g, ksize, stride, out_sp):
    """``gw[co, c, *k] = sum_{b, pos} g[b, co, pos] * xp[b, c, pos*stride + k]``."""
    B, C = xp.shape[:2]
    Co = g.shape[1]
    K = int(np.prod(ksize))
    im2col_elems = int(np.prod(out_sp)) * C * K
    shift_elems = int(np.prod(xp.shape[2:])) * Co * K
    gw = np.zeros((Co, C * K))
    if im2col_elems <= shift_elems:
        step = max(1, _CHUNK_ELEMS // max(im2col_elems, 1))
        g_last = np.moveaxis(g, 1, -1)
        for b0 in range(0, B, step):
            cols = _im2col(xp[b0:b0 + step], ksize, stride, out_sp)
            gw += g_last[b0:b0 + step].reshape(-1, Co).T @ cols
        return gw.reshape((Co, C) + tuple(ksize))
    taps = list(itertools.product(*(range(k) for k in ksize)))
    step = max(1, _CHUNK_ELEMS // max(shift_elems, 1))
    gk = np.zeros((K * Co, C))
    for b0 in range(0, B, step):
        xc = xp[b0:b0 + step]
        gc = np.moveaxis(g[b0:b0 + step], 1, 0)  # [Co, nb, *out]
        nb = xc.shape[0]
        spread = np.zeros((K, Co, nb) + xc.shape[2:])
        for k, tap in enumerate(taps):
            spread[(k, slice(None), slice(None)) + _tap_slices(tap, stride, out_sp)] = gc
        gk += spread.reshape(K * Co, -1) @ np.moveaxis(xc, 1, 0).reshape(C, -1).T
    # gk rows are (tap, co) -> [Co, C, K]
    return np.moveaxis(gk.reshape(K, Co, C), 0, 2).reshape((Co, C) + tuple(ksize))


def convnd(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Cross-correlation over the trailing ``weight.ndim - 2`` axes of ``x``.

    ``x`` is ``[B, C, *spatial]`` and ``weight`` is ``[Co, C, *kernel]``.
    Patches are unrolled batch-chunk by batch-chunk so the 3^4-tap kernels
    of the 4D case stay within a bounded buffer.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    nsp = weight.ndim - 2
    if x.ndim != nsp + 2:
        raise ShapeError(f"input rank {x.ndim} does not match a {nsp}-d kernel")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"input has {x.shape[1]} channels but weight expects {weight.shape[1]}"
        )
    stride = (stride,) * nsp if isinstance(stride, int) else tuple(stride)
    padding = (padding,) * nsp if isinstance(padding, int) else tuple(padding)
    if any(s < 1 for s in stride):
        raise ShapeError(f"stride must be >= 1, got {stride}")
    ksize = weight.shape[2:]
    in_sp = x.shape[2:]
    out_sp = []
    for n, k, p, s in zip(in_sp, ksize, padding, stride):
        if n + 2 * p < k:
            raise ShapeError(f"kernel {ksize} does not fit padded input {in_sp} (padding {padding})")
        out_sp.append((n + 2 * p - k) // s + 1)
    out_sp = tuple(out_sp)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"bias shape {bias.shape} does not match {weight.shape[0]} output channels")

    pad_width = ((0, 0), (0, 0)) + tuple((p, p) for p in padding)
    xp = np.pad(x.data, pad_width) if any(padding) else x.data
    w = weight.data
    Co, C = w.shape[:2]
    out = _conv_raw(xp, w, stride, out_sp)
    if bias is not None:
        out += bias.data.reshape((1, Co) + (1,) * nsp)

    def bw(g):
        gw = gx = None
        if weight.requires_grad:
            gw = _conv_weight_grad(xp, g, ksize, stride, out_sp)
        if x.requires_grad:
            full_pad = [k - 1 - p for k, p in zip(ksize, padding)]
            if all(s == 1 for s in stride) and all(p >= 0 for p in full_pad):
                # input gradient of a stride-1 correlation is a full correlation
                # of the output gradient with the flipped, transposed kernel
                wflip = np.flip(w, axis=tuple(range(2, 2 + nsp))).swapaxes(0, 1)
                gp = np.pad(g, ((0, 0), (0, 0)) + tuple((p, p) for p in full_pad))
                gx = _conv_raw(gp, np.ascontiguousarray(wflip), (1,) * nsp, in_sp)
            else:
                g_last = np.moveaxis(g, 1, -1)
                gxp = np.zeros_like(xp)
                taps = itertools.product(*(range(k) for k in ksize))
                for tap in taps:
                    sl = (slice(None), slice(None)) + _tap_slices(tap, stride, out_sp)
                    gxp[sl] += np.moveaxis(
                        np.tensordot(g_last, w[(slice(None), slice(None)) + tap], axes=([nsp + 1], [0])),
                        -1,
                        1,
                    )
                crop = (slice(None), slice(None)) + tuple(
                    slice(p, p + n) for p, n in zip(padding, in_sp)
                )
                gx = np.ascontiguousarray(gxp[crop])
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=tuple(i for i in range(g.ndim) if i != 1)))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_op(out, inputs, bw, f"conv{nsp}d")


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    if as_tensor(weight).ndim != 4:
        raise ShapeError(f"conv2d expects a 4-d weight, got shape {as_tensor(weight).shape}")
    return convnd(x, weight, bias, stride, padding)


def conv4d(x, weight, bias=None, padding: int = 1) -> Tensor:
    if as_tensor(weight).ndim != 6:
        raise ShapeError(f"conv4d expects a 6-d weight, got shape {as_tensor(weight).shape}")
    return convnd(x, weight, bias, 1, padding)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped ``[out, in]``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input features {x.shape[-1]} != weight in-features {weight.shape[1]}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def bw(g):
        gx = g @ wd
        g2 = g.reshape(-1, g.shape[-1])
        gw = g2.T @ xd.reshape(-1, xd.shape[-1])
        res = [gx, gw]
        if bias is not None:
            res.append(g2.sum(axis=0))
        return res

    inputs = (x, weight) if bias is None else (x, weight, as_tensor(bias))
    return make_op(out, inputs, bw, "linear")


# -- normalisation -------------------------------------------------------------

def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray | None,
    running_var: np.ndarray | None,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalisation over every axis except axis 1.

    In training mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place (unbiased variance, PyTorch
    convention).  In eval mode the running statistics are required.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batch_norm: {C} channels but gamma {gamma.shape}, beta {beta.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, C) + (1,) * (x.ndim - 2)
    xd = x.data
    if training:
        n = xd.size // C
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        if running_mean is not None:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
        if running_var is not None:
            unbiased = var * n / max(n - 1, 1)
            running_var *= 1.0 - momentum
            running_var += momentum * unbiased
    else:
        if running_mean is None or running_var is None:
            raise RuntimeError("batch_norm in eval mode needs initialised running statistics")
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu.reshape(bshape)) * inv.reshape(bshape)
    gd = gamma.data.reshape(bshape)
    out = xhat * gd + beta.data.reshape(bshape)

    def bw(g):
        gbeta = g.sum(axis=axes)
        ggamma = (g * xhat).sum(axis=axes)
        gxhat = g * gd
        if training:
            m = xd.size // C
            gx = (inv.reshape(bshape) / m) * (
                m * gxhat
                - gxhat.sum(axis=axes, keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            gx = gxhat * inv.reshape(bshape)
        return gx, ggamma, gbeta

    return make_op(out, (x, gamma, beta), bw, "batch_norm")


def batchnorm2d(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    if as_tensor(x).ndim != 4:
        raise ShapeError(f"batchnorm2d expects [B,C,H,W], got {as_tensor(x).shape}")
    return batch_norm(x, gamma, beta, running_mean, running_var, training, momentum, eps)


# -- neighbourhood unfolding ---------------------------------------------------------

def unfold(x: Tensor, u: int, v: int) -> Tensor:
    """``[B,C,H,W] -> [B,C,H,W,u,v]`` zero-padded neighbourhoods.

    ``out[b,c,h,w,i,j] = x[b,c,h+i-u//2,w+j-v//2]``.
    """
    if u % 2 == 0 or v % 2 == 0:
        raise ValueError(f"unfold neighbourhood must be odd, got {u}x{v}")
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"unfold expects [B,C,H,W], got {x.shape}")
    B, C, H, W = x.shape
    pu, pv = u // 2, v // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (pu, pu), (pv, pv)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (u, v), axis=(2, 3))
    out = np.ascontiguousarray(win)

    def bw(g):
        gxp = np.zeros_like(xp)
        for i in range(u):
            for j in range(v):
                gxp[:, :, i:i + H, j:j + W] += g[..., i, j]
        return (gxp[:, :, pu:pu + H, pv:pv + W].copy(),)

    return make_op(out, (x,), bw, "unfold")


# -- softmax family ------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"softmax axis {axis} out of range for rank {x.ndim}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_op(out, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return make_op(out, (x,), bw, "log_softmax")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of ``[B, K]`` logits against integer labels."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [B, K] logits, got {logits.shape}")
    B, K = logits.shape
    if labels.shape != (B,):
        raise ShapeError(f"expected {B} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"labels must lie in [0, {K}), got range [{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(B)
    loss = -logp[rows, labels].sum() / B

    def bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / B),)

    return make_op(np.array(loss), (logits,), bw, "cross_entropy")


# -- normalisation & similarity ------------------------------------------------------

NORM_EPS = 1e-12


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """Scale vectors along ``axis`` to unit length; zero vectors stay zero.

    Zero vectors also get a zero gradient.  Silent spike vectors are common
    and the clamped ``1/eps`` slope would swamp every other gradient.
    """
    x = as_tensor(x)
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, NORM_EPS)
    out = xd / denom
    live = norm > NORM_EPS

    def bw(g):
        proj = (g * out).sum(axis=axis, keepdims=True)
        return (np.where(live, (g - out * proj) / denom, 0.0),)

    return make_op(out, (x,), bw, "l2_normalize")


def cosine_similarity(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """Cosine of the angle between ``a`` and ``b`` along ``axis`` (0 for zero vectors)."""
    return sum_(l2_normalize(a, axis) * l2_normalize(b, axis), axis=axis)
