"""Cross-feature contrastive attention between query and support features.

For every (query, support) pair the temporally averaged, channel-compacted
feature maps are compared position by position (cosine), the resulting
``[H,W,H,W]`` correlation tensor is refined by two 4D convolutions, and two
attention maps are read off it:

* ``a_q(x_q) = mean_{x_s} softmax_{x_q}(C[x_q, x_s] / gamma)``
* ``a_s(x_s) = mean_{x_q} softmax_{x_s}(C[x_q, x_s] / gamma)``

Both are distributions over spatial positions and are used to pool the
features into embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from . import nn
from .tensor import Tensor, as_tensor, concat, matmul, mean, relu


@dataclass
class AttentionPair:
    a_q: Tensor
    a_s: Tensor


def temporal_mean(f) -> Tensor:
    """Average over the leading T axis; binary input gives firing rates."""
    f = as_tensor(f)
    if f.ndim < 1 or f.shape[0] < 1:
        raise ValueError("temporal_mean needs T >= 1")
    return mean(f, axis=0)


def cross_correlation(q, s) -> Tensor:
    """Cosine similarity of channel vectors for every (x_q, x_s) position pair.

    Accepts single maps ``[C,H,W]`` (-> ``[H,W,H,W]``) or batches
    ``q: [Nq,C,H,W]``, ``s: [Ns,C,H,W]`` (-> ``[Nq,Ns,H,W,H,W]``).
    """
    q, s = as_tensor(q), as_tensor(s)
    single = q.ndim == 3
    if single:
        q, s = q.reshape((1,) + q.shape), s.reshape((1,) + s.shape)
    if q.ndim != 4 or s.ndim != 4:
        raise ValueError(f"expected [C,H,W] or [N,C,H,W] features, got {q.shape} and {s.shape}")
    if q.shape[1] != s.shape[1]:
        raise ValueError(f"channel mismatch: query has {q.shape[1]}, support has {s.shape[1]}")
    Nq, C, H, W = q.shape
    Ns, _, Hs, Ws = s.shape
    qn = F.l2_normalize(q.reshape(Nq, C, H * W), axis=1).permute(0, 2, 1).reshape(Nq, 1, H * W, C)
    sn = F.l2_normalize(s.reshape(Ns, C, Hs * Ws), axis=1).reshape(1, Ns, C, Hs * Ws)
    corr = matmul(qn, sn).reshape(Nq, Ns, H, W, Hs, Ws)
    if single:
        return corr.reshape(H, W, Hs, Ws)
    return corr


def attention_maps(c_refined, gamma: float) -> AttentionPair:
    """Joint attention maps from a ``[..., H,W,H,W]`` correlation tensor."""
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    c = as_tensor(c_refined)
    lead = c.shape[:-4]
    H, W, Hs, Ws = c.shape[-4:]
    flat = c.reshape(lead + (H * W, Hs * Ws)) * (1.0 / gamma)
    nd = len(lead)
    a_q = mean(F.softmax(flat, axis=nd), axis=nd + 1).reshape(lead + (H, W))
    a_s = mean(F.softmax(flat, axis=nd + 1), axis=nd).reshape(lead + (Hs, Ws))
    return AttentionPair(a_q, a_s)


def attended_pool(f, a) -> Tensor:
    """``out[..., c] = sum_x f[..., c, x] * a[..., x]``.

    ``f: [..., C, H, W]`` and ``a: [..., H, W]`` with broadcastable leading
    axes.
    """
    f, a = as_tensor(f), as_tensor(a)
    if f.shape[-2:] != a.shape[-2:]:
        raise ValueError(f"spatial shapes differ: features {f.shape[-2:]}, attention {a.shape[-2:]}")
    C, H, W = f.shape[-3:]
    fl = f.reshape(f.shape[:-3] + (C, H * W))
    al = a.reshape(a.shape[:-2] + (H * W, 1))
    out = matmul(fl, al)
    return out.reshape(out.shape[:-1])


def uniform_attention(shape) -> AttentionPair:
    """Mean-pooling attention (``1/HW`` everywhere), used when CFC is ablated."""
    H, W = shape[-2:]
    a = Tensor(np.full(shape, 1.0 / (H * W)))
    return AttentionPair(a, a)


class CrossFeatureContrast(nn.Module):
    def __init__(
        self,
        channels: int,
        compact_channels: int,
        hidden_channels: int,
        gamma: float,
        rng: np.random.Generator,
        hidden_norm: bool = True,
    ):
        super().__init__()
        if gamma <= 0:
            raise ValueError(f"gamma must be positive, got {gamma}")
        self.compact = nn.Conv(rng, channels, compact_channels, 1)
        self.bn_compact = nn.BatchNorm(compact_channels)
        self.conv4d_1 = nn.Conv(rng, 1, hidden_channels, 3, ndim=4, padding=1)
        self.bn4d = nn.BatchNorm(hidden_channels) if hidden_norm else None
        self.conv4d_2 = nn.Conv(rng, hidden_channels, 1, 3, ndim=4, padding=1)
        self.gamma = gamma
        self.enabled = True
        self.probe: list | None = None

    def compact_features(self, f_mean: Tensor) -> Tensor:
        if self.probe is not None:
            self.probe.append(("cfc.compact", self.compact, f_mean.data))
        return relu(self.bn_compact(self.compact(f_mean)))

    def refine_4d(self, c: Tensor) -> Tensor:
        """``[..., H,W,H,W] -> [..., H,W,H,W]`` via 1->C1->1 channel 4D convs."""
        c = as_tensor(c)
        lead = c.shape[:-4]
        dims = c.shape[-4:]
        x = c.reshape((int(np.prod(lead, dtype=int)), 1) + dims)
        if self.probe is not None:
            self.probe.append(("cfc.conv4d_1", self.conv4d_1, x.data))
        h = self.conv4d_1(x)
        if self.bn4d is not None:
            h = self.bn4d(h)
        h = relu(h)
        if self.probe is not None:
            self.probe.append(("cfc.conv4d_2", self.conv4d_2, h.data))
        y = self.conv4d_2(h)
        return y.reshape(lead + dims)

    def forward(self, fq_mean: Tensor, fs_mean: Tensor) -> AttentionPair:
        """Attention for every (query, support) pair.

        Inputs are temporally averaged features ``[Nq,C,H,W]`` and
        ``[Ns,C,H,W]``; both maps come back as ``[Nq,Ns,H,W]``.
        """
        Nq, Ns = fq_mean.shape[0], fs_mean.shape[0]
        H, W = fq_mean.shape[-2:]
        if not self.enabled:
            return uniform_attention((Nq, Ns, H, W))
        both = self.compact_features(concat([fq_mean, fs_mean], axis=0))
        corr = cross_correlation(both[:Nq], both[Nq:])
        return attention_maps(self.refine_4d(corr), self.gamma)
