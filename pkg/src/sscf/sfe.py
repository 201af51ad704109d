"""Self-feature extraction: neighbourhood self-correlation plus a residual.

F0 ``[T,B,C,H,W]`` -> per-position 5x5 channelwise correlation pattern
``[T,B,C,H,W,5,5]`` -> bottleneck conv block collapsing the 5x5 pattern to
1x1 -> LIF -> F1.  The module returns ``F0 + F1``.
"""

from __future__ import annotations

import numpy as np

from . import functional as F
from . import nn
from .spiking import LifParams, lif_layer
from .tensor import Tensor, as_tensor, relu

NEIGHBORHOOD = 5


def self_correlation(f0, u: int = NEIGHBORHOOD, v: int = NEIGHBORHOOD) -> Tensor:
    """``out[t,b,c,x,i,j] = f̂[t,b,c,x] * f̂[t,b,c,x + (i-u//2, j-v//2)]``.

    ``f̂`` is ``f0`` scaled to unit L2 norm over channels at each position
    (zero vectors stay zero); out-of-bounds neighbours contribute 0.
    """
    if u % 2 == 0 or v % 2 == 0:
        raise ValueError(f"self-correlation neighbourhood must be odd, got {u}x{v}")
    f0 = as_tensor(f0)
    if f0.ndim != 5:
        raise ValueError(f"expected [T,B,C,H,W], got {f0.shape}")
    T, B, C, H, W = f0.shape
    fhat = F.l2_normalize(f0.reshape(T * B, C, H, W), axis=1)
    nb = F.unfold(fhat, u, v)
    corr = nb * fhat.reshape(T * B, C, H, W, 1, 1)
    return corr.reshape(T, B, C, H, W, u, v)


class SelfFeatureExtractor(nn.Module):
    """Bottleneck block over the (U,V) correlation axes with a residual sum.

    Layout: 1x1 conv C->C/r, BN, ReLU, 3x3 conv, BN, ReLU, 3x3 conv, BN, ReLU,
    1x1 conv C/r->C, BN, then LIF over time.  The 3x3 convs are unpadded so
    5x5 collapses to 1x1.
    """

    def __init__(self, channels: int, lif: LifParams, rng: np.random.Generator, reduction: int = 4):
        super().__init__()
        mid = max(1, channels // reduction)
        self.channels = channels
        self.reduce = nn.Conv(rng, channels, mid, 1)
        self.bn_reduce = nn.BatchNorm(mid)
        self.conv1 = nn.Conv(rng, mid, mid, 3)
        self.bn1 = nn.BatchNorm(mid)
        self.conv2 = nn.Conv(rng, mid, mid, 3)
        self.bn2 = nn.BatchNorm(mid)
        self.restore = nn.Conv(rng, mid, channels, 1)
        self.bn_restore = nn.BatchNorm(channels)
        self.lif = lif
        self.enabled = True
        self.probe: list | None = None
        self.spike_probe: list | None = None

    def block(self, corr: Tensor) -> Tensor:
        """Conv block on ``[N, C, 5, 5]`` patterns -> ``[N, C, 1, 1]`` (pre-LIF)."""
        h = corr
        stages = (
            ("sfe.reduce", self.reduce, self.bn_reduce, True),
            ("sfe.conv1", self.conv1, self.bn1, True),
            ("sfe.conv2", self.conv2, self.bn2, True),
            ("sfe.restore", self.restore, self.bn_restore, False),
        )
        for name, conv, bn, act in stages:
            if self.probe is not None:
                self.probe.append((name, conv, h.data))
            h = bn(conv(h))
            if act:
                h = relu(h)
        return h

    def residual_branch(self, f0: Tensor) -> Tensor:
        T, B, C, H, W = f0.shape
        if C != self.restore.out_channels:
            raise ValueError(f"SFE restores {self.restore.out_channels} channels but F0 has {C}")
        corr = self_correlation(f0)
        # [T,B,C,H,W,U,V] -> [T*B*H*W, C, U, V]
        x = corr.permute(0, 1, 3, 4, 2, 5, 6).reshape(T * B * H * W, C, NEIGHBORHOOD, NEIGHBORHOOD)
        y = self.block(x)
        y = y.reshape(T, B, H, W, C).permute(0, 1, 4, 2, 3)
        spikes = lif_layer(y, self.lif)
        if self.spike_probe is not None:
            self.spike_probe.append(("sfe", spikes.data))
        return spikes

    def forward(self, f0) -> Tensor:
        f0 = as_tensor(f0)
        if not self.enabled:
            return f0
        return f0 + self.residual_branch(f0)
