"""Spiking conv-bn-LIF feature extractors (SCNN and a scaled VGGSNN)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .spiking import LifParams, lif_layer
from .tensor import Tensor, as_tensor

VGG_WIDTHS = (64, 128, 256, 256, 512, 512, 512, 512)
SCNN_WIDTHS = (64, 128, 256, 512)


class ConfigError(ValueError):
    pass


@dataclass
class BackboneConfig:
    variant: str = "vggsnn"
    timesteps: int = 2
    in_channels: int = 1
    widths: tuple[int, ...] = ()
    downsample: tuple[int, ...] = ()
    channel_divisor: int = 8
    input_size: int = 32

    def __post_init__(self):
        if self.variant not in ("vggsnn", "scnn"):
            raise ConfigError(f"unknown backbone variant {self.variant!r}")
        if not self.widths:
            base = VGG_WIDTHS if self.variant == "vggsnn" else SCNN_WIDTHS
            self.widths = tuple(max(1, w // self.channel_divisor) for w in base)
        if not self.downsample:
            self.downsample = (1, 3, 5) if self.variant == "vggsnn" else (1, 2, 3)
        self.widths = tuple(self.widths)
        self.downsample = tuple(self.downsample)
        if self.variant == "vggsnn" and len(self.widths) != 8:
            raise ConfigError(f"vggsnn needs exactly 8 conv-bn-LIF blocks, got {len(self.widths)}")
        if self.timesteps < 1:
            raise ConfigError(f"timesteps must be >= 1, got {self.timesteps}")
        if any(i < 0 or i >= len(self.widths) for i in self.downsample):
            raise ConfigError(f"downsample indices {self.downsample} outside 0..{len(self.widths) - 1}")
        side = self.output_size()
        if side < 2:
            raise ConfigError(
                f"{self.input_size}x{self.input_size} input shrinks to {side}x{side}; need at least 2x2"
            )

    def output_size(self) -> int:
        side = self.input_size
        for i in range(len(self.widths)):
            if i in self.downsample:
                side = (side + 2 - 3) // 2 + 1
        return side

    @property
    def out_channels(self) -> int:
        return self.widths[-1]


class ConvBnLif(nn.Module):
    def __init__(self, rng, in_ch, out_ch, stride, lif: LifParams):
        super().__init__()
        self.conv = nn.Conv(rng, in_ch, out_ch, 3, stride=stride, padding=1)
        self.bn = nn.BatchNorm(out_ch)
        self.lif = lif

    def preactivation(self, x_seq: Tensor) -> Tensor:
        T, B = x_seq.shape[:2]
        y = self.bn(self.conv(x_seq.reshape((T * B,) + x_seq.shape[2:])))
        return y.reshape((T, B) + y.shape[1:])

    def forward(self, x_seq: Tensor) -> Tensor:
        return lif_layer(self.preactivation(x_seq), self.lif)


class SpikingBackbone(nn.Module):
    """Maps ``[T,B,C,H,W]`` inputs to the binary feature map F0.

    No pooling anywhere; downsampling is by stride-2 convolution.
    """

    def __init__(self, config: BackboneConfig, lif: LifParams, rng: np.random.Generator):
        super().__init__()
        self.config = config
        blocks = []
        in_ch = config.in_channels
        for i, width in enumerate(config.widths):
            stride = 2 if i in config.downsample else 1
            blocks.append(ConvBnLif(rng, in_ch, width, stride, lif))
            in_ch = width
        self.blocks = blocks
        self.probe: list | None = None  # (name, weighted layer, its input)
        self.spike_probe: list | None = None  # (name, output spikes [T,B,C,H,W])

    def forward(self, x_seq: Tensor) -> Tensor:
        h = x_seq
        for i, block in enumerate(self.blocks):
            if self.probe is not None:
                self.probe.append((f"backbone.{i}", block.conv, h.data))
            h = block(h)
            if self.spike_probe is not None:
                self.spike_probe.append((f"backbone.{i}", h.data))
        return h

    def encode_events(self, events) -> Tensor:
        events = as_tensor(events)
        T = self.config.timesteps
        if events.ndim != 5:
            raise ValueError(f"event input must be [T,B,C,H,W], got {events.shape}")
        if events.shape[0] != T:
            raise ValueError(f"event tensor has T={events.shape[0]}, backbone configured for T={T}")
        self._check_spatial(events.shape)
        return self.forward(events)

    def encode_static(self, images) -> Tensor:
        images = as_tensor(images)
        if images.ndim != 4:
            raise ValueError(f"static input must be [B,C,H,W], got {images.shape}")
        T = self.config.timesteps
        seq = Tensor(np.broadcast_to(images.data, (T,) + images.shape))
        return self.encode_events(seq)

    def _check_spatial(self, shape):
        cfg = self.config
        if shape[2] != cfg.in_channels:
            raise ValueError(f"expected {cfg.in_channels} input channels, got {shape[2]}")
        if shape[3] != cfg.input_size or shape[4] != cfg.input_size:
            raise ConfigError(
                f"backbone configured for {cfg.input_size}x{cfg.input_size} input, got {shape[3]}x{shape[4]}"
            )
