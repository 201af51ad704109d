"""The full few-shot network: backbone -> SFE -> (TET head, CFC embeddings)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .backbone import BackboneConfig, SpikingBackbone
from .cfc import CrossFeatureContrast, attended_pool, temporal_mean
from .losses import EmbeddingSet
from .sfe import SelfFeatureExtractor
from .spiking import LifParams
from .tensor import Tensor, as_tensor, concat, matmul, mean


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    lif: LifParams = field(default_factory=LifParams)
    compact_channels: int = 64
    hidden_channels: int = 16
    gamma: float = 5.0
    sfe_reduction: int = 4
    num_classes_train: int = 30
    use_sfe: bool = True
    use_cfc: bool = True


@dataclass
class EpisodeOutput:
    features: Tensor  # F, [T, B, C, H, W] over support then query items
    logits: Tensor  # TET head, [T, B, num_classes_train]
    embeddings: EmbeddingSet | None


class SSCFNet(nn.Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        c = config.backbone.out_channels
        self.backbone = SpikingBackbone(config.backbone, config.lif, rng)
        self.sfe = SelfFeatureExtractor(c, config.lif, rng, config.sfe_reduction)
        self.cfc = CrossFeatureContrast(
            c, config.compact_channels, config.hidden_channels, config.gamma, rng
        )
        self.head = nn.Linear(rng, c, config.num_classes_train)
        self.sfe.enabled = config.use_sfe
        self.cfc.enabled = config.use_cfc

    # -- probes for energy accounting -------------------------------------
    def attach_probe(self) -> list:
        probe: list = []
        self.backbone.probe = probe
        self.sfe.probe = probe
        self.cfc.probe = probe
        return probe

    def detach_probe(self) -> None:
        self.backbone.probe = self.sfe.probe = self.cfc.probe = None

    def attach_spike_probe(self) -> list:
        """Record every LIF layer's output spikes as ``(name, [T,B,C,H,W])``."""
        probe: list = []
        self.backbone.spike_probe = probe
        self.sfe.spike_probe = probe
        return probe

    def detach_spike_probe(self) -> None:
        self.backbone.spike_probe = self.sfe.spike_probe = None

    # -- forward pieces ------------------------------------------------------
    def features(self, items) -> Tensor:
        """F = F0 + F1 for ``[B,C,H,W]`` images or ``[T,B,C,H,W]`` events."""
        items = as_tensor(items)
        if items.ndim == 4:
            f0 = self.backbone.encode_static(items)
        else:
            f0 = self.backbone.encode_events(items)
        return self.sfe(f0)

    def head_logits(self, features: Tensor) -> Tensor:
        """Per-step logits from the spatially averaged feature sequence."""
        pooled = mean(features, axis=(3, 4))  # [T, B, C]
        if self.backbone.probe is not None:
            self.backbone.probe.append(("head", self.head, pooled.data))
        return self.head(pooled)

    def embed(self, f_support: Tensor, support_labels, f_query: Tensor, way: int) -> EmbeddingSet:
        """Attended embeddings for every query against every class.

        ``support_labels`` are episode-local ids ``0..way-1``.  Per
        (query, support item) pair the attention pools both feature maps;
        the K shots of a class are then averaged on both sides, giving
        ``[Nq, way, C]`` prototypes and queries.
        """
        fq = temporal_mean(f_query)
        fs = temporal_mean(f_support)
        att = self.cfc(fq, fs)
        Nq, Ns = fq.shape[0], fs.shape[0]
        q_emb = attended_pool(fq.reshape((Nq, 1) + fq.shape[1:]), att.a_q)  # [Nq, Ns, C]
        s_emb = attended_pool(fs.reshape((1,) + fs.shape), att.a_s)  # [Nq, Ns, C]
        avg = _class_average_matrix(support_labels, way)  # [Ns, way]
        protos = matmul(s_emb.permute(0, 2, 1), avg).permute(0, 2, 1)
        queries = matmul(q_emb.permute(0, 2, 1), avg).permute(0, 2, 1)
        return EmbeddingSet(protos, np.arange(way), queries)

    def forward(self, support, support_labels, query, way: int, with_embeddings: bool = True) -> EpisodeOutput:
        support, query = as_tensor(support), as_tensor(query)
        axis = 0 if support.ndim == 4 else 1
        ns = support.shape[axis]
        feats = self.features(concat([support, query], axis=axis))
        logits = self.head_logits(feats)
        emb = None
        if with_embeddings:
            emb = self.embed(feats[:, :ns], support_labels, feats[:, ns:], way)
        return EpisodeOutput(feats, logits, emb)


def _class_average_matrix(labels, way: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.intp)
    m = np.zeros((len(labels), way))
    m[np.arange(len(labels)), labels] = 1.0
    counts = m.sum(axis=0)
    if np.any(counts == 0):
        raise ValueError(f"every one of the {way} classes needs at least one support item")
    return m / counts
