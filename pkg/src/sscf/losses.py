"""Training objectives: time-averaged CE, prototype InfoNCE and their blend."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .tensor import Tensor, as_tensor


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.7
    tau_c: float = 0.2
    num_classes_train: int = 30

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if not self.tau_c > 0:
            raise ValueError(f"tau_c must be positive, got {self.tau_c}")


@dataclass
class EmbeddingSet:
    """Prototype and query embeddings of one episode.

    ``prototypes`` is ``[N, C]`` or, when embeddings depend on the
    (query, class) pair, ``[Nq, N, C]``; ``queries`` is ``[Nq, C]`` or
    ``[Nq, N, C]`` likewise.
    """

    prototypes: Tensor
    prototype_labels: np.ndarray
    queries: Tensor
    query_labels: np.ndarray | None = None

    def __post_init__(self):
        self.prototypes = as_tensor(self.prototypes)
        self.queries = as_tensor(self.queries)
        self.prototype_labels = np.asarray(self.prototype_labels, dtype=np.int64)
        if self.query_labels is not None:
            self.query_labels = np.asarray(self.query_labels, dtype=np.int64)
        if len(np.unique(self.prototype_labels)) != len(self.prototype_labels):
            raise ValueError("prototype class ids must be distinct")

    def similarities(self) -> Tensor:
        """Cosine similarity of every query to every prototype, ``[Nq, N]``."""
        p, q = self.prototypes, self.queries
        if p.ndim == 2:
            p = p.reshape((1,) + p.shape)
        if q.ndim == 2:
            q = q.reshape((q.shape[0], 1, q.shape[1]))
        return F.cosine_similarity(p, q, axis=-1)


def tet_loss(logits_seq, labels) -> Tensor:
    """Cross-entropy applied at every time step, averaged over steps.

    ``logits_seq`` is ``[T, B, K]``.  All steps share the batch size, so the
    per-step mean of batch means equals one mean over the ``T*B`` rows.
    """
    logits_seq = as_tensor(logits_seq)
    if logits_seq.ndim != 3 or logits_seq.shape[0] < 1:
        raise ValueError(f"expected [T, B, K] logits, got {logits_seq.shape}")
    T, B, K = logits_seq.shape
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape != (B,):
        raise ValueError(f"expected {B} labels, got shape {labels.shape}")
    if T == 1:
        return F.cross_entropy(logits_seq.reshape(B, K), labels)
    return F.cross_entropy(logits_seq.reshape(T * B, K), np.tile(labels, T))


def _target_columns(emb: EmbeddingSet) -> np.ndarray:
    if emb.query_labels is None:
        raise ValueError("query labels are required for the contrastive loss")
    lookup = {int(c): i for i, c in enumerate(emb.prototype_labels)}
    cols = []
    for c in emb.query_labels:
        if int(c) not in lookup:
            raise ValueError(f"query class {int(c)} has no prototype")
        cols.append(lookup[int(c)])
    return np.asarray(cols, dtype=np.intp)


def infonce_loss(embeddings: EmbeddingSet, tau_c: float) -> Tensor:
    """``-log exp(sim+/tau) / sum_n exp(sim_n/tau)`` averaged over queries.

    The denominator runs over all prototypes, the positive included.
    """
    if tau_c <= 0:
        raise ValueError(f"tau_c must be positive, got {tau_c}")
    cols = _target_columns(embeddings)
    logits = embeddings.similarities() * (1.0 / tau_c)
    return F.cross_entropy(logits, cols)


def total_loss(l_tet, l_info, lam: float) -> Tensor:
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    return as_tensor(l_tet) * lam + as_tensor(l_info) * (1.0 - lam)


def classify_query(embeddings: EmbeddingSet) -> np.ndarray:
    """Class id of the most cosine-similar prototype for every query.

    Exact ties go to the lowest class id.
    """
    sims = embeddings.similarities().data
    order = np.argsort(embeddings.prototype_labels, kind="stable")
    best = np.argmax(sims[:, order], axis=1)
    return embeddings.prototype_labels[order][best]
