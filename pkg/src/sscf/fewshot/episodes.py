"""N-way K-shot episode sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset, DatasetError, NoiseSpec, add_gaussian_noise


@dataclass
class Episode:
    """One N-way K-shot task.

    Items are ordered class-major (all K supports of class 0, then class 1,
    ...).  ``classes[i]`` is the dataset class id behind local label ``i``.
    """

    support: np.ndarray
    support_labels: np.ndarray  # local ids 0..way-1
    query: np.ndarray
    query_labels: np.ndarray
    classes: np.ndarray
    way: int
    shot: int
    queries_per_class: int
    support_index: np.ndarray
    query_index: np.ndarray

    @property
    def support_class_ids(self) -> np.ndarray:
        return self.classes[self.support_labels]

    @property
    def query_class_ids(self) -> np.ndarray:
        return self.classes[self.query_labels]

    def with_noise(self, spec: NoiseSpec, rng: np.random.Generator, queries_only: bool = False) -> "Episode":
        if spec.rate == 0.0:
            return self
        support = self.support if queries_only else add_gaussian_noise(self.support, spec, rng)
        query = add_gaussian_noise(self.query, spec, rng)
        return Episode(
            support, self.support_labels, query, self.query_labels, self.classes,
            self.way, self.shot, self.queries_per_class, self.support_index, self.query_index,
        )


def sample_episode(
    dataset: Dataset,
    classes,
    n: int,
    k: int,
    q: int,
    rng: np.random.Generator,
) -> Episode:
    """Draw ``n`` classes from ``classes`` and ``k + q`` distinct items of each."""
    classes = np.asarray(classes, dtype=np.int64)
    if n < 1 or k < 1 or q < 1:
        raise ValueError(f"n, k, q must be positive, got {n}, {k}, {q}")
    if n > len(classes):
        raise DatasetError(f"cannot draw {n} classes from a split of {len(classes)}")
    by_class = dataset.indices_by_class()
    for c in classes:
        if len(by_class[int(c)]) < k + q:
            raise DatasetError(
                f"class {dataset.class_names[int(c)]!r} has {len(by_class[int(c)])} items, "
                f"needs k+q={k + q}"
            )
    chosen = rng.choice(classes, size=n, replace=False)
    s_idx, q_idx = [], []
    for c in chosen:
        picks = rng.choice(by_class[int(c)], size=k + q, replace=False)
        s_idx.append(picks[:k])
        q_idx.append(picks[k:])
    s_idx = np.concatenate(s_idx)
    q_idx = np.concatenate(q_idx)
    return Episode(
        support=dataset.items[s_idx],
        support_labels=np.repeat(np.arange(n), k),
        query=dataset.items[q_idx],
        query_labels=np.repeat(np.arange(n), q),
        classes=chosen,
        way=n,
        shot=k,
        queries_per_class=q,
        support_index=s_idx,
        query_index=q_idx,
    )
