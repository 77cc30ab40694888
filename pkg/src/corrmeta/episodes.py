"""N-way K-shot episode sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import DataError, Dataset


@dataclass
class Episode:
    """Indices are flat positions into ``Dataset.flat()``, laid out class-major.

    ``class_map[e]`` is the dataset class index behind episode label ``e``.
    """

    n_way: int
    k_shot: int
    q_queries: int
    class_map: np.ndarray
    support_index: np.ndarray  # [N, K]
    query_index: np.ndarray  # [N, Q]

    @property
    def support_labels(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_way), self.k_shot)

    @property
    def query_labels(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_way), self.q_queries)

    def support_images(self, ds: Dataset) -> np.ndarray:
        return _gather(ds, self.support_index.reshape(-1))

    def query_images(self, ds: Dataset) -> np.ndarray:
        return _gather(ds, self.query_index.reshape(-1))


def _gather(ds: Dataset, flat_index: np.ndarray) -> np.ndarray:
    off = ds.offsets
    cls = np.searchsorted(off, flat_index, side="right") - 1
    return np.stack([ds.images[c][i - off[c]] for c, i in zip(cls, flat_index)])


def check_episode_support(ds: Dataset, n: int, k: int, q: int) -> None:
    if min(n, k, q) < 1:
        raise DataError(f"n, k, q must be positive, got {n}, {k}, {q}")
    if ds.n_classes < n:
        raise DataError(f"{n}-way episodes need {n} classes, dataset has {ds.n_classes}")
    for name, size in zip(ds.class_names, ds.class_sizes()):
        if size < k + q:
            raise DataError(f"class {name!r} has {size} samples, episodes need {k + q}")


def sample_episode(ds: Dataset, n: int, k: int, q: int, rng: np.random.Generator) -> Episode:
    """Classes uniformly without replacement, then per-class samples without replacement."""
    check_episode_support(ds, n, k, q)
    off = ds.offsets
    sizes = ds.class_sizes()
    classes = rng.choice(ds.n_classes, size=n, replace=False)
    sup = np.empty((n, k), dtype=np.int64)
    qry = np.empty((n, q), dtype=np.int64)
    for e, c in enumerate(classes):
        pick = rng.permutation(sizes[c])[: k + q] + off[c]
        sup[e] = pick[:k]
        qry[e] = pick[k:]
    return Episode(n, k, q, classes, sup, qry)
