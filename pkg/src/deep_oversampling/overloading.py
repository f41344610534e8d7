"""Deep feature overloading: per-class embedding stores, in-class neighbor
selection and weighted instance construction."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .dualhead_net import embed_all

logger = logging.getLogger(__name__)


class CapacityError(ValueError):
    """A class has fewer than ``k + 1`` members."""

    def __init__(self, label, k, size):
        super().__init__(f"class {label}: k={k} needs {k + 1} members, has {size}")
        self.label, self.k, self.size = label, k, size


@dataclass
class EmbeddingStore:
    """``classes[c]`` maps to ``(sample_indices, embeddings)`` with rows aligned.

    Sample indices within a class are kept in ascending order.
    """
    classes: dict
    dim: int

    def __len__(self):
        return sum(len(idx) for idx, _ in self.classes.values())

    def indices(self, label) -> np.ndarray:
        return self._get(label)[0]

    def embeddings(self, label) -> np.ndarray:
        return self._get(label)[1]

    def _get(self, label):
        try:
            return self.classes[label]
        except KeyError:
            raise ValueError(f"class {label} not present in the store") from None

    def position(self, label, sample_index: int) -> int:
        idx = self.indices(label)
        pos = int(np.searchsorted(idx, sample_index))
        if pos >= len(idx) or idx[pos] != sample_index:
            raise ValueError(f"sample {sample_index} not stored under class {label}")
        return pos


@dataclass
class OverloadedInstance:
    sample_index: int
    x: np.ndarray
    y: int
    neighbor_indices: np.ndarray
    # (k + 1, d); row 0 is the sample's own stored embedding
    neighbors: np.ndarray


@dataclass
class WeightedInstance(OverloadedInstance):
    weights: np.ndarray = None


def build_store(embeddings: np.ndarray, labels) -> EmbeddingStore:
    labels = np.asarray(labels)
    dim = embeddings.shape[1] if embeddings.ndim == 2 else 0
    classes = {}
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        classes[int(c)] = (idx, embeddings[idx])
    return EmbeddingStore(classes, dim)


def compute_embeddings(config, params, dataset) -> EmbeddingStore:
    """Embed every training sample and group the results by class."""
    v = embed_all(config, params, dataset.x)
    return build_store(v, dataset.y)


def pairwise_sq_distances(v: np.ndarray, chunk: int = 64) -> np.ndarray:
    # direct differences rather than the |a|^2 + |b|^2 - 2ab expansion, so the
    # result is exactly symmetric with an exactly zero diagonal
    v = np.asarray(v, dtype=np.float64)
    d = np.empty((len(v), len(v)))
    for s in range(0, len(v), chunk):
        diff = v[s:s + chunk, None, :] - v[None, :, :]
        d[s:s + chunk] = np.einsum("ijk,ijk->ij", diff, diff)
    return d


def distance_matrix(store: EmbeddingStore, label) -> np.ndarray:
    """Squared Euclidean distances among the embeddings of one class."""
    return pairwise_sq_distances(store.embeddings(label))


def select_neighbors(store: EmbeddingStore, distances, sample_index: int, k: int,
                     label=None, x=None) -> OverloadedInstance:
    """Own embedding plus the ``k`` nearest in-class embeddings.

    Ordering is self first, then ascending distance; ties go to the lower
    sample index. ``label`` may be omitted when the store is searched for it.
    """
    if label is None:
        label = next(c for c, (idx, _) in store.classes.items()
                     if np.any(idx == sample_index))
    idx = store.indices(label)
    vecs = store.embeddings(label)
    if k + 1 > len(idx):
        raise CapacityError(label, k, len(idx))
    pos = store.position(label, sample_index)
    row = distances[pos]
    others = np.delete(np.arange(len(idx)), pos)
    # stable sort on distance; ``others`` is in ascending sample order
    order = others[np.argsort(row[others], kind="stable")][:k]
    chosen = np.concatenate([[pos], order]).astype(np.int64)
    return OverloadedInstance(int(sample_index), x, int(label), idx[chosen],
                              vecs[chosen])


def clamp_k(k: int, class_size: int, label) -> int:
    if k + 1 > class_size:
        logger.warning("class %s has %d samples; clamping k from %d to %d",
                       label, class_size, k, class_size - 1)
        return class_size - 1
    return k


def build_weighted_set(store: EmbeddingStore, dataset, k_per_class: dict,
                       r_per_class: dict, seed: int, clamp: bool = True) -> list:
    """Weighted overloading instances for every training sample.

    Each sample of class ``c`` yields ``r_per_class[c]`` instances that share
    one neighbor set but carry independent simplex weights. Each class draws
    from its own RNG stream ``(seed, class)``. The result is ordered by
    sample index, then by draw.
    """
    out = []
    for label in sorted(store.classes):
        idx = store.indices(label)
        k = int(k_per_class.get(label, 0))
        r = int(r_per_class.get(label, 1))
        if r < 1:
            raise ValueError(f"class {label}: r must be >= 1")
        if clamp:
            k = clamp_k(k, len(idx), label)
        # the matrix is only needed when there are neighbors to search
        dist = distance_matrix(store, label) if k > 0 else np.zeros((len(idx),) * 2)
        rng = nx.make_rng(seed, "weights", label)
        for i in idx:
            inst = select_neighbors(store, dist, int(i), k, label=label,
                                    x=dataset.x[i])
            ws = nx.sample_simplex(k + 1, rng, size=r)
            for w in ws:
                out.append(WeightedInstance(inst.sample_index, inst.x, inst.y,
                                            inst.neighbor_indices, inst.neighbors,
                                            w.astype(store.embeddings(label).dtype)))
    out.sort(key=lambda z: z.sample_index)
    return out


def dump_weighted_set(instances, path) -> None:
    """Line-delimited debug dump: index, class, neighbor indices, weights."""
    with open(path, "w") as fh:
        for z in instances:
            nbr = ",".join(str(int(i)) for i in z.neighbor_indices)
            w = ",".join(f"{float(v):.9g}" for v in z.weights)
            fh.write(f"{z.sample_index}\t{z.y}\t{nbr}\t{w}\n")
