"""Data containers for clustered binary responses with pairwise designs.

A :class:`ClusterData` holds one cluster: its binary outcome vector, a mean
design matrix with one row per unit, and an association design matrix with one
row per within-cluster pair in lexicographic order ((0,1), (0,2), ..., (1,2),
...). A :class:`Dataset` is an ordered collection of clusters sharing column
dimensions.

Construction groups clusters by size and stacks each group into contiguous
arrays so that moment and score evaluations run as batched linear algebra
(clusters of equal size share the same pair layout). All downstream numerics
iterate over the handful of size groups instead of over clusters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import DataFormatError, StructuralError


@lru_cache(maxsize=None)
def pair_indices(size: int) -> np.ndarray:
    """Lexicographic within-cluster pair index array of shape (size*(size-1)/2, 2)."""
    j, k = np.triu_indices(size, k=1)
    out = np.column_stack([j, k]).astype(np.intp)
    out.setflags(write=False)
    return out


def n_pairs(size: int) -> int:
    return size * (size - 1) // 2


@dataclass(frozen=True)
class ClusterData:
    """One cluster: outcomes ``y`` (n_i,), mean design ``x`` (n_i, p),
    association design ``z`` (m_i, q) with m_i = n_i(n_i-1)/2 rows in
    lexicographic pair order."""

    cluster_id: str
    y: np.ndarray
    x: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        x = np.asarray(self.x, dtype=float)
        z = np.asarray(self.z, dtype=float)
        if y.ndim != 1 or y.size == 0:
            raise DataFormatError(
                f"cluster {self.cluster_id!r}: y must be a nonempty 1-d array"
            )
        if not np.isin(y, (0.0, 1.0)).all():
            raise DataFormatError(
                f"cluster {self.cluster_id!r}: outcomes must be 0/1"
            )
        n = y.size
        if x.ndim != 2 or x.shape[0] != n:
            raise DataFormatError(
                f"cluster {self.cluster_id!r}: x must be ({n}, p), got {x.shape}"
            )
        m = n_pairs(n)
        if z.ndim != 2 or z.shape[0] != m:
            raise DataFormatError(
                f"cluster {self.cluster_id!r}: z must have {m} rows "
                f"(one per lexicographic pair), got {z.shape[0]}"
            )
        if not np.isfinite(x).all() or not np.isfinite(z).all():
            raise DataFormatError(
                f"cluster {self.cluster_id!r}: covariates must be finite"
            )
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "z", z)

    @property
    def size(self) -> int:
        return self.y.size


@dataclass(frozen=True)
class SizeGroup:
    """All clusters of one size, stacked. ``indices`` maps the group's rows
    back to positions in the dataset's cluster order."""

    size: int
    indices: np.ndarray          # (g,) positions in dataset order
    ids: tuple                   # cluster ids, aligned with rows
    y: np.ndarray                # (g, s)
    x: np.ndarray                # (g, s, p)
    z: np.ndarray                # (g, m, q)
    pairs: np.ndarray            # (m, 2)

    @property
    def count(self) -> int:
        return self.y.shape[0]


class Dataset:
    """Ordered collection of clusters with common design dimensions."""

    def __init__(self, clusters):
        clusters = list(clusters)
        if not clusters:
            raise StructuralError("dataset: at least one cluster is required")
        p = clusters[0].x.shape[1]
        q = clusters[0].z.shape[1]
        for c in clusters:
            if c.x.shape[1] != p:
                raise DataFormatError(
                    f"cluster {c.cluster_id!r}: mean design has {c.x.shape[1]} "
                    f"columns, expected {p}"
                )
            if c.z.shape[1] != q:
                raise DataFormatError(
                    f"cluster {c.cluster_id!r}: association design has "
                    f"{c.z.shape[1]} columns, expected {q}"
                )
        ids = [c.cluster_id for c in clusters]
        if len(set(ids)) != len(ids):
            raise DataFormatError("dataset: duplicate cluster ids")
        self.clusters = clusters
        self.p = p
        self.q = q
        self.groups = self._build_groups(clusters)

    @staticmethod
    def _build_groups(clusters):
        by_size: dict[int, list[int]] = {}
        for pos, c in enumerate(clusters):
            by_size.setdefault(c.size, []).append(pos)
        groups = []
        for size in sorted(by_size):
            idx = np.asarray(by_size[size], dtype=np.intp)
            members = [clusters[i] for i in idx]
            groups.append(
                SizeGroup(
                    size=size,
                    indices=idx,
                    ids=tuple(c.cluster_id for c in members),
                    y=np.stack([c.y for c in members]),
                    x=np.stack([c.x for c in members]),
                    z=np.stack([c.z for c in members]),
                    pairs=pair_indices(size),
                )
            )
        return groups

    @property
    def n_clusters(self) -> int:
        return len(self.clusters)

    @property
    def total_units(self) -> int:
        return sum(c.size for c in self.clusters)

    @property
    def total_pairs(self) -> int:
        return sum(n_pairs(c.size) for c in self.clusters)

    def scatter(self, group_values) -> np.ndarray:
        """Reassemble per-cluster rows from per-group arrays into dataset order.

        ``group_values`` is a sequence aligned with ``self.groups``; element i
        has shape (g_i, ...). Returns an array of shape (n_clusters, ...).
        """
        first = np.asarray(group_values[0])
        out = np.empty((self.n_clusters,) + first.shape[1:], dtype=first.dtype)
        for grp, vals in zip(self.groups, group_values):
            out[grp.indices] = vals
        return out

    def __len__(self) -> int:
        return self.n_clusters

    def __repr__(self) -> str:
        sizes = sorted({g.size for g in self.groups})
        return (
            f"Dataset(n_clusters={self.n_clusters}, p={self.p}, q={self.q}, "
            f"sizes={sizes})"
        )


@dataclass
class Params:
    """Mean and association coefficient vectors."""

    beta: np.ndarray
    alpha: np.ndarray

    def __post_init__(self):
        self.beta = np.array(self.beta, dtype=float).ravel()
        self.alpha = np.array(self.alpha, dtype=float).ravel()

    def copy(self) -> "Params":
        return Params(self.beta.copy(), self.alpha.copy())

    @staticmethod
    def zeros(p: int, q: int) -> "Params":
        return Params(np.zeros(p), np.zeros(q))
