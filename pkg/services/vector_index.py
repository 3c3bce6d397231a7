#!/usr/bin/env python3
"""
Dot-product top-k retrieval over album vectors

Exact brute force or a coarse inverted-list index (k-means quantizer).
Snapshots are immutable; IndexHolder swaps them atomically.
"""

import logging
import math
import threading
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Union

import numpy as np
from sklearn.cluster import KMeans

from errors import DimensionMismatchError, StaleSnapshotError, ValidationError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExactMode:
    pass


@dataclass(frozen=True)
class CoarseIVFMode:
    num_clusters: int
    nprobe: int
    # each vector is listed under its `spill` nearest centroids
    spill: int = 1

    def __post_init__(self) -> None:
        if self.num_clusters < 1 or self.nprobe < 1 or self.spill < 1:
            raise ValidationError("num_clusters, nprobe and spill must be >= 1")

    @classmethod
    def auto(cls, n_items: int, spill: int = 1) -> "CoarseIVFMode":
        """sqrt(N) clusters, ceil(sqrt(N)/4) probes."""
        clusters = max(1, int(round(math.sqrt(n_items))))
        return cls(clusters, max(1, math.ceil(math.sqrt(n_items) / 4)), spill)


IndexMode = Union[ExactMode, CoarseIVFMode]


@dataclass(frozen=True, eq=False)
class IndexSnapshot:
    version: int
    ids: tuple[str, ...]
    vectors: np.ndarray
    mode: IndexMode
    centroids: Optional[np.ndarray] = None
    assignments: Optional[np.ndarray] = None
    lists: tuple[np.ndarray, ...] = ()
    positions: Mapping[str, int] = field(default_factory=dict, repr=False)

    @property
    def size(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def position(self, album_id: str) -> Optional[int]:
        return self.positions.get(album_id)


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def build(
    items: Mapping[str, np.ndarray],
    mode: IndexMode = ExactMode(),
    seed: int = 0,
    version: int = 1,
    dim: Optional[int] = None,
) -> IndexSnapshot:
    """Build an immutable snapshot; ids are stored in ascending order."""
    ids = tuple(sorted(items))
    if ids:
        rows = [np.asarray(items[i], dtype=np.float64) for i in ids]
        widths = {r.shape for r in rows}
        if len(widths) != 1 or rows[0].ndim != 1:
            raise DimensionMismatchError("index vectors differ in length")
        vectors = np.vstack(rows)
    else:
        vectors = np.zeros((0, dim or 0))
    positions = {album_id: i for i, album_id in enumerate(ids)}

    if isinstance(mode, ExactMode):
        return IndexSnapshot(version, ids, _readonly(vectors), mode, positions=positions)

    n = len(ids)
    if n == 0:
        raise ValidationError("cannot build a CoarseIVF index over zero items")
    if mode.num_clusters > n:
        raise ValidationError(f"num_clusters={mode.num_clusters} exceeds N={n}")

    kmeans = KMeans(
        n_clusters=mode.num_clusters,
        init="k-means++",
        n_init=1,
        max_iter=50,
        tol=1e-6,
        random_state=seed,
    )
    kmeans.fit(vectors)
    centroids = kmeans.cluster_centers_.astype(np.float64)

    # squared distances, nearest first (ties by cluster number)
    dist = (
        np.sum(vectors ** 2, axis=1)[:, None]
        - 2.0 * vectors @ centroids.T
        + np.sum(centroids ** 2, axis=1)[None, :]
    )
    spill = min(mode.spill, mode.num_clusters)
    nearest = np.argsort(dist, axis=1, kind="stable")[:, :spill]
    assignments = nearest[:, 0].copy()

    members: list[list[int]] = [[] for _ in range(mode.num_clusters)]
    for row, clusters in enumerate(nearest):
        for c in clusters:
            members[c].append(row)
    lists = tuple(_readonly(np.array(m, dtype=np.int64)) for m in members)

    logger.info(
        "Built IVF index v%d: N=%d, clusters=%d, nprobe=%d, spill=%d, kmeans iterations=%d",
        version,
        n,
        mode.num_clusters,
        mode.nprobe,
        spill,
        kmeans.n_iter_,
    )
    return IndexSnapshot(
        version,
        ids,
        _readonly(vectors),
        mode,
        centroids=_readonly(centroids),
        assignments=_readonly(assignments),
        lists=lists,
        positions=positions,
    )


def _candidates(snapshot: IndexSnapshot, user_vec: np.ndarray, k: int, excluded: np.ndarray) -> np.ndarray:
    """
    Rows to score. CoarseIVF probes the nprobe best centroids, then keeps
    widening to the next-best ones while fewer than k usable rows are found.
    """
    if isinstance(snapshot.mode, ExactMode):
        rows = np.arange(snapshot.size)
        return rows[~np.isin(rows, excluded)]
    affinity = snapshot.centroids @ user_vec
    ranked = np.lexsort((np.arange(len(affinity)), -affinity))
    nprobe = min(snapshot.mode.nprobe, len(ranked))

    rows = np.unique(np.concatenate([snapshot.lists[c] for c in ranked[:nprobe]]))
    rows = rows[~np.isin(rows, excluded)]
    probed = nprobe
    while rows.size < k and probed < len(ranked):
        extra = snapshot.lists[ranked[probed]]
        probed += 1
        rows = np.union1d(rows, extra[~np.isin(extra, excluded)])
    if probed > nprobe:
        logger.debug("IVF probe widened from %d to %d clusters for k=%d", nprobe, probed, k)
    return rows


def query(
    snapshot: IndexSnapshot,
    user_vec,
    k: int,
    exclude: Iterable[str] = (),
) -> list[tuple[str, float]]:
    """
    Top-k albums by dot product, ties by album id. Exact mode scans every
    vector; CoarseIVF scans the nprobe clusters whose centroids score highest,
    and further clusters in centroid order when those hold fewer than k
    non-excluded albums.
    Asking for more than is available returns everything available.
    """
    if k < 1:
        raise ValidationError("k must be >= 1")
    if snapshot.size == 0:
        return []
    q = np.asarray(user_vec, dtype=np.float64)
    if q.shape != (snapshot.dim,):
        raise DimensionMismatchError(f"user vector has shape {q.shape}, index dim {snapshot.dim}")

    excluded = np.array([p for p in (snapshot.position(a) for a in exclude) if p is not None], dtype=np.int64)
    rows = _candidates(snapshot, q, k, excluded)
    if rows.size == 0:
        return []

    scores = snapshot.vectors[rows] @ q
    if rows.size > k:
        kth = np.partition(scores, rows.size - k)[rows.size - k]
        keep = scores >= kth
        rows, scores = rows[keep], scores[keep]

    # rows ascend with album id, so the secondary key breaks ties by id
    order = np.lexsort((rows, -scores))[:k]
    return [(snapshot.ids[rows[i]], float(scores[i])) for i in order]


class IndexHolder:
    """Single writer swaps snapshots; readers grab `current` without locking."""

    def __init__(self, initial: Optional[IndexSnapshot] = None) -> None:
        self._lock = threading.Lock()
        self.current: Optional[IndexSnapshot] = initial

    @property
    def version(self) -> int:
        return self.current.version if self.current is not None else 0

    def swap(self, next_snapshot: IndexSnapshot) -> None:
        with self._lock:
            current = self.current
            if current is not None and next_snapshot.version <= current.version:
                logger.error(
                    "Rejected index swap v%d -> v%d",
                    current.version,
                    next_snapshot.version,
                )
                raise StaleSnapshotError()
            self.current = next_snapshot
        logger.info("Index swapped to v%d (%d items)", next_snapshot.version, next_snapshot.size)
