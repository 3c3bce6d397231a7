#!/usr/bin/env python3
"""
Collaborative filtering trainer

Builds the confidence-weighted user x album matrix from one week of usage
and factorizes it with randomized subspace iteration. The resulting
EmbeddingStore holds the "ground truth" vectors the cold-start network
learns to predict.
"""

import logging
import struct
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
from scipy import linalg, sparse

from config import WEEK
from errors import DegenerateMatrixError, FormatError, ValidationError
from storage.files import safe_write
from storage.models import EventType, UsageEvent

logger = logging.getLogger(__name__)

CONVERGENCE_RTOL = 1e-13
MAX_SUBSPACE_ITER = 500


@dataclass(frozen=True)
class InteractionMatrix:
    user_ids: tuple[str, ...]
    album_ids: tuple[str, ...]
    values: sparse.csr_matrix
    # album_id -> number of distinct users with at least one stream or like
    support: Mapping[str, int] = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @classmethod
    def from_dense(
        cls,
        array,
        user_ids: Optional[Sequence[str]] = None,
        album_ids: Optional[Sequence[str]] = None,
    ) -> "InteractionMatrix":
        dense = np.asarray(array, dtype=np.float64)
        rows, cols = dense.shape
        users = tuple(user_ids) if user_ids is not None else tuple(f"u{i:04d}" for i in range(rows))
        albums = tuple(album_ids) if album_ids is not None else tuple(f"a{j:04d}" for j in range(cols))
        support = {albums[j]: int(np.count_nonzero(dense[:, j])) for j in range(cols)}
        return cls(users, albums, sparse.csr_matrix(dense), support)


def build_matrix(
    events: Iterable[UsageEvent],
    window_end: int,
    window_len: int = WEEK,
    like_weight: float = 1.0,
) -> InteractionMatrix:
    """
    Aggregate Stream/Like events with ts in [window_end - window_len, window_end)
    into weights log(1 + streams) + like_weight * likes.
    """
    start = window_end - window_len
    counts: dict[tuple[str, str], list[int]] = defaultdict(lambda: [0, 0])

    for event in events:
        if not start <= event.ts < window_end:
            continue
        if event.event_type is EventType.STREAM:
            counts[(event.user_id, event.subject)][0] += 1
        elif event.event_type is EventType.LIKE:
            counts[(event.user_id, event.subject)][1] += 1

    user_ids = tuple(sorted({u for u, _ in counts}))
    album_ids = tuple(sorted({a for _, a in counts}))
    user_pos = {u: i for i, u in enumerate(user_ids)}
    album_pos = {a: j for j, a in enumerate(album_ids)}

    n = len(counts)
    rows = np.empty(n, dtype=np.int64)
    cols = np.empty(n, dtype=np.int64)
    data = np.empty(n, dtype=np.float64)
    support: dict[str, int] = defaultdict(int)

    for k, ((user, album), (streams, likes)) in enumerate(counts.items()):
        rows[k] = user_pos[user]
        cols[k] = album_pos[album]
        data[k] = np.log1p(streams) + like_weight * likes
        support[album] += 1

    values = sparse.csr_matrix((data, (rows, cols)), shape=(len(user_ids), len(album_ids)))
    values.sort_indices()

    logger.info(
        "Interaction matrix: %d users x %d albums, %d entries (window %d..%d)",
        len(user_ids),
        len(album_ids),
        n,
        start,
        window_end,
    )
    return InteractionMatrix(user_ids, album_ids, values, dict(support))


def _svd_flip(u: np.ndarray, vt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Make the largest-magnitude entry of each left singular vector positive."""
    pivots = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[pivots, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return u * signs, vt * signs[:, None]


def randomized_svd(
    a,
    d: int,
    n_iter: int = 7,
    seed: int = 0,
    oversampling: int = 8,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Rank-d factorization a ~ u @ diag(s) @ vt by randomized subspace iteration.

    Runs at least n_iter power iterations and keeps going until the top-d Ritz
    values stop moving, so flat spectra still reach full precision. u and vt
    have orthonormal columns/rows; signs follow _svd_flip.
    """
    rows, cols = a.shape
    if n_iter < 1:
        raise ValidationError("n_iter must be >= 1")
    if d < 1 or d > min(rows, cols):
        raise ValidationError(f"d={d} exceeds min dimension {min(rows, cols)}")

    nonzero = a.count_nonzero() if sparse.issparse(a) else np.count_nonzero(a)
    if nonzero == 0:
        raise DegenerateMatrixError()

    a_t = a.T
    width = min(d + oversampling, rows, cols)
    rng = np.random.default_rng(seed)
    omega = rng.standard_normal((cols, width))

    q, _ = linalg.qr(a @ omega, mode="economic")
    previous: Optional[np.ndarray] = None
    iterations = 0

    while True:
        z, _ = linalg.qr(np.asarray(a_t @ q), mode="economic")
        q, _ = linalg.qr(np.asarray(a @ z), mode="economic")
        iterations += 1
        if iterations < n_iter:
            continue

        b = np.asarray(a_t @ q).T
        ub, s, vt = linalg.svd(b, full_matrices=False)
        top = s[:d]
        if previous is not None:
            tol = CONVERGENCE_RTOL * (top + top[0])
            if np.all(np.abs(top - previous) <= tol):
                break
        if iterations >= MAX_SUBSPACE_ITER:
            logger.warning("Subspace iteration hit %d iterations without converging", iterations)
            break
        previous = top

    u = q @ ub[:, :d]
    u, vt_d = _svd_flip(u, vt[:d])
    logger.debug("randomized_svd: %d iterations, width %d", iterations, width)
    return u, s[:d].copy(), vt_d


class EmbeddingStore:
    """User and album CF vectors of one factorization."""

    def __init__(
        self,
        dim: int,
        user_ids: Sequence[str],
        user_matrix: np.ndarray,
        album_ids: Sequence[str],
        album_matrix: np.ndarray,
        singular_values: np.ndarray,
        support: Optional[Mapping[str, int]] = None,
        version: int = 1,
        trained_until: int = 0,
    ) -> None:
        self.dim = dim
        self.user_ids = tuple(user_ids)
        self.user_matrix = np.asarray(user_matrix, dtype=np.float64)
        self.album_ids = tuple(album_ids)
        self.album_matrix = np.asarray(album_matrix, dtype=np.float64)
        self.singular_values = np.asarray(singular_values, dtype=np.float64)
        self.support = dict(support or {})
        self.version = version
        self.trained_until = trained_until

        if self.user_matrix.shape != (len(self.user_ids), dim):
            raise ValidationError("user matrix shape does not match ids and dim")
        if self.album_matrix.shape != (len(self.album_ids), dim):
            raise ValidationError("album matrix shape does not match ids and dim")

        self._user_pos = {u: i for i, u in enumerate(self.user_ids)}
        self._album_pos = {a: j for j, a in enumerate(self.album_ids)}
        self.user_matrix.setflags(write=False)
        self.album_matrix.setflags(write=False)

    @property
    def user_vecs(self) -> dict[str, np.ndarray]:
        return {u: self.user_matrix[i] for u, i in self._user_pos.items()}

    @property
    def item_vecs(self) -> dict[str, np.ndarray]:
        return {a: self.album_matrix[j] for a, j in self._album_pos.items()}

    def user_vec(self, user_id: str) -> Optional[np.ndarray]:
        i = self._user_pos.get(user_id)
        return None if i is None else self.user_matrix[i]

    def item_vec(self, album_id: str) -> Optional[np.ndarray]:
        j = self._album_pos.get(album_id)
        return None if j is None else self.album_matrix[j]

    def mean_user_vector(self) -> np.ndarray:
        if not self.user_ids:
            return np.zeros(self.dim)
        return self.user_matrix.mean(axis=0)

    # ---------- persistence ----------
    #
    # Little-endian layout:
    #   header  <4sHIIIQq  magic "FRES", format version, dim, n_users, n_albums,
    #                      store version, trained_until
    #   dim x float64      singular values
    #   n_users records    u16 id length, utf-8 id, dim x float32
    #   n_albums records   u16 id length, utf-8 id, u32 support, dim x float32

    MAGIC = b"FRES"
    FORMAT_VERSION = 1
    _HEADER = struct.Struct("<4sHIIIQq")

    def to_bytes(self) -> bytes:
        parts = [
            self._HEADER.pack(
                self.MAGIC,
                self.FORMAT_VERSION,
                self.dim,
                len(self.user_ids),
                len(self.album_ids),
                self.version,
                self.trained_until,
            ),
            self.singular_values.astype("<f8").tobytes(),
        ]
        for user_id, row in zip(self.user_ids, self.user_matrix):
            raw = user_id.encode("utf-8")
            parts.append(struct.pack("<H", len(raw)) + raw + row.astype("<f4").tobytes())
        for album_id, row in zip(self.album_ids, self.album_matrix):
            raw = album_id.encode("utf-8")
            parts.append(
                struct.pack("<H", len(raw))
                + raw
                + struct.pack("<I", self.support.get(album_id, 0))
                + row.astype("<f4").tobytes()
            )
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, payload: bytes) -> "EmbeddingStore":
        try:
            magic, fmt, dim, n_users, n_albums, version, trained_until = cls._HEADER.unpack_from(payload, 0)
        except struct.error:
            raise FormatError("embedding store: truncated header")
        if magic != cls.MAGIC:
            raise FormatError("embedding store: bad magic")
        if fmt != cls.FORMAT_VERSION:
            raise FormatError(f"embedding store: unsupported format version {fmt}")

        offset = cls._HEADER.size
        try:
            singular = np.frombuffer(payload, dtype="<f8", count=dim, offset=offset).astype(np.float64)
            offset += 8 * dim

            def read_id() -> str:
                nonlocal offset
                (length,) = struct.unpack_from("<H", payload, offset)
                offset += 2
                value = payload[offset:offset + length].decode("utf-8")
                offset += length
                return value

            def read_vec() -> np.ndarray:
                nonlocal offset
                vec = np.frombuffer(payload, dtype="<f4", count=dim, offset=offset).astype(np.float64)
                offset += 4 * dim
                return vec

            user_ids, user_rows = [], []
            for _ in range(n_users):
                user_ids.append(read_id())
                user_rows.append(read_vec())

            album_ids, album_rows, support = [], [], {}
            for _ in range(n_albums):
                album_id = read_id()
                (support[album_id],) = struct.unpack_from("<I", payload, offset)
                offset += 4
                album_ids.append(album_id)
                album_rows.append(read_vec())
        except (struct.error, ValueError, UnicodeDecodeError) as e:
            raise FormatError(f"embedding store: corrupt payload ({e})")

        if offset != len(payload):
            raise FormatError("embedding store: trailing bytes")

        return cls(
            dim=dim,
            user_ids=user_ids,
            user_matrix=np.array(user_rows).reshape(n_users, dim),
            album_ids=album_ids,
            album_matrix=np.array(album_rows).reshape(n_albums, dim),
            singular_values=singular,
            support=support,
            version=version,
            trained_until=trained_until,
        )

    def save(self, path: str) -> None:
        safe_write(path, self.to_bytes())
        logger.info("Embedding store v%d saved to %s", self.version, path)

    @classmethod
    def load(cls, path: str) -> "EmbeddingStore":
        try:
            with open(path, "rb") as f:
                payload = f.read()
        except OSError as e:
            raise FormatError(f"cannot read embedding store {path}: {e}") from e
        store = cls.from_bytes(payload)
        logger.info("Embedding store v%d loaded from %s", store.version, path)
        return store


def truncated_svd(
    m: InteractionMatrix,
    d: int,
    n_iter: int = 7,
    seed: int = 0,
    oversampling: int = 8,
    version: int = 1,
    trained_until: int = 0,
) -> EmbeddingStore:
    """Factorize m and split sqrt(sigma) between user and album factors."""
    u, s, vt = randomized_svd(m.values, d, n_iter=n_iter, seed=seed, oversampling=oversampling)
    scale = np.sqrt(s)
    store = EmbeddingStore(
        dim=d,
        user_ids=m.user_ids,
        user_matrix=u * scale,
        album_ids=m.album_ids,
        album_matrix=vt.T * scale,
        singular_values=s,
        support=m.support,
        version=version,
        trained_until=trained_until,
    )
    logger.info(
        "Truncated SVD: d=%d, sigma_1=%.4f, sigma_d=%.4f, store v%d",
        d,
        s[0],
        s[-1],
        version,
    )
    return store


def ground_truth_for(album_id: str, store: EmbeddingStore, min_interactions: int = 10) -> Optional[np.ndarray]:
    """Album vector if at least min_interactions distinct users touched it in the window."""
    if store.support.get(album_id, 0) < min_interactions:
        return None
    return store.item_vec(album_id)
