#!/usr/bin/env python3
"""
Cold-start embedding model

Feature extraction for fresh albums, a three-layer feed-forward network
regressing CF ground-truth vectors (mean squared error, plain mini-batch
gradient descent) and the periodic prediction refresh.
"""

import hashlib
import logging
import struct
import threading
import time
from dataclasses import asdict, dataclass, field
from types import MappingProxyType
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from config import HOUR
from errors import DimensionMismatchError, FormatError, TrainingDivergedError, ValidationError
from services.cf_trainer import EmbeddingStore, ground_truth_for
from storage.catalog import Catalog
from storage.files import safe_write
from storage.models import AlbumMeta

logger = logging.getLogger(__name__)


# ========================================
# FEATURES
# ========================================

@dataclass(frozen=True)
class FeatureVector:
    artist_prior: np.ndarray
    genre_onehot: np.ndarray
    label_hash_onehot: np.ndarray
    usage_stats: np.ndarray

    def to_array(self) -> np.ndarray:
        return np.concatenate(
            [self.artist_prior, self.genre_onehot, self.label_hash_onehot, self.usage_stats]
        )

    def __len__(self) -> int:
        return (
            len(self.artist_prior)
            + len(self.genre_onehot)
            + len(self.label_hash_onehot)
            + len(self.usage_stats)
        )


def label_bucket(label_id: str, buckets: int) -> int:
    digest = hashlib.blake2b(label_id.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % buckets


class FeatureBuilder:
    """Fixed-length album features: d + G + L + 3 floats."""

    def __init__(
        self,
        dim: int,
        genres: Sequence[str],
        label_buckets: int = 64,
        min_interactions: int = 10,
    ) -> None:
        self.dim = dim
        self.genres = tuple(genres)
        self.label_buckets = label_buckets
        self.min_interactions = min_interactions
        self._genre_pos = {g: i for i, g in enumerate(self.genres)}

    @property
    def n_features(self) -> int:
        return self.dim + len(self.genres) + self.label_buckets + 3

    def artist_prior(self, album: AlbumMeta, store: EmbeddingStore, catalog: Catalog) -> np.ndarray:
        """Mean ground-truth vector of the artists' albums released strictly before this one."""
        earlier: set[str] = set()
        for artist in album.artist_ids:
            for other_id in catalog.albums_by_artist(artist):
                other = catalog.albums.get(other_id)
                if other is not None and other.release_ts < album.release_ts:
                    earlier.add(other_id)

        vectors = []
        for other_id in sorted(earlier):
            vec = ground_truth_for(other_id, store, self.min_interactions)
            if vec is not None:
                vectors.append(vec)
        if not vectors:
            return np.zeros(self.dim)
        return np.mean(vectors, axis=0)

    def build_features(
        self,
        album: AlbumMeta,
        store: EmbeddingStore,
        usage_cutoff: int,
        events: Catalog,
    ) -> FeatureVector:
        """
        Features of an album as seen at usage_cutoff; usage counts only events
        in [release_ts, usage_cutoff).
        """
        if usage_cutoff < album.release_ts:
            raise ValidationError("usage_cutoff must not precede release_ts")
        if store.dim != self.dim:
            raise DimensionMismatchError(f"store dim {store.dim} != feature dim {self.dim}")

        genre = np.zeros(len(self.genres))
        for g in album.genre_ids:
            pos = self._genre_pos.get(g)
            if pos is not None:
                genre[pos] = 1.0

        label = np.zeros(self.label_buckets)
        label[label_bucket(album.label_id, self.label_buckets)] = 1.0

        streams, likes = events.usage_counts(album.album_id, album.release_ts, usage_cutoff)
        usage = np.array(
            [
                np.log1p(streams),
                np.log1p(likes),
                (usage_cutoff - album.release_ts) / HOUR / 24.0,
            ]
        )
        return FeatureVector(self.artist_prior(album, store, events), genre, label, usage)


def build_training_set(
    catalog: Catalog,
    store: EmbeddingStore,
    builder: FeatureBuilder,
    cutoffs_hours: Sequence[int] = (0, 4, 24, 72),
    as_of: Optional[int] = None,
) -> list[tuple[FeatureVector, np.ndarray]]:
    """
    Pair features with ground-truth vectors for every album the store can
    vouch for. Each album contributes one example per usage cutoff that lies
    before as_of (defaults to the store's training horizon).
    """
    horizon = as_of if as_of is not None else store.trained_until
    dataset = []
    for album_id in store.album_ids:
        target = ground_truth_for(album_id, store, builder.min_interactions)
        album = catalog.albums.get(album_id)
        if target is None or album is None:
            continue
        for hours in cutoffs_hours:
            cutoff = album.release_ts + hours * HOUR
            if horizon and cutoff > horizon:
                continue
            dataset.append((builder.build_features(album, store, cutoff, catalog), target))

    logger.info("Training set: %d examples from store v%d", len(dataset), store.version)
    return dataset


# ========================================
# NETWORK
# ========================================

def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


@dataclass
class MlpModel:
    """Row-vector MLP: relu(x W1 + b1) -> relu(. W2 + b2) -> . W3 + b3."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray

    PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3")

    def __post_init__(self) -> None:
        for name in self.PARAM_NAMES:
            setattr(self, name, np.array(getattr(self, name), dtype=np.float64))
        f, h1 = self.w1.shape
        if self.b1.shape != (h1,) or self.w2.shape[0] != h1:
            raise DimensionMismatchError("layer 1 and layer 2 shapes do not chain")
        h2 = self.w2.shape[1]
        if self.b2.shape != (h2,) or self.w3.shape[0] != h2:
            raise DimensionMismatchError("layer 2 and layer 3 shapes do not chain")
        if self.b3.shape != (self.w3.shape[1],):
            raise DimensionMismatchError("output bias does not match output width")

    @property
    def n_features(self) -> int:
        return self.w1.shape[0]

    @property
    def output_dim(self) -> int:
        return self.w3.shape[1]

    @property
    def hidden(self) -> tuple[int, int]:
        return self.w1.shape[1], self.w2.shape[1]

    def params(self) -> list[np.ndarray]:
        return [getattr(self, name) for name in self.PARAM_NAMES]

    def copy(self) -> "MlpModel":
        return MlpModel(*(p.copy() for p in self.params()))

    @classmethod
    def init(cls, n_features: int, h1: int, h2: int, d: int, seed: int = 0) -> "MlpModel":
        """Glorot-uniform weights, zero biases."""
        rng = np.random.default_rng(seed)

        def glorot(fan_in: int, fan_out: int) -> np.ndarray:
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-limit, limit, size=(fan_in, fan_out))

        return cls(
            w1=glorot(n_features, h1),
            b1=np.zeros(h1),
            w2=glorot(h1, h2),
            b2=np.zeros(h2),
            w3=glorot(h2, d),
            b3=np.zeros(d),
        )

    @classmethod
    def zeros(cls, n_features: int, h1: int, h2: int, d: int) -> "MlpModel":
        return cls(
            np.zeros((n_features, h1)), np.zeros(h1),
            np.zeros((h1, h2)), np.zeros(h2),
            np.zeros((h2, d)), np.zeros(d),
        )

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, tuple]:
        z1 = x @ self.w1 + self.b1
        a1 = _relu(z1)
        z2 = a1 @ self.w2 + self.b2
        a2 = _relu(z2)
        out = a2 @ self.w3 + self.b3
        return out, (x, z1, a1, z2, a2)

    # ---------- persistence ----------
    #
    # Little-endian layout:
    #   <4sHH          magic "FRMM", format version, layer count (3)
    #   3 x <II        weight shapes (rows, cols)
    #   per layer      rows*cols float32 weights (row-major), cols float32 bias
    #   <I             label buckets
    #   <I + records   genre vocabulary: count, then u16 length + utf-8 id

    MAGIC = b"FRMM"
    FORMAT_VERSION = 1

    def to_bytes(self, builder: FeatureBuilder) -> bytes:
        if builder.n_features != self.n_features:
            raise DimensionMismatchError("feature builder does not match model input width")
        weights = (self.w1, self.w2, self.w3)
        biases = (self.b1, self.b2, self.b3)
        parts = [struct.pack("<4sHH", self.MAGIC, self.FORMAT_VERSION, 3)]
        parts.extend(struct.pack("<II", *w.shape) for w in weights)
        for w, b in zip(weights, biases):
            parts.append(w.astype("<f4").tobytes(order="C"))
            parts.append(b.astype("<f4").tobytes())
        parts.append(struct.pack("<I", builder.label_buckets))
        parts.append(struct.pack("<I", len(builder.genres)))
        for genre in builder.genres:
            raw = genre.encode("utf-8")
            parts.append(struct.pack("<H", len(raw)) + raw)
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, payload: bytes, min_interactions: int = 10) -> tuple["MlpModel", FeatureBuilder]:
        try:
            magic, fmt, layers = struct.unpack_from("<4sHH", payload, 0)
            if magic != cls.MAGIC:
                raise FormatError("model file: bad magic")
            if fmt != cls.FORMAT_VERSION or layers != 3:
                raise FormatError(f"model file: unsupported format {fmt}/{layers}")
            offset = 8
            shapes = []
            for _ in range(3):
                shapes.append(struct.unpack_from("<II", payload, offset))
                offset += 8

            params = []
            for rows, cols in shapes:
                w = np.frombuffer(payload, dtype="<f4", count=rows * cols, offset=offset)
                offset += 4 * rows * cols
                b = np.frombuffer(payload, dtype="<f4", count=cols, offset=offset)
                offset += 4 * cols
                params.extend([w.reshape(rows, cols), b])

            (label_buckets,) = struct.unpack_from("<I", payload, offset)
            (n_genres,) = struct.unpack_from("<I", payload, offset + 4)
            offset += 8
            genres = []
            for _ in range(n_genres):
                (length,) = struct.unpack_from("<H", payload, offset)
                offset += 2
                genres.append(payload[offset:offset + length].decode("utf-8"))
                offset += length
        except (struct.error, ValueError, UnicodeDecodeError) as e:
            raise FormatError(f"model file: corrupt payload ({e})")
        if offset != len(payload):
            raise FormatError("model file: trailing bytes")

        model = cls(*params)
        dim = model.n_features - len(genres) - label_buckets - 3
        if dim != model.output_dim:
            raise FormatError("model file: vocabulary does not match input width")
        builder = FeatureBuilder(dim, genres, label_buckets, min_interactions)
        return model, builder

    def save(self, path: str, builder: FeatureBuilder) -> None:
        safe_write(path, self.to_bytes(builder))
        logger.info("Cold-start model saved to %s", path)

    @classmethod
    def load(cls, path: str, min_interactions: int = 10) -> tuple["MlpModel", FeatureBuilder]:
        try:
            with open(path, "rb") as f:
                payload = f.read()
        except OSError as e:
            raise FormatError(f"cannot read model {path}: {e}") from e
        return cls.from_bytes(payload, min_interactions)


def _as_matrix(features: Union[FeatureVector, np.ndarray, Sequence[float]]) -> np.ndarray:
    if isinstance(features, FeatureVector):
        features = features.to_array()
    return np.asarray(features, dtype=np.float64)


def loss_and_gradients(model: MlpModel, x: np.ndarray, y: np.ndarray) -> tuple[float, list[np.ndarray]]:
    """
    Loss = mean over examples of the squared Euclidean prediction error.
    Gradients are returned in MlpModel.PARAM_NAMES order.
    """
    n = x.shape[0]
    out, (_, z1, a1, z2, a2) = model.forward(x)
    diff = out - y
    loss = float(np.sum(diff * diff) / n)

    g_out = 2.0 * diff / n
    g_w3 = a2.T @ g_out
    g_b3 = g_out.sum(axis=0)
    g_z2 = (g_out @ model.w3.T) * (z2 > 0)
    g_w2 = a1.T @ g_z2
    g_b2 = g_z2.sum(axis=0)
    g_z1 = (g_z2 @ model.w2.T) * (z1 > 0)
    g_w1 = x.T @ g_z1
    g_b1 = g_z1.sum(axis=0)
    return loss, [g_w1, g_b1, g_w2, g_b2, g_w3, g_b3]


def mse_loss(model: MlpModel, x: np.ndarray, y: np.ndarray) -> float:
    out, _ = model.forward(x)
    diff = out - y
    return float(np.sum(diff * diff) / x.shape[0])


def predict(model: MlpModel, features: Union[FeatureVector, np.ndarray, Sequence[float]]) -> np.ndarray:
    """Forward pass for one album; pure."""
    x = _as_matrix(features)
    if x.ndim != 1 or x.shape[0] != model.n_features:
        raise DimensionMismatchError(f"expected {model.n_features} features, got {x.shape}")
    out, _ = model.forward(x[None, :])
    return out[0]


def predict_many(model: MlpModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.n_features:
        raise DimensionMismatchError(f"expected (n, {model.n_features}) features, got {x.shape}")
    out, _ = model.forward(x)
    return out


# ========================================
# TRAINING
# ========================================

@dataclass(frozen=True)
class TrainParams:
    lr: float = 1e-2
    epochs: int = 200
    batch_size: int = 32
    seed: int = 0
    hidden: tuple[int, int] = (64, 64)

    def __post_init__(self) -> None:
        if self.lr < 0:
            raise ValidationError("lr must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch_size must be >= 1")


@dataclass(frozen=True)
class TrainReport:
    epoch_losses: list[float]
    final_loss: float
    hyperparams: dict
    seed: int
    n_examples: int = 0
    duration_sec: float = field(default=0.0, compare=False)


def _dataset_arrays(dataset: Sequence[tuple]) -> tuple[np.ndarray, np.ndarray]:
    if not dataset:
        raise ValidationError("empty dataset")
    xs = [_as_matrix(f) for f, _ in dataset]
    ys = [np.asarray(t, dtype=np.float64) for _, t in dataset]
    if len({x.shape for x in xs}) != 1 or xs[0].ndim != 1:
        raise DimensionMismatchError("feature vectors differ in length")
    if len({y.shape for y in ys}) != 1 or ys[0].ndim != 1:
        raise DimensionMismatchError("targets differ in dimension")
    return np.vstack(xs), np.vstack(ys)


def train(
    dataset: Sequence[tuple],
    hp: TrainParams = TrainParams(),
    model: Optional[MlpModel] = None,
) -> tuple[MlpModel, TrainReport]:
    """
    Mini-batch gradient descent on the squared-error loss.

    Deterministic given hp.seed: the seed drives both the initialisation (when
    no model is passed) and the per-epoch shuffle. The reported loss of an
    epoch is the full-dataset loss after that epoch.
    """
    x, y = _dataset_arrays(dataset)
    n, f = x.shape
    d = y.shape[1]

    init_seq, shuffle_seq = np.random.SeedSequence(hp.seed).spawn(2)
    if model is None:
        model = MlpModel.init(f, hp.hidden[0], hp.hidden[1], d, seed=int(init_seq.generate_state(1)[0]))
    else:
        model = model.copy()
        if model.n_features != f or model.output_dim != d:
            raise DimensionMismatchError(
                f"model expects {model.n_features} -> {model.output_dim}, dataset has {f} -> {d}"
            )

    rng = np.random.default_rng(shuffle_seq)
    params = model.params()
    losses: list[float] = []
    started = time.monotonic()

    for epoch in range(hp.epochs):
        order = rng.permutation(n)
        for start in range(0, n, hp.batch_size):
            batch = order[start:start + hp.batch_size]
            _, grads = loss_and_gradients(model, x[batch], y[batch])
            for p, g in zip(params, grads):
                p -= hp.lr * g

        loss = mse_loss(model, x, y)
        if not np.isfinite(loss):
            logger.error("Training diverged at epoch %d (lr=%s)", epoch + 1, hp.lr)
            raise TrainingDivergedError(f"training diverged at epoch {epoch + 1}")
        losses.append(loss)

    report = TrainReport(
        epoch_losses=losses,
        final_loss=losses[-1],
        hyperparams={**asdict(hp), "hidden": list(hp.hidden)},
        seed=hp.seed,
        n_examples=n,
        duration_sec=time.monotonic() - started,
    )
    logger.info(
        "Cold-start model trained: %d examples, %d epochs, loss %.5f -> %.5f (%.1fs)",
        n,
        hp.epochs,
        losses[0],
        losses[-1],
        report.duration_sec,
    )
    return model, report


# ========================================
# GRADIENT CHECK
# ========================================

def _perturbed_losses(
    model: MlpModel,
    x: np.ndarray,
    y: np.ndarray,
    name: str,
    delta: float,
) -> tuple[np.ndarray, np.ndarray]:
    """
    Loss and ReLU pattern for every single-entry perturbation of one tensor,
    evaluated as a batch: row k of the result perturbs flat entry k by delta.
    """
    layer = int(name[1])
    _, (_, z1, a1, z2, a2) = model.forward(x[None, :])
    inputs = (x, a1[0], a2[0])[layer - 1]
    pre = (z1, z2, None)[layer - 1]
    width = getattr(model, name).shape[-1]

    if name.startswith("w"):
        rows = np.repeat(np.arange(inputs.shape[0]), width)
        cols = np.tile(np.arange(width), inputs.shape[0])
        bump = delta * inputs[rows]
    else:
        cols = np.arange(width)
        bump = np.full(width, delta)

    base = (z1, z2, None)
    if layer == 3:
        out = np.repeat((a2 @ model.w3 + model.b3), len(cols), axis=0)
        out[np.arange(len(cols)), cols] += bump
        pattern = np.zeros((len(cols), 0), dtype=bool)
    else:
        z = np.repeat(pre, len(cols), axis=0)
        z[np.arange(len(cols)), cols] += bump
        if layer == 1:
            zz1 = z
            zz2 = _relu(zz1) @ model.w2 + model.b2
        else:
            zz1 = np.repeat(base[0], len(cols), axis=0)
            zz2 = z
        out = _relu(zz2) @ model.w3 + model.b3
        pattern = np.hstack([zz1 > 0, zz2 > 0])

    diff = out - y
    return np.sum(diff * diff, axis=1), pattern


# smallest |g| + |g_fd| a per-entry ratio divides by
ENTRY_ERROR_FLOOR = 1e-4


def gradient_check(
    model: MlpModel,
    example: tuple,
    eps: float = 1e-5,
    per_entry: bool = False,
) -> float:
    """
    Compare analytic gradients of the loss on one example with central finite
    differences. Per parameter tensor the error is |g - g_fd| / (|g| + |g_fd|)
    (norms over the tensor); the maximum over tensors is returned. Entries whose
    perturbation flips a ReLU unit are left out since the loss has a kink there.

    With per_entry the ratio is taken entry by entry instead, dividing by at
    least ENTRY_ERROR_FLOOR, and the maximum over all kept entries is returned.
    """
    if not 0 < eps <= 1e-2:
        raise ValidationError("eps must be in (0, 1e-2]")
    features, target = example
    x = _as_matrix(features)
    y = np.asarray(target, dtype=np.float64)
    if x.shape != (model.n_features,) or y.shape != (model.output_dim,):
        raise DimensionMismatchError("example does not match model shapes")

    _, grads = loss_and_gradients(model, x[None, :], y[None, :])
    _, (_, z1, _, z2, _) = model.forward(x[None, :])
    base_pattern = np.hstack([z1[0] > 0, z2[0] > 0])

    worst = 0.0
    for name, analytic in zip(MlpModel.PARAM_NAMES, grads):
        plus, pattern_plus = _perturbed_losses(model, x, y, name, eps)
        minus, pattern_minus = _perturbed_losses(model, x, y, name, -eps)
        numeric = (plus - minus) / (2.0 * eps)

        keep = np.ones(len(numeric), dtype=bool)
        if pattern_plus.shape[1]:
            keep &= np.all(pattern_plus == base_pattern, axis=1)
            keep &= np.all(pattern_minus == base_pattern, axis=1)

        a = analytic.reshape(-1)[keep]
        n = numeric[keep]
        if per_entry:
            if a.size:
                ratio = np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), ENTRY_ERROR_FLOOR)
                worst = max(worst, float(ratio.max()))
            continue
        denom = np.linalg.norm(a) + np.linalg.norm(n)
        if denom == 0.0:
            continue
        worst = max(worst, float(np.linalg.norm(a - n) / denom))
    return worst


# ========================================
# PREDICTION REFRESH
# ========================================

@dataclass(frozen=True)
class PredictionSnapshot:
    version: int
    created_at: int
    predictions: Mapping[str, np.ndarray]

    @property
    def album_ids(self) -> list[str]:
        return sorted(self.predictions)


class ColdStartPredictor:
    """Publishes versioned album-vector predictions for the new-release window."""

    def __init__(self, builder: FeatureBuilder) -> None:
        self.builder = builder
        self._lock = threading.Lock()
        self.snapshot = PredictionSnapshot(0, 0, MappingProxyType({}))

    def compute(
        self,
        model: MlpModel,
        window: Iterable[str],
        now: int,
        catalog: Catalog,
        store: EmbeddingStore,
    ) -> PredictionSnapshot:
        album_ids = sorted(window)
        if album_ids:
            rows = [
                self.builder.build_features(catalog.albums[a], store, now, catalog).to_array()
                for a in album_ids
            ]
            outputs = predict_many(model, np.vstack(rows))
            for row in outputs:
                row.setflags(write=False)
            predictions = dict(zip(album_ids, outputs))
        else:
            predictions = {}
        return PredictionSnapshot(self.snapshot.version + 1, now, MappingProxyType(predictions))

    def publish(self, snapshot: PredictionSnapshot) -> None:
        with self._lock:
            if snapshot.version <= self.snapshot.version:
                logger.warning(
                    "Ignoring prediction snapshot v%d (live v%d)",
                    snapshot.version,
                    self.snapshot.version,
                )
                return
            self.snapshot = snapshot
        logger.debug("Published predictions v%d (%d albums)", snapshot.version, len(snapshot.predictions))

    def refresh_predictions(
        self,
        model: MlpModel,
        window: Iterable[str],
        now: int,
        catalog: Catalog,
        store: EmbeddingStore,
    ) -> PredictionSnapshot:
        """Re-predict every windowed album with usage up to now; expired albums drop out."""
        snapshot = self.compute(model, window, now, catalog, store)
        self.publish(snapshot)
        return snapshot
