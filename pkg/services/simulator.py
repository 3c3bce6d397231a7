#!/usr/bin/env python3
"""
Offline simulation harness

Generates a synthetic music world (users, artists, daily releases, organic
listening with latent affinities), replays a carousel policy through a real
SlateService on a simulated clock with a cascade click model, and compares
policies on matched user splits.
"""

import hashlib
import json
import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import datetime
from typing import Optional, Sequence, Union

import numpy as np
import pytz
from scipy.special import expit

from config import DAY, HOUR, WEEK, Settings
from errors import DegenerateWorldError, OverlappingSplitsError, ValidationError
from services.cf_trainer import EmbeddingStore
from services.coldstart import FeatureBuilder, MlpModel, TrainReport
from services.scheduler import SchedulerService
from services.slate_service import EventLog, RetrainReport, SlateService
from storage.catalog import Catalog
from storage.models import AlbumMeta, EventType, Policy, Section, Slate, UsageEvent
from utils.random_streams import stream

logger = logging.getLogger(__name__)

# Monday, so a horizon of whole weeks lines up with ISO weeks
SIM_EPOCH = datetime(2023, 3, 6, tzinfo=pytz.utc)

GENRE_SHARE = 0.3
POPULARITY_SIGMA = 0.5
NEW_RELEASE_BOOST = 1.5
FAVORITE_BOOST = 2.0
REQUEST_MINUTE = 30
MIN_HORIZON_DAYS = 14
SAMPLING_CHUNK = 256

EVENT_KINDS = (EventType.STREAM, EventType.LIKE, EventType.FAVORITE_ARTIST_ADD)


# ========================================
# CONFIGURATION
# ========================================

@dataclass(frozen=True)
class SimConfig:
    users: int = 2000
    paired: bool = True
    genres: int = 8
    artists: int = 1500
    labels: int = 200
    albums_per_day: int = 70
    history_days: int = 14
    horizon_days: int = 28
    latent_dim: int = 16
    jitter: float = 0.3
    gamma: float = 0.85
    click_slope: float = 2.5
    target_ctr: float = 0.05
    streams_per_day: float = 4.0
    favorites_per_user: float = 3.0
    like_prob: float = 0.1
    embedding_dim: int = 16
    epochs: int = 60
    prior_sigma2: float = 0.0025
    obs_var: float = 1.0
    settings: Settings = field(default_factory=Settings, compare=False, repr=False)

    def __post_init__(self) -> None:
        if self.users < 0:
            raise ValidationError("users must be >= 0")
        if self.paired and self.users % 2:
            raise ValidationError("paired cohorts need an even number of users")
        if self.genres < 1 or self.artists < 1 or self.labels < 1 or self.latent_dim < 1:
            raise ValidationError("genres, artists, labels and latent_dim must be >= 1")
        if self.albums_per_day < 0 or self.history_days < 1 or self.horizon_days < 0:
            raise ValidationError("invalid release schedule")
        if not 0.0 <= self.gamma < 1.0:
            raise ValidationError("gamma must be in [0, 1)")
        if not 0.0 < self.target_ctr < 1.0:
            raise ValidationError("target_ctr must be in (0, 1)")
        if self.jitter < 0 or self.streams_per_day < 0 or self.favorites_per_user < 0:
            raise ValidationError("jitter and rates must be >= 0")
        if not 0.0 <= self.like_prob <= 1.0:
            raise ValidationError("like_prob must be in [0, 1]")

    @classmethod
    def from_settings(cls, settings: Settings, **overrides) -> "SimConfig":
        values = {
            "users": settings.sim_users,
            "paired": settings.sim_paired,
            "genres": settings.sim_genres,
            "artists": settings.sim_artists,
            "labels": settings.sim_labels,
            "albums_per_day": settings.sim_albums_per_day,
            "history_days": settings.sim_history_days,
            "horizon_days": settings.sim_horizon_days,
            "latent_dim": settings.sim_latent_dim,
            "jitter": settings.sim_jitter,
            "gamma": settings.sim_gamma,
            "click_slope": settings.sim_click_slope,
            "target_ctr": settings.sim_target_ctr,
            "streams_per_day": settings.sim_streams_per_day,
            "favorites_per_user": settings.sim_favorites_per_user,
            "like_prob": settings.sim_like_prob,
            "embedding_dim": settings.sim_embedding_dim,
            "epochs": settings.sim_epochs,
            "prior_sigma2": settings.sim_prior_sigma2,
            "obs_var": settings.sim_obs_var,
            "settings": settings,
        }
        values.update(overrides)
        return cls(**values)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "settings"}

    def service_settings(self) -> Settings:
        """Service configuration used inside the simulation."""
        return replace(
            self.settings,
            embedding_dim=self.embedding_dim,
            epochs=self.epochs,
            prior_mu0=self.target_ctr,
            prior_sigma2=self.prior_sigma2,
            obs_var=self.obs_var,
            index_mode="exact",
        )


# ========================================
# CLICK MODEL
# ========================================

@dataclass(frozen=True)
class ClickOutcome:
    examined: int
    click: Optional[int]


@dataclass(frozen=True)
class ClickModel:
    """
    Cascade user: scans positions top-down, clicks an examined item with
    probability logistic(slope * affinity + intercept) and stops; otherwise
    moves on with probability gamma.
    """

    gamma: float = 0.85
    slope: float = 2.5
    intercept: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.gamma < 1.0:
            raise ValidationError("gamma must be in [0, 1)")

    def click_probabilities(self, affinities) -> np.ndarray:
        return expit(self.slope * np.asarray(affinities, dtype=np.float64) + self.intercept)

    def simulate(self, affinities: Sequence[float], rng: np.random.Generator) -> ClickOutcome:
        n = len(affinities)
        if n == 0:
            return ClickOutcome(0, None)
        probs = self.click_probabilities(affinities)
        u_click = rng.random(n)
        u_next = rng.random(n)
        for p in range(n):
            if u_click[p] < probs[p]:
                return ClickOutcome(p + 1, p + 1)
            if p + 1 < n and u_next[p] >= self.gamma:
                return ClickOutcome(p + 1, None)
        return ClickOutcome(n, None)

    def expected_ctr(self, affinities: np.ndarray, mask: np.ndarray, intercept: Optional[float] = None) -> float:
        """Mean click probability of padded slates (rows) under the cascade."""
        b = self.intercept if intercept is None else intercept
        c = expit(self.slope * affinities + b) * mask
        reach = np.cumprod(np.hstack([np.ones((len(c), 1)), (1.0 - c[:, :-1]) * self.gamma]), axis=1)
        return float(np.mean(np.sum(reach * c, axis=1)))


# ========================================
# WORLD
# ========================================

@dataclass(eq=False)
class SimWorld:
    config: SimConfig
    seed: int
    t0: int
    user_ids: tuple[str, ...]
    user_pair: np.ndarray
    pair_latent: np.ndarray
    pair_genre: np.ndarray
    pair_request_hour: np.ndarray
    artist_latent: np.ndarray
    artist_genre: np.ndarray
    artist_label: np.ndarray
    artist_popularity: np.ndarray
    album_artist: np.ndarray
    album_latent: np.ndarray
    albums: tuple[AlbumMeta, ...]
    favorites: tuple[tuple[int, ...], ...]
    # pair, album (artist for favourites), ts, kind; sorted
    event_columns: dict[str, np.ndarray]
    click_model: ClickModel = field(default_factory=ClickModel)

    def __post_init__(self) -> None:
        self._user_pos = {u: i for i, u in enumerate(self.user_ids)}
        self._album_pos = {a.album_id: i for i, a in enumerate(self.albums)}
        self._users_of_pair: dict[int, list[str]] = defaultdict(list)
        for user_id, pair in zip(self.user_ids, self.user_pair):
            self._users_of_pair[int(pair)].append(user_id)
        self._bootstrap: Optional[tuple[UsageEvent, ...]] = None
        self._organic: Optional[dict[int, tuple[UsageEvent, ...]]] = None

    @property
    def n_pairs(self) -> int:
        return len(self.pair_latent)

    def has_user(self, user_id: str) -> bool:
        return user_id in self._user_pos

    def pair_of(self, user_id: str) -> int:
        return int(self.user_pair[self._user_pos[user_id]])

    def users_of_pair(self, pair: int) -> list[str]:
        return list(self._users_of_pair[pair])

    def user_latent(self, user_id: str) -> np.ndarray:
        return self.pair_latent[self.pair_of(user_id)]

    def album_latent_of(self, album_id: str) -> np.ndarray:
        return self.album_latent[self._album_pos[album_id]]

    def affinities(self, user_id: str, album_ids: Sequence[str]) -> np.ndarray:
        if not album_ids:
            return np.zeros(0)
        rows = [self._album_pos[a] for a in album_ids]
        return self.album_latent[rows] @ self.user_latent(user_id)

    def releases_between(self, start: int, end: int) -> int:
        release = np.array([a.release_ts for a in self.albums])
        return int(np.count_nonzero((release > start) & (release <= end)))

    # ---------- events ----------

    def _materialize(self) -> None:
        cols = self.event_columns
        bootstrap: list[UsageEvent] = []
        organic: dict[int, list[UsageEvent]] = defaultdict(list)
        album_ids = [a.album_id for a in self.albums]
        artist_ids = [f"ar{r:05d}" for r in range(len(self.artist_latent))]

        for pair, target, ts, kind in zip(
            cols["pair"].tolist(), cols["album"].tolist(), cols["ts"].tolist(), cols["kind"].tolist()
        ):
            event_type = EVENT_KINDS[kind]
            subject = artist_ids[target] if event_type is EventType.FAVORITE_ARTIST_ADD else album_ids[target]
            bucket = bootstrap if ts < self.t0 else organic[ts - ts % HOUR]
            for user_id in self._users_of_pair[pair]:
                bucket.append(UsageEvent(event_type, user_id, subject, ts))

        self._bootstrap = tuple(bootstrap)
        self._organic = {hour: tuple(events) for hour, events in organic.items()}

    @property
    def bootstrap_events(self) -> tuple[UsageEvent, ...]:
        """History before t0: favourites plus organic listening."""
        if self._bootstrap is None:
            self._materialize()
        return self._bootstrap

    def organic_events(self, hour_start: int) -> tuple[UsageEvent, ...]:
        if self._organic is None:
            self._materialize()
        return self._organic.get(hour_start, ())

    def build_catalog(self) -> Catalog:
        """Fresh catalog with every album and the bootstrap history."""
        catalog = Catalog()
        for album in self.albums:
            catalog.add_album(album)
        catalog.add_events(self.bootstrap_events, dedup=False)
        return catalog

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        digest.update(json.dumps(self.config.to_dict(), sort_keys=True).encode("utf-8"))
        digest.update(str(self.seed).encode("utf-8"))
        for array in (
            self.pair_latent,
            self.artist_latent,
            self.album_latent,
            self.album_artist,
            self.pair_request_hour,
            *(self.event_columns[k] for k in ("pair", "album", "ts", "kind")),
        ):
            digest.update(np.ascontiguousarray(array).tobytes())
        digest.update(repr(self.favorites).encode("utf-8"))
        digest.update(repr(self.click_model).encode("utf-8"))
        return digest.hexdigest()


def _daily_listening(
    rng: np.random.Generator,
    day_start: int,
    config: SimConfig,
    pair_latent: np.ndarray,
    favorite_mask: np.ndarray,
    album_latent: np.ndarray,
    album_artist: np.ndarray,
    release: np.ndarray,
    log_popularity: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    One day of organic streams: each cohort draws Poisson(streams_per_day)
    albums from a softmax over affinity, artist popularity and boosts for
    new releases and favourite artists. Albums released later that day are
    only streamed after their release time.
    """
    day_end = day_start + DAY
    n_pairs = len(pair_latent)
    n_albums = int(np.searchsorted(release, day_end, side="left"))
    empty = np.zeros(0, dtype=np.int64)
    if n_albums == 0 or n_pairs == 0:
        return empty, empty, empty, empty

    counts = rng.poisson(config.streams_per_day, n_pairs)
    pairs = np.repeat(np.arange(n_pairs), counts)
    u_pick = rng.random(len(pairs))
    u_time = rng.random(len(pairs))
    u_like = rng.random(len(pairs))

    artists = album_artist[:n_albums]
    static = log_popularity[artists] + NEW_RELEASE_BOOST * (release[:n_albums] > day_start - WEEK)
    albums = np.zeros(len(pairs), dtype=np.int64)

    for lo in range(0, n_pairs, SAMPLING_CHUNK):
        hi = min(lo + SAMPLING_CHUNK, n_pairs)
        logits = pair_latent[lo:hi] @ album_latent[:n_albums].T + static
        logits += FAVORITE_BOOST * favorite_mask[lo:hi][:, artists]
        logits -= logits.max(axis=1, keepdims=True)
        cdf = np.cumsum(np.exp(logits), axis=1)
        cdf /= cdf[:, -1:]
        # row i of the flattened cdf spans (i, i + 1]
        flat = (cdf + np.arange(hi - lo)[:, None]).ravel()

        sel = slice(np.searchsorted(pairs, lo), np.searchsorted(pairs, hi))
        local = pairs[sel] - lo
        picked = np.searchsorted(flat, local + u_pick[sel], side="right") - local * n_albums
        albums[sel] = np.clip(picked, 0, n_albums - 1)

    earliest = np.maximum(day_start, release[albums])
    ts = earliest + (u_time * (day_end - earliest)).astype(np.int64)

    liked = u_like < config.like_prob
    out_pairs = np.concatenate([pairs, pairs[liked]])
    out_albums = np.concatenate([albums, albums[liked]])
    out_ts = np.concatenate([ts, ts[liked]])
    kinds = np.concatenate([np.zeros(len(pairs), dtype=np.int64), np.ones(int(liked.sum()), dtype=np.int64)])
    return out_pairs, out_albums, out_ts, kinds


def generate_world(config: SimConfig, seed: int) -> SimWorld:
    """Deterministic synthetic world for (config, seed), with a calibrated click model."""
    if config.users == 0:
        raise DegenerateWorldError()

    rng = stream(seed, "world")
    d = config.latent_dim
    # dot products of two latents have unit variance
    scale = d ** -0.25
    n_pairs = config.users // 2 if config.paired else config.users

    centers = rng.normal(0.0, scale, size=(config.genres, d))

    def around_genre(genre_idx: np.ndarray) -> np.ndarray:
        own = rng.normal(0.0, scale, size=(len(genre_idx), d))
        return math.sqrt(GENRE_SHARE) * centers[genre_idx] + math.sqrt(1.0 - GENRE_SHARE) * own

    pair_genre = rng.integers(0, config.genres, n_pairs)
    pair_latent = around_genre(pair_genre)
    artist_genre = rng.integers(0, config.genres, config.artists)
    artist_latent = around_genre(artist_genre)
    artist_label = rng.integers(0, config.labels, config.artists)
    popularity = rng.lognormal(0.0, POPULARITY_SIGMA, config.artists)

    t0 = int(SIM_EPOCH.timestamp())
    history_start = t0 - config.history_days * DAY

    # one back-catalogue album per artist, then the daily release schedule
    back_release = (
        history_start
        - rng.integers(30, 365, config.artists) * DAY
        - rng.integers(1, DAY, config.artists)
    )
    n_days = config.history_days + config.horizon_days
    n_new = n_days * config.albums_per_day
    new_artist = rng.choice(config.artists, size=n_new, p=popularity / popularity.sum())
    new_release = (
        history_start
        + np.repeat(np.arange(n_days, dtype=np.int64), config.albums_per_day) * DAY
        + rng.integers(0, DAY, n_new)
    )
    album_artist = np.concatenate([np.arange(config.artists), new_artist]).astype(np.int64)
    release = np.concatenate([back_release, new_release]).astype(np.int64)
    order = np.lexsort((np.arange(len(release)), release))
    album_artist, release = album_artist[order], release[order]
    album_latent = artist_latent[album_artist] + config.jitter * rng.normal(0.0, scale, size=(len(release), d))

    genre_ids = [f"g{k:02d}" for k in range(config.genres)]
    albums = tuple(
        AlbumMeta(
            album_id=f"al{i:06d}",
            artist_ids=(f"ar{int(r):05d}",),
            label_id=f"lb{int(artist_label[r]):04d}",
            genre_ids=(genre_ids[int(artist_genre[r])],),
            release_ts=int(release[i]),
            title=f"Album {i}",
        )
        for i, r in enumerate(album_artist)
    )

    # favourites lean towards popular artists the user likes
    affinity = pair_latent @ artist_latent.T
    weights = popularity * np.exp(affinity - affinity.max(axis=1, keepdims=True))
    fav_counts = np.minimum(rng.poisson(config.favorites_per_user, n_pairs), config.artists)
    favorites = tuple(
        tuple(sorted(int(r) for r in rng.choice(config.artists, size=int(k), replace=False, p=w / w.sum())))
        for w, k in zip(weights, fav_counts)
    )
    favorite_mask = np.zeros((n_pairs, config.artists))
    for pair, artists in enumerate(favorites):
        favorite_mask[pair, list(artists)] = 1.0

    request_hour = rng.integers(0, 24, n_pairs)

    columns = {"pair": [], "album": [], "ts": [], "kind": []}
    fav_pairs = np.repeat(np.arange(n_pairs), [len(f) for f in favorites])
    columns["pair"].append(fav_pairs)
    columns["album"].append(np.array([r for f in favorites for r in f], dtype=np.int64))
    columns["ts"].append(np.full(len(fav_pairs), history_start, dtype=np.int64))
    columns["kind"].append(np.full(len(fav_pairs), 2, dtype=np.int64))

    log_popularity = np.log(popularity)
    for day in range(n_days):
        day_cols = _daily_listening(
            stream(seed, "organic", day),
            history_start + day * DAY,
            config,
            pair_latent,
            favorite_mask,
            album_latent,
            album_artist,
            release,
            log_popularity,
        )
        for key, values in zip(("pair", "album", "ts", "kind"), day_cols):
            columns[key].append(values)

    merged = {k: np.concatenate(v).astype(np.int64) for k, v in columns.items()}
    order = np.lexsort((merged["album"], merged["pair"], merged["kind"], merged["ts"]))
    merged = {k: v[order] for k, v in merged.items()}

    if config.paired:
        user_ids = tuple(f"u{i:05d}" for i in range(2 * n_pairs))
        user_pair = np.repeat(np.arange(n_pairs), 2)
    else:
        user_ids = tuple(f"u{i:05d}" for i in range(n_pairs))
        user_pair = np.arange(n_pairs)

    world = SimWorld(
        config=config,
        seed=seed,
        t0=t0,
        user_ids=user_ids,
        user_pair=user_pair,
        pair_latent=pair_latent,
        pair_genre=pair_genre,
        pair_request_hour=request_hour,
        artist_latent=artist_latent,
        artist_genre=artist_genre,
        artist_label=artist_label,
        artist_popularity=popularity,
        album_artist=album_artist,
        album_latent=album_latent,
        albums=albums,
        favorites=favorites,
        event_columns=merged,
        click_model=ClickModel(config.gamma, config.click_slope, float(np.log(config.target_ctr / (1 - config.target_ctr)))),
    )
    world.click_model = replace(world.click_model, intercept=calibrate_intercept(world))

    logger.info(
        "World %d: %d users, %d artists, %d albums, %d events, click intercept %.3f",
        seed,
        len(user_ids),
        config.artists,
        len(albums),
        len(merged["ts"]),
        world.click_model.intercept,
    )
    return world


def calibrate_intercept(world: SimWorld, iterations: int = 60) -> float:
    """
    Bisection on the click intercept so that Editorial carousels served at
    the start of the horizon have the target expected click rate.
    """
    config = world.config
    service = SlateService(config.service_settings(), world.build_catalog())
    now = world.t0 + 12 * HOUR
    size = service.settings.carousel_size

    rows = []
    for pair in range(world.n_pairs):
        user_id = world.users_of_pair(pair)[0]
        slate = service.build_carousel(user_id, now, Policy.EDITORIAL)
        rows.append(world.affinities(user_id, slate.album_ids))

    if not any(len(r) for r in rows):
        logger.warning("Click calibration: no Editorial slate has entries, keeping intercept %.3f",
                       world.click_model.intercept)
        return world.click_model.intercept

    affinities = np.zeros((len(rows), size))
    mask = np.zeros((len(rows), size))
    for i, r in enumerate(rows):
        affinities[i, :len(r)] = r
        mask[i, :len(r)] = 1.0

    model = world.click_model
    lo, hi = -30.0, 30.0
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        if model.expected_ctr(affinities, mask, mid) < config.target_ctr:
            lo = mid
        else:
            hi = mid
    intercept = 0.5 * (lo + hi)
    logger.info("Click calibration: intercept %.4f for target CTR %.3f", intercept, config.target_ctr)
    return intercept


# ========================================
# MODELS
# ========================================

@dataclass(frozen=True)
class WorldModels:
    store: EmbeddingStore
    model: MlpModel
    builder: FeatureBuilder
    report: RetrainReport

    @property
    def train_report(self) -> TrainReport:
        return self.report.train


def fit_world_models(world: SimWorld) -> WorldModels:
    """CF store and cold-start model trained once on the bootstrap history."""
    service = SlateService(world.config.service_settings(), world.build_catalog())
    report = service.retrain(world.t0)
    return WorldModels(service.store, service.model, service.predictor.builder, report)


# ========================================
# METRICS
# ========================================

def iso_week(ts: int) -> str:
    year, week, _ = datetime.fromtimestamp(ts, pytz.utc).isocalendar()
    return f"{year}-W{week:02d}"


@dataclass(frozen=True)
class WeekMetrics:
    week: str
    slates: int
    clicks: int
    distinct_displayed: int
    distinct_clicked: int
    distinct_examined: int
    distinct_displayed_all: int
    distinct_clicked_all: int

    @property
    def display_to_click_rate(self) -> float:
        return self.clicks / self.slates if self.slates else 0.0


@dataclass(frozen=True)
class MetricsReport:
    policy: str
    seed: int
    users: int
    horizon_days: int
    slates: int
    displays: int
    personalized_displays: int
    clicks: int
    personalized_clicks: int
    weekly: tuple[WeekMetrics, ...]
    examined_by_position: tuple[int, ...]
    world: str
    config: dict = field(default_factory=dict, compare=False)

    @property
    def display_to_click_rate(self) -> float:
        return self.clicks / self.slates if self.slates else 0.0

    @property
    def weekly_distinct_albums_displayed(self) -> float:
        return float(np.mean([w.distinct_displayed for w in self.weekly])) if self.weekly else 0.0

    @property
    def weekly_distinct_albums_clicked(self) -> float:
        return float(np.mean([w.distinct_clicked for w in self.weekly])) if self.weekly else 0.0

    def to_records(self) -> list[dict]:
        summary = {
            "kind": "summary",
            "policy": self.policy,
            "seed": self.seed,
            "users": self.users,
            "horizon_days": self.horizon_days,
            "slates": self.slates,
            "displays": self.displays,
            "personalized_displays": self.personalized_displays,
            "clicks": self.clicks,
            "personalized_clicks": self.personalized_clicks,
            "display_to_click_rate": self.display_to_click_rate,
            "weekly_distinct_albums_displayed": self.weekly_distinct_albums_displayed,
            "weekly_distinct_albums_clicked": self.weekly_distinct_albums_clicked,
            "examined_by_position": list(self.examined_by_position),
            "world": self.world,
            "config": self.config,
        }
        weeks = [
            {"kind": "week", "policy": self.policy, "seed": self.seed, **asdict(w),
             "display_to_click_rate": w.display_to_click_rate}
            for w in self.weekly
        ]
        return [summary] + weeks


class _Tally:
    def __init__(self, positions: int) -> None:
        self.slates = 0
        self.displays = 0
        self.personalized_displays = 0
        self.clicks = 0
        self.personalized_clicks = 0
        self.examined_by_position = np.zeros(positions, dtype=np.int64)
        self.weeks: dict[str, dict] = {}

    def observe(self, slate: Slate, examined: int, click: Optional[int]) -> None:
        week = self.weeks.setdefault(
            iso_week(slate.created_at),
            {"slates": 0, "clicks": 0, "displayed": set(), "clicked": set(), "examined": set(),
             "displayed_all": set(), "clicked_all": set()},
        )
        self.slates += 1
        week["slates"] += 1
        self.displays += len(slate.entries)
        self.examined_by_position[:examined] += 1

        for entry in slate.entries:
            week["displayed_all"].add(entry.album_id)
            if entry.section is Section.PERSONALIZED:
                self.personalized_displays += 1
                week["displayed"].add(entry.album_id)
                if entry.position <= examined:
                    week["examined"].add(entry.album_id)

        if click is not None:
            entry = slate.entries[click - 1]
            self.clicks += 1
            week["clicks"] += 1
            week["clicked_all"].add(entry.album_id)
            if entry.section is Section.PERSONALIZED:
                self.personalized_clicks += 1
                week["clicked"].add(entry.album_id)

    def weekly(self) -> tuple[WeekMetrics, ...]:
        return tuple(
            WeekMetrics(
                week=label,
                slates=w["slates"],
                clicks=w["clicks"],
                distinct_displayed=len(w["displayed"]),
                distinct_clicked=len(w["clicked"]),
                distinct_examined=len(w["examined"]),
                distinct_displayed_all=len(w["displayed_all"]),
                distinct_clicked_all=len(w["clicked_all"]),
            )
            for label, w in sorted(self.weeks.items())
        )


# ========================================
# POLICY REPLAY
# ========================================

def run_policy(
    world: SimWorld,
    policy: Union[Policy, str],
    horizon_days: Optional[int] = None,
    seed: int = 0,
    users: Optional[Sequence[str]] = None,
    models: Optional[WorldModels] = None,
) -> MetricsReport:
    """
    Replay one policy over the horizon: every requesting user opens the
    carousel once a day at their cohort's hour, clicks follow the world's
    click model, feedback goes through record_display and the refresh job
    runs every four simulated hours.
    """
    policy = Policy.parse(policy)
    horizon = world.config.horizon_days if horizon_days is None else horizon_days
    if horizon < MIN_HORIZON_DAYS:
        raise ValidationError(f"horizon must cover at least {MIN_HORIZON_DAYS} days")
    if horizon > world.config.horizon_days:
        raise ValidationError(f"world only has {world.config.horizon_days} days of traffic")
    models = models or fit_world_models(world)
    requesting = sorted(users) if users is not None else list(world.user_ids)
    unknown = [u for u in requesting if not world.has_user(u)]
    if unknown:
        raise ValidationError(f"unknown simulated users: {unknown[:3]}")

    catalog = world.build_catalog()
    service = SlateService(world.config.service_settings(), catalog, event_log=EventLog())
    service.install_models(models.store, models.model, models.builder)
    scheduler = SchedulerService()
    service.register_jobs(scheduler, world.t0, retrain=False)

    by_hour: dict[int, list[str]] = defaultdict(list)
    for user_id in requesting:
        by_hour[int(world.pair_request_hour[world.pair_of(user_id)])].append(user_id)

    tally = _Tally(service.settings.carousel_size)
    click_model = world.click_model

    for day in range(horizon):
        day_start = world.t0 + day * DAY
        for hour in range(24):
            hour_start = day_start + hour * HOUR
            scheduler.run_due(hour_start)
            ts = hour_start + REQUEST_MINUTE * 60
            organic = world.organic_events(hour_start)
            # only listening that happened before the requests is visible to them
            catalog.add_events([e for e in organic if e.ts < ts], dedup=False)

            for user_id in by_hour.get(hour, ()):
                pair = world.pair_of(user_id)
                slate = service.build_carousel(user_id, ts, policy, rng=stream(seed, "rank", pair, day))
                outcome = click_model.simulate(
                    world.affinities(user_id, slate.album_ids),
                    stream(seed, "click", pair, day),
                )
                service.record_display(slate, outcome.click, ts)
                if outcome.click is not None:
                    clicked = slate.entries[outcome.click - 1].album_id
                    catalog.add_event(UsageEvent(EventType.STREAM, user_id, clicked, ts))
                tally.observe(slate, outcome.examined, outcome.click)
            catalog.add_events([e for e in organic if e.ts >= ts], dedup=False)

        logger.debug("Day %d of %s done: %d slates, %d clicks", day + 1, policy.value, tally.slates, tally.clicks)

    report = MetricsReport(
        policy=policy.value,
        seed=seed,
        users=len(requesting),
        horizon_days=horizon,
        slates=tally.slates,
        displays=tally.displays,
        personalized_displays=tally.personalized_displays,
        clicks=tally.clicks,
        personalized_clicks=tally.personalized_clicks,
        weekly=tally.weekly(),
        examined_by_position=tuple(int(c) for c in tally.examined_by_position),
        world=world.fingerprint(),
        config=world.config.to_dict(),
    )
    logger.info(
        "%s (seed %d): %d slates, CTR %.4f, weekly distinct displayed %.1f / clicked %.1f",
        policy.value,
        seed,
        report.slates,
        report.display_to_click_rate,
        report.weekly_distinct_albums_displayed,
        report.weekly_distinct_albums_clicked,
    )
    return report


# ========================================
# A/B COMPARISON
# ========================================

def default_splits(world: SimWorld) -> tuple[list[str], list[str]]:
    """One twin of each cohort per arm; unpaired worlds alternate users."""
    if world.config.paired:
        a = [world.users_of_pair(p)[0] for p in range(world.n_pairs)]
        b = [world.users_of_pair(p)[1] for p in range(world.n_pairs)]
        return a, b
    return list(world.user_ids[0::2]), list(world.user_ids[1::2])


def _ratio(b: float, a: float) -> float:
    return (b / a) if a else float("nan")


@dataclass(frozen=True)
class LiftReport:
    policy_a: str
    policy_b: str
    seeds: tuple[int, ...]
    ctr_lift: tuple[float, ...]
    displayed_ratio: tuple[float, ...]
    clicked_ratio: tuple[float, ...]
    runs: tuple[tuple[MetricsReport, MetricsReport], ...] = field(default=(), compare=False, repr=False)

    @staticmethod
    def _mean_std(values: Sequence[float]) -> tuple[float, float]:
        arr = np.asarray(values, dtype=np.float64)
        return float(arr.mean()), float(arr.std(ddof=1)) if len(arr) > 1 else 0.0

    @property
    def ctr_lift_mean_std(self) -> tuple[float, float]:
        return self._mean_std(self.ctr_lift)

    @property
    def displayed_ratio_mean_std(self) -> tuple[float, float]:
        return self._mean_std(self.displayed_ratio)

    @property
    def clicked_ratio_mean_std(self) -> tuple[float, float]:
        return self._mean_std(self.clicked_ratio)

    def to_record(self) -> dict:
        return {
            "kind": "ab",
            "policy_a": self.policy_a,
            "policy_b": self.policy_b,
            "seeds": list(self.seeds),
            "ctr_lift": list(self.ctr_lift),
            "displayed_ratio": list(self.displayed_ratio),
            "clicked_ratio": list(self.clicked_ratio),
            "ctr_lift_mean_std": list(self.ctr_lift_mean_std),
            "displayed_ratio_mean_std": list(self.displayed_ratio_mean_std),
            "clicked_ratio_mean_std": list(self.clicked_ratio_mean_std),
        }


def ab_compare(
    world: SimWorld,
    policy_a: Union[Policy, str],
    policy_b: Union[Policy, str],
    horizon: Optional[int] = None,
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    splits: Optional[tuple[Sequence[str], Sequence[str]]] = None,
    models: Optional[WorldModels] = None,
) -> LiftReport:
    """
    Run A and B on disjoint user splits of the same world for every seed.
    Lifts are (metric_b - metric_a) / metric_a; exposure ratios are b / a.
    """
    if len(seeds) < 3:
        raise ValidationError("ab_compare needs at least 3 seeds")
    split_a, split_b = splits if splits is not None else default_splits(world)
    overlap = set(split_a) & set(split_b)
    if overlap:
        raise OverlappingSplitsError(f"{len(overlap)} users are in both splits")
    if not split_a or not split_b:
        raise ValidationError("both splits need at least one user")

    a, b = Policy.parse(policy_a), Policy.parse(policy_b)
    models = models or fit_world_models(world)

    lifts, displayed, clicked, runs = [], [], [], []
    for seed in seeds:
        ra = run_policy(world, a, horizon, seed, users=split_a, models=models)
        rb = run_policy(world, b, horizon, seed, users=split_b, models=models)
        lifts.append(_ratio(rb.display_to_click_rate, ra.display_to_click_rate) - 1.0)
        displayed.append(_ratio(rb.weekly_distinct_albums_displayed, ra.weekly_distinct_albums_displayed))
        clicked.append(_ratio(rb.weekly_distinct_albums_clicked, ra.weekly_distinct_albums_clicked))
        runs.append((ra, rb))

    report = LiftReport(a.value, b.value, tuple(seeds), tuple(lifts), tuple(displayed), tuple(clicked), tuple(runs))
    mean, std = report.ctr_lift_mean_std
    logger.info("A/B %s vs %s over %d seeds: CTR lift %+.4f ± %.4f", a.value, b.value, len(seeds), mean, std)
    return report
