#!/usr/bin/env python3
"""
Carousel assembly and refresh orchestration

Composes the unmissable prefix with a policy-owned tail, records displays
and feedback, and runs the periodic refresh (predictions -> index -> arms).
"""

import itertools
import logging
import threading
import time
from collections import Counter, OrderedDict
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from typing import Callable, Iterable, Optional, Union

import numpy as np
import pytz

from config import DAY, WEEK, Settings
from errors import NoSnapshotError, TickAbortedError, UnknownSlateError, ValidationError
from services.bandit import BanditConfig, ThompsonBandit, attribute_rewards, sample_and_rank
from services.cf_trainer import EmbeddingStore, build_matrix, truncated_svd
from services.coldstart import (
    ColdStartPredictor,
    FeatureBuilder,
    MlpModel,
    TrainParams,
    TrainReport,
    build_training_set,
    train,
)
from services.vector_index import CoarseIVFMode, ExactMode, IndexHolder, IndexMode, build, query
from storage.catalog import Catalog
from storage.codec import append_records
from storage.models import EventType, Policy, Section, Slate, SlateEntry, UsageEvent

logger = logging.getLogger(__name__)

FRIDAY = 4


def bandit_config_from(settings: Settings) -> BanditConfig:
    return BanditConfig(
        prior_mu0=settings.prior_mu0,
        prior_sigma2_0=settings.prior_sigma2,
        obs_var=settings.obs_var,
        affinity_weight=settings.affinity_weight,
        seen_depth=settings.seen_depth,
        update_period=settings.refresh_period,
    )


# ========================================
# DISPLAY LOG
# ========================================

class EventLog:
    """Serialized writer for Display/Click events."""

    def __init__(self, path: Optional[str] = None, keep_in_memory: bool = False) -> None:
        self.path = path
        self.keep_in_memory = keep_in_memory
        self.events: list[UsageEvent] = []
        self.counts: Counter = Counter()
        self._lock = threading.Lock()

    def append(self, events: Iterable[UsageEvent]) -> None:
        batch = list(events)
        with self._lock:
            for event in batch:
                self.counts[event.event_type] += 1
            if self.keep_in_memory:
                self.events.extend(batch)
            if self.path:
                append_records(self.path, (e.to_dict() for e in batch))


# ========================================
# EDITORIAL LISTS
# ========================================

def editorial_week_start(now: int, tz: pytz.BaseTzInfo = pytz.utc) -> int:
    """Most recent Friday 00:00 (local time in tz) at or before now."""
    local = datetime.fromtimestamp(now, tz)
    days_back = (local.weekday() - FRIDAY) % 7
    day = datetime(local.year, local.month, local.day) - timedelta(days=days_back)
    return int(tz.localize(day).timestamp())


class EditorialBoard:
    """
    Weekly per-genre lists, identical for every fan of the genre and frozen
    from one Friday to the next. Candidates are the albums released during
    the week before the boundary, ranked by their streams so far plus the
    streams of the artists' earlier albums (ties: newer first, then id).
    """

    def __init__(self, catalog: Catalog, list_size: int = 20, tz: pytz.BaseTzInfo = pytz.utc) -> None:
        self.catalog = catalog
        self.list_size = list_size
        self.tz = tz
        self._lock = threading.Lock()
        self._week: Optional[int] = None
        self._lists: dict[Optional[str], tuple[str, ...]] = {}

    def _score(self, album_id: str, cutoff: int) -> int:
        catalog = self.catalog
        album = catalog.albums[album_id]
        score = catalog.usage_counts(album_id, 0, cutoff)[0]
        earlier = {
            other
            for artist in album.artist_ids
            for other in catalog.albums_by_artist(artist)
            if catalog.albums[other].release_ts < album.release_ts
        }
        for other in earlier:
            score += catalog.usage_counts(other, 0, cutoff)[0]
        return score

    def _build(self, week_start: int) -> dict[Optional[str], tuple[str, ...]]:
        candidates = self.catalog.released_between(week_start - WEEK, week_start)
        scores = {a: self._score(a, week_start) for a in candidates}
        ranked = sorted(
            candidates,
            key=lambda a: (-scores[a], -self.catalog.albums[a].release_ts, a),
        )

        lists: dict[Optional[str], list[str]] = {None: ranked[:self.list_size]}
        for album_id in ranked:
            for genre in self.catalog.albums[album_id].genre_ids:
                bucket = lists.setdefault(genre, [])
                if len(bucket) < self.list_size:
                    bucket.append(album_id)
        return {g: tuple(v) for g, v in lists.items()}

    def lists_for(self, now: int) -> tuple[int, dict[Optional[str], tuple[str, ...]]]:
        week = editorial_week_start(now, self.tz)
        with self._lock:
            if week != self._week:
                self._lists = self._build(week)
                self._week = week
                logger.info(
                    "Editorial lists rebuilt for week starting %s (%d genres)",
                    datetime.fromtimestamp(week, self.tz).strftime("%Y-%m-%d"),
                    len(self._lists) - 1,
                )
            return self._week, self._lists

    def list_for(self, genre: Optional[str], now: int) -> tuple[str, ...]:
        _, lists = self.lists_for(now)
        return lists.get(genre, lists.get(None, ()))


# ========================================
# REPORTS
# ========================================

@dataclass(frozen=True)
class TickReport:
    now: int
    window_size: int
    predictions_version: int
    index_version: int
    bandit_version: int
    expired: list[str] = field(default_factory=list)
    registered: list[str] = field(default_factory=list)
    duration_sec: float = field(default=0.0, compare=False)


@dataclass(frozen=True)
class RetrainReport:
    now: int
    store_version: int
    users: int
    albums: int
    examples: int
    train: TrainReport


# ========================================
# SERVICE
# ========================================

class SlateService:
    def __init__(
        self,
        settings: Settings,
        catalog: Catalog,
        bandit: Optional[ThompsonBandit] = None,
        event_log: Optional[EventLog] = None,
        store_loader: Optional[Callable[[], EmbeddingStore]] = None,
    ) -> None:
        self.settings = settings
        self.catalog = catalog
        self.bandit = bandit or ThompsonBandit(bandit_config_from(settings))
        self.event_log = event_log or EventLog()
        self.editorial = EditorialBoard(catalog, settings.editorial_list_size, settings.tz)
        self.index = IndexHolder()
        self.store_loader = store_loader or self._installed_store

        self.store: Optional[EmbeddingStore] = None
        self.model: Optional[MlpModel] = None
        self.predictor: Optional[ColdStartPredictor] = None
        self.last_tick: Optional[TickReport] = None

        self._rng = np.random.default_rng(settings.service_seed)
        self._issued: OrderedDict[str, Slate] = OrderedDict()
        self._slate_seq = itertools.count(1)
        self._lock = threading.Lock()
        self._tick_lock = threading.Lock()
        self._mean_user: tuple[Optional[EmbeddingStore], Optional[np.ndarray]] = (None, None)

    # ---------- models ----------

    def _installed_store(self) -> EmbeddingStore:
        if self.store is None:
            raise NoSnapshotError("no embedding store installed")
        return self.store

    def install_models(self, store: EmbeddingStore, model: MlpModel, builder: FeatureBuilder) -> None:
        if model.n_features != builder.n_features or model.output_dim != store.dim:
            raise ValidationError("model, feature builder and store do not fit together")
        with self._tick_lock:
            self.store = store
            self.model = model
            if self.predictor is None:
                self.predictor = ColdStartPredictor(builder)
            else:
                self.predictor.builder = builder
        logger.info("Installed store v%d and cold-start model (%d features)", store.version, builder.n_features)

    def retrain(self, now: int) -> RetrainReport:
        """Refit the CF store on the last window of usage and retrain the cold-start model."""
        s = self.settings
        window = s.cf_window_days * DAY
        matrix = build_matrix(self.catalog.interaction_events(now - window, now), now, window, s.like_weight)
        d = s.embedding_dim
        store = truncated_svd(
            matrix,
            d,
            n_iter=s.svd_n_iter,
            seed=s.svd_seed,
            oversampling=s.svd_oversampling,
            version=(self.store.version + 1) if self.store else 1,
            trained_until=now,
        )
        builder = FeatureBuilder(d, self.catalog.genres(), s.label_buckets, s.min_interactions)
        dataset = build_training_set(self.catalog, store, builder, s.usage_cutoffs_hours, as_of=now)
        model, report = train(
            dataset,
            TrainParams(
                lr=s.learning_rate,
                epochs=s.epochs,
                batch_size=s.batch_size,
                seed=s.train_seed,
                hidden=(s.hidden_1, s.hidden_2),
            ),
        )
        self.install_models(store, model, builder)
        return RetrainReport(now, store.version, len(store.user_ids), len(store.album_ids), len(dataset), report)

    def _index_mode(self, n_items: int) -> IndexMode:
        s = self.settings
        if s.index_mode == "exact" or n_items == 0:
            return ExactMode()
        auto = CoarseIVFMode.auto(n_items, s.index_spill)
        clusters = min(s.index_clusters or auto.num_clusters, n_items)
        return CoarseIVFMode(clusters, s.index_nprobe or auto.nprobe, s.index_spill)

    # ---------- refresh ----------

    def scheduler_tick(self, now: int) -> TickReport:
        """
        Refresh predictions, rebuild and swap the index, then expire/register
        arms and absorb pending rewards. Any failure before publication aborts
        the tick and leaves the previous snapshots serving.
        """
        with self._tick_lock:
            started = time.monotonic()
            try:
                store = self.store_loader()
                if self.model is None or self.predictor is None:
                    raise NoSnapshotError("no cold-start model installed")
                window = self.catalog.new_release_window(now)
                predictions = self.predictor.compute(self.model, window, now, self.catalog, store)
                snapshot = build(
                    predictions.predictions,
                    self._index_mode(len(predictions.predictions)),
                    seed=self.settings.index_seed,
                    version=self.index.version + 1,
                    dim=store.dim,
                )
            except Exception as e:
                logger.error("Tick at %d aborted: %s", now, e, exc_info=True)
                raise TickAbortedError(f"tick at {now} aborted: {e}") from e

            self.store = store
            self.predictor.publish(predictions)
            self.index.swap(snapshot)
            releases = {a: self.catalog.albums[a].release_ts for a in window}
            expired, registered = self.bandit.refresh(now, releases)

            report = TickReport(
                now=now,
                window_size=len(window),
                predictions_version=predictions.version,
                index_version=snapshot.version,
                bandit_version=self.bandit.version,
                expired=expired,
                registered=registered,
                duration_sec=time.monotonic() - started,
            )
            self.last_tick = report

        logger.info(
            "Tick %d: window=%d, predictions v%d, index v%d, arms +%d/-%d (%.2fs)",
            now,
            report.window_size,
            report.predictions_version,
            report.index_version,
            len(registered),
            len(expired),
            report.duration_sec,
        )
        return report

    def register_jobs(self, scheduler, start: int, retrain: bool = True) -> None:
        scheduler.add_job("refresh", self._tick_job, self.settings.refresh_period, start, run_immediately=True)
        if retrain:
            scheduler.add_job("retrain", self.retrain, self.settings.retrain_period, start, run_immediately=False)

    def _tick_job(self, now: int) -> None:
        try:
            self.scheduler_tick(now)
        except TickAbortedError:
            # already logged with traceback; previous snapshots keep serving
            pass

    # ---------- serving ----------

    def _user_vector(self, user_id: str) -> tuple[np.ndarray, bool]:
        store = self._installed_store()
        vec = store.user_vec(user_id)
        if vec is not None:
            return vec, False
        cached_store, mean = self._mean_user
        if cached_store is not store or mean is None:
            mean = store.mean_user_vector()
            self._mean_user = (store, mean)
        return mean, True

    def build_carousel(
        self,
        user_id: str,
        now: int,
        policy: Union[Policy, str],
        k: Optional[int] = None,
        rng: Optional[np.random.Generator] = None,
    ) -> Slate:
        size = k if k is not None else self.settings.carousel_size
        if not 1 <= size <= self.settings.carousel_size:
            raise ValidationError(f"carousel size must be in 1..{self.settings.carousel_size}")
        return self._compose(user_id, now, Policy.parse(policy), size, rng)

    def view_all(
        self,
        user_id: str,
        now: int,
        policy: Union[Policy, str],
        rng: Optional[np.random.Generator] = None,
    ) -> Slate:
        return self._compose(user_id, now, Policy.parse(policy), self.settings.view_all_size, rng)

    def _compose(
        self,
        user_id: str,
        now: int,
        policy: Policy,
        k: int,
        rng: Optional[np.random.Generator],
    ) -> Slate:
        catalog = self.catalog
        window = catalog.new_release_window(now)
        prefix = catalog.unmissable_for(user_id, window)[:k]
        taken = set(prefix)
        remaining = k - len(prefix)
        tail: list[str] = []
        fallback = False
        skipped = 0

        if policy is Policy.EDITORIAL:
            version, lists = self.editorial.lists_for(now)
            if remaining > 0:
                chosen = lists.get(catalog.top_genre(user_id), lists.get(None, ()))
                tail = [a for a in chosen if a not in taken][:remaining]

        elif policy is Policy.COLD_START:
            snapshot = self.index.current
            version = snapshot.version if snapshot is not None else 0
            if remaining > 0:
                if snapshot is None:
                    raise NoSnapshotError("no index snapshot published yet")
                user_vec, fallback = self._user_vector(user_id)
                stale = set(snapshot.ids).difference(window)
                hits = query(snapshot, user_vec, remaining, exclude=taken | stale)
                tail = [a for a, _ in hits]

        else:
            version = self.bandit.version
            if remaining > 0:
                if self.predictor is None or self.predictor.snapshot.version == 0:
                    raise NoSnapshotError("no predictions published yet")
                user_vec, fallback = self._user_vector(user_id)
                arms = self.bandit.arms()
                stale = {a for a in arms if a not in window}
                ranking = sample_and_rank(
                    user_vec,
                    self.predictor.snapshot.predictions,
                    arms,
                    remaining,
                    rng if rng is not None else self._rng,
                    exclude=taken | stale,
                    affinity_weight=self.bandit.config.affinity_weight,
                )
                tail = [a for a, _ in ranking.ranked]
                skipped = ranking.skipped

        entries = tuple(
            SlateEntry(album_id, Section.UNMISSABLE, pos)
            for pos, album_id in enumerate(prefix, start=1)
        ) + tuple(
            SlateEntry(album_id, Section.PERSONALIZED, pos)
            for pos, album_id in enumerate(tail, start=len(prefix) + 1)
        )

        slate = Slate(
            slate_id=f"sl{next(self._slate_seq):09d}",
            user_id=user_id,
            entries=entries,
            policy=policy,
            snapshot_version=version,
            created_at=now,
            fallback_user_vector=fallback,
            skipped_candidates=skipped,
        )
        with self._lock:
            self._issued[slate.slate_id] = slate
            while len(self._issued) > self.settings.issued_slate_limit:
                self._issued.popitem(last=False)

        logger.debug(
            "Slate %s for %s: policy=%s, %d unmissable + %d personalized",
            slate.slate_id,
            user_id,
            policy.value,
            len(prefix),
            len(tail),
        )
        return slate

    def issued(self, slate_id: str) -> Optional[Slate]:
        return self._issued.get(slate_id)

    def record_display(
        self,
        slate: Union[Slate, str],
        click: Optional[int],
        ts: int,
    ) -> dict[str, int]:
        """
        Log Display (and Click) events for an issued slate and, for the bandit
        policy, route cascade rewards for the personalized tail. Returns the
        rewards handed to the bandit.
        """
        slate_id = slate if isinstance(slate, str) else slate.slate_id
        with self._lock:
            issued = self._issued.get(slate_id)
            if issued is None:
                raise UnknownSlateError(f"unknown slate {slate_id}")
            if click is not None and not 1 <= click <= len(issued.entries):
                raise ValidationError(f"click position {click} outside slate of {len(issued.entries)}")
            del self._issued[slate_id]

        events = [
            UsageEvent(EventType.DISPLAY, issued.user_id, e.album_id, ts, e.position, slate_id)
            for e in issued.entries
        ]
        if click is not None:
            events.append(
                UsageEvent(EventType.CLICK, issued.user_id, issued.entries[click - 1].album_id, ts, click, slate_id)
            )
        self.event_log.append(events)

        rewards: dict[str, int] = {}
        if issued.policy is Policy.TS_COLD_START:
            offset = issued.prefix_length
            if click is None:
                rewards = attribute_rewards(issued.tail, None, self.bandit.config.seen_depth)
            elif click > offset:
                rewards = attribute_rewards(issued.tail, click - offset, self.bandit.config.seen_depth)
            if rewards:
                self.bandit.record_rewards(rewards)
        return rewards

    def health(self) -> dict:
        predictions = self.predictor.snapshot.version if self.predictor else 0
        return {
            "store_version": self.store.version if self.store else 0,
            "predictions_version": predictions,
            "index_version": self.index.version,
            "bandit_version": self.bandit.version,
            "arms": len(self.bandit),
            "last_tick": self.last_tick.now if self.last_tick else None,
        }
