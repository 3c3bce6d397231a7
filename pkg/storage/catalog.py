#!/usr/bin/env python3
"""
Catalog and usage event store

Holds albums, artists, favourites and the raw usage events every other
component consumes. Writes are serialized by a single lock; reads between
ingestion batches see a consistent state.
"""

import logging
import os
import threading
from bisect import bisect_left, bisect_right
from collections import Counter, defaultdict
from operator import attrgetter
from typing import Iterable, NamedTuple, Optional

from config import WEEK
from errors import FormatError, ValidationError
from storage.codec import Source, encode_records, iter_source
from storage.files import safe_write
from storage.models import AlbumMeta, EventType, UsageEvent

logger = logging.getLogger(__name__)

_by_ts = attrgetter("ts")


class IngestResult(NamedTuple):
    accepted: int
    rejected: list[tuple[int, str]]


class Catalog:
    def __init__(self) -> None:
        self._lock = threading.RLock()

        self.albums: dict[str, AlbumMeta] = {}
        # (release_ts, album_id) ascending, with the timestamps mirrored for bisect
        self._releases: list[tuple[int, str]] = []
        self._release_ts: list[int] = []
        self._artist_albums: dict[str, list[str]] = defaultdict(list)

        self._user_events: dict[str, list[UsageEvent]] = defaultdict(list)
        self._interactions: list[UsageEvent] = []
        self._album_streams: dict[str, list[int]] = defaultdict(list)
        self._album_likes: dict[str, list[int]] = defaultdict(list)
        self._favorites: dict[str, set[str]] = defaultdict(set)
        self._genre_streams: dict[str, Counter] = defaultdict(Counter)
        self._seen: set[tuple] = set()
        self.event_count = 0

    # ---------- albums ----------

    def add_album(self, album: AlbumMeta) -> None:
        with self._lock:
            if album.album_id in self.albums:
                raise ValidationError(f"duplicate album_id {album.album_id}")
            self.albums[album.album_id] = album
            key = (album.release_ts, album.album_id)
            pos = bisect_right(self._releases, key)
            self._releases.insert(pos, key)
            self._release_ts.insert(pos, album.release_ts)
            for artist in album.artist_ids:
                self._artist_albums[artist].append(album.album_id)

    def load_albums(self, source: Source) -> IngestResult:
        """Read catalog records (one album per line); bad records are reported, not fatal."""
        accepted = 0
        rejected: list[tuple[int, str]] = []
        for line_no, item in iter_source(source):
            if isinstance(item, FormatError):
                rejected.append((line_no, str(item)))
                continue
            try:
                self.add_album(AlbumMeta.from_dict(item))
                accepted += 1
            except ValidationError as e:
                rejected.append((line_no, str(e)))

        if rejected:
            logger.warning("Catalog load: %d accepted, %d rejected", accepted, len(rejected))
        else:
            logger.info("Catalog load: %d albums accepted", accepted)
        return IngestResult(accepted, rejected)

    def genres(self) -> list[str]:
        return sorted({g for album in self.albums.values() for g in album.genre_ids})

    def albums_by_artist(self, artist_id: str) -> list[str]:
        return list(self._artist_albums.get(artist_id, ()))

    def released_between(self, start: int, end: int) -> list[str]:
        """Albums with start < release_ts <= end, oldest first."""
        lo = bisect_right(self._release_ts, start)
        hi = bisect_right(self._release_ts, end)
        return [album_id for _, album_id in self._releases[lo:hi]]

    def new_release_window(self, now: int) -> frozenset[str]:
        """Albums with now - release_ts in [0, 7 days)."""
        return frozenset(self.released_between(now - WEEK, now))

    # ---------- events ----------

    def check_subject(self, event: UsageEvent) -> None:
        """FavoriteArtistAdd names a known artist; every other event a known album."""
        if event.event_type is EventType.FAVORITE_ARTIST_ADD:
            if event.subject not in self._artist_albums:
                raise ValidationError(f"{event.event_type.value} subject {event.subject!r} is not a known artist")
        elif event.subject not in self.albums:
            raise ValidationError(f"{event.event_type.value} subject {event.subject!r} is not a known album")

    def add_event(self, event: UsageEvent) -> bool:
        return self.add_events([event]) == 1

    def add_events(self, events: Iterable[UsageEvent], dedup: bool = True) -> int:
        """
        Append events, keeping every per-user and per-album list in timestamp
        order. Returns the number of events actually added (duplicates skipped).
        A batch holding an event with an unknown or wrong-kind subject raises
        ValidationError before anything is added.
        """
        events = list(events)
        added = 0
        dirty_users: set[str] = set()
        dirty_albums: set[str] = set()
        interactions_dirty = False

        with self._lock:
            for event in events:
                self.check_subject(event)

            for event in events:
                if dedup:
                    key = event.dedup_key
                    if key in self._seen:
                        continue
                    self._seen.add(key)

                user_list = self._user_events[event.user_id]
                if user_list and user_list[-1].ts > event.ts:
                    dirty_users.add(event.user_id)
                user_list.append(event)

                if event.event_type is EventType.STREAM or event.event_type is EventType.LIKE:
                    if self._interactions and self._interactions[-1].ts > event.ts:
                        interactions_dirty = True
                    self._interactions.append(event)

                    target = (
                        self._album_streams
                        if event.event_type is EventType.STREAM
                        else self._album_likes
                    )
                    ts_list = target[event.subject]
                    if ts_list and ts_list[-1] > event.ts:
                        dirty_albums.add(event.subject)
                    ts_list.append(event.ts)

                    if event.event_type is EventType.STREAM:
                        album = self.albums.get(event.subject)
                        if album is not None:
                            self._genre_streams[event.user_id].update(album.genre_ids)
                elif event.event_type is EventType.FAVORITE_ARTIST_ADD:
                    self._favorites[event.user_id].add(event.subject)

                added += 1

            for user_id in dirty_users:
                self._user_events[user_id].sort(key=_by_ts)
            for album_id in dirty_albums:
                self._album_streams[album_id].sort()
                self._album_likes[album_id].sort()
            if interactions_dirty:
                self._interactions.sort(key=_by_ts)
            self.event_count += added

        return added

    def ingest_events(self, source: Source) -> IngestResult:
        """
        Validate and append records from a line-delimited source.

        Malformed records are returned as (line_no, reason); an unreadable
        source raises IngestError. Re-ingesting an identical file is a no-op.
        """
        valid: list[UsageEvent] = []
        rejected: list[tuple[int, str]] = []

        for line_no, item in iter_source(source):
            if isinstance(item, FormatError):
                rejected.append((line_no, str(item)))
                continue
            try:
                event = UsageEvent.from_dict(item)
                self.check_subject(event)
                valid.append(event)
            except ValidationError as e:
                rejected.append((line_no, str(e)))

        valid.sort(key=_by_ts)
        accepted = self.add_events(valid)

        if rejected:
            logger.warning(
                "Ingest: %d accepted, %d duplicates, %d rejected (first: line %d, %s)",
                accepted,
                len(valid) - accepted,
                len(rejected),
                rejected[0][0],
                rejected[0][1],
            )
        else:
            logger.info("Ingest: %d accepted, %d duplicates", accepted, len(valid) - accepted)
        return IngestResult(accepted, rejected)

    def events_for(self, user_id: str) -> list[UsageEvent]:
        return list(self._user_events.get(user_id, ()))

    def users(self) -> list[str]:
        return sorted(self._user_events)

    def interaction_events(self, start: int, end: int) -> list[UsageEvent]:
        """Stream and Like events with ts in [start, end)."""
        with self._lock:
            lo = bisect_left(self._interactions, start, key=_by_ts)
            hi = bisect_left(self._interactions, end, key=_by_ts)
            return self._interactions[lo:hi]

    def usage_counts(self, album_id: str, start: int, end: int) -> tuple[int, int]:
        """(streams, likes) of an album with ts in [start, end)."""
        streams = self._album_streams.get(album_id, ())
        likes = self._album_likes.get(album_id, ())
        return (
            bisect_left(streams, end) - bisect_left(streams, start),
            bisect_left(likes, end) - bisect_left(likes, start),
        )

    def favorite_artists(self, user_id: str) -> frozenset[str]:
        return frozenset(self._favorites.get(user_id, ()))

    def unmissable_for(self, user_id: str, window: Iterable[str]) -> list[str]:
        """
        Windowed albums by one of the user's favourite artists, newest first,
        ties by album id.
        """
        favorites = self._favorites.get(user_id)
        if not favorites:
            return []

        hits = set()
        for artist in favorites:
            hits.update(self._artist_albums.get(artist, ()))
        hits.intersection_update(window)

        return sorted(hits, key=lambda a: (-self.albums[a].release_ts, a))

    def top_genre(self, user_id: str) -> Optional[str]:
        """Most streamed genre of the user, ties by genre id; None without streams."""
        counts = self._genre_streams.get(user_id)
        if not counts:
            return None
        return min(counts.items(), key=lambda kv: (-kv[1], kv[0]))[0]

    # ---------- persistence ----------

    def save(self, catalog_path: str, events_path: str) -> None:
        with self._lock:
            albums = sorted(self.albums.values(), key=lambda a: (a.release_ts, a.album_id))
            safe_write(catalog_path, encode_records(a.to_dict() for a in albums))

            events = [e for lst in self._user_events.values() for e in lst]
            events.sort(key=lambda e: (e.ts, e.user_id))
            safe_write(events_path, encode_records(e.to_dict() for e in events))
        logger.info("Catalog saved: %d albums, %d events", len(albums), len(events))

    @classmethod
    def from_files(cls, catalog_path: str, events_path: Optional[str] = None) -> "Catalog":
        catalog = cls()
        if os.path.exists(catalog_path):
            catalog.load_albums(catalog_path)
        else:
            logger.info("Catalog file not found: %s", catalog_path)
        if events_path:
            if os.path.exists(events_path):
                catalog.ingest_events(events_path)
            else:
                logger.info("Event log not found: %s", events_path)
        return catalog

    def get_stats(self) -> dict:
        return {
            "albums": len(self.albums),
            "users": len(self._user_events),
            "events": self.event_count,
            "interactions": len(self._interactions),
        }
