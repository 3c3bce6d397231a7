from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from errors import UnknownPolicyError, ValidationError
from utils.validators import (
    optional_id,
    optional_position,
    require_id,
    require_id_list,
    require_timestamp,
)


class EventType(str, Enum):
    STREAM = "stream"
    LIKE = "like"
    FAVORITE_ARTIST_ADD = "favorite_artist_add"
    DISPLAY = "display"
    CLICK = "click"

    @classmethod
    def parse(cls, raw) -> "EventType":
        try:
            return cls(raw)
        except ValueError:
            raise ValidationError(f"unknown event type {raw!r}")


SLATE_EVENTS = (EventType.DISPLAY, EventType.CLICK)
INTERACTION_EVENTS = (EventType.STREAM, EventType.LIKE)


class Policy(str, Enum):
    EDITORIAL = "Editorial"
    COLD_START = "ColdStart"
    TS_COLD_START = "TsColdStart"

    @classmethod
    def parse(cls, raw) -> "Policy":
        if isinstance(raw, Policy):
            return raw
        try:
            return cls(raw)
        except ValueError:
            raise UnknownPolicyError(f"unknown policy {raw!r}")


class Section(str, Enum):
    UNMISSABLE = "Unmissable"
    PERSONALIZED = "Personalized"


@dataclass(frozen=True)
class AlbumMeta:
    album_id: str
    artist_ids: tuple[str, ...]
    label_id: str
    genre_ids: tuple[str, ...]
    release_ts: int
    title: str = ""

    def __post_init__(self) -> None:
        if not self.artist_ids:
            raise ValidationError("artist_ids must be nonempty")
        if self.release_ts <= 0:
            raise ValidationError("release_ts must be > 0")

    def to_dict(self) -> dict:
        return {
            "album": self.album_id,
            "artists": list(self.artist_ids),
            "label": self.label_id,
            "genres": list(self.genre_ids),
            "release_ts": self.release_ts,
            "title": self.title,
        }

    @staticmethod
    def from_dict(data: dict) -> "AlbumMeta":
        title = data.get("title", "")
        if not isinstance(title, str):
            raise ValidationError("title must be text")
        return AlbumMeta(
            album_id=require_id(data, "album"),
            artist_ids=require_id_list(data, "artists", allow_empty=False),
            label_id=require_id(data, "label"),
            genre_ids=require_id_list(data, "genres"),
            release_ts=require_timestamp(data, "release_ts", positive=True),
            title=title,
        )


@dataclass(frozen=True)
class UsageEvent:
    event_type: EventType
    user_id: str
    subject: str
    ts: int
    position: Optional[int] = None
    slate_id: Optional[str] = None

    def __post_init__(self) -> None:
        if self.event_type in SLATE_EVENTS:
            if self.position is None:
                raise ValidationError(f"{self.event_type.value} requires a position")
            if self.position < 1:
                raise ValidationError("position must be ≥1")
            if not self.slate_id:
                raise ValidationError(f"{self.event_type.value} requires a slate_id")

    @property
    def dedup_key(self) -> tuple:
        return (self.user_id, self.event_type, self.subject, self.ts, self.slate_id, self.position)

    def to_dict(self) -> dict:
        record = {
            "type": self.event_type.value,
            "user": self.user_id,
            "subject": self.subject,
            "ts": self.ts,
        }
        if self.position is not None:
            record["position"] = self.position
        if self.slate_id is not None:
            record["slate_id"] = self.slate_id
        return record

    @staticmethod
    def from_dict(data: dict) -> "UsageEvent":
        return UsageEvent(
            event_type=EventType.parse(data.get("type")),
            user_id=require_id(data, "user"),
            subject=require_id(data, "subject"),
            ts=require_timestamp(data, "ts"),
            position=optional_position(data.get("position")),
            slate_id=optional_id(data, "slate_id"),
        )


@dataclass(frozen=True)
class SlateEntry:
    album_id: str
    section: Section
    position: int

    def to_dict(self) -> dict:
        return {"album": self.album_id, "section": self.section.value, "position": self.position}


@dataclass(frozen=True)
class Slate:
    slate_id: str
    user_id: str
    entries: tuple[SlateEntry, ...]
    policy: Policy
    snapshot_version: int
    created_at: int
    fallback_user_vector: bool = False
    skipped_candidates: int = field(default=0, compare=False)

    @property
    def album_ids(self) -> list[str]:
        return [e.album_id for e in self.entries]

    @property
    def prefix_length(self) -> int:
        return sum(1 for e in self.entries if e.section is Section.UNMISSABLE)

    @property
    def tail(self) -> list[str]:
        return [e.album_id for e in self.entries if e.section is Section.PERSONALIZED]

    def validate(self, max_length: int) -> None:
        """Raise ValidationError unless the slate obeys the carousel layout rules."""
        if len(self.entries) > max_length:
            raise ValidationError(f"slate has {len(self.entries)} entries, limit {max_length}")
        ids = self.album_ids
        if len(set(ids)) != len(ids):
            raise ValidationError("slate contains duplicate albums")
        seen_personalized = False
        for expected, entry in enumerate(self.entries, start=1):
            if entry.position != expected:
                raise ValidationError("slate positions must be 1..N in order")
            if entry.section is Section.PERSONALIZED:
                seen_personalized = True
            elif seen_personalized:
                raise ValidationError("unmissable entry after personalized entry")

    def to_document(self) -> dict:
        return {
            "slate_id": self.slate_id,
            "user": self.user_id,
            "policy": self.policy.value,
            "snapshot_version": self.snapshot_version,
            "created_at": self.created_at,
            "fallback_user_vector": self.fallback_user_vector,
            "entries": [e.to_dict() for e in self.entries],
        }
