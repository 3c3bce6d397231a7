import numpy as np
import pytest

from config import DAY, HOUR, Settings
from services.cf_trainer import EmbeddingStore
from services.coldstart import FeatureBuilder, MlpModel
from services.simulator import SimConfig, fit_world_models, generate_world
from services.slate_service import EventLog, SlateService
from storage.catalog import Catalog
from storage.models import AlbumMeta, EventType, UsageEvent

# Tuesday 2023-11-14 22:13:20 UTC; the editorial week started Friday 2023-11-10
NOW = 1_700_000_000
EDITORIAL_WEEK = 1_699_574_400


def album(album_id, artist, release_ts, genre="g1", label="lb1"):
    return AlbumMeta(album_id, (artist,), label, (genre,), release_ts, title=album_id)


def stream_event(user, album_id, ts):
    return UsageEvent(EventType.STREAM, user, album_id, ts)


def favorite(user, artist, ts=1):
    return UsageEvent(EventType.FAVORITE_ARTIST_ADD, user, artist, ts)


@pytest.fixture
def settings(tmp_path):
    return Settings(
        data_dir=str(tmp_path),
        embedding_dim=2,
        hidden_1=4,
        hidden_2=4,
        label_buckets=4,
        min_interactions=1,
    )


def build_catalog():
    """
    Catalog around NOW: four back-catalogue albums, four releases in the
    current editorial week, ten fresh releases, two by the artist "fan"
    follows and thirteen by the artist "superfan" follows.
    """
    catalog = Catalog()
    old = NOW - 30 * DAY
    for i, genre in enumerate(("g1", "g2", "g1", "g2"), start=1):
        catalog.add_album(album(f"old{i}", f"ar{i}", old, genre))
    for i in range(4):
        catalog.add_album(album(f"ed{i + 1}", f"ar{i + 1}", NOW - 5 * DAY - i * HOUR, ("g1", "g2")[i % 2]))
    for i in range(1, 11):
        catalog.add_album(album(f"new{i:02d}", f"ar{i % 5 + 1}", NOW - i * HOUR - 1, ("g1", "g2")[i % 2]))
    catalog.add_album(album("fanA", "arF", NOW - HOUR, "g1"))
    catalog.add_album(album("fanB", "arF", NOW - 2 * HOUR, "g2"))
    for i in range(13):
        catalog.add_album(album(f"sf{i:02d}", "arS", NOW - (i + 1) * 600, "g2", label="lb2"))

    events = [favorite("fan", "arF"), favorite("superfan", "arS")]
    for user in ("u1", "u2"):
        events += [stream_event(user, "old1", NOW - 20 * DAY + k) for k in range(3)]
        events.append(stream_event(user, "old2", NOW - 20 * DAY + 10))
    events += [stream_event("listener", "ed2", NOW - 5 * DAY + k) for k in range(4)]
    catalog.add_events(events)
    return catalog


def build_store():
    users = ("fan", "superfan", "u1", "u2")
    user_matrix = np.array([[0.5, 0.5], [0.2, -0.4], [1.0, 0.2], [-1.0, 0.3]])
    albums = ("old1", "old2", "old3", "old4")
    album_matrix = np.array([[0.9, 0.1], [-0.3, 0.8], [0.4, 0.4], [0.1, -0.7]])
    return EmbeddingStore(
        dim=2,
        user_ids=users,
        user_matrix=user_matrix,
        album_ids=albums,
        album_matrix=album_matrix,
        singular_values=np.array([2.0, 1.0]),
        support={a: 5 for a in albums},
        version=1,
        trained_until=NOW - DAY,
    )


def build_service(settings, tick=True):
    catalog = build_catalog()
    service = SlateService(settings, catalog, event_log=EventLog(keep_in_memory=True))
    builder = FeatureBuilder(2, catalog.genres(), settings.label_buckets, settings.min_interactions)
    model = MlpModel.init(builder.n_features, settings.hidden_1, settings.hidden_2, 2, seed=1)
    service.install_models(build_store(), model, builder)
    if tick:
        service.scheduler_tick(NOW)
    return service


@pytest.fixture
def service(settings):
    return build_service(settings)


# ---------- simulator ----------

SMALL_WORLD = dict(
    users=20,
    genres=3,
    artists=30,
    labels=5,
    albums_per_day=6,
    history_days=14,
    horizon_days=14,
    latent_dim=4,
    embedding_dim=4,
    epochs=5,
    streams_per_day=6.0,
)


def small_config(**overrides):
    settings = Settings(min_interactions=2, hidden_1=8, hidden_2=8, label_buckets=8)
    return SimConfig(**{**SMALL_WORLD, **overrides}, settings=settings)


@pytest.fixture(scope="session")
def small_world():
    return generate_world(small_config(), seed=7)


@pytest.fixture(scope="session")
def small_models(small_world):
    return fit_world_models(small_world)
