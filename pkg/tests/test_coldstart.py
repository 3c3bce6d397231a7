import numpy as np
import pytest

from config import DAY, HOUR
from errors import DimensionMismatchError, FormatError, ValidationError
from services import coldstart
from services.cf_trainer import EmbeddingStore, InteractionMatrix, truncated_svd
from services.coldstart import (
    ColdStartPredictor,
    FeatureBuilder,
    MlpModel,
    TrainParams,
    build_training_set,
    gradient_check,
    label_bucket,
    loss_and_gradients,
    predict,
    train,
)
from storage.catalog import Catalog

from conftest import album, stream_event

RELEASE = 100 * DAY


def _store(album_vectors: dict, support: int = 20) -> EmbeddingStore:
    ids = tuple(sorted(album_vectors))
    return EmbeddingStore(
        dim=2,
        user_ids=("u1",),
        user_matrix=np.array([[1.0, 0.0]]),
        album_ids=ids,
        album_matrix=np.array([album_vectors[a] for a in ids]).reshape(len(ids), 2),
        singular_values=np.ones(2),
        support={a: support for a in ids},
    )


# ---------- features ----------

def test_debut_artist_has_zero_prior():
    catalog = Catalog()
    catalog.add_album(album("new", "debut", RELEASE))
    builder = FeatureBuilder(2, ["g1"], label_buckets=4)
    features = builder.build_features(catalog.albums["new"], _store({"x": [1.0, 1.0]}), RELEASE, catalog)
    assert np.array_equal(features.artist_prior, np.zeros(2))


def test_prior_is_mean_of_earlier_ground_truth_vectors():
    catalog = Catalog()
    catalog.add_album(album("p1", "A", RELEASE - 20 * DAY))
    catalog.add_album(album("p2", "A", RELEASE - 10 * DAY))
    catalog.add_album(album("new", "A", RELEASE))
    catalog.add_album(album("later", "A", RELEASE + DAY))
    e1, e2 = np.array([1.0, 3.0]), np.array([-2.0, 5.0])
    store = _store({"p1": e1, "p2": e2, "later": [100.0, 100.0]})
    builder = FeatureBuilder(2, ["g1"], label_buckets=4)
    features = builder.build_features(catalog.albums["new"], store, RELEASE, catalog)
    np.testing.assert_allclose(features.artist_prior, (e1 + e2) / 2)


def test_prior_skips_albums_below_support_threshold():
    catalog = Catalog()
    catalog.add_album(album("p1", "A", RELEASE - DAY))
    catalog.add_album(album("new", "A", RELEASE))
    builder = FeatureBuilder(2, ["g1"], label_buckets=4, min_interactions=10)
    features = builder.build_features(catalog.albums["new"], _store({"p1": [1.0, 1.0]}, support=3), RELEASE, catalog)
    assert np.array_equal(features.artist_prior, np.zeros(2))


def test_usage_at_release_is_zero():
    catalog = Catalog()
    catalog.add_album(album("new", "A", RELEASE))
    catalog.add_event(stream_event("u1", "new", RELEASE))
    builder = FeatureBuilder(2, ["g1"], label_buckets=4)
    features = builder.build_features(catalog.albums["new"], _store({}), RELEASE, catalog)
    assert np.array_equal(features.usage_stats, [0.0, 0.0, 0.0])


def test_usage_grows_between_refreshes():
    catalog = Catalog()
    catalog.add_album(album("new", "A", RELEASE))
    builder = FeatureBuilder(2, ["g1"], label_buckets=4)
    store = _store({})
    catalog.add_event(stream_event("u1", "new", RELEASE + HOUR))
    first = builder.build_features(catalog.albums["new"], store, RELEASE + 2 * HOUR, catalog)
    catalog.add_event(stream_event("u2", "new", RELEASE + 3 * HOUR))
    second = builder.build_features(catalog.albums["new"], store, RELEASE + 6 * HOUR, catalog)
    assert second.usage_stats[0] > first.usage_stats[0]
    assert second.usage_stats[2] > first.usage_stats[2]


def test_feature_layout():
    catalog = Catalog()
    catalog.add_album(album("new", "A", RELEASE, genre="g2", label="lbX"))
    builder = FeatureBuilder(2, ["g1", "g2", "g3"], label_buckets=8)
    features = builder.build_features(catalog.albums["new"], _store({}), RELEASE + DAY, catalog)
    assert len(features) == builder.n_features == 2 + 3 + 8 + 3
    assert np.array_equal(features.genre_onehot, [0.0, 1.0, 0.0])
    assert features.label_hash_onehot[label_bucket("lbX", 8)] == 1.0
    assert features.label_hash_onehot.sum() == 1.0
    assert features.usage_stats[2] == pytest.approx(1.0)


def test_cutoff_before_release_is_rejected():
    catalog = Catalog()
    catalog.add_album(album("new", "A", RELEASE))
    builder = FeatureBuilder(2, ["g1"], label_buckets=4)
    with pytest.raises(ValidationError):
        builder.build_features(catalog.albums["new"], _store({}), RELEASE - 1, catalog)


def test_label_bucket_is_stable():
    assert label_bucket("lb0001", 64) == label_bucket("lb0001", 64)
    assert 0 <= label_bucket("lb0001", 64) < 64


def test_training_set_respects_cutoff_horizon():
    catalog = Catalog()
    catalog.add_album(album("a", "A", RELEASE))
    store = _store({"a": [1.0, 2.0]})
    builder = FeatureBuilder(2, ["g1"], label_buckets=4)
    dataset = build_training_set(catalog, store, builder, (0, 4, 24, 72), as_of=RELEASE + 24 * HOUR)
    assert len(dataset) == 3
    assert all(np.array_equal(target, [1.0, 2.0]) for _, target in dataset)


# ---------- forward pass ----------

def test_zero_weights_output_bias():
    model = MlpModel.zeros(5, 4, 4, 3)
    model.b3 = np.array([0.1, -0.2, 0.3])
    for x in (np.zeros(5), np.arange(5.0), -np.ones(5)):
        np.testing.assert_array_equal(predict(model, x), [0.1, -0.2, 0.3])


def test_dead_hidden_units_output_bias():
    model = MlpModel.init(3, 4, 4, 2, seed=0)
    model.b1 = np.full(4, -100.0)
    model.w3 = np.zeros((4, 2))
    model.b3 = np.array([1.5, 2.5])
    np.testing.assert_array_equal(predict(model, np.array([0.1, 0.2, 0.3])), [1.5, 2.5])


def test_hand_computed_forward_pass():
    model = MlpModel(
        w1=[[1.0, -1.0], [2.0, 0.0]],
        b1=[0.0, 0.5],
        w2=[[1.0, 2.0], [-1.0, 1.0]],
        b2=[-1.0, 0.0],
        w3=[[0.5, 0.0], [0.0, -0.1]],
        b3=[1.0, 1.0],
    )
    # z1 = [5, -0.5] -> a1 = [5, 0]; z2 = [4, 10]; out = [2, -1] + b3
    np.testing.assert_allclose(predict(model, [1.0, 2.0]), [3.0, 0.0], atol=1e-12)


def test_predict_is_pure():
    model = MlpModel.init(6, 5, 5, 3, seed=2)
    x = np.random.default_rng(0).standard_normal(6)
    before = [p.copy() for p in model.params()]
    assert np.array_equal(predict(model, x), predict(model, x))
    assert all(np.array_equal(a, b) for a, b in zip(before, model.params()))


def test_predict_rejects_wrong_width():
    with pytest.raises(DimensionMismatchError):
        predict(MlpModel.zeros(4, 2, 2, 2), np.zeros(5))


def test_mismatched_layers_are_rejected():
    with pytest.raises(DimensionMismatchError):
        MlpModel(np.zeros((3, 4)), np.zeros(4), np.zeros((5, 2)), np.zeros(2), np.zeros((2, 2)), np.zeros(2))


# ---------- training ----------

def _constant_dataset(n=32, f=6, target=(0.5, -1.0, 2.0), seed=0):
    rng = np.random.default_rng(seed)
    c = np.array(target)
    # small inputs keep the input-dependent part of the initial output small
    return [(0.05 * rng.random(f), c) for _ in range(n)], c


def test_constant_target_is_learned():
    dataset, c = _constant_dataset()
    model, report = train(dataset, TrainParams(lr=1e-2, epochs=200, batch_size=8, hidden=(8, 8)))
    assert report.final_loss < 1e-3
    assert len(report.epoch_losses) == 200
    np.testing.assert_allclose(predict(model, dataset[0][0]), c, atol=0.05)


def test_optimal_bias_only_model_stays_optimal():
    dataset, c = _constant_dataset()
    start = MlpModel.zeros(6, 4, 4, 3)
    start.b3 = c.copy()
    model, report = train(dataset, TrainParams(epochs=5, hidden=(4, 4)), model=start)
    assert report.epoch_losses == [0.0] * 5
    np.testing.assert_array_equal(model.b3, c)


def test_zero_learning_rate_leaves_weights_unchanged():
    dataset, _ = _constant_dataset(n=1)
    start = MlpModel.init(6, 4, 4, 3, seed=5)
    model, _ = train(dataset, TrainParams(lr=0.0, epochs=3, hidden=(4, 4)), model=start)
    for a, b in zip(model.params(), start.params()):
        assert np.array_equal(a, b)


def test_training_is_deterministic():
    dataset, _ = _constant_dataset(seed=3)
    hp = TrainParams(lr=1e-2, epochs=20, batch_size=5, seed=9, hidden=(6, 6))
    _, first = train(dataset, hp)
    _, second = train(dataset, hp)
    np.testing.assert_allclose(first.epoch_losses, second.epoch_losses, rtol=0, atol=1e-12)


def test_empty_dataset_is_rejected():
    with pytest.raises(ValidationError, match="empty dataset"):
        train([])


def test_predictions_beat_shuffled_pairing():
    """Targets from a real factorization; features carry the signal through the artist prior."""
    rng = np.random.default_rng(21)
    n_artists, per_artist, dim = 30, 4, 3
    artist_latent = rng.standard_normal((n_artists, dim))
    album_latent = np.repeat(artist_latent, per_artist, axis=0) + 0.1 * rng.standard_normal(
        (n_artists * per_artist, dim)
    )
    user_latent = rng.standard_normal((60, dim))
    dense = user_latent @ album_latent.T
    album_ids = [f"a{i:03d}" for i in range(len(album_latent))]
    store = truncated_svd(InteractionMatrix.from_dense(dense, album_ids=album_ids), dim)

    catalog = Catalog()
    for i, album_id in enumerate(album_ids):
        catalog.add_album(album(album_id, f"ar{i // per_artist}", RELEASE + (i % per_artist) * DAY))
    builder = FeatureBuilder(dim, ["g1"], label_buckets=4, min_interactions=1)
    dataset = build_training_set(catalog, store, builder, (0,))
    later = [(f, t) for f, t in dataset if f.artist_prior.any()]
    train_set, held_out = later[: len(later) // 2], later[len(later) // 2:]

    model, _ = train(train_set, TrainParams(lr=1e-2, epochs=400, batch_size=8, seed=1, hidden=(32, 32)))

    def cosine(a, b):
        return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b) + 1e-12))

    predicted = [predict(model, f) for f, _ in held_out]
    targets = [t for _, t in held_out]
    matched = np.mean([cosine(p, t) for p, t in zip(predicted, targets)])
    shuffled = np.mean([cosine(p, t) for p, t in zip(predicted, np.roll(np.array(targets), 5, axis=0))])
    assert matched - shuffled >= 0.2


# ---------- gradients ----------

def test_gradient_check_small_model():
    model = MlpModel.init(5, 4, 4, 3, seed=0)
    rng = np.random.default_rng(0)
    assert gradient_check(model, (rng.standard_normal(5), rng.standard_normal(3)), eps=1e-5) < 1e-4


def test_gradient_check_random_shapes():
    rng = np.random.default_rng(2024)
    for case in range(100):
        f = int(rng.integers(5, 65))
        h1, h2 = (int(h) for h in rng.integers(4, 65, size=2))
        d = int(rng.integers(3, 33))
        model = MlpModel.init(f, h1, h2, d, seed=case)
        model.b1 = 0.1 * rng.standard_normal(h1)
        model.b2 = 0.1 * rng.standard_normal(h2)
        example = (rng.standard_normal(f), rng.standard_normal(d))
        assert gradient_check(model, example) < 1e-4, f"case {case}: F={f} h=({h1},{h2}) d={d}"


def test_zero_loss_has_zero_gradient():
    target = np.array([0.3, -0.7, 1.1])
    model = MlpModel.zeros(5, 4, 4, 3)
    model.b3 = target.copy()
    _, grads = loss_and_gradients(model, np.ones((1, 5)), target[None, :])
    assert sum(np.linalg.norm(g) for g in grads) < 1e-10


def test_gradient_check_linear_regime():
    rng = np.random.default_rng(7)
    model = MlpModel(
        w1=rng.uniform(0.1, 1.0, (5, 4)),
        b1=np.full(4, 0.5),
        w2=rng.uniform(0.1, 1.0, (4, 4)),
        b2=np.full(4, 0.5),
        w3=rng.standard_normal((4, 3)),
        b3=np.zeros(3),
    )
    example = (rng.uniform(0.1, 1.0, 5), rng.standard_normal(3))
    assert gradient_check(model, example) < 1e-7
    assert gradient_check(model, example, per_entry=True) < 1e-6


def test_gradient_check_per_entry():
    model = MlpModel.init(5, 4, 4, 3, seed=0)
    rng = np.random.default_rng(0)
    example = (rng.standard_normal(5), rng.standard_normal(3))
    assert gradient_check(model, example, per_entry=True) < 1e-4


def test_per_entry_check_catches_one_wrong_entry(monkeypatch):
    model = MlpModel.init(5, 4, 4, 3, seed=0)
    rng = np.random.default_rng(0)
    example = (rng.standard_normal(5), rng.standard_normal(3))
    exact = coldstart.loss_and_gradients

    def off_by_one_percent(m, x, y):
        loss, grads = exact(m, x, y)
        b3 = grads[-1].copy()
        b3[np.argmax(np.abs(b3))] *= 1.01
        return loss, grads[:-1] + [b3]

    monkeypatch.setattr(coldstart, "loss_and_gradients", off_by_one_percent)
    assert gradient_check(model, example, per_entry=True) == pytest.approx(0.01 / 2.01, rel=1e-3)


# ---------- persistence and refresh ----------

def test_model_round_trip(tmp_path):
    builder = FeatureBuilder(3, ["g1", "g2"], label_buckets=4)
    model = MlpModel.init(builder.n_features, 5, 6, 3, seed=4)
    path = str(tmp_path / "coldstart.bin")
    model.save(path, builder)

    loaded, loaded_builder = MlpModel.load(path)
    assert loaded_builder.genres == ("g1", "g2")
    assert loaded_builder.label_buckets == 4
    assert loaded_builder.dim == 3
    for a, b in zip(loaded.params(), model.params()):
        np.testing.assert_allclose(a, b, atol=1e-6)


def test_model_file_with_bad_magic(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"XXXX" + bytes(60))
    with pytest.raises(FormatError):
        MlpModel.load(str(path))


def _predictor_world():
    catalog = Catalog()
    for i in range(3):
        catalog.add_album(album(f"n{i}", f"ar{i}", RELEASE + i * HOUR))
    catalog.add_album(album("gone", "ar9", RELEASE - 8 * DAY))
    builder = FeatureBuilder(2, ["g1"], label_buckets=4)
    model = MlpModel.init(builder.n_features, 4, 4, 2, seed=0)
    return catalog, builder, model, _store({})


def test_refresh_predicts_every_windowed_album():
    catalog, builder, model, store = _predictor_world()
    predictor = ColdStartPredictor(builder)
    now = RELEASE + 3 * HOUR
    snapshot = predictor.refresh_predictions(model, catalog.new_release_window(now), now, catalog, store)
    assert snapshot.version == 1
    assert snapshot.album_ids == ["n0", "n1", "n2"]
    assert predictor.snapshot is snapshot
    with pytest.raises(TypeError):
        snapshot.predictions["n0"] = np.zeros(2)


def test_refresh_with_empty_window_still_bumps_version():
    catalog, builder, model, store = _predictor_world()
    predictor = ColdStartPredictor(builder)
    predictor.refresh_predictions(model, {"n0"}, RELEASE + HOUR, catalog, store)
    snapshot = predictor.refresh_predictions(model, set(), RELEASE + 30 * DAY, catalog, store)
    assert snapshot.version == 2
    assert dict(snapshot.predictions) == {}


def test_publish_ignores_older_snapshots():
    catalog, builder, model, store = _predictor_world()
    predictor = ColdStartPredictor(builder)
    old = predictor.compute(model, {"n0"}, RELEASE + HOUR, catalog, store)
    newer = predictor.refresh_predictions(model, {"n0", "n1"}, RELEASE + 2 * HOUR, catalog, store)
    predictor.publish(old)
    assert predictor.snapshot is newer
