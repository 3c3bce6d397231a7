import math

import numpy as np
import pytest
from scipy import sparse

from config import WEEK
from errors import DegenerateMatrixError, FormatError, ValidationError
from services.cf_trainer import (
    EmbeddingStore,
    InteractionMatrix,
    build_matrix,
    ground_truth_for,
    randomized_svd,
    truncated_svd,
)
from storage.models import EventType, UsageEvent

END = 10 * WEEK


def _event(kind, user, album_id, ts):
    return UsageEvent(kind, user, album_id, ts)


def _weight(m: InteractionMatrix, user: str, album_id: str) -> float:
    return m.values[m.user_ids.index(user), m.album_ids.index(album_id)]


# ---------- interaction matrix ----------

def test_three_streams_weight_log_four():
    events = [_event(EventType.STREAM, "u", "a", END - 100 + i) for i in range(3)]
    m = build_matrix(events, END)
    assert _weight(m, "u", "a") == pytest.approx(math.log(4))


def test_single_like_weight_one():
    m = build_matrix([_event(EventType.LIKE, "u", "a", END - 1)], END, like_weight=1.0)
    assert _weight(m, "u", "a") == pytest.approx(1.0)


def test_like_weight_scales_likes():
    events = [_event(EventType.STREAM, "u", "a", END - 5), _event(EventType.LIKE, "u", "a", END - 4)]
    m = build_matrix(events, END, like_weight=2.5)
    assert _weight(m, "u", "a") == pytest.approx(math.log(2) + 2.5)


def test_events_outside_window_are_excluded():
    events = [
        _event(EventType.STREAM, "u", "in", END - WEEK),
        _event(EventType.STREAM, "u", "before", END - WEEK - 1),
        _event(EventType.STREAM, "u", "at_end", END),
        _event(EventType.FAVORITE_ARTIST_ADD, "u", "artist", END - 10),
    ]
    m = build_matrix(events, END)
    assert m.album_ids == ("in",)
    assert m.shape == (1, 1)


def test_support_counts_distinct_users():
    events = [_event(EventType.STREAM, f"u{i}", "a", END - 10) for i in range(4)]
    events.append(_event(EventType.STREAM, "u0", "a", END - 9))
    m = build_matrix(events, END)
    assert m.support == {"a": 4}


# ---------- randomized SVD ----------

def test_identity_singular_values():
    _, s, _ = randomized_svd(np.eye(2), 2)
    np.testing.assert_allclose(s, [1.0, 1.0], rtol=1e-12)


def test_diagonal_axis_aligned_factors():
    u, s, vt = randomized_svd(np.diag([3.0, 2.0]), 2)
    np.testing.assert_allclose(s, [3.0, 2.0], rtol=1e-12)
    np.testing.assert_allclose(np.abs(u), np.eye(2), atol=1e-10)
    np.testing.assert_allclose(np.abs(vt), np.eye(2), atol=1e-10)


def test_exact_rank_three_reconstruction():
    rng = np.random.default_rng(3)
    a = rng.standard_normal((20, 3)) @ rng.standard_normal((3, 15))
    u, s, vt = randomized_svd(a, 3)
    assert np.linalg.norm(u @ np.diag(s) @ vt - a) < 1e-6


def test_matches_dense_decomposition_on_random_matrices():
    rng = np.random.default_rng(11)
    for case in range(50):
        rows, cols = rng.integers(2, 65, size=2)
        d = int(rng.integers(1, min(rows, cols) + 1))
        a = rng.standard_normal((rows, cols))
        u, s, vt = randomized_svd(a, d, seed=case)

        expected = np.linalg.svd(a, compute_uv=False)[:d]
        np.testing.assert_allclose(s, expected, rtol=1e-6)
        np.testing.assert_allclose(u.T @ u, np.eye(d), atol=1e-6)
        np.testing.assert_allclose(vt @ vt.T, np.eye(d), atol=1e-6)


def test_accepts_sparse_input():
    rng = np.random.default_rng(5)
    dense = rng.standard_normal((30, 12)) * (rng.random((30, 12)) < 0.3)
    _, s_sparse, _ = randomized_svd(sparse.csr_matrix(dense), 4)
    _, s_dense, _ = randomized_svd(dense, 4)
    np.testing.assert_allclose(s_sparse, s_dense, rtol=1e-9)


def test_sign_convention():
    rng = np.random.default_rng(8)
    u, _, _ = randomized_svd(rng.standard_normal((10, 8)), 4)
    pivots = np.argmax(np.abs(u), axis=0)
    assert np.all(u[pivots, np.arange(4)] > 0)


def test_deterministic_for_seed():
    a = np.random.default_rng(2).standard_normal((25, 18))
    first = randomized_svd(a, 5, seed=4)
    second = randomized_svd(a, 5, seed=4)
    for x, y in zip(first, second):
        assert np.array_equal(x, y)


def test_all_zero_matrix_is_degenerate():
    with pytest.raises(DegenerateMatrixError, match="degenerate matrix"):
        randomized_svd(np.zeros((4, 4)), 2)


def test_rank_larger_than_matrix():
    with pytest.raises(ValidationError):
        randomized_svd(np.eye(3), 4)


# ---------- truncated_svd / store ----------

def test_sqrt_sigma_split_reconstructs_matrix():
    rng = np.random.default_rng(9)
    dense = rng.random((6, 5))
    store = truncated_svd(InteractionMatrix.from_dense(dense), 5, version=3, trained_until=77)
    np.testing.assert_allclose(store.user_matrix @ store.album_matrix.T, dense, atol=1e-8)
    assert store.version == 3
    assert store.trained_until == 77
    u0 = store.user_vec(store.user_ids[0])
    np.testing.assert_allclose(u0, store.user_matrix[0])
    assert store.user_vec("ghost") is None


def test_store_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    store = truncated_svd(InteractionMatrix.from_dense(rng.random((5, 4))), 3, version=2, trained_until=12)
    path = str(tmp_path / "embeddings.bin")
    store.save(path)

    loaded = EmbeddingStore.load(path)
    assert loaded.user_ids == store.user_ids
    assert loaded.album_ids == store.album_ids
    assert loaded.support == store.support
    assert (loaded.version, loaded.trained_until, loaded.dim) == (2, 12, 3)
    np.testing.assert_allclose(loaded.album_matrix, store.album_matrix, atol=1e-6)
    np.testing.assert_allclose(loaded.singular_values, store.singular_values)


def test_store_rejects_foreign_file(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"NOPE" + bytes(40))
    with pytest.raises(FormatError):
        EmbeddingStore.load(str(path))


@pytest.mark.parametrize("users, present", [(50, True), (0, False), (10, True), (9, False)])
def test_ground_truth_threshold(users, present):
    store = EmbeddingStore(
        dim=2,
        user_ids=(),
        user_matrix=np.zeros((0, 2)),
        album_ids=("a",),
        album_matrix=np.array([[1.0, 2.0]]),
        singular_values=np.ones(2),
        support={"a": users},
    )
    vec = ground_truth_for("a", store, min_interactions=10)
    assert (vec is not None) is present
    assert ground_truth_for("unknown", store) is None
