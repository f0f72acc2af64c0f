import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import listing_postprocess, random_relation
from trackpool.aggregator import AggregationResult
from trackpool.encoder import EncoderConfig
from trackpool.linalg import ShapeError
from trackpool.model import aggregate_track, init_model
from trackpool.multi_identity import (
    TrackConsistencyError,
    TrackSet,
    aggregate_multi,
    build_mask,
    calibrate_threshold,
    extract_tracks,
    greedy_postprocess,
    select_component,
)

HAND_MASK = np.array([[1, 1, 0], [1, 1, 0], [0, 0, 1]])
HAND_NORMS = np.array([1.0, 2.0, 0.5])


def small_model(d=4, seed=0):
    return init_model(EncoderConfig(d, num_heads=2, num_blocks=1), seed=seed)


def test_build_mask_examples():
    np.testing.assert_array_equal(build_mask([[0.3, 0.4]], 0.5), [[1]])
    np.testing.assert_array_equal(build_mask([[1, 0], [1, 0], [0, 1]], 0.5), HAND_MASK)
    x = np.random.default_rng(0).standard_normal((9, 6))
    np.testing.assert_array_equal(build_mask(x, 2.0), np.ones((9, 9)))


def test_build_mask_zero_frame_names_index():
    with pytest.raises(ValueError, match="frame 2"):
        build_mask([[1, 0], [0, 1], [0, 0]])


def test_build_mask_counts_each_pair_once():
    x = np.random.default_rng(1).standard_normal((12, 5))
    mask = build_mask(x, 0.9)
    np.testing.assert_array_equal(mask, mask.T)
    np.testing.assert_array_equal(np.diag(mask), 1)
    unit = x / np.linalg.norm(x, axis=1, keepdims=True)
    for i in range(12):
        for j in range(i + 1, 12):
            assert mask[i, j] == int(1 - unit[i] @ unit[j] <= 0.9)


def test_hand_trace():
    out = greedy_postprocess(HAND_MASK, HAND_NORMS)
    np.testing.assert_array_equal(out[1], [1, 1, 0])
    np.testing.assert_array_equal(out[0], [0, 0, 0])
    np.testing.assert_array_equal(out[2], [0, 0, 1])
    np.testing.assert_array_equal(out, listing_postprocess(HAND_MASK, HAND_NORMS))
    tracks = extract_tracks(out)
    assert tracks.k == 2
    assert [m.tolist() for m in tracks.tracks] == [[0, 1], [2]]


def test_identity_mask_unchanged():
    eye = np.eye(6, dtype=np.int8)
    np.testing.assert_array_equal(greedy_postprocess(eye, np.arange(6.0)), eye)
    assert [m.tolist() for m in extract_tracks(eye).tracks] == [[i] for i in range(6)]


def test_all_ones_claimed_by_highest_norm():
    norms = np.array([0.2, 0.9, 3.0, 1.0])
    out = greedy_postprocess(np.ones((4, 4), dtype=np.int8), norms)
    expected = np.zeros((4, 4), dtype=np.int8)
    expected[2] = 1
    np.testing.assert_array_equal(out, expected)
    assert [m.tolist() for m in extract_tracks(out).tracks] == [[0, 1, 2, 3]]


def test_ties_resolved_by_lower_index():
    out = greedy_postprocess(np.ones((3, 3), dtype=np.int8), [1.0, 1.0, 1.0])
    np.testing.assert_array_equal(out[0], [1, 1, 1])
    np.testing.assert_array_equal(out[1:], 0)


def test_length_mismatch():
    with pytest.raises(ShapeError):
        greedy_postprocess(np.eye(3), [1.0, 2.0])


def test_extract_rejects_overlap():
    with pytest.raises(TrackConsistencyError):
        extract_tracks(np.array([[1, 1], [0, 1]]))


def test_random_masks_match_listing_and_partition():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        n = int(rng.integers(1, 33))
        mask = random_relation(rng, n)
        norms = rng.random(n) * 3
        out = greedy_postprocess(mask, norms)
        np.testing.assert_array_equal(out, listing_postprocess(mask, norms))
        claimed = out.sum(axis=0)
        assert np.all(claimed <= 1)
        covered = np.concatenate(extract_tracks(out).tracks)
        assert sorted(covered.tolist()) == np.flatnonzero(claimed).tolist()


@settings(max_examples=50)
@given(st.lists(st.integers(1, 6), min_size=1, max_size=6), st.integers(0, 2**32 - 1))
def test_ground_truth_block_mask_recovers_k(sizes, seed):
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.repeat(np.arange(len(sizes)), sizes))
    mask = (labels[:, None] == labels[None, :]).astype(np.int8)
    tracks = extract_tracks(greedy_postprocess(mask, rng.random(labels.size)))
    assert tracks.k == len(sizes)
    for members in tracks.tracks:
        assert len(set(labels[members])) == 1
        assert np.all(np.diff(members) > 0)


def test_aggregate_multi_identical_frames():
    frame = np.array([0.1, 0.7, -0.2, 0.4])
    results, tracks = aggregate_multi(np.tile(frame, (5, 1)), small_model())
    assert tracks.k == 1
    np.testing.assert_allclose(results[0].r, frame, atol=1e-15)


def test_aggregate_multi_single_frame():
    frame = np.array([[0.1, 0.7, -0.2, 0.4]])
    results, tracks = aggregate_multi(frame, small_model())
    assert tracks.k == 1
    np.testing.assert_array_equal(results[0].r, frame[0])


def test_aggregate_multi_two_orthogonal_clusters():
    rng = np.random.default_rng(3)
    a = np.array([1.0, 0, 0, 0]) + 0.01 * rng.standard_normal((4, 4))
    b = np.array([0, 0, 1.0, 0]) + 0.01 * rng.standard_normal((3, 4))
    x = np.vstack([a[:2], b[:2], a[2:], b[2:]])
    model = small_model()
    results, tracks = aggregate_multi(x, model, threshold=0.5)
    assert tracks.k == 2
    groups = sorted(tracks.tracks, key=lambda m: m[0])
    assert [m.tolist() for m in groups] == [[0, 1, 4, 5], [2, 3, 6]]
    for res, members in zip(results, tracks.tracks):
        np.testing.assert_allclose(res.r, aggregate_track(model, x[members]).r, atol=1e-12)


def test_aggregate_multi_frame_order():
    x = np.array([[1.0, 0, 0, 0], [1.0, 0.1, 0, 0], [0.9, 0, 0.1, 0]])
    _, tracks = aggregate_multi(x, small_model(), frame_order=[2, 0, 1])
    assert tracks.tracks[0].tolist() == [1, 2, 0]


def _result(v):
    v = np.asarray(v, dtype=float)
    return AggregationResult(r=v, q=np.ones((1, 1)), s=np.zeros((1, 1)))


def test_select_component_examples():
    single = [_result([1.0, 0.0])]
    one = TrackSet([np.array([0, 1])], 2)
    assert select_component(single, one, np.ones((2, 2))) is single[0]

    x = np.array([[1.0, 0], [1.0, 0], [2.0, 0], [0, 5.0]])
    tracks = TrackSet([np.array([0, 1, 2]), np.array([3])], 4)
    results = [_result([1, 0]), _result([0, 1])]
    assert select_component(results, tracks, x, "biggest") is results[0]
    assert select_component(results, tracks, x, "highest_norm") is results[1]

    tie = TrackSet([np.array([0]), np.array([1])], 2)
    assert select_component(results, tie, np.eye(2), "biggest") is results[0]
    with pytest.raises(ValueError):
        select_component([], TrackSet([], 0), np.ones((0, 2)))
    with pytest.raises(ValueError):
        select_component(results, tracks, x, "first")


def test_calibrate_threshold_prefers_exact_counts():
    rng = np.random.default_rng(4)
    videos = []
    for k in (2, 3, 4):
        centers = np.eye(8)[:k]
        x = np.repeat(centers, 5, axis=0) + 0.02 * rng.standard_normal((5 * k, 8))
        videos.append((x, k))
    threshold, mpe = calibrate_threshold(videos)
    assert mpe == 0.0
    assert threshold == pytest.approx(0.7)
