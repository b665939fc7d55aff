import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from apa.extract import (ConditionImage, ConditionSum, EmptyRegionWarning, FeatureTable, FeatureVector,
                         ProcessedSession, apply_beta_mask, build_feature_table, partition_conditions,
                         pool_atlas_features, scans_for_event, sum_condition)
from apa.glm import OnsetTable, PositiveBetaMaps
from apa.synth import PhantomSpec, generate_phantom
from apa.volume import AtlasVolume, GeometryMismatchError, Volume3D, Volume4D, atlas_from_cubes


def series(N, dims=(2, 2, 2), seed=0):
    return Volume4D(np.random.default_rng(seed).normal(size=(N,) + dims))


def test_cats_and_houses_count():
    events = [(4.0 * i, 2.0, 0, i) for i in range(6)] + [(24.0 + 4.0 * i, 2.0, 1, i) for i in range(5)]
    onsets = OnsetTable(events, 2)
    conds = partition_conditions(series(25), onsets, tr=2.0)
    assert len(conds) == 11
    assert [(c.category_index, c.condition_index) for c in conds] == \
        [(0, q) for q in range(6)] + [(1, q) for q in range(5)]


def test_single_event_takes_every_scan():
    conds = partition_conditions(series(7), OnsetTable([(0.0, 14.0, 0, 0)], 1), tr=2.0)
    assert len(conds) == 1
    assert conds[0].n_scans == 7


def test_phantom_block_sizes_match_event_table():
    spec = PhantomSpec(dims=(6, 6, 6), n_categories=3, events_per_category=4, rng_seed=3)
    ph = generate_phantom(spec)
    conds = partition_conditions(ph.data, ph.onsets, spec.tr)
    assert len(conds) == sum(ph.onsets.conditions_per_category())
    lookup = {(e.category, e.condition): e for e in ph.onsets.events}
    for c in conds:
        e = lookup[(c.category_index, c.condition_index)]
        assert c.n_scans == math.ceil(e.duration / spec.tr)


def test_scan_window_rule():
    # half-open window [onset, onset + duration) on scan times k * tr
    assert scans_for_event(3.0, 4.0, 2.0, 10) == [2, 3]
    assert scans_for_event(4.0, 4.0, 2.0, 10) == [2, 3]
    assert scans_for_event(4.0, 4.0, 2.0, 10, lag_scans=2) == [4, 5]
    assert scans_for_event(16.0, 4.0, 2.0, 10, lag_scans=2) == []


def test_each_scan_in_at_most_one_condition():
    events = [(0.0, 3.0, 0, 0), (3.0, 3.0, 1, 0), (6.0, 2.0, 0, 1)]
    conds = partition_conditions(series(9), OnsetTable(events, 2), tr=1.0)
    used = [k for c in conds for k in c.scan_indices]
    assert sorted(used) == list(range(8))


def test_partition_errors():
    with pytest.raises(ValueError):
        partition_conditions(series(10), OnsetTable([(0.0, 4.0, 0, 0), (2.0, 4.0, 0, 1)], 1), tr=1.0)
    with pytest.raises(ValueError):
        # event between scan times covers no scan
        partition_conditions(series(10), OnsetTable([(0.5, 1.0, 0, 0)], 1), tr=2.0)


def _cond(data):
    data = np.asarray(data, dtype=float)
    return ConditionImage(0, 0, data, (1.0, 1.0, 1.0))


def test_sum_condition_examples():
    one = np.random.default_rng(0).normal(size=(1, 2, 2, 2))
    assert sum_condition(_cond(one)).image.data.tolist() == one[0].tolist()
    const = np.full((3, 2, 2, 2), 2.0)
    assert np.all(sum_condition(_cond(const)).image.data == 6.0)


def test_sum_condition_matches_two_pass_oracle():
    block = np.random.default_rng(1).normal(size=(4, 3, 3, 3))
    expected = np.zeros((3, 3, 3))
    for x in range(3):
        for y in range(3):
            for z in range(3):
                acc = 0.0
                for k in range(4):
                    acc += block[k, x, y, z]
                expected[x, y, z] = acc
    np.testing.assert_allclose(sum_condition(_cond(block)).image.data, expected, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_sum_invariant_to_scan_order(K, seed):
    rng = np.random.default_rng(seed)
    block = rng.integers(-50, 50, size=(K, 2, 3, 2)).astype(float)
    a = sum_condition(_cond(block)).image
    b = sum_condition(_cond(block[rng.permutation(K)])).image
    assert a == b


def _sum(values):
    return ConditionSum(0, 0, Volume3D(np.asarray(values, dtype=float)))


def test_beta_mask_examples():
    rng = np.random.default_rng(2)
    s = rng.normal(size=(3, 3, 3))
    ones = PositiveBetaMaps((Volume3D(np.ones((3, 3, 3))),))
    zeros = PositiveBetaMaps((Volume3D(np.zeros((3, 3, 3))),))
    assert apply_beta_mask(_sum(s), ones).image.data.tolist() == s.tolist()
    assert not apply_beta_mask(_sum(s), zeros).image.data.any()
    m = np.abs(rng.normal(size=(3, 3, 3)))
    out = apply_beta_mask(_sum(s), PositiveBetaMaps((Volume3D(m),))).image.data
    assert out.tolist() == (m * s).tolist()


def test_beta_mask_uses_own_category():
    pos = PositiveBetaMaps((Volume3D(np.zeros((2, 2, 2))), Volume3D(np.ones((2, 2, 2)))))
    s = ConditionSum(1, 3, Volume3D(np.full((2, 2, 2), 4.0)))
    out = apply_beta_mask(s, pos)
    assert (out.category_index, out.condition_index) == (1, 3)
    assert np.all(out.image.data == 4.0)
    with pytest.raises(IndexError):
        apply_beta_mask(ConditionSum(2, 0, s.image), pos)
    with pytest.raises(GeometryMismatchError):
        apply_beta_mask(ConditionSum(0, 0, Volume3D(np.ones((2, 2, 3)))), pos)


def test_pool_constant_image():
    atlas = atlas_from_cubes((6, 6, 6), [((0, 0, 0), (2, 2, 2), 1), ((3, 3, 3), (3, 3, 3), 2)])
    fv = pool_atlas_features(Volume3D(np.full((6, 6, 6), 2.5)), atlas)
    assert fv.values.tolist() == [2.5, 2.5]


def test_pool_planted_cube_means():
    atlas = atlas_from_cubes((8, 8, 8), [((0, 0, 0), (3, 3, 3), 1), ((4, 4, 4), (4, 4, 4), 2)])
    rng = np.random.default_rng(3)
    img = rng.normal(size=(8, 8, 8))
    for label, target in ((1, 3.0), (2, -1.0)):
        sel = atlas.labels == label
        img[sel] += target - img[sel].mean()
    fv = pool_atlas_features(Volume3D(img), atlas)
    np.testing.assert_allclose(fv.values, [3.0, -1.0], atol=1e-12)


def test_pool_large_atlas_length():
    labels = np.arange(1, 1106).reshape(5, 13, 17)
    fv = pool_atlas_features(Volume3D(np.ones((5, 13, 17))), AtlasVolume(labels))
    assert len(fv.values) == 1105


def test_empty_region_is_zero_with_warning():
    labels = np.zeros((4, 4, 4), dtype=int)
    labels[0] = 1
    labels[3] = 3  # label 2 never appears
    with pytest.warns(EmptyRegionWarning):
        fv = pool_atlas_features(Volume3D(np.full((4, 4, 4), 7.0)), AtlasVolume(labels))
    assert fv.values.tolist() == [7.0, 0.0, 7.0]


def test_pool_geometry_mismatch():
    with pytest.raises(GeometryMismatchError):
        pool_atlas_features(Volume3D(np.ones((2, 2, 2))), AtlasVolume(np.ones((2, 2, 3), dtype=int)))


def _session(subject, n_rows, P=2, L=3, session="ses-01"):
    rng = np.random.default_rng(len(subject) + n_rows)
    feats = tuple(FeatureVector(i % P, i // P, subject, rng.normal(size=L), session) for i in range(n_rows))
    return ProcessedSession(subject, session, tuple(f"c{p}" for p in range(P)), "atl", feats)


def test_feature_table_counts():
    assert len(build_feature_table([_session("s1", 11)]).rows) == 11
    merged = build_feature_table([_session("s1", 11), _session("s2", 7)])
    assert len(merged.rows) == 18
    assert set(merged.subjects) == {"s1", "s2"}
    with pytest.raises(ValueError):
        build_feature_table([])


def test_feature_table_rejects_mixed_atlases():
    a = _session("s1", 4)
    b = ProcessedSession("s2", "ses-01", a.categories, "other", a.features)
    with pytest.raises(ValueError):
        build_feature_table([a, b])


def test_feature_table_unifies_category_names():
    a = ProcessedSession("s1", "x", ("house", "cat"), "atl",
                         (FeatureVector(0, 0, "s1", [1.0]), FeatureVector(1, 0, "s1", [2.0])))
    b = ProcessedSession("s2", "x", ("cat", "house"), "atl",
                         (FeatureVector(0, 0, "s2", [3.0]), FeatureVector(1, 0, "s2", [4.0])))
    t = build_feature_table([a, b])
    assert t.categories == ("house", "cat")
    assert t.labels == ["house", "cat", "cat", "house"]


def test_feature_table_csv_round_trip(tmp_path):
    t = build_feature_table([_session("s1", 6), _session("s2", 6)])
    t.to_csv(tmp_path / "f.csv")
    back = FeatureTable.from_csv(tmp_path / "f.csv", categories=t.categories)
    assert back.X.tolist() == t.X.tolist()
    assert back.y.tolist() == t.y.tolist()
    assert back.subjects.tolist() == t.subjects.tolist()


def _features(data, onsets, pos, atlas, tr):
    out = []
    for c in partition_conditions(data, onsets, tr):
        out.append(pool_atlas_features(apply_beta_mask(sum_condition(c), pos).image, atlas).values)
    return np.array(out)


@settings(max_examples=20, deadline=None)
@given(st.floats(-10, 10), st.integers(0, 2**32 - 1))
def test_features_scale_linearly(s, seed):
    rng = np.random.default_rng(seed)
    atlas = atlas_from_cubes((4, 4, 4), [((0, 0, 0), (2, 2, 2), 1), ((2, 2, 2), (2, 2, 2), 2)])
    pos = PositiveBetaMaps(tuple(Volume3D(np.abs(rng.normal(size=(4, 4, 4)))) for _ in range(2)))
    onsets = OnsetTable([(0.0, 2.0, 0, 0), (2.0, 2.0, 1, 0), (4.0, 2.0, 0, 1)], 2)
    data = rng.normal(size=(6, 4, 4, 4))
    base = _features(Volume4D(data), onsets, pos, atlas, 1.0)
    scaled = _features(Volume4D(s * data), onsets, pos, atlas, 1.0)
    np.testing.assert_allclose(scaled, s * base, rtol=1e-12, atol=1e-12)


def test_feature_zero_where_mask_is_zero_over_region():
    rng = np.random.default_rng(7)
    atlas = atlas_from_cubes((4, 4, 4), [((0, 0, 0), (2, 2, 2), 1), ((2, 2, 2), (2, 2, 2), 2)])
    m = np.abs(rng.normal(size=(4, 4, 4)))
    m[atlas.labels == 2] = 0.0
    onsets = OnsetTable([(0.0, 3.0, 0, 0)], 1)
    f = _features(Volume4D(rng.normal(size=(4, 4, 4, 4))), onsets, PositiveBetaMaps((Volume3D(m),)), atlas, 1.0)
    assert f[0, 1] == 0.0
    assert f[0, 0] != 0.0
