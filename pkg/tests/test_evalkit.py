import statistics

import numpy as np
import pytest

from aanet.alignment import dalf_distance
from aanet.descriptor import downsample_grid, gem_pool, global_distance
from aanet.evalkit import (
    AliasedSpec,
    GroundTruth,
    SyntheticSpec,
    bench_alignment,
    generate_aliased,
    generate_synthetic,
    grid_to_map,
    ground_truth_from_geotags,
    pr_csv,
    pr_curve,
    random_grid,
    recall_at_n,
    recall_csv,
    write_synthetic,
)
from aanet.retrieval import RetrievalRecord, build_index, retrieve
from aanet.tensorio import (
    FrameIndex,
    GeoPosition,
    load_feature_map,
    read_manifest,
)


def _record(query_id, ranking, distances=None):
    stage1 = tuple((i, 0.1 * (k + 1)) for k, i in enumerate(ranking))
    if distances is None:
        distances = [0.05 * (k + 1) for k in range(len(ranking))]
    stage2 = tuple(zip(ranking, distances))
    return RetrievalRecord(query_id, stage1, stage2, k_rerank=len(ranking))


# --- recall ----------------------------------------------------------------


def test_recall_all_top1_correct():
    gt = GroundTruth({f"q{k}": frozenset({f"d{k}"}) for k in range(4)})
    records = [_record(f"q{k}", (f"d{k}", "x")) for k in range(4)]
    gt.truths.update({"x": frozenset()})
    assert recall_at_n(records, gt, [1]) == {1: 100.0}


def test_recall_no_true_positive_found():
    gt = GroundTruth({"q0": frozenset({"right"})})
    records = [_record("q0", ("wrong1", "wrong2"))]
    assert recall_at_n(records, gt, [1, 2]) == {1: 0.0, 2: 0.0}


def test_recall_hand_counted_fixture():
    # 10 queries: 7 hit at rank 1, 2 more only by rank 5, 1 never.
    records = []
    gt = {}
    for k in range(7):
        records.append(_record(f"q{k}", (f"d{k}", "z1", "z2", "z3", "z4")))
        gt[f"q{k}"] = frozenset({f"d{k}"})
    for k in range(7, 9):
        records.append(_record(f"q{k}", ("z1", "z2", "z3", "z4", f"d{k}")))
        gt[f"q{k}"] = frozenset({f"d{k}"})
    records.append(_record("q9", ("z1", "z2", "z3", "z4", "z5")))
    gt["q9"] = frozenset({"unreachable"})
    recalls = recall_at_n(records, GroundTruth(gt), [1, 5, 10])
    assert recalls == {1: 70.0, 5: 90.0, 10: 90.0}


def test_recall_monotone_in_n():
    rng = np.random.default_rng(0)
    ids = [f"d{k}" for k in range(20)]
    records, gt = [], {}
    for k in range(15):
        ranking = list(rng.permutation(ids))
        records.append(_record(f"q{k}", tuple(ranking)))
        gt[f"q{k}"] = frozenset(rng.choice(ids, size=2, replace=False))
    recalls = recall_at_n(records, GroundTruth(gt), list(range(1, 21)))
    values = [recalls[n] for n in range(1, 21)]
    assert values == sorted(values)
    assert values[-1] == 100.0  # truth present somewhere in a full ranking


def test_recall_excludes_empty_ground_truth():
    gt = GroundTruth({"a": frozenset({"d0"}), "b": frozenset()})
    records = [_record("a", ("d0",)), _record("b", ("d0",))]
    assert recall_at_n(records, gt, [1]) == {1: 100.0}
    with pytest.raises(ValueError):
        recall_at_n(records, GroundTruth({}), [1])


def test_ground_truth_from_geotags(tmp_path):
    from aanet.tensorio import FeatureSetManifest, ManifestEntry

    entries = (
        ManifestEntry("d0", tmp_path / "d0", "database", GeoPosition(0.0, 0.0)),
        ManifestEntry("d1", tmp_path / "d1", "database", GeoPosition(24.0, 0.0)),
        ManifestEntry("d2", tmp_path / "d2", "database", GeoPosition(26.0, 0.0)),
        ManifestEntry("q0", tmp_path / "q0", "query", GeoPosition(0.0, 0.0)),
    )
    gt = ground_truth_from_geotags(FeatureSetManifest(entries))
    assert gt.positives("q0") == {"d0", "d1"}
    frame_entries = (
        ManifestEntry("f1", tmp_path / "f1", "database", FrameIndex(1)),
        ManifestEntry("f4", tmp_path / "f4", "database", FrameIndex(4)),
        ManifestEntry("f5", tmp_path / "f5", "database", FrameIndex(5)),
        ManifestEntry("q", tmp_path / "q", "query", FrameIndex(2)),
    )
    gt = ground_truth_from_geotags(FeatureSetManifest(frame_entries))
    assert gt.positives("q") == {"f1", "f4"}  # +-2 frames inclusive


# --- PR curve --------------------------------------------------------------


def test_pr_perfect_separation_reaches_one_one():
    gt = GroundTruth({f"q{k}": frozenset({f"d{k}"}) for k in range(4)})
    records = [
        _record(f"q{k}", (f"d{k}", "x"), distances=[0.1, 0.2]) for k in range(4)
    ]
    points = pr_curve(records, gt)
    assert points[-1] == (pytest.approx(0.1), 1.0, 1.0)


def test_pr_below_minimum_threshold_convention():
    gt = GroundTruth({"q": frozenset({"d"})})
    records = [_record("q", ("d",), distances=[0.5])]
    points = pr_curve(records, gt, thresholds=[0.1])
    assert points == [(0.1, 1.0, 0.0)]


def test_pr_hand_computed_five_queries():
    # distances: correct at 0.1, 0.2, 0.4; wrong at 0.3, 0.5
    gt = GroundTruth({f"q{k}": frozenset({"right"}) for k in range(5)})
    tops = [("right", 0.1), ("right", 0.2), ("wrong", 0.3), ("right", 0.4), ("wrong", 0.5)]
    records = []
    for k, (top, dist) in enumerate(tops):
        stage1 = ((top, 0.0), ("filler", 1.0))
        records.append(RetrievalRecord(f"q{k}", stage1, ((top, dist),), 1))
    points = pr_curve(records, gt)
    expected = [
        (0.1, 1.0, 0.2),
        (0.2, 1.0, 0.4),
        (0.3, 2 / 3, 0.4),
        (0.4, 3 / 4, 0.6),
        (0.5, 3 / 5, 0.6),
    ]
    for (t, p, r), (et, ep, er) in zip(points, expected):
        assert (t, p, r) == (pytest.approx(et), pytest.approx(ep), pytest.approx(er))
    recalls = [r for _, _, r in points]
    assert recalls == sorted(recalls)  # recall monotone as threshold grows


def test_csv_formats():
    out = recall_csv({1: 70.0, 5: 90.0})
    assert out.splitlines()[0] == "metric,N,value"
    assert "recall,1,70.0" in out
    pr = pr_csv([(0.1, 1.0, 0.5)])
    assert pr.splitlines()[0] == "threshold,precision,recall"
    assert pr.splitlines()[1] == "0.1,1.0,0.5"


# --- synthetic generation --------------------------------------------------


def test_synthetic_zero_shift_zero_noise_is_identity():
    spec = SyntheticSpec(
        n=4, channels=8, database_size=6, num_queries=3,
        shift_cols=(0, 0), shift_rows=(0, 0), sigma=0.0, seed=1,
    )
    synth = generate_synthetic(spec)
    db = dict(synth.database)
    for q in synth.queries:
        assert np.array_equal(q.grid.cells, db[q.source_id].cells)
    gt = synth.ground_truth()
    assert gt.positives("q0000") == {"db0000"}


def test_synthetic_deterministic_under_seed():
    spec = SyntheticSpec(n=4, channels=8, database_size=5, num_queries=2, seed=9)
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    for (ia, ga), (ib, gb) in zip(a.database, b.database):
        assert ia == ib and ga.cells.tobytes() == gb.cells.tobytes()
    for qa, qb in zip(a.queries, b.queries):
        assert qa.grid.cells.tobytes() == qb.grid.cells.tobytes()
        assert (qa.shift_col, qa.shift_row) == (qb.shift_col, qb.shift_row)


def test_synthetic_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(n=4, shift_cols=(0, 4))
    with pytest.raises(ValueError):
        SyntheticSpec(sigma=-0.1)
    with pytest.raises(ValueError):
        SyntheticSpec(database_size=3, num_queries=4)


def test_grid_to_map_round_trips_through_downsample():
    rng = np.random.default_rng(3)
    grid = random_grid(rng, 4, 8)
    back = downsample_grid(grid_to_map(grid))
    assert np.allclose(back.cells, grid.cells, atol=1e-6)


def test_write_synthetic_files_and_geotag_ground_truth(tmp_path):
    spec = SyntheticSpec(
        n=4, channels=8, database_size=5, num_queries=3,
        shift_cols=(0, 1), shift_rows=(0, 0), sigma=0.01, seed=4,
    )
    synth = generate_synthetic(spec)
    manifest_path = write_synthetic(synth, tmp_path)
    manifest = read_manifest(manifest_path)
    assert len(manifest.database_entries()) == 5
    assert len(manifest.query_entries()) == 3
    for entry in manifest.entries:
        fmap = load_feature_map(entry.path)
        assert (fmap.height, fmap.width, fmap.channels) == (12, 12, 8)
    gt = ground_truth_from_geotags(manifest)
    assert gt.truths == synth.ground_truth().truths
    # write determinism: byte-identical on a second emission
    again = tmp_path / "again"
    write_synthetic(synth, again)
    for entry in manifest.entries:
        a = entry.path.read_bytes()
        b = (again / entry.path.name).read_bytes()
        assert a == b


def test_synthetic_shift_recovery_small_scale():
    spec = SyntheticSpec(
        n=8, channels=64, database_size=30, num_queries=30,
        shift_cols=(1, 2), shift_rows=(0, 0), sigma=0.02, seed=5,
    )
    synth = generate_synthetic(spec)
    db = dict(synth.database)
    hits = 0
    for q in synth.queries:
        result = dalf_distance(db[q.source_id], q.grid)
        offsets = [i - min(result.x[i]) for i in range(1, 9)]
        hits += statistics.median(offsets) == q.shift_col
    assert hits >= 27  # >= 90% even at reduced channel count


def test_synthetic_vertical_shift_recovery():
    spec = SyntheticSpec(
        n=8, channels=64, database_size=10, num_queries=10,
        shift_cols=(0, 0), shift_rows=(1, 2), sigma=0.01, seed=6,
    )
    synth = generate_synthetic(spec)
    db = dict(synth.database)
    for q in synth.queries:
        result = dalf_distance(db[q.source_id], q.grid)
        offsets = [j - min(result.y[j]) for j in range(1, 9)]
        assert statistics.median(offsets) == q.shift_row


def test_retrieve_on_identity_synthetic_gives_full_recall(tmp_path):
    spec = SyntheticSpec(
        n=4, channels=8, database_size=6, num_queries=4,
        shift_cols=(0, 0), shift_rows=(0, 0), sigma=0.0, seed=7,
    )
    synth = generate_synthetic(spec)
    manifest = read_manifest(write_synthetic(synth, tmp_path))
    index = build_index(manifest)
    records = [
        retrieve(index, load_feature_map(e.path), k_rerank=3, query_id=e.image_id)
        for e in manifest.query_entries()
    ]
    gt = ground_truth_from_geotags(manifest)
    assert recall_at_n(records, gt, [1]) == {1: 100.0}


# --- aliased set -----------------------------------------------------------


def test_aliased_set_geometry():
    spec = AliasedSpec(n=8, channels=64, num_places=5, seed=8)
    synth = generate_aliased(spec)
    assert len(synth.database) == 10
    db = dict(synth.database)
    for q in synth.queries:
        twin_id = q.source_id.replace("src", "twin")
        d_src = gem_pool(grid_to_map(db[q.source_id]))
        d_twin = gem_pool(grid_to_map(db[twin_id]))
        d_query = gem_pool(grid_to_map(q.grid))
        # twin and source are globally confusable relative to other places
        assert global_distance(d_src, d_twin) < 0.05
        l_src = dalf_distance(db[q.source_id], q.grid).local_distance
        l_twin = dalf_distance(db[twin_id], q.grid).local_distance
        assert l_src < 0.5 * l_twin
        assert global_distance(d_query, d_src) < 0.5


# --- benchmark -------------------------------------------------------------


def test_bench_alignment_smoke():
    result = bench_alignment(3, n=4, channels=8, repetitions=2, seed=0)
    assert result.dalf_passes_per_pair == 2
    assert result.naive_passes_per_pair == 17
    assert result.dalf_ns_per_pair > 0 and result.naive_ns_per_pair > 0
    assert result.ratio > 0


def test_bench_alignment_degenerate_n1():
    result = bench_alignment(2, n=1, channels=4, repetitions=1, seed=1)
    assert result.dalf_passes_per_pair == 2
    assert result.naive_passes_per_pair == 2  # N*N + 1
    with pytest.raises(ValueError):
        bench_alignment(0)
