"""Acceptance suite: one test per criterion, one printed line each.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines. The quantitative thresholds (recovery rates, accuracy deltas,
wall-clock ratio and budgets) are frozen here and must not be loosened.
"""

import io
import math
import statistics
import time
from contextlib import contextmanager

import numpy as np

from aanet.alignment import (
    count_dtw_passes,
    dalf_distance,
    dtw_align,
    naive_grid_align,
    normalized_dtw_align,
)
from aanet.descriptor import gem_pool
from aanet.evalkit import (
    AliasedSpec,
    GroundTruth,
    SyntheticSpec,
    bench_alignment,
    generate_aliased,
    generate_synthetic,
    grid_to_map,
    random_grid,
    recall_at_n,
)
from aanet.mining import (
    MiningConfig,
    RankPair,
    hinge_sum,
    joint_loss,
    select_semi_hard_positive,
    triplet_loss_global,
)
from aanet.retrieval import (
    DescriptorIndex,
    RetrievalRecord,
    retrieve_features,
)
from aanet.tensorio import FeatureMap, read_feature_map, write_feature_map

from oracles import min_path_total, normalized_recursion


@contextmanager
def criterion(name):
    try:
        yield
    except BaseException:
        print(f"[FAIL] {name}")
        raise
    print(f"[PASS] {name}")


def test_dtw_oracle_equivalence():
    with criterion("DTW total equals exhaustive path enumeration (1000 matrices)"):
        rng = np.random.default_rng(100)
        start = time.monotonic()
        for _ in range(1000):
            n = int(rng.integers(2, 7))
            d = rng.uniform(0.0, 3.0, size=(n, n))
            _, total = dtw_align(d)
            assert abs(total - min_path_total(d)) <= 1e-9
        elapsed = time.monotonic() - start
        assert elapsed < 10.0, f"took {elapsed:.1f}s"


def test_normalized_dtw_recursion_equivalence():
    with criterion("normalized DTW matches direct recursion cell-for-cell (1000 matrices)"):
        rng = np.random.default_rng(101)
        start = time.monotonic()
        for _ in range(1000):
            n = int(rng.integers(2, 9))
            d = rng.uniform(0.0, 3.0, size=(n, n))
            _, cum = normalized_dtw_align(d)
            s, length, pred = normalized_recursion(d)
            assert np.array_equal(cum.s, s.astype(np.float32))
            assert np.array_equal(cum.length, length)
            assert np.array_equal(cum.pred, pred)
        elapsed = time.monotonic() - start
        assert elapsed < 10.0, f"took {elapsed:.1f}s"


def test_path_legality_on_10000_instances():
    with criterion("path legality on 10,000 random instances, both variants"):
        rng = np.random.default_rng(102)
        for _ in range(10_000):
            n = int(rng.integers(2, 9))
            d = rng.uniform(0.0, 3.0, size=(n, n))
            for path in (dtw_align(d)[0], normalized_dtw_align(d)[0]):
                points = path.points
                assert points[0] == (1, 1) and points[-1] == (n, n)
                assert n <= len(points) <= 2 * n - 1
                for (a, b), (c, e) in zip(points, points[1:]):
                    assert (c - a, e - b) in ((1, 0), (0, 1), (1, 1))


def test_dalf_identity_and_shift_recovery():
    with criterion("DALF identity d_L(x,x)=0 (100 grids) and >=90% shift recovery"):
        rng = np.random.default_rng(103)
        for _ in range(100):
            n = int(rng.integers(2, 9))
            grid = random_grid(rng, n, 16)
            result = dalf_distance(grid, grid)
            assert result.local_distance == 0.0
            assert all(result.x[i] == (i,) for i in range(1, n + 1))
            assert all(result.y[j] == (j,) for j in range(1, n + 1))

        spec = SyntheticSpec(
            n=8, channels=384, database_size=200, num_queries=200,
            shift_cols=(1, 2), shift_rows=(0, 0), sigma=0.05, seed=7,
        )
        synth = generate_synthetic(spec)
        database = dict(synth.database)
        recovered = 0
        for q in synth.queries:
            result = dalf_distance(database[q.source_id], q.grid)
            offsets = [i - min(result.x[i]) for i in range(1, 9)]
            recovered += statistics.median(offsets) == q.shift_col
        assert recovered >= 0.9 * len(synth.queries), f"{recovered}/200 recovered"


def test_two_stage_correction_on_aliased_set():
    with criterion("stage-2 top-1 beats stage-1 by >=20 points (stage-1 <=60%)"):
        spec = AliasedSpec(n=8, channels=384, num_places=200, seed=2)
        synth = generate_aliased(spec)
        ids = [i for i, _ in synth.database]
        descriptors = np.stack(
            [gem_pool(grid_to_map(g)).values for _, g in synth.database]
        )
        index = DescriptorIndex(tuple(ids), descriptors, dict(synth.database))
        stage1_hits = stage2_hits = 0
        for q in synth.queries:
            record = retrieve_features(
                index,
                gem_pool(grid_to_map(q.grid)),
                q.grid,
                k_rerank=20,
                query_id=q.query_id,
            )
            stage1_hits += record.stage1[0][0] == q.source_id
            stage2_hits += record.stage2[0][0] == q.source_id
        n_q = len(synth.queries)
        stage1_acc = 100.0 * stage1_hits / n_q
        stage2_acc = 100.0 * stage2_hits / n_q
        assert stage1_acc <= 60.0, f"stage-1 {stage1_acc:.1f}% not confusable enough"
        assert stage2_acc - stage1_acc >= 20.0, (
            f"stage-2 {stage2_acc:.1f}% vs stage-1 {stage1_acc:.1f}%"
        )


def test_efficiency_pass_counts_and_wall_clock_ratio():
    with criterion("2 vs 65 DTW passes and naive/DALF wall-clock ratio > 10"):
        start = time.monotonic()
        rng = np.random.default_rng(104)
        r, q = random_grid(rng, 8, 384), random_grid(rng, 8, 384)
        with count_dtw_passes() as passes:
            dalf_distance(r, q)
        assert passes.count == 2
        with count_dtw_passes() as passes:
            _, reported = naive_grid_align(r, q)
        assert passes.count == 65 and reported == 65

        result = bench_alignment(1000, n=8, channels=384, repetitions=5, seed=0)
        assert result.dalf_passes_per_pair == 2
        assert result.naive_passes_per_pair == 65
        assert result.ratio > 10.0, f"ratio {result.ratio:.2f}"
        elapsed = time.monotonic() - start
        assert elapsed < 60.0, f"took {elapsed:.1f}s"


def test_semi_hard_selection_worked_example_and_invariance():
    with criterion("Eq.-7 selection: worked example and monotone-transform invariance"):
        pairs = [RankPair("a", 1, 9), RankPair("b", 2, 2), RankPair("c", 8, 1)]
        chosen = select_semi_hard_positive(pairs, MiningConfig(k=2, k_prime=2))
        assert chosen.image_id == "a"

        rng = np.random.default_rng(105)
        ids = [f"p{k}" for k in range(10)]
        cfg = MiningConfig(k=3, k_prime=3)

        def ranks(dists):
            order = sorted(ids, key=lambda i: (dists[i], i))
            return {i: order.index(i) + 1 for i in ids}

        for _ in range(100):
            d_g = {i: float(rng.uniform(0.01, 2.0)) for i in ids}
            d_l = {i: float(rng.uniform(0.01, 2.0)) for i in ids}
            rg, rl = ranks(d_g), ranks(d_l)
            base = select_semi_hard_positive(
                [RankPair(i, rg[i], rl[i]) for i in ids], cfg
            )
            wg = ranks({i: math.exp(1.7 * v) for i, v in d_g.items()})
            wl = ranks({i: v**3 + 0.5 for i, v in d_l.items()})
            warped = select_semi_hard_positive(
                [RankPair(i, wg[i], wl[i]) for i in ids], cfg
            )
            assert warped.image_id == base.image_id


def test_loss_arithmetic_against_scalar_oracle():
    with criterion("triplet/joint losses match scalar oracle within 1e-9 (1000 triplets)"):
        rng = np.random.default_rng(106)
        for _ in range(1000):
            m = float(rng.uniform(0.01, 0.5))
            lam = float(rng.uniform(0.0, 2.0))
            d_pos_g = float(rng.uniform(0.0, 2.0))
            d_pos_l = float(rng.uniform(0.0, 2.0))
            d_negs_g = [float(v) for v in rng.uniform(0.0, 2.0, size=3)]
            d_negs_l = [float(v) for v in rng.uniform(0.0, 2.0, size=3)]
            l_g = hinge_sum(d_pos_g, d_negs_g, m)
            l_l = hinge_sum(d_pos_l, d_negs_l, m)
            oracle_g = sum(max(0.0, d_pos_g + m - d_n) for d_n in d_negs_g)
            oracle_l = sum(max(0.0, d_pos_l + m - d_n) for d_n in d_negs_l)
            assert abs(l_g - oracle_g) <= 1e-9
            assert abs(l_l - oracle_l) <= 1e-9
            assert abs(joint_loss(l_g, l_l, lam) - (oracle_g + lam * oracle_l)) <= 1e-9
            assert joint_loss(l_g, l_l, 0.0) == l_g  # lambda = 0 collapses exactly

        # descriptor-level route for the global term, scalar-loop distances
        for _ in range(25):
            vecs = rng.standard_normal((5, 12))
            vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
            from aanet.tensorio import GlobalDescriptor

            q, p, *negs = [GlobalDescriptor(v.astype(np.float32)) for v in vecs]
            loss = triplet_loss_global(q, p, negs, margin=0.1)
            d_pos = math.sqrt(
                sum((float(a) - float(b)) ** 2 for a, b in zip(q.values, p.values))
            )
            oracle = 0.0
            for n_desc in negs:
                d_n = math.sqrt(
                    sum(
                        (float(a) - float(b)) ** 2
                        for a, b in zip(q.values, n_desc.values)
                    )
                )
                oracle += max(0.0, d_pos + 0.1 - d_n)
            assert abs(loss - oracle) <= 1e-9


def test_recall_monotonicity_and_hand_counts():
    with criterion("Recall@N monotone, identity database R@1=100, fixture counts exact"):
        # identity database: query grids are database grids
        rng = np.random.default_rng(107)
        grids = {f"g{k}": random_grid(rng, 4, 16) for k in range(8)}
        ids = tuple(sorted(grids))
        descriptors = np.stack([gem_pool(grid_to_map(grids[i])).values for i in ids])
        index = DescriptorIndex(ids, descriptors, grids)
        records = []
        gt = {}
        for image_id in ids:
            records.append(
                retrieve_features(
                    index,
                    gem_pool(grid_to_map(grids[image_id])),
                    grids[image_id],
                    k_rerank=8,
                    query_id=f"query-{image_id}",
                )
            )
            gt[f"query-{image_id}"] = frozenset({image_id})
        recalls = recall_at_n(records, GroundTruth(gt), [1, 5])
        assert recalls[1] == 100.0

        # 10-query hand-built fixture: 7 hit at N=1, 9 by N=5
        fixture_records, fixture_gt = [], {}
        universe = [f"d{k}" for k in range(10)] + ["f1", "f2", "f3", "f4", "f5"]
        for k in range(10):
            if k < 7:
                ranking = [f"d{k}", "f1", "f2", "f3", "f4"]
            elif k < 9:
                ranking = ["f1", "f2", "f3", "f4", f"d{k}"]
            else:
                ranking = ["f1", "f2", "f3", "f4", "f5"]
            stage1 = tuple((i, 0.1 * (t + 1)) for t, i in enumerate(ranking))
            stage2 = tuple((i, 0.05 * (t + 1)) for t, i in enumerate(ranking))
            fixture_records.append(
                RetrievalRecord(f"q{k}", stage1, stage2, k_rerank=5)
            )
            fixture_gt[f"q{k}"] = frozenset({f"d{k}"})
        recalls = recall_at_n(fixture_records, GroundTruth(fixture_gt), [1, 5, 10])
        assert recalls == {1: 70.0, 5: 90.0, 10: 90.0}

        rng = np.random.default_rng(108)
        ids = [f"d{k}" for k in range(15)]
        random_records, random_gt = [], {}
        for k in range(12):
            ranking = list(rng.permutation(ids))
            stage1 = tuple((i, 0.1) for i in ranking)
            stage2 = tuple((i, 0.1 * (t + 1)) for t, i in enumerate(ranking[:5]))
            random_records.append(RetrievalRecord(f"q{k}", stage1, stage2, 5))
            random_gt[f"q{k}"] = frozenset(rng.choice(ids, size=2, replace=False))
        recalls = recall_at_n(
            random_records, GroundTruth(random_gt), list(range(1, 16))
        )
        values = [recalls[n] for n in range(1, 16)]
        assert values == sorted(values)


def test_aafm_round_trip_100_maps():
    with criterion("AAFM round trip byte-identical for 100 random maps"):
        rng = np.random.default_rng(109)
        for _ in range(100):
            h = int(rng.integers(1, 12))
            w = int(rng.integers(1, 12))
            c = int(rng.integers(1, 24))
            fmap = FeatureMap(rng.standard_normal((h, w, c)).astype(np.float32))
            buf = io.BytesIO()
            write_feature_map(fmap, buf)
            data = buf.getvalue()
            back = read_feature_map(io.BytesIO(data))
            buf2 = io.BytesIO()
            write_feature_map(back, buf2)
            assert buf2.getvalue() == data
            assert np.array_equal(back.data, fmap.data)
