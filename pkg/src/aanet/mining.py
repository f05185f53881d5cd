"""Training-support math: positive mining, hard negatives, triplet losses.

Selection pipeline per query: rank all potential positives by global and
by local distance, keep those ranked within the cutoffs in either list,
and pick the one whose two ranks disagree the most (easy by one distance,
hard by the other). Hard negatives are simply the globally closest members
of a random negative pool. Losses are hinge sums over the triplet; no
gradients or optimizers here, just the numbers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .alignment import dalf_distance
from .descriptor import GemParams, downsample_grid, gem_pool, global_distance
from .tensorio import (
    FeatureMap,
    FeatureSetManifest,
    FrameIndex,
    GeoPosition,
    Geotag,
    GlobalDescriptor,
    LocalFeatureGrid,
)


@dataclass(frozen=True)
class MiningConfig:
    """Cutoffs, margins and sampling sizes for triplet construction.

    ``k`` and ``k_prime`` are absolute ranks when int, fractions of the
    positive count (resolved as ceil, min 1) when float in (0, 1].
    """

    k: Union[int, float] = 0.3
    k_prime: Union[int, float] = 0.3
    margin: float = 0.1
    lam: float = 1.0
    negatives_per_triplet: int = 2
    negative_pool: int = 1000
    positive_radius_m: float = 10.0
    negative_radius_m: float = 25.0
    positive_frames: int = 2
    negative_frames: int = 2
    seed: int = 0

    def __post_init__(self):
        for name, cutoff in (("k", self.k), ("k_prime", self.k_prime)):
            if isinstance(cutoff, bool) or not isinstance(cutoff, (int, float)):
                raise ValueError(f"{name} must be an int rank or float fraction")
            if isinstance(cutoff, int) and cutoff < 1:
                raise ValueError(f"{name} rank cutoff must be >= 1, got {cutoff}")
            if isinstance(cutoff, float) and not 0.0 < cutoff <= 1.0:
                raise ValueError(f"{name} fraction must be in (0, 1], got {cutoff}")
        if not self.margin > 0.0:
            raise ValueError(f"margin must be > 0, got {self.margin}")
        if self.lam < 0.0:
            raise ValueError(f"loss weight must be >= 0, got {self.lam}")
        if self.negatives_per_triplet < 1 or self.negative_pool < 1:
            raise ValueError("negative counts must be >= 1")


@dataclass(frozen=True)
class RankPair:
    """1-based global and local distance ranks of one potential positive."""

    image_id: str
    g_rank: int
    l_rank: int

    def __post_init__(self):
        if self.g_rank < 1 or self.l_rank < 1:
            raise ValueError(f"ranks are 1-based, got ({self.g_rank}, {self.l_rank})")

    @property
    def rank_gap(self) -> int:
        return abs(self.g_rank - self.l_rank)


@dataclass(frozen=True)
class TrainingTuple:
    """Query with its potential positives and definite negatives."""

    query_id: str
    positives: tuple[str, ...]
    negatives: tuple[str, ...]

    def __post_init__(self):
        overlap = set(self.positives) & set(self.negatives)
        if overlap:
            raise ValueError(f"ids cannot be both positive and negative: {overlap}")

    @property
    def usable(self) -> bool:
        return bool(self.positives) and bool(self.negatives)


def resolve_cutoff(cutoff: Union[int, float], n_positives: int) -> int:
    """Fractional cutoffs resolve as ceil(fraction * count), at least 1."""
    if isinstance(cutoff, float):
        return max(1, math.ceil(cutoff * n_positives))
    return cutoff


def _ranks_ascending(dists: Sequence[float], ids: Sequence[str]) -> list[int]:
    order = sorted(range(len(dists)), key=lambda t: (dists[t], ids[t]))
    ranks = [0] * len(dists)
    for position, t in enumerate(order, start=1):
        ranks[t] = position
    return ranks


def rank_positives_from_features(
    q_desc: GlobalDescriptor,
    q_grid: LocalFeatureGrid,
    positives: Sequence[tuple[str, GlobalDescriptor, LocalFeatureGrid]],
) -> list[RankPair]:
    """Rank potential positives by global and by local distance to the query.

    Ranks are ascending (1 = closest); exact ties break by id order.
    """
    if not positives:
        raise ValueError("need at least one potential positive")
    ids = [i for i, _, _ in positives]
    d_g = [global_distance(q_desc, desc) for _, desc, _ in positives]
    d_l = [dalf_distance(q_grid, grid).local_distance for _, _, grid in positives]
    g_ranks = _ranks_ascending(d_g, ids)
    l_ranks = _ranks_ascending(d_l, ids)
    return [RankPair(i, g, l) for i, g, l in zip(ids, g_ranks, l_ranks)]


def rank_positives(
    query_map: FeatureMap,
    positives: Sequence[tuple[str, FeatureMap]],
    gem: GemParams = GemParams(),
) -> list[RankPair]:
    """Map-level wrapper over :func:`rank_positives_from_features`."""
    features = [
        (i, gem_pool(m, gem), downsample_grid(m)) for i, m in positives
    ]
    return rank_positives_from_features(
        gem_pool(query_map, gem), downsample_grid(query_map), features
    )


def select_semi_hard_positive(
    pairs: Sequence[RankPair], cfg: MiningConfig
) -> RankPair:
    """The constraint-satisfying positive with the largest rank disagreement.

    Candidates must rank within k globally or within k' locally; among
    them the largest |g_rank - l_rank| wins, ties preferring the smaller
    g_rank, then id order. Rank-preserving (strictly monotone) transforms
    of the distances cannot change the selection.
    """
    if not pairs:
        raise ValueError("no rank pairs given")
    k = resolve_cutoff(cfg.k, len(pairs))
    k_prime = resolve_cutoff(cfg.k_prime, len(pairs))
    candidates = [p for p in pairs if p.g_rank <= k or p.l_rank <= k_prime]
    if not candidates:
        raise ValueError(
            f"no positive satisfies g_rank <= {k} or l_rank <= {k_prime}"
        )
    return min(candidates, key=lambda p: (-p.rank_gap, p.g_rank, p.image_id))


def sample_negative_pool(
    negative_ids: Sequence[str], pool_size: int, rng: np.random.Generator
) -> list[str]:
    """Uniform sample without replacement; the whole set if it is smaller."""
    if len(negative_ids) <= pool_size:
        return list(negative_ids)
    picks = rng.choice(len(negative_ids), size=pool_size, replace=False)
    return [negative_ids[t] for t in picks]


def select_hard_negatives(
    q_desc: GlobalDescriptor,
    pool: Sequence[tuple[str, GlobalDescriptor]],
    count: int = 2,
) -> list[str]:
    """The pool members globally closest to the query, ascending."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    scored = sorted(
        ((global_distance(q_desc, desc), i) for i, desc in pool),
        key=lambda t: (t[0], t[1]),
    )
    return [i for _, i in scored[:count]]


def hinge_sum(d_pos: float, d_negs: Sequence[float], margin: float) -> float:
    """Sum over negatives of max(0, d_pos + margin - d_neg)."""
    return float(sum(max(0.0, d_pos + margin - d_n) for d_n in d_negs))


def triplet_loss_global(
    q: GlobalDescriptor,
    p: GlobalDescriptor,
    negatives: Sequence[GlobalDescriptor],
    margin: float = 0.1,
) -> float:
    """Hinge sum over global distances of the triplet."""
    d_pos = global_distance(q, p)
    return hinge_sum(d_pos, [global_distance(q, n) for n in negatives], margin)


def triplet_loss_local(
    q: LocalFeatureGrid,
    p: LocalFeatureGrid,
    negatives: Sequence[LocalFeatureGrid],
    margin: float = 0.1,
) -> float:
    """Hinge sum over aligned local distances, query as the anchor."""
    d_pos = dalf_distance(q, p).local_distance
    d_negs = [dalf_distance(q, n).local_distance for n in negatives]
    return hinge_sum(d_pos, d_negs, margin)


def joint_loss(l_g: float, l_l: float, lam: float = 1.0) -> float:
    """Weighted sum of the global and local loss terms."""
    return l_g + lam * l_l


def _within_positive(a: Geotag, b: Geotag, cfg: MiningConfig) -> bool:
    if isinstance(a, GeoPosition) and isinstance(b, GeoPosition):
        return math.hypot(a.x - b.x, a.y - b.y) <= cfg.positive_radius_m
    if isinstance(a, FrameIndex) and isinstance(b, FrameIndex):
        return abs(a.index - b.index) <= cfg.positive_frames
    raise ValueError("cannot mix position and frame geotags")


def _beyond_negative(a: Geotag, b: Geotag, cfg: MiningConfig) -> bool:
    if isinstance(a, GeoPosition) and isinstance(b, GeoPosition):
        return math.hypot(a.x - b.x, a.y - b.y) > cfg.negative_radius_m
    if isinstance(a, FrameIndex) and isinstance(b, FrameIndex):
        return abs(a.index - b.index) > cfg.negative_frames
    raise ValueError("cannot mix position and frame geotags")


def build_training_tuples(
    manifest: FeatureSetManifest, cfg: MiningConfig = MiningConfig()
) -> list[TrainingTuple]:
    """Geotag-derived tuples; queries lacking positives or negatives drop out."""
    database = [e for e in manifest.database_entries() if e.geotag is not None]
    tuples = []
    for q in manifest.query_entries():
        if q.geotag is None:
            continue
        positives = tuple(
            e.image_id for e in database if _within_positive(q.geotag, e.geotag, cfg)
        )
        negatives = tuple(
            e.image_id for e in database if _beyond_negative(q.geotag, e.geotag, cfg)
        )
        tup = TrainingTuple(q.image_id, positives, negatives)
        if tup.usable:
            tuples.append(tup)
    return tuples


@dataclass(frozen=True)
class MiningOutcome:
    """Selected semi-hard positive and hard negatives for one query."""

    query_id: str
    positive_id: str
    g_rank: int
    l_rank: int
    negative_ids: tuple[str, ...]


def mine_query(
    q_desc: GlobalDescriptor,
    q_grid: LocalFeatureGrid,
    query_id: str,
    positives: Sequence[tuple[str, GlobalDescriptor, LocalFeatureGrid]],
    negative_pool: Sequence[tuple[str, GlobalDescriptor]],
    cfg: MiningConfig = MiningConfig(),
) -> MiningOutcome:
    """Full per-query mining: rank, select p_sh, pick hard negatives."""
    pairs = rank_positives_from_features(q_desc, q_grid, positives)
    chosen = select_semi_hard_positive(pairs, cfg)
    negatives = select_hard_negatives(
        q_desc, negative_pool, cfg.negatives_per_triplet
    )
    return MiningOutcome(
        query_id, chosen.image_id, chosen.g_rank, chosen.l_rank, tuple(negatives)
    )


def format_mining_report(outcomes: Sequence[MiningOutcome]) -> str:
    """One tab-separated line per query: ids, ranks, then negative ids."""
    lines = []
    for o in outcomes:
        fields = [o.query_id, o.positive_id, str(o.g_rank), str(o.l_rank)]
        fields.extend(o.negative_ids)
        lines.append("\t".join(fields))
    return "\n".join(lines) + ("\n" if lines else "")
