"""Two-stage retrieval: exhaustive global top-k, then local re-ranking.

Stage 1 ranks the whole database by global-descriptor L2 distance (exact
linear scan; no ANN index at desk scale). Stage 2 recomputes order for the
top ``k_rerank`` candidates by the aligned local distance. The final
ranking is the stage-2 order followed by the remaining stage-1 tail, so
recall can still be evaluated beyond ``k_rerank``.
"""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .alignment import dalf_distance
from .descriptor import GemParams, downsample_grid, gem_pool
from .tensorio import (
    FeatureMap,
    FeatureSetManifest,
    GlobalDescriptor,
    LocalFeatureGrid,
    load_feature_map,
)


class IndexBuildError(Exception):
    """One or more database files failed to read; carries per-id causes."""

    def __init__(self, failures: dict[str, Exception]):
        self.failures = dict(failures)
        detail = "; ".join(f"{i}: {e}" for i, e in sorted(self.failures.items()))
        super().__init__(f"failed to index {len(self.failures)} entries: {detail}")


class LazyGridStore(Mapping):
    """Mapping that loads and downsamples grids from AAFM files on demand.

    Value-identical to eager loading; only memory behavior differs.
    """

    def __init__(self, paths: Mapping[str, Path]):
        self._paths = dict(paths)
        self._cache: dict[str, LocalFeatureGrid] = {}

    def __getitem__(self, image_id: str) -> LocalFeatureGrid:
        if image_id not in self._cache:
            self._cache[image_id] = downsample_grid(load_feature_map(self._paths[image_id]))
        return self._cache[image_id]

    def __iter__(self) -> Iterator[str]:
        return iter(self._paths)

    def __len__(self) -> int:
        return len(self._paths)


@dataclass(frozen=True)
class DescriptorIndex:
    """Aligned database of ids, stacked global descriptors, and grids."""

    ids: tuple[str, ...]
    descriptors: np.ndarray  # (n, C) float32, rows unit-norm
    grids: Mapping[str, LocalFeatureGrid]

    def __post_init__(self):
        d = np.ascontiguousarray(self.descriptors, dtype=np.float32)
        if d.ndim != 2 or d.shape[0] != len(self.ids):
            raise ValueError(
                f"descriptor matrix {d.shape} does not match {len(self.ids)} ids"
            )
        missing = [i for i in self.ids if i not in self.grids]
        if missing:
            raise ValueError(f"grids missing for ids: {missing[:5]}")
        object.__setattr__(self, "ids", tuple(self.ids))
        object.__setattr__(self, "descriptors", d)

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class RetrievalRecord:
    """Per-query result: stage-1 ranking, re-ranked head, final order."""

    query_id: str
    stage1: tuple[tuple[str, float], ...]  # (id, global distance), ascending
    stage2: tuple[tuple[str, float], ...]  # (id, local distance), ascending
    k_rerank: int

    def __post_init__(self):
        head = {i for i, _ in self.stage1[: self.k_rerank]}
        if not {i for i, _ in self.stage2} <= head:
            raise ValueError("stage-2 ids must come from the stage-1 top-k_rerank")
        dists = [d for _, d in self.stage2]
        if dists != sorted(dists):
            raise ValueError("stage-2 must be sorted ascending by local distance")

    def final_ranking(self) -> tuple[str, ...]:
        """Stage-2 order, then the stage-1 tail beyond k_rerank."""
        head = tuple(i for i, _ in self.stage2)
        return head + tuple(i for i, _ in self.stage1[self.k_rerank :])


def build_index(
    manifest: FeatureSetManifest,
    gem: GemParams = GemParams(),
    lazy_grids: bool = False,
) -> DescriptorIndex:
    """Compute descriptors and grids for every database entry of a manifest."""
    ids: list[str] = []
    descriptors: list[np.ndarray] = []
    grids: dict[str, LocalFeatureGrid] = {}
    paths = {}
    failures: dict[str, Exception] = {}
    for entry in manifest.database_entries():
        try:
            fmap = load_feature_map(entry.path)
            descriptors.append(gem_pool(fmap, gem).values)
            if not lazy_grids:
                grids[entry.image_id] = downsample_grid(fmap)
            ids.append(entry.image_id)
            paths[entry.image_id] = entry.path
        except Exception as e:  # aggregate, report all bad files at once
            failures[entry.image_id] = e
    if failures:
        raise IndexBuildError(failures)
    store = LazyGridStore(paths) if lazy_grids else grids
    matrix = (
        np.stack(descriptors) if descriptors else np.empty((0, 0), dtype=np.float32)
    )
    return DescriptorIndex(tuple(ids), matrix, store)


def query_topk(
    index: DescriptorIndex, q: GlobalDescriptor, k: int
) -> list[tuple[str, float]]:
    """The k database items closest to ``q`` by global distance, ascending.

    Exact ties are broken by id, so the ranking is invariant under
    database permutation. ``k`` larger than the database clamps.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if len(index) == 0:
        raise ValueError("cannot query an empty index")
    diff = index.descriptors.astype(np.float64) - q.values.astype(np.float64)
    dists = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    order = np.lexsort((np.asarray(index.ids), dists))[: min(k, len(index))]
    return [(index.ids[t], float(dists[t])) for t in order]


def rerank(
    index: DescriptorIndex,
    q_grid: LocalFeatureGrid,
    candidates: Sequence[str],
) -> list[tuple[str, float]]:
    """Order candidates by aligned local distance, ascending.

    Ties keep the incoming (stage-1) order, via sort stability.
    """
    scored = []
    for image_id in candidates:
        if image_id not in index.grids:
            raise KeyError(f"no grid for candidate {image_id!r}")
        result = dalf_distance(index.grids[image_id], q_grid)
        scored.append((image_id, result.local_distance))
    return sorted(scored, key=lambda t: t[1])


def retrieve_features(
    index: DescriptorIndex,
    q_desc: GlobalDescriptor,
    q_grid: LocalFeatureGrid,
    k_rerank: int = 20,
    query_id: str = "",
) -> RetrievalRecord:
    """Two-stage retrieval from precomputed query features."""
    if k_rerank < 1:
        raise ValueError(f"k_rerank must be >= 1, got {k_rerank}")
    stage1 = query_topk(index, q_desc, len(index))
    head = [i for i, _ in stage1[:k_rerank]]
    stage2 = rerank(index, q_grid, head)
    return RetrievalRecord(query_id, tuple(stage1), tuple(stage2), k_rerank)


def retrieve(
    index: DescriptorIndex,
    query_map: FeatureMap,
    k_rerank: int = 20,
    gem: GemParams = GemParams(),
    query_id: str = "",
) -> RetrievalRecord:
    """Two-stage retrieval for one query feature map."""
    return retrieve_features(
        index,
        gem_pool(query_map, gem),
        downsample_grid(query_map),
        k_rerank=k_rerank,
        query_id=query_id,
    )
