"""Hierarchical place-recognition retrieval with dynamic local alignment."""

from .alignment import (
    AlignmentResult,
    AxisAlignment,
    CumulativeMatrix,
    WarpingPath,
    build_distance_matrix,
    dalf_distance,
    dtw_align,
    extract_axis_alignment,
    naive_grid_align,
    normalized_dtw_align,
)
from .descriptor import (
    GemParams,
    RegionalSequence,
    downsample_grid,
    gem_pool,
    global_distance,
    split_regional,
)
from .mining import (
    MiningConfig,
    RankPair,
    TrainingTuple,
    joint_loss,
    rank_positives,
    select_hard_negatives,
    select_semi_hard_positive,
    triplet_loss_global,
    triplet_loss_local,
)
from .retrieval import (
    DescriptorIndex,
    RetrievalRecord,
    build_index,
    query_topk,
    rerank,
    retrieve,
)
from .tensorio import (
    FeatureMap,
    FeatureSetManifest,
    GlobalDescriptor,
    LocalFeatureGrid,
    load_feature_map,
    read_feature_map,
    read_manifest,
    save_feature_map,
    write_feature_map,
    write_manifest,
)

__version__ = "0.1.0"
