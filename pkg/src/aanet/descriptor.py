"""Global and local place descriptions derived from a raw feature map.

A feature map yields two representations:

* a GeM-pooled, L2-normalized global descriptor used for candidate
  retrieval, and
* an N x N grid of L2-normalized patch features (3x3 max-pool, stride 3)
  whose columns/rows flatten into the regional sequences consumed by the
  alignment stage.

Grid cells are normalized after pooling; regional elements concatenate the
already-normalized cells and are not re-normalized again (switchable via
``split_regional(..., renormalize=True)``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensorio import FeatureMap, GlobalDescriptor, LocalFeatureGrid

AXIS_HORIZONTAL = "horizontal"
AXIS_VERTICAL = "vertical"

POOL_SIDE = 3  # downsampling kernel and stride


@dataclass(frozen=True)
class GemParams:
    """Generalized-mean pooling parameters.

    p=1 degenerates to average pooling; activations are clamped to
    ``epsilon`` before exponentiation so ReLU-sparse maps stay in domain.
    """

    p: float = 3.0
    epsilon: float = 1e-6

    def __post_init__(self):
        if not self.p >= 1.0:
            raise ValueError(f"GeM exponent must be >= 1, got {self.p}")
        if not self.epsilon > 0.0:
            raise ValueError(f"clamp epsilon must be > 0, got {self.epsilon}")


@dataclass(frozen=True)
class RegionalSequence:
    """Ordered regional features for one axis of a grid.

    ``elements`` has shape ``(N, N*C)``: row i is grid column i flattened
    top-to-bottom for the horizontal axis, or grid row i flattened
    left-to-right for the vertical axis.
    """

    axis: str
    elements: np.ndarray

    def __post_init__(self):
        if self.axis not in (AXIS_HORIZONTAL, AXIS_VERTICAL):
            raise ValueError(f"unknown axis {self.axis!r}")
        e = np.ascontiguousarray(self.elements, dtype=np.float32)
        if e.ndim != 2 or e.shape[0] < 1:
            raise ValueError(f"elements must be (N, N*C), got shape {e.shape}")
        if e.shape[1] % e.shape[0] != 0:
            raise ValueError(f"element dimension {e.shape[1]} not a multiple of N={e.shape[0]}")
        object.__setattr__(self, "elements", e)

    @property
    def n(self) -> int:
        return self.elements.shape[0]


def gem_pooled_channels(fmap: FeatureMap, params: GemParams) -> np.ndarray:
    """Per-channel generalized mean over spatial positions, before L2 norm.

    Returns float64 values ``(mean over W*H of clamp(a, eps)^p)^(1/p)``.
    """
    x = np.maximum(fmap.data.astype(np.float64), params.epsilon)
    if params.p == 1.0:
        return x.mean(axis=(0, 1))
    return np.power(np.power(x, params.p).mean(axis=(0, 1)), 1.0 / params.p)


def gem_pool(fmap: FeatureMap, params: GemParams = GemParams()) -> GlobalDescriptor:
    """GeM-aggregate a feature map into a unit-norm global descriptor."""
    pooled = gem_pooled_channels(fmap, params)
    norm = float(np.linalg.norm(pooled))
    if norm == 0.0:
        raise ValueError("pooled descriptor has zero norm")
    return GlobalDescriptor((pooled / norm).astype(np.float32))


def downsample_grid(fmap: FeatureMap) -> LocalFeatureGrid:
    """3x3 stride-3 per-channel max pooling into an N x N local grid.

    Cell (i, j) takes the max over source columns 3i..3i+2 and rows
    3j..3j+2, then is L2-normalized. Requires a square map with side
    divisible by 3.
    """
    h, w, c = fmap.data.shape
    if w != h:
        raise ValueError(f"grid extraction needs a square map, got W={w} H={h}")
    if w % POOL_SIDE != 0:
        raise ValueError(f"map side {w} not divisible by {POOL_SIDE}")
    n = w // POOL_SIDE
    pooled = fmap.data.reshape(n, POOL_SIDE, n, POOL_SIDE, c).max(axis=(1, 3))
    # pooled is (row j, col i, C); grid cells are indexed (col i, row j).
    cells = pooled.transpose(1, 0, 2).astype(np.float64)
    norms = np.linalg.norm(cells, axis=2)
    if (norms == 0.0).any():
        raise ValueError("max-pooled cell with zero norm cannot be normalized")
    return LocalFeatureGrid((cells / norms[:, :, None]).astype(np.float32))


def split_regional(
    grid: LocalFeatureGrid, axis: str, renormalize: bool = False
) -> RegionalSequence:
    """Flatten grid columns (horizontal axis) or rows (vertical) in order.

    Horizontal element i concatenates cells (i, j) for j = 0..N-1 top to
    bottom; vertical element j concatenates cells (i, j) left to right.
    Splitting is lossless: cell k of element i sits at [i, k*C:(k+1)*C].
    """
    n, c = grid.n, grid.channels
    if axis == AXIS_HORIZONTAL:
        elements = grid.cells.reshape(n, n * c)
    elif axis == AXIS_VERTICAL:
        elements = np.ascontiguousarray(grid.cells.transpose(1, 0, 2)).reshape(n, n * c)
    else:
        raise ValueError(f"unknown axis {axis!r}")
    if renormalize:
        norms = np.linalg.norm(elements.astype(np.float64), axis=1, keepdims=True)
        elements = (elements / np.maximum(norms, 1e-12)).astype(np.float32)
    return RegionalSequence(axis, elements)


def global_distance(a: GlobalDescriptor, b: GlobalDescriptor) -> float:
    """Euclidean distance between two global descriptors."""
    if a.values.shape != b.values.shape:
        raise ValueError(
            f"descriptor dimensions differ: {a.values.shape} vs {b.values.shape}"
        )
    diff = a.values.astype(np.float64) - b.values.astype(np.float64)
    return float(np.linalg.norm(diff))
