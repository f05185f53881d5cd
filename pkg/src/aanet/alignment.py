"""Dynamic alignment of local feature grids (the re-ranking core).

Two grids are compared by aligning their regional sequences once per axis
with a normalized DTW (predecessors chosen by cumulative distance divided
by path length), composing the two axis alignments into local feature
pairs, and averaging the pairwise L2 distances. The naive alternative,
kept as an efficiency baseline, aligns every pair of regional features
vertically before one horizontal pass: N*N + 1 DTW passes against 2.

Conventions:

* Distance matrices are square float32 ndarrays with d[i, j] the distance
  between reference element i and query element j (0-based storage).
* Warping paths and axis alignments are 1-based, matching the usual DTW
  notation; conversion happens at the API boundary.
* Ties between predecessors are broken diagonal first, then left (i, j-1),
  then up (i-1, j), so degenerate inputs align as identity.
* The DP accumulates in float64 and compares normalized costs by exact
  division; the stored cumulative matrix is float32.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .descriptor import AXIS_HORIZONTAL, AXIS_VERTICAL, RegionalSequence, split_regional
from .tensorio import LocalFeatureGrid

PRED_NONE = 0
PRED_DIAG = 1
PRED_LEFT = 2
PRED_UP = 3

_PRED_CHAR = {PRED_NONE: ".", PRED_DIAG: "d", PRED_LEFT: "l", PRED_UP: "u"}

# Count of normalized-DTW forward passes, for efficiency instrumentation
# only (plain int; updates are GIL-atomic, results never depend on it).
_ndtw_passes = 0


def normalized_dtw_pass_total() -> int:
    """Total normalized-DTW forward passes executed in this process."""
    return _ndtw_passes


class PassCounter:
    """Context manager capturing the normalized-DTW passes of a block."""

    def __enter__(self) -> "PassCounter":
        self._start = _ndtw_passes
        self._end = None
        return self

    def __exit__(self, *exc) -> None:
        self._end = _ndtw_passes

    @property
    def count(self) -> int:
        end = self._end if self._end is not None else _ndtw_passes
        return end - self._start


def count_dtw_passes() -> PassCounter:
    return PassCounter()


@dataclass(frozen=True)
class WarpingPath:
    """Monotone cell sequence through an N x N distance matrix, 1-based."""

    n: int
    points: tuple[tuple[int, int], ...]

    def __post_init__(self):
        pts = tuple((int(i), int(j)) for i, j in self.points)
        n, k = self.n, len(pts)
        if k < 1 or pts[0] != (1, 1) or pts[-1] != (n, n):
            raise ValueError(f"path must run (1,1)..({n},{n}), got {pts[:1]}..{pts[-1:]}")
        if not n <= k <= 2 * n - 1:
            raise ValueError(f"path length {k} outside [{n}, {2 * n - 1}]")
        for (a, b), (c, d) in zip(pts, pts[1:]):
            if (c - a, d - b) not in ((1, 0), (0, 1), (1, 1)):
                raise ValueError(f"illegal step ({a},{b}) -> ({c},{d})")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)

    def __iter__(self):
        return iter(self.points)


@dataclass(frozen=True)
class CumulativeMatrix:
    """Forward-pass state of the normalized DTW.

    ``s[i, j]`` is the accumulated raw distance along the chosen path to
    cell (i+1, j+1), ``length[i, j]`` the number of points on that path,
    ``pred[i, j]`` one of the PRED_* tags.
    """

    s: np.ndarray
    length: np.ndarray
    pred: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "s", np.asarray(self.s, dtype=np.float32))
        object.__setattr__(self, "length", np.asarray(self.length, dtype=np.int32))
        object.__setattr__(self, "pred", np.asarray(self.pred, dtype=np.int8))


@dataclass(frozen=True)
class AxisAlignment:
    """Query indices aligned to each reference index along one axis.

    ``sets[i - 1]`` is the sorted tuple of 1-based query indices aligned
    to reference index i; each set is non-empty and contiguous and the
    union covers 1..N.
    """

    sets: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        n = len(self.sets)
        covered = set()
        for i, js in enumerate(self.sets, start=1):
            if not js:
                raise ValueError(f"reference index {i} aligned to nothing")
            if list(js) != list(range(js[0], js[-1] + 1)):
                raise ValueError(f"alignment set for {i} not contiguous: {js}")
            covered.update(js)
        if covered != set(range(1, n + 1)):
            raise ValueError("alignment sets must cover query indices 1..N")

    @property
    def n(self) -> int:
        return len(self.sets)

    def __getitem__(self, ref_index: int) -> tuple[int, ...]:
        if not 1 <= ref_index <= len(self.sets):
            raise IndexError(f"reference index {ref_index} outside 1..{len(self.sets)}")
        return self.sets[ref_index - 1]

    @property
    def map(self) -> dict[int, tuple[int, ...]]:
        return {i: js for i, js in enumerate(self.sets, start=1)}


@dataclass(frozen=True)
class AlignmentResult:
    """Composed two-axis alignment of a grid pair plus the local distance."""

    x: AxisAlignment
    y: AxisAlignment
    local_distance: float
    pair_count: int

    def __post_init__(self):
        expected = sum(len(js) for js in self.x.sets) * sum(
            len(js) for js in self.y.sets
        )
        if self.pair_count != expected:
            raise ValueError(
                f"pair count {self.pair_count} inconsistent with alignments ({expected})"
            )
        if not self.local_distance >= 0.0:
            raise ValueError(f"negative local distance {self.local_distance}")


def build_distance_matrix(r: RegionalSequence, q: RegionalSequence) -> np.ndarray:
    """Pairwise Euclidean distances d[i, j] = |r_i - q_j| as float32."""
    if r.axis != q.axis:
        raise ValueError(f"axis mismatch: {r.axis} vs {q.axis}")
    if r.elements.shape != q.elements.shape:
        raise ValueError(
            f"sequence shapes differ: {r.elements.shape} vs {q.elements.shape}"
        )
    return cdist(r.elements, q.elements).astype(np.float32)


def _check_distance_matrix(d: np.ndarray) -> np.ndarray:
    a = np.asarray(d, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
        raise ValueError(f"distance matrix must be square, got shape {a.shape}")
    if not np.isfinite(a).all() or (a < 0).any():
        raise ValueError("distance matrix entries must be finite and >= 0")
    return a


def _dtw_forward(d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vanilla cumulative matrix: s = d + min of the three predecessors."""
    n = d.shape[0]
    s = np.zeros((n, n))
    pred = np.full((n, n), PRED_NONE, dtype=np.int8)
    s[0, 0] = d[0, 0]
    for j in range(1, n):
        s[0, j] = d[0, j] + s[0, j - 1]
        pred[0, j] = PRED_LEFT
    for i in range(1, n):
        s[i, 0] = d[i, 0] + s[i - 1, 0]
        pred[i, 0] = PRED_UP
        for j in range(1, n):
            best, tag = s[i - 1, j - 1], PRED_DIAG
            c = s[i, j - 1]
            if c < best:
                best, tag = c, PRED_LEFT
            c = s[i - 1, j]
            if c < best:
                best, tag = c, PRED_UP
            s[i, j] = d[i, j] + best
            pred[i, j] = tag
    return s, pred


def _ndtw_forward(d: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Normalized forward pass: predecessors ranked by s/length, s stays raw."""
    global _ndtw_passes
    _ndtw_passes += 1
    n = d.shape[0]
    s = np.zeros((n, n))
    length = np.zeros((n, n), dtype=np.int32)
    pred = np.full((n, n), PRED_NONE, dtype=np.int8)
    s[0, 0] = d[0, 0]
    length[0, 0] = 1
    for j in range(1, n):
        s[0, j] = d[0, j] + s[0, j - 1]
        length[0, j] = j + 1
        pred[0, j] = PRED_LEFT
    for i in range(1, n):
        s[i, 0] = d[i, 0] + s[i - 1, 0]
        length[i, 0] = i + 1
        pred[i, 0] = PRED_UP
        for j in range(1, n):
            bs, bk, tag = s[i - 1, j - 1], length[i - 1, j - 1], PRED_DIAG
            best = bs / bk
            c = s[i, j - 1] / length[i, j - 1]
            if c < best:
                best, bs, bk, tag = c, s[i, j - 1], length[i, j - 1], PRED_LEFT
            c = s[i - 1, j] / length[i - 1, j]
            if c < best:
                best, bs, bk, tag = c, s[i - 1, j], length[i - 1, j], PRED_UP
            s[i, j] = d[i, j] + bs
            length[i, j] = bk + 1
            pred[i, j] = tag
    return s, length, pred


def _backtrack(pred: np.ndarray, n: int) -> tuple[tuple[int, int], ...]:
    i = j = n - 1
    points = [(n, n)]
    while i or j:
        tag = pred[i, j]
        if tag == PRED_DIAG:
            i -= 1
            j -= 1
        elif tag == PRED_LEFT:
            j -= 1
        else:
            i -= 1
        points.append((i + 1, j + 1))
    points.reverse()
    return tuple(points)


def dtw_align(d: np.ndarray) -> tuple[WarpingPath, float]:
    """Vanilla DTW: minimum-total warping path and its accumulated distance."""
    a = _check_distance_matrix(d)
    n = a.shape[0]
    s, pred = _dtw_forward(a)
    return WarpingPath(n, _backtrack(pred, n)), float(s[n - 1, n - 1])


def normalized_dtw_align(d: np.ndarray) -> tuple[WarpingPath, CumulativeMatrix]:
    """Normalized DTW: path plus the full (s, length, pred) forward state."""
    a = _check_distance_matrix(d)
    n = a.shape[0]
    s, length, pred = _ndtw_forward(a)
    return WarpingPath(n, _backtrack(pred, n)), CumulativeMatrix(s, length, pred)


def extract_axis_alignment(path: WarpingPath) -> AxisAlignment:
    """Collect, per reference index i, the query indices j with (i, j) on the path."""
    sets: list[list[int]] = [[] for _ in range(path.n)]
    for i, j in path.points:
        sets[i - 1].append(j)
    return AxisAlignment(tuple(tuple(js) for js in sets))


def _axis_alignment(
    r: LocalFeatureGrid, q: LocalFeatureGrid, axis: str
) -> AxisAlignment:
    """One normalized-DTW pass over the regional sequences of ``axis``."""
    d = build_distance_matrix(split_regional(r, axis), split_regional(q, axis))
    _, _, pred = _ndtw_forward(d.astype(np.float64))
    return extract_axis_alignment(WarpingPath(r.n, _backtrack(pred, r.n)))


def _aligned_index_pairs(align: AxisAlignment) -> tuple[np.ndarray, np.ndarray]:
    """0-based (reference, query) index vectors of an axis alignment."""
    ref = np.repeat(np.arange(align.n), [len(js) for js in align.sets])
    qry = np.array([j - 1 for js in align.sets for j in js], dtype=np.intp)
    return ref, qry


def dalf_distance(r: LocalFeatureGrid, q: LocalFeatureGrid) -> AlignmentResult:
    """Align two grids along both axes and average aligned local distances.

    Exactly two normalized-DTW passes: one over the column (horizontal)
    sequences, one over the row (vertical) sequences. Local feature
    r[i, j] then pairs with q[i', j'] for every i' aligned to column i and
    j' aligned to row j; the result averages |r[i,j] - q[i',j']| over all
    such pairs. Not symmetric in (r, q): the recursion direction matters.
    """
    if r.n != q.n or r.channels != q.channels:
        raise ValueError(
            f"grid shapes differ: {r.cells.shape} vs {q.cells.shape}"
        )
    x_align = _axis_alignment(r, q, AXIS_HORIZONTAL)
    y_align = _axis_alignment(r, q, AXIS_VERTICAL)

    ref_cols, qry_cols = _aligned_index_pairs(x_align)
    ref_rows, qry_rows = _aligned_index_pairs(y_align)

    # Subtraction-first in f32 keeps identical cells at exactly zero
    # distance; the accumulation upcasts to f64.
    diff = (
        r.cells[ref_cols[:, None], ref_rows[None, :]]
        - q.cells[qry_cols[:, None], qry_rows[None, :]]
    )
    d2 = np.square(diff).sum(axis=2, dtype=np.float64)
    return AlignmentResult(
        x=x_align,
        y=y_align,
        local_distance=float(np.sqrt(d2).mean()),
        pair_count=int(d2.size),
    )


def naive_grid_align(r: LocalFeatureGrid, q: LocalFeatureGrid) -> tuple[float, int]:
    """Baseline alignment running one DTW per regional pair plus one on top.

    Every (column i of r, column i' of q) pair is aligned vertically with
    the normalized DTW; its scalar distance is the final cumulative value
    divided by the path length (mean per-step cost; baseline-only
    convention). One horizontal pass over the resulting N x N matrix gives
    the grid distance. Returns (distance, measured DTW pass count).
    """
    if r.n != q.n or r.channels != q.channels:
        raise ValueError(
            f"grid shapes differ: {r.cells.shape} vs {q.cells.shape}"
        )
    n = r.n
    start = _ndtw_passes
    regional = np.zeros((n, n))
    for i in range(n):
        for i2 in range(n):
            d = cdist(r.cells[i], q.cells[i2])
            s, length, _ = _ndtw_forward(d)
            regional[i, i2] = s[n - 1, n - 1] / length[n - 1, n - 1]
    s, length, _ = _ndtw_forward(regional)
    return float(s[n - 1, n - 1] / length[n - 1, n - 1]), _ndtw_passes - start


def _format_matrix(name: str, rows, fmt) -> list[str]:
    lines = [f"{name}:"]
    for row in np.asarray(rows):
        lines.append("  " + " ".join(fmt(v) for v in row))
    return lines


def format_alignment_debug(
    d: np.ndarray, cum: CumulativeMatrix, path: WarpingPath
) -> str:
    """Text dump of (D, S, len, pred, path) for alignment inspection."""
    lines = _format_matrix("D", d, lambda v: f"{float(v):9.4f}")
    lines += _format_matrix("S", cum.s, lambda v: f"{float(v):9.4f}")
    lines += _format_matrix("len", cum.length, lambda v: f"{int(v):3d}")
    lines += _format_matrix("pred", cum.pred, lambda v: _PRED_CHAR[int(v)])
    lines.append("path: " + " ".join(f"({i},{j})" for i, j in path.points))
    return "\n".join(lines) + "\n"
