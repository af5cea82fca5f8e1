"""Point-cloud container and geometric preprocessing.

Holds the :class:`PointCloud` record plus the operations applied before the
network ever sees a scene: voxel downsampling, field-of-view cropping,
fixed-size sampling/padding, exact k-nearest-neighbor search, and
nearest-neighbor label propagation.

Conventions used throughout the package:

* all spatial ranges are half-open, ``min <= p < max``, matching the floor
  quantization used for 2D cell assignment;
* every nearest-neighbor tie breaks toward the smaller point index;
* padding rows (``valid == False``) never act as neighbor candidates and are
  ignored by all statistics downstream.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

# Label id reserved for "do not score this point" (unmapped classes, padding).
IGNORE_LABEL = 255

# Low-level per-point feature layouts: column order for each mode.
FEATURE_DIMS = {"3dim": 3, "5dim": 5}

# Below this many valid points the k-NN grid acceleration is not worth it.
_BRUTE_FORCE_MAX = 2000

_CHUNK = 512


def point_features(positions: np.ndarray, intensity: np.ndarray, mode: str) -> np.ndarray:
    """Build the low-level feature matrix for one cloud.

    ``3dim`` is (intensity, z, range); ``5dim`` is (intensity, x, y, z, range)
    with range the Euclidean norm of the position. Augmentations call this
    again after moving points so features always agree with positions.
    """
    if mode not in FEATURE_DIMS:
        raise ValueError(f"unknown feature mode {mode!r}")
    pos = np.asarray(positions, dtype=np.float32)
    inten = np.asarray(intensity, dtype=np.float32).reshape(-1)
    rng = np.linalg.norm(pos.astype(np.float64), axis=1).astype(np.float32)
    if mode == "3dim":
        return np.stack([inten, pos[:, 2], rng], axis=1)
    return np.concatenate([inten[:, None], pos, rng[:, None]], axis=1)


def feature_mode_for(n_columns: int) -> str:
    for mode, dim in FEATURE_DIMS.items():
        if dim == n_columns:
            return mode
    raise ValueError(f"no feature mode with {n_columns} columns")


@dataclass
class Fov:
    """Axis-aligned field of view, half-open box [min, max) in meters."""

    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        self.min = np.asarray(self.min, dtype=np.float64).reshape(3)
        self.max = np.asarray(self.max, dtype=np.float64).reshape(3)
        if not np.all(self.min < self.max):
            raise ValueError("fov min must be strictly below max on every axis")

    def contains(self, positions: np.ndarray) -> np.ndarray:
        """Boolean mask of rows inside the box (half-open on the upper side)."""
        p = np.asarray(positions, dtype=np.float64)
        return np.all((p >= self.min) & (p < self.max), axis=1)


@dataclass
class PointCloud:
    """N points with positions, low-level features, optional labels and a
    validity mask.

    ``positions`` is N x 3 float32, ``features`` N x C float32 with C in
    {3, 5}, ``labels`` an optional N vector of class ids (including
    ``IGNORE_LABEL``), and ``valid`` flags real points versus zero padding.
    """

    positions: np.ndarray
    features: np.ndarray
    labels: Optional[np.ndarray] = None
    valid: Optional[np.ndarray] = None

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float32).reshape(-1, 3)
        n = self.positions.shape[0]
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise ValueError("features must be N x C aligned with positions")
        if self.features.shape[1] not in FEATURE_DIMS.values():
            raise ValueError(f"unsupported feature width {self.features.shape[1]}")
        if self.labels is not None:
            self.labels = np.ascontiguousarray(self.labels, dtype=np.int32).reshape(-1)
            if self.labels.shape[0] != n:
                raise ValueError("labels must align with positions")
        if self.valid is None:
            self.valid = np.ones(n, dtype=bool)
        else:
            self.valid = np.ascontiguousarray(self.valid, dtype=bool).reshape(-1)
            if self.valid.shape[0] != n:
                raise ValueError("valid mask must align with positions")
        if self.valid.any():
            rows = self.valid
            if not (np.isfinite(self.positions[rows]).all() and np.isfinite(self.features[rows]).all()):
                raise ValueError("non-finite coordinates or features on valid points")

    @property
    def n_points(self) -> int:
        return self.positions.shape[0]

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())

    @property
    def feature_mode(self) -> str:
        return feature_mode_for(self.features.shape[1])

    def select(self, index: np.ndarray) -> "PointCloud":
        """New cloud containing the rows picked by ``index`` (order kept)."""
        return PointCloud(
            positions=self.positions[index],
            features=self.features[index],
            labels=None if self.labels is None else self.labels[index],
            valid=self.valid[index],
        )

    def with_positions(self, positions: np.ndarray) -> "PointCloud":
        """Replace positions and recompute the coordinate-derived features.

        Intensity (column 0) is carried over untouched; x/y/z/range columns
        are rebuilt so the feature block stays consistent with the geometry.
        """
        feats = point_features(positions, self.features[:, 0], self.feature_mode)
        return replace(self, positions=np.asarray(positions, dtype=np.float32), features=feats)


def voxel_downsample(pc: PointCloud, voxel_size: float) -> tuple[PointCloud, np.ndarray]:
    """Keep one point per occupied cubic voxel.

    The survivor of each voxel is the first point in input order. Returns the
    downsampled cloud and the kept row indices (ascending).
    """
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    if pc.n_points == 0:
        return pc, np.zeros(0, dtype=np.int64)
    if not pc.valid.all():
        raise ValueError("voxel_downsample expects an unpadded cloud")
    quant = np.floor(pc.positions.astype(np.float64) / voxel_size).astype(np.int64)
    _, first = np.unique(quant, axis=0, return_index=True)
    kept = np.sort(first)
    return pc.select(kept), kept


def crop_fov(pc: PointCloud, fov: Fov) -> tuple[PointCloud, np.ndarray]:
    """Split a cloud at the FOV boundary.

    Returns the inside cloud (rows with ``min <= p < max`` on all axes, input
    order preserved) and the indices of the complementary outside rows.
    """
    mask = fov.contains(pc.positions)
    inside = pc.select(np.flatnonzero(mask))
    outside = np.flatnonzero(~mask)
    return inside, outside


def sample_fixed(pc: PointCloud, n_target: int, rng: np.random.Generator) -> PointCloud:
    """Force a cloud to exactly ``n_target`` rows.

    Oversized clouds keep a random anchor point plus its n_target - 1 nearest
    points; undersized clouds are zero padded with ``valid = False`` rows
    labeled ``IGNORE_LABEL``.
    """
    if n_target < 1:
        raise ValueError("n_target must be >= 1")
    n = pc.n_points
    if n == n_target:
        return pc
    if n > n_target:
        anchor = int(rng.integers(n))
        d2 = _sq_dist_to(pc.positions, pc.positions[anchor])
        d2[anchor] = -1.0  # anchor always first
        order = np.argsort(d2, kind="stable")
        kept = np.sort(order[:n_target])
        return pc.select(kept)
    pad = n_target - n
    positions = np.vstack([pc.positions, np.zeros((pad, 3), dtype=np.float32)])
    features = np.vstack([pc.features, np.zeros((pad, pc.features.shape[1]), dtype=np.float32)])
    labels = None
    if pc.labels is not None:
        labels = np.concatenate([pc.labels, np.full(pad, IGNORE_LABEL, dtype=np.int32)])
    valid = np.concatenate([pc.valid, np.zeros(pad, dtype=bool)])
    return PointCloud(positions, features, labels, valid)


def _sq_dist_to(points: np.ndarray, query: np.ndarray) -> np.ndarray:
    diff = points.astype(np.float64) - query.astype(np.float64)
    return np.einsum("ij,ij->i", diff, diff)


def knn(pc: PointCloud, k: int) -> np.ndarray:
    """Exact k nearest valid neighbors of every row, self excluded.

    Returns an N x k integer array. Ties break toward the smaller point
    index; when fewer than k candidates exist the farthest found neighbor is
    repeated (a lone point lists itself). Uses a uniform-grid search above
    ``_BRUTE_FORCE_MAX`` valid points, brute force below.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    cand = np.flatnonzero(pc.valid)
    if cand.size == 0:
        raise ValueError("empty cloud")
    pts = pc.positions.astype(np.float64)
    out = np.empty((pc.n_points, k), dtype=np.int64)
    if cand.size <= _BRUTE_FORCE_MAX:
        _knn_brute(pts, cand, np.arange(pc.n_points), k, out)
        return out
    queries_valid = cand
    queries_pad = np.flatnonzero(~pc.valid)
    _knn_grid(pts, cand, queries_valid, k, out)
    if queries_pad.size:
        _knn_brute(pts, cand, queries_pad, k, out)
    return out


def _fill_row(cand_idx: np.ndarray, d2: np.ndarray, query: int, k: int) -> np.ndarray:
    """Sort candidates by (distance, index), drop the query, pad to k."""
    order = np.lexsort((cand_idx, d2))
    ranked = cand_idx[order]
    ranked = ranked[ranked != query]
    if ranked.size == 0:
        return np.full(k, query, dtype=np.int64)
    if ranked.size >= k:
        return ranked[:k]
    return np.concatenate([ranked, np.full(k - ranked.size, ranked[-1], dtype=np.int64)])


def _knn_brute(pts, cand, queries, k, out):
    cpts = pts[cand]
    for start in range(0, queries.size, _CHUNK):
        rows = queries[start : start + _CHUNK]
        diff = pts[rows][:, None, :] - cpts[None, :, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        # stable sort on distance keeps ascending candidate index on ties
        is_self = cand[None, :] == rows[:, None]
        d2[is_self] = np.inf
        order = np.argsort(d2, axis=1, kind="stable")
        avail = cand.size - is_self.sum(axis=1)
        take = min(k, cand.size)
        nbr = cand[order[:, :take]]
        for r, row in enumerate(rows):
            c = int(avail[r])
            if c >= k:
                out[row] = nbr[r, :k]
            elif c == 0:
                out[row] = row
            else:
                got = cand[order[r, :c]]
                out[row, :c] = got
                out[row, c:] = got[-1]


def _knn_grid(pts, cand, queries, k, out):
    """Exact search over a uniform spatial hash of the valid points.

    Cells are searched in expanding Chebyshev shells around the query's cell;
    once the k-th best distance drops strictly below the ring guarantee
    ``r * h`` no unexplored point can enter the result.
    """
    cpts = pts[cand]
    lo = cpts.min(axis=0)
    extent = cpts.max(axis=0) - lo
    # aim for O(1) points per cell; degenerate extents just cost extra shells
    vol = float(np.prod(np.maximum(extent, 1e-9)))
    h = max((vol / cand.size) ** (1.0 / 3.0), 1e-6)
    dims = np.maximum(np.floor(extent / h).astype(np.int64) + 1, 1)
    cell3 = np.minimum(np.floor((cpts - lo) / h).astype(np.int64), dims - 1)
    lin = (cell3[:, 0] * dims[1] + cell3[:, 1]) * dims[2] + cell3[:, 2]
    order = np.argsort(lin, kind="stable")  # ascending point index inside a cell
    lin_sorted = lin[order]
    occ_ids, occ_starts = np.unique(lin_sorted, return_index=True)
    occ_ends = np.append(occ_starts[1:], lin_sorted.size)

    shell_cache: dict[int, np.ndarray] = {}

    def shell_offsets(r: int) -> np.ndarray:
        if r not in shell_cache:
            if r == 0:
                shell_cache[r] = np.zeros((1, 3), dtype=np.int64)
            else:
                rng_ = np.arange(-r, r + 1)
                grid = np.stack(np.meshgrid(rng_, rng_, rng_, indexing="ij"), axis=-1).reshape(-1, 3)
                shell_cache[r] = grid[np.abs(grid).max(axis=1) == r]
        return shell_cache[r]

    max_r = int(dims.max())
    for qi in queries:
        q = pts[qi]
        qc = np.minimum(np.maximum(np.floor((q - lo) / h).astype(np.int64), 0), dims - 1)
        got_idx: list[np.ndarray] = []
        got_d2: list[np.ndarray] = []
        count = 0
        for r in range(max_r + 2):
            cells = qc[None, :] + shell_offsets(r)
            ok = np.all((cells >= 0) & (cells < dims), axis=1)
            if ok.any():
                ids = (cells[ok, 0] * dims[1] + cells[ok, 1]) * dims[2] + cells[ok, 2]
                pos = np.searchsorted(occ_ids, ids)
                hit = (pos < occ_ids.size) & (occ_ids[np.minimum(pos, occ_ids.size - 1)] == ids)
                for p in pos[hit]:
                    local = order[occ_starts[p] : occ_ends[p]]
                    idx = cand[local]
                    diff = cpts[local] - q
                    got_idx.append(idx)
                    got_d2.append(np.einsum("ij,ij->i", diff, diff))
                    count += idx.size
            # every valid query sits in shell 0, so "count - 1" candidates remain
            # after self exclusion; unexplored points lie beyond r * h
            if count - 1 >= k:
                d2_all = np.concatenate(got_d2)
                idx_all = np.concatenate(got_idx)
                d2q = d2_all[idx_all != qi]
                kth = np.partition(d2q, k - 1)[k - 1]
                if kth < (r * h) ** 2:
                    out[qi] = _fill_row(idx_all, d2_all, qi, k)
                    break
            if r > max_r:
                idx_all = np.concatenate(got_idx) if got_idx else np.zeros(0, dtype=np.int64)
                d2_all = np.concatenate(got_d2) if got_d2 else np.zeros(0)
                out[qi] = _fill_row(idx_all, d2_all, qi, k)
                break


def nearest_indices(src_points: np.ndarray, dst_points: np.ndarray) -> np.ndarray:
    """Index of the nearest src point for every dst point (tie: lower index)."""
    src = np.asarray(src_points, dtype=np.float64)
    dst = np.asarray(dst_points, dtype=np.float64)
    if src.size == 0:
        raise ValueError("empty source point set")
    out = np.empty(dst.shape[0], dtype=np.int64)
    for start in range(0, dst.shape[0], _CHUNK):
        block = dst[start : start + _CHUNK]
        diff = block[:, None, :] - src[None, :, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        out[start : start + _CHUNK] = np.argmin(d2, axis=1)  # first min = lowest index
    return out


def nn_propagate_labels(src: PointCloud, src_labels: np.ndarray, dst_points: np.ndarray) -> np.ndarray:
    """Give every dst point the label of its nearest valid src point."""
    src_labels = np.asarray(src_labels).reshape(-1)
    if src_labels.shape[0] != src.n_points:
        raise ValueError("labels must align with the source cloud")
    vidx = np.flatnonzero(src.valid)
    if vidx.size == 0:
        raise ValueError("empty cloud")
    nearest = nearest_indices(src.positions[vidx], dst_points)
    return src_labels[vidx[nearest]]
