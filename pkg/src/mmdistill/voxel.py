"""Sparse voxel grids, crucial-voxel mining, and voxel-to-point feature propagation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
from scipy.spatial import cKDTree

from .tensor import Tensor, take_rows

# interpolation treats a query closer than this as sitting on the voxel center
CENTER_SNAP = 1e-9

# crucial codes, ordered by priority
NONE, TP, FP, FN = 0, 1, 2, 3


@dataclass(frozen=True)
class GridSpec:
    origin: tuple = (-8.0, -8.0, -1.0)
    voxel_size: tuple = (0.1, 0.1, 0.2)
    dims: tuple = (160, 160, 10)
    bev_stride: int = 4

    def __post_init__(self):
        if any(s <= 0 for s in self.voxel_size):
            raise ValueError("voxel_size must be positive")
        if any(d <= 0 for d in self.dims):
            raise ValueError("dims must be positive")
        if self.dims[0] % self.bev_stride or self.dims[1] % self.bev_stride:
            raise ValueError("nx and ny must be multiples of bev_stride")

    @classmethod
    def from_range(cls, rng, voxel_size=(0.1, 0.1, 0.2), bev_stride: int = 4) -> "GridSpec":
        x0, x1, y0, y1, z0, z1 = rng
        dims = tuple(int(round((hi - lo) / s)) for lo, hi, s in
                     ((x0, x1, voxel_size[0]), (y0, y1, voxel_size[1]), (z0, z1, voxel_size[2])))
        return cls((x0, y0, z0), tuple(voxel_size), dims, bev_stride)

    @property
    def bev_shape(self) -> tuple:
        """(H, W) of the BEV maps: rows follow y, columns follow x."""
        return (self.dims[1] // self.bev_stride, self.dims[0] // self.bev_stride)

    @property
    def bev_cell(self) -> tuple:
        """BEV cell size in meters along (x, y)."""
        return (self.voxel_size[0] * self.bev_stride, self.voxel_size[1] * self.bev_stride)

    def voxel_centers(self, coords: np.ndarray) -> np.ndarray:
        return np.asarray(self.origin) + (np.asarray(coords, dtype=np.float64) + 0.5) * np.asarray(self.voxel_size)

    def bev_cell_of(self, coords: np.ndarray) -> tuple:
        coords = np.asarray(coords)
        return coords[:, 1] // self.bev_stride, coords[:, 0] // self.bev_stride


@dataclass
class SparseVoxelGrid:
    coords: np.ndarray                      # (V, 3) int (ix, iy, iz), lexicographically sorted
    features: Union[np.ndarray, Tensor]     # (V, C)
    skipped: int = 0
    index: dict = field(default=None, repr=False)

    def __post_init__(self):
        if self.index is None:
            self.index = {tuple(int(v) for v in c): i for i, c in enumerate(self.coords)}

    def __len__(self) -> int:
        return len(self.coords)

    @property
    def num_channels(self) -> int:
        return self.features.shape[1]

    def with_features(self, features) -> "SparseVoxelGrid":
        return SparseVoxelGrid(self.coords, features, self.skipped, self.index)


@dataclass
class CrucialVoxelSets:
    tp_v: np.ndarray
    fp_v: np.ndarray
    fn_v: np.ndarray

    @property
    def all(self) -> np.ndarray:
        return np.sort(np.concatenate([self.tp_v, self.fp_v, self.fn_v]))

    @property
    def false(self) -> np.ndarray:
        return np.sort(np.concatenate([self.fp_v, self.fn_v]))


def voxel_feature_dim(K: int) -> int:
    # offset (3) + log count (1) + height (1) + semantics (K)
    return 5 + K


def voxelize(scene, spec: GridSpec, use_semantics: bool) -> SparseVoxelGrid:
    """Average points into occupied voxels.

    Features per voxel: mean offset from the voxel center in voxel units,
    log(1 + count), normalized voxel height, and mean semantics (zeros when
    ``use_semantics`` is false, so both modalities have the same width).
    """
    pts = np.asarray(scene.points, dtype=np.float64).reshape(-1, 3)
    K = scene.semantics.shape[1]
    size = np.asarray(spec.voxel_size)
    ijk = np.floor((pts - np.asarray(spec.origin)) / size).astype(np.int64)
    inside = np.all((ijk >= 0) & (ijk < np.asarray(spec.dims)), axis=1)
    skipped = int((~inside).sum())
    ijk, pts = ijk[inside], pts[inside]
    sem = scene.semantics[inside]
    C = voxel_feature_dim(K)
    if len(ijk) == 0:
        return SparseVoxelGrid(np.zeros((0, 3), dtype=np.int64), np.zeros((0, C)), skipped)
    coords, inverse, counts = np.unique(ijk, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    v = len(coords)
    centers = spec.voxel_centers(coords)
    feats = np.zeros((v, C))
    offs = np.zeros((v, 3))
    np.add.at(offs, inverse, pts)
    feats[:, :3] = (offs / counts[:, None] - centers) / size
    feats[:, 3] = np.log1p(counts)
    feats[:, 4] = (coords[:, 2] + 0.5) / spec.dims[2]
    if use_semantics:
        acc = np.zeros((v, K))
        np.add.at(acc, inverse, sem)
        feats[:, 5:] = acc / counts[:, None]
    return SparseVoxelGrid(coords.astype(np.int64), feats, skipped)


def crucial_code_map(crucial, bev_shape: tuple) -> np.ndarray:
    """Collapse per-head crucial cells into one BEV map of priority codes."""
    code = np.zeros(bev_shape, dtype=np.int8)
    for label, cells in ((TP, crucial.tp), (FP, crucial.fp), (FN, crucial.fn)):
        if len(cells):
            c = np.asarray(cells)
            np.maximum.at(code, (c[:, 1], c[:, 2]), label)
    return code


def mine_crucial_voxels(crucial, grid: SparseVoxelGrid, spec: GridSpec) -> CrucialVoxelSets:
    """Active voxels in the full-height pillars under crucial BEV cells.

    Heads are merged; a voxel under cells of several kinds takes FN over FP over TP.
    """
    if len(grid) == 0:
        empty = np.zeros(0, dtype=np.int64)
        return CrucialVoxelSets(empty, empty.copy(), empty.copy())
    code = crucial_code_map(crucial, spec.bev_shape)
    r, c = spec.bev_cell_of(grid.coords)
    lab = code[r, c]
    return CrucialVoxelSets(np.flatnonzero(lab == TP), np.flatnonzero(lab == FP),
                            np.flatnonzero(lab == FN))


def idw_neighbors(centers: np.ndarray, queries: np.ndarray, k: int):
    """k nearest centers per query and their normalized inverse-distance weights.

    Returns (idx (M, k), weights (M, k)) with every weight row summing to one.
    """
    if len(centers) == 0:
        raise ValueError("cannot interpolate from an empty voxel grid")
    if k < 1:
        raise ValueError("k must be >= 1")
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    k = min(k, len(centers))
    dist, idx = cKDTree(centers).query(queries, k=k)
    dist = np.asarray(dist, dtype=np.float64).reshape(len(queries), k)
    idx = np.asarray(idx, dtype=np.int64).reshape(len(queries), k)
    snap = dist < CENTER_SNAP
    w = 1.0 / np.where(snap, 1.0, dist)
    hit = snap.any(axis=1)
    if hit.any():
        first = np.argmax(snap[hit], axis=1)
        w[hit] = 0.0
        w[np.flatnonzero(hit), first] = 1.0
    return idx, w / w.sum(axis=1, keepdims=True)


def interpolate_to_points(grid: SparseVoxelGrid, query_points: np.ndarray, spec: GridSpec,
                          k: int = 3, features: Optional[Union[np.ndarray, Tensor]] = None):
    """Inverse-distance-weighted voxel features at arbitrary points.

    Differentiable in the grid features when they are a Tensor; the weights
    depend on geometry only.
    """
    feats = grid.features if features is None else features
    idx, w = idw_neighbors(spec.voxel_centers(grid.coords), query_points, k)
    m, kk = idx.shape
    if isinstance(feats, Tensor):
        gathered = take_rows(feats, idx.reshape(-1)).reshape(m, kk, feats.shape[1])
        return (gathered * w[:, :, None]).sum(axis=1)
    return np.einsum("mk,mkc->mc", w, np.asarray(feats)[idx])
