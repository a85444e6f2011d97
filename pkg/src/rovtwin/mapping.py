"""Sparse-cloud post-processing: grid densification and occupancy octree.

densify() bins scattered feature points into an xy grid (cell mean), then
fills nearby empty cells by inverse-distance-squared weighting over the
nearest filled cells. Cells further than the fill cap from any data stay
UNKNOWN (NaN) — no surface is invented where nothing was seen.

The octree is a binary occupancy map at a fixed leaf resolution. Internally
it is a hash set of leaf keys plus a sorted code array for fast vectorized
membership tests; the occupied-key-set semantics are the contract.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .geom import Box
from .messages import PointCloud


class EmptyInput(ValueError):
    """Operation requires at least one input point."""


@dataclass
class DenseSurface:
    """Gridded seafloor depth; NaN entries are UNKNOWN.

    Cells are node-centered: cell (ix, iy) is centered at
    origin + (ix, iy) * cell_size and collects points within half a cell of
    that node, matching the heightmap's node convention.
    """

    origin: tuple[float, float]
    cell_size: float
    z: np.ndarray  # (nx, ny) float64, NaN = UNKNOWN
    stamp_ns: int = 0

    @property
    def nx(self) -> int:
        return self.z.shape[0]

    @property
    def ny(self) -> int:
        return self.z.shape[1]

    @property
    def defined_mask(self) -> np.ndarray:
        return ~np.isnan(self.z)

    def defined_count(self) -> int:
        return int(self.defined_mask.sum())

    def cell_center(self, ix: int, iy: int) -> tuple[float, float]:
        return (
            self.origin[0] + ix * self.cell_size,
            self.origin[1] + iy * self.cell_size,
        )


DEFAULT_CELL_SIZE = 0.25
DEFAULT_MAX_FILL_DISTANCE = 4
DEFAULT_RESOLUTION = 0.25
IDW_NEIGHBORS = 8


def densify(cloud: PointCloud, cell_size: float = DEFAULT_CELL_SIZE,
            max_fill_distance: int = DEFAULT_MAX_FILL_DISTANCE,
            stamp_ns: int | None = None) -> DenseSurface:
    """Scattered points -> gridded surface (cell means + capped IDW fill).

    Fill rule: an empty cell within `max_fill_distance` (Chebyshev, cells) of
    at least one filled cell gets the inverse-distance-squared combination of
    its nearest <= 8 filled cells; nearness ties break lexicographically by
    the candidate's (ix, iy). Everything else stays UNKNOWN.
    """
    if cell_size <= 0:
        raise ValueError(f"cell_size must be > 0, got {cell_size}")
    if max_fill_distance < 0:
        raise ValueError("max_fill_distance must be >= 0")
    pts = np.asarray(cloud.points, dtype=float)
    if pts.shape[0] == 0:
        raise EmptyInput("cannot densify an empty cloud")

    ox, oy = float(pts[:, 0].min()), float(pts[:, 1].min())
    nx = int(np.rint((float(pts[:, 0].max()) - ox) / cell_size)) + 1
    ny = int(np.rint((float(pts[:, 1].max()) - oy) / cell_size)) + 1

    ix = np.clip(np.rint((pts[:, 0] - ox) / cell_size).astype(int), 0, nx - 1)
    iy = np.clip(np.rint((pts[:, 1] - oy) / cell_size).astype(int), 0, ny - 1)
    flat = ix * ny + iy
    sums = np.zeros(nx * ny)
    counts = np.zeros(nx * ny, dtype=int)
    np.add.at(sums, flat, pts[:, 2])
    np.add.at(counts, flat, 1)

    z = np.full(nx * ny, np.nan)
    filled = counts > 0
    z[filled] = sums[filled] / counts[filled]
    z = z.reshape(nx, ny)
    filled = filled.reshape(nx, ny)

    if max_fill_distance > 0 and not filled.all():
        z = _idw_fill(z, filled, max_fill_distance)

    return DenseSurface((ox, oy), float(cell_size), z,
                        cloud.stamp_ns if stamp_ns is None else stamp_ns)


def _idw_fill(z: np.ndarray, filled: np.ndarray, max_fill: int) -> np.ndarray:
    """Fill empty cells from nearby filled cells, preserving the tie order.

    Candidate offsets are pre-sorted by (distance^2, dx, dy); for a fixed
    target cell that order equals sorting candidates by (distance^2, ix, iy),
    so taking the first 8 valid candidates per cell honors the tie-break.
    """
    nx, ny = z.shape
    w = max_fill
    offs = [(dx, dy) for dx in range(-w, w + 1) for dy in range(-w, w + 1) if (dx, dy) != (0, 0)]
    offs.sort(key=lambda o: (o[0] * o[0] + o[1] * o[1], o[0], o[1]))
    offs = np.array(offs)  # (m, 2)
    inv_d2 = 1.0 / (offs[:, 0] ** 2 + offs[:, 1] ** 2).astype(float)

    ex, ey = np.nonzero(~filled)
    if ex.size == 0:
        return z
    cx = ex[:, None] + offs[None, :, 0]  # (n_empty, m)
    cy = ey[:, None] + offs[None, :, 1]
    in_grid = (cx >= 0) & (cx < nx) & (cy >= 0) & (cy < ny)
    cand_filled = np.zeros_like(in_grid)
    cand_filled[in_grid] = filled[cx[in_grid], cy[in_grid]]

    # first <= 8 valid candidates per row, in the pre-sorted offset order
    rank = np.cumsum(cand_filled, axis=1)
    chosen = cand_filled & (rank <= IDW_NEIGHBORS)

    weights = np.where(chosen, inv_d2[None, :], 0.0)
    values = np.zeros_like(weights)
    values[chosen] = z[cx[chosen], cy[chosen]]
    wsum = weights.sum(axis=1)
    reachable = wsum > 0
    out = z.copy()
    out[ex[reachable], ey[reachable]] = (
        (weights * values).sum(axis=1)[reachable] / wsum[reachable]
    )
    return out


def surface_to_cloud(surface: DenseSurface, seq: int = 0) -> PointCloud:
    """One point per defined cell, at the cell center xy and the cell depth."""
    ix, iy = np.nonzero(surface.defined_mask)
    pts = np.empty((ix.size, 3), dtype=np.float32)
    pts[:, 0] = surface.origin[0] + ix * surface.cell_size
    pts[:, 1] = surface.origin[1] + iy * surface.cell_size
    pts[:, 2] = surface.z[ix, iy]
    return PointCloud(pts, surface.stamp_ns, seq)


class OccupancyOctree:
    """Binary occupancy map: set of occupied leaf voxels inside fixed bounds.

    key(p) = floor((p - bounds.min) / resolution), componentwise. Points on
    or past the upper bound fall outside.
    """

    MAX_TREE_DEPTH = 16

    def __init__(self, resolution: float, bounds: Box):
        if resolution <= 0:
            raise ValueError(f"resolution must be > 0, got {resolution}")
        self.resolution = float(resolution)
        self.bounds = bounds
        size = bounds.size
        self.dims = tuple(
            max(1, int(math.ceil(s / resolution - 1e-9))) for s in size
        )
        self.max_depth = max(1, math.ceil(math.log2(max(self.dims))))
        if self.max_depth > self.MAX_TREE_DEPTH:
            raise ValueError(
                f"grid of {self.dims} voxels needs depth {self.max_depth} > "
                f"{self.MAX_TREE_DEPTH}; coarsen the resolution or shrink bounds"
            )
        self.occupied: set[tuple[int, int, int]] = set()
        self.skipped_points = 0
        self._codes: np.ndarray | None = None
        self._dense: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.occupied)

    # -- keying ------------------------------------------------------------

    def key_of(self, p) -> tuple[int, int, int]:
        mn = self.bounds.min
        return (
            int(math.floor((float(p[0]) - mn[0]) / self.resolution)),
            int(math.floor((float(p[1]) - mn[1]) / self.resolution)),
            int(math.floor((float(p[2]) - mn[2]) / self.resolution)),
        )

    def key_in_grid(self, key) -> bool:
        return all(0 <= k < d for k, d in zip(key, self.dims))

    def keys_of_points(self, pts: np.ndarray) -> np.ndarray:
        mn = np.array(self.bounds.min)
        return np.floor((np.asarray(pts, dtype=float) - mn) / self.resolution).astype(np.int64)

    def encode_keys(self, keys: np.ndarray) -> np.ndarray:
        """Pack (n,3) integer keys into sortable int64 codes."""
        dx, dy, dz = self.dims
        k = np.asarray(keys, dtype=np.int64)
        return (k[:, 0] * dy + k[:, 1]) * dz + k[:, 2]

    def sorted_codes(self) -> np.ndarray:
        """Sorted code array for vectorized membership tests (cached)."""
        if self._codes is None:
            if self.occupied:
                keys = np.array(sorted(self.occupied), dtype=np.int64)
                self._codes = np.sort(self.encode_keys(keys))
            else:
                self._codes = np.empty(0, dtype=np.int64)
        return self._codes

    DENSE_MASK_CELL_LIMIT = 32_000_000

    def dense_mask(self) -> np.ndarray | None:
        """Boolean occupancy grid for O(1) key lookups, or None if too large."""
        if self._dense is None:
            dx, dy, dz = self.dims
            if dx * dy * dz > self.DENSE_MASK_CELL_LIMIT:
                return None
            mask = np.zeros(self.dims, dtype=bool)
            if self.occupied:
                keys = np.array(sorted(self.occupied), dtype=np.int64)
                mask[keys[:, 0], keys[:, 1], keys[:, 2]] = True
            self._dense = mask
        return self._dense

    # -- mutation ----------------------------------------------------------

    def insert_points(self, pts) -> int:
        """Occupy the voxel of every in-bounds point; returns skipped count."""
        arr = np.asarray(pts, dtype=float)
        if arr.size == 0:
            return 0
        mn = np.array(self.bounds.min)
        mx = np.array(self.bounds.max)
        ok = np.all((arr >= mn) & (arr < mx), axis=1)
        keys = self.keys_of_points(arr)
        skipped = int((~ok).sum())
        self.skipped_points += skipped
        if ok.any():
            uniq = np.unique(keys[ok], axis=0)
            before = len(self.occupied)
            self.occupied.update(map(tuple, uniq.tolist()))
            if len(self.occupied) != before:
                self._codes = None
                self._dense = None
        return skipped

    # -- serialization -----------------------------------------------------

    def to_json(self) -> dict:
        return {
            "resolution": self.resolution,
            "bounds": self.bounds.to_json(),
            "keys": sorted(list(k) for k in self.occupied),
        }

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_json(), f)

    @staticmethod
    def from_json(obj: dict) -> "OccupancyOctree":
        tree = OccupancyOctree(float(obj["resolution"]), Box.from_json(obj["bounds"]))
        tree.occupied = {tuple(int(c) for c in k) for k in obj["keys"]}
        return tree

    @staticmethod
    def load(path) -> "OccupancyOctree":
        with open(path, encoding="utf-8") as f:
            return OccupancyOctree.from_json(json.load(f))


def insert_cloud(tree: OccupancyOctree, cloud: PointCloud) -> OccupancyOctree:
    """Insert every in-bounds cloud point; out-of-bounds points are counted."""
    tree.insert_points(cloud.points)
    return tree


def is_occupied(tree: OccupancyOctree, p) -> bool:
    """Voxel-occupancy query; anything outside the bounds is free."""
    return tree.bounds.contains(p) and tree.key_of(p) in tree.occupied
