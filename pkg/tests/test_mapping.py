"""Densification and octree tests against independent re-implementations."""

import math

import numpy as np
import pytest

from rovtwin.geom import Box
from rovtwin.mapping import (
    DenseSurface,
    EmptyInput,
    OccupancyOctree,
    densify,
    insert_cloud,
    is_occupied,
    surface_to_cloud,
)
from rovtwin.messages import PointCloud


def idw_fill_oracle(z, filled, max_fill, neighbors=8):
    """Straightforward per-cell re-implementation of the fill rule."""
    nx, ny = z.shape
    out = z.copy()
    filled_cells = [(i, j) for i in range(nx) for j in range(ny) if filled[i, j]]
    for i in range(nx):
        for j in range(ny):
            if filled[i, j]:
                continue
            cands = [
                (fi, fj)
                for fi, fj in filled_cells
                if max(abs(fi - i), abs(fj - j)) <= max_fill
            ]
            if not cands:
                continue
            cands.sort(key=lambda c: ((c[0] - i) ** 2 + (c[1] - j) ** 2, c[0], c[1]))
            chosen = cands[:neighbors]
            wsum = vsum = 0.0
            for fi, fj in chosen:
                w = 1.0 / ((fi - i) ** 2 + (fj - j) ** 2)
                wsum += w
                vsum += w * z[fi, fj]
            out[i, j] = vsum / wsum
    return out


def test_densify_constant_field():
    pts = [[0, 0, -10], [0, 2, -10], [2, 0, -10], [2, 2, -10]]
    surface = densify(PointCloud(pts), cell_size=1.0, max_fill_distance=4)
    defined = surface.z[surface.defined_mask]
    assert defined.size == surface.nx * surface.ny  # all reachable
    assert np.allclose(defined, -10.0, atol=1e-12)


def test_densify_empty_cloud_raises():
    with pytest.raises(EmptyInput):
        densify(PointCloud(np.zeros((0, 3))))


def test_densify_dense_plane_samples():
    # one sample exactly at each cell center of plane z = x
    cell = 0.5
    centers = [i * cell for i in range(12)]
    pts = [[cx, cy, cx] for cx in centers for cy in centers]
    surface = densify(PointCloud(pts), cell_size=cell, max_fill_distance=0)
    assert surface.defined_count() == 144
    assert (surface.nx, surface.ny) == (12, 12)
    for ix in range(surface.nx):
        for iy in range(surface.ny):
            cx, _ = surface.cell_center(ix, iy)
            assert abs(surface.z[ix, iy] - cx) < 1e-6


def test_densify_matches_idw_oracle_and_convexity():
    rng = np.random.default_rng(31)
    pts = np.column_stack(
        [rng.uniform(0, 8, 60), rng.uniform(0, 8, 60), rng.uniform(-12, -8, 60)]
    )
    cell, max_fill = 0.5, 4
    surface = densify(PointCloud(pts), cell_size=cell, max_fill_distance=max_fill)

    # rebuild the binned means independently
    ox, oy = surface.origin
    nx, ny = surface.nx, surface.ny
    binned = np.full((nx, ny), np.nan)
    counts = np.zeros((nx, ny), dtype=int)
    sums = np.zeros((nx, ny))
    pts32 = np.asarray(PointCloud(pts).points, dtype=float)
    for x, y, z in pts32:
        ix = min(max(int(np.rint((x - ox) / cell)), 0), nx - 1)
        iy = min(max(int(np.rint((y - oy) / cell)), 0), ny - 1)
        sums[ix, iy] += z
        counts[ix, iy] += 1
    filled = counts > 0
    binned[filled] = sums[filled] / counts[filled]

    expect = idw_fill_oracle(binned, filled, max_fill)
    got = surface.z
    assert np.array_equal(np.isnan(expect), np.isnan(got))
    mask = ~np.isnan(expect)
    assert np.allclose(expect[mask], got[mask], atol=1e-9)

    # convexity: every interpolated value within [min, max] of filled values
    zmin, zmax = binned[filled].min(), binned[filled].max()
    interp = got[mask & ~filled]
    assert np.all(interp >= zmin - 1e-9) and np.all(interp <= zmax + 1e-9)


def test_densify_translation_equivariant_in_z():
    rng = np.random.default_rng(5)
    pts = np.column_stack(
        [rng.uniform(0, 6, 40), rng.uniform(0, 6, 40), rng.uniform(-11, -9, 40)]
    )
    c = -3.25  # exactly representable, no float32 rounding on shift
    a = densify(PointCloud(pts), cell_size=0.5, max_fill_distance=3)
    shifted = pts.astype(np.float32).astype(float)
    shifted[:, 2] += c
    b = densify(PointCloud(shifted), cell_size=0.5, max_fill_distance=3)
    assert np.array_equal(np.isnan(a.z), np.isnan(b.z))
    mask = ~np.isnan(a.z)
    assert np.allclose(b.z[mask], a.z[mask] + c, atol=1e-9)


def test_densify_unreachable_cells_stay_unknown():
    pts = [[0, 0, -10], [10, 10, -10]]  # two far corners, small fill cap
    surface = densify(PointCloud(pts), cell_size=1.0, max_fill_distance=2)
    assert surface.defined_count() < surface.nx * surface.ny
    assert np.isnan(surface.z).any()


# -- octree ------------------------------------------------------------------


def unit_tree(res=0.1, lo=(0.0, 0.0, 0.0), hi=(10.0, 10.0, 10.0)):
    return OccupancyOctree(res, Box(lo, hi))


def test_insert_floor_quantization():
    tree = unit_tree()
    insert_cloud(tree, PointCloud([[0.05, 0.05, 0.05]]))
    assert (0, 0, 0) in tree.occupied
    assert is_occupied(tree, (0.01, 0.09, 0.05))


def test_two_points_one_voxel():
    tree = unit_tree()
    insert_cloud(tree, PointCloud([[0.51, 0.52, 0.53], [0.55, 0.56, 0.57]]))
    assert len(tree.occupied) == 1


def test_insert_matches_bruteforce_quantization_oracle():
    tree = unit_tree(res=0.25, hi=(8.0, 8.0, 8.0))
    rng = np.random.default_rng(17)
    pts = rng.uniform(-1.0, 9.0, (10_000, 3))  # includes out-of-bounds
    insert_cloud(tree, PointCloud(pts))

    pts32 = np.asarray(PointCloud(pts).points, dtype=float)
    oracle = set()
    skipped = 0
    for p in pts32:
        if all(0.0 <= c < 8.0 for c in p):
            oracle.add(tuple(int(math.floor(c / 0.25)) for c in p))
        else:
            skipped += 1
    assert tree.occupied == oracle
    assert tree.skipped_points == skipped


def test_insert_commutative_idempotent():
    rng = np.random.default_rng(8)
    pts = rng.uniform(0, 10, (500, 3)).astype(np.float32)
    a = unit_tree()
    insert_cloud(a, PointCloud(pts))
    b = unit_tree()
    perm = rng.permutation(500)
    doubled = np.vstack([pts[perm], pts[perm[::2]]])
    insert_cloud(b, PointCloud(doubled))
    assert a.occupied == b.occupied


def test_is_occupied_trivials_and_oracle():
    tree = unit_tree(res=0.2)
    assert not is_occupied(tree, (1, 1, 1))
    rng = np.random.default_rng(77)
    pts = rng.uniform(0, 10, (2000, 3))
    insert_cloud(tree, PointCloud(pts))
    for p in np.asarray(PointCloud(pts).points, dtype=float):
        assert is_occupied(tree, p)
    for _ in range(10_000):
        q = rng.uniform(-0.5, 10.5, 3)
        inside = all(0.0 <= c < 10.0 for c in q)
        member = tuple(int(math.floor(c / 0.2)) for c in q) in tree.occupied
        assert is_occupied(tree, q) == (inside and member)


def test_out_of_bounds_query_false():
    tree = unit_tree()
    insert_cloud(tree, PointCloud([[0.05, 0.05, 0.05]]))
    assert not is_occupied(tree, (-0.01, 0.05, 0.05))
    assert not is_occupied(tree, (10.0, 0.05, 0.05))


def test_max_depth_guard():
    with pytest.raises(ValueError):
        OccupancyOctree(0.001, Box((0, 0, 0), (100, 100, 100)))  # 10^5 cells/axis
    tree = OccupancyOctree(0.25, Box((0, 0, 0), (16, 16, 16)))
    assert tree.max_depth <= 16


def test_surface_to_cloud_counts():
    empty = DenseSurface((0, 0), 1.0, np.full((4, 4), np.nan))
    assert len(surface_to_cloud(empty)) == 0
    full = DenseSurface((0, 0), 1.0, np.full((10, 10), -5.0))
    cloud = surface_to_cloud(full)
    assert len(cloud) == 100


def test_flat_floor_round_trip_single_layer():
    rng = np.random.default_rng(12)
    pts = np.column_stack(
        [rng.uniform(0, 9.5, 300), rng.uniform(0, 9.5, 300), np.full(300, -6.0)]
    )
    surface = densify(PointCloud(pts), cell_size=0.5, max_fill_distance=4)
    cloud = surface_to_cloud(surface)
    tree = OccupancyOctree(0.5, Box((-1, -1, -10), (11, 11, 0)))
    insert_cloud(tree, cloud)
    layers = {k[2] for k in tree.occupied}
    assert len(layers) == 1


def test_octree_json_round_trip(tmp_path):
    tree = unit_tree(res=0.5)
    rng = np.random.default_rng(3)
    insert_cloud(tree, PointCloud(rng.uniform(0, 10, (200, 3))))
    path = tmp_path / "tree.json"
    tree.save(path)
    back = OccupancyOctree.load(path)
    assert back.occupied == tree.occupied
    assert back.resolution == tree.resolution
    assert back.bounds == tree.bounds


def test_enumerated_keys_agree_with_queries():
    tree = unit_tree(res=0.5)
    rng = np.random.default_rng(4)
    insert_cloud(tree, PointCloud(rng.uniform(0, 10, (300, 3))))
    for key in tree.occupied:
        center = tuple((k + 0.5) * 0.5 for k in key)
        assert is_occupied(tree, center)
    assert len(set(map(tuple, (tree.to_json()["keys"])))) == len(tree.occupied)
