import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmdistill.distill import CrucialSets
from mmdistill.scene import Scene, SceneConfig, generate_scene
from mmdistill.tensor import Tensor, finite_diff_check
from mmdistill.voxel import (
    GridSpec, SparseVoxelGrid, idw_neighbors, interpolate_to_points, mine_crucial_voxels,
    voxel_feature_dim, voxelize,
)

SPEC = GridSpec()


def _scene(points, K=4):
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    sem = np.full((len(pts), K), 0.1)
    return Scene(pts, sem, [], np.full(len(pts), -1), 0)


def _cells(rows):
    return np.asarray(rows, dtype=np.int64).reshape(-1, 3)


def _crucial(tp=(), fp=(), fn=()):
    return CrucialSets(_cells(tp), _cells(fp), _cells(fn))


# ----------------------------------------------------------------- voxelize
def test_five_points_one_voxel():
    pts = np.array([-7.95, -7.95, -0.9]) + np.random.default_rng(0).uniform(-0.02, 0.02, (5, 3))
    g = voxelize(_scene(pts), SPEC, use_semantics=True)
    assert len(g) == 1
    assert g.features[0, 3] == pytest.approx(np.log(6.0), abs=1e-15)
    np.testing.assert_allclose(g.features[0, 5:], 0.1)


def test_empty_scene():
    g = voxelize(_scene(np.zeros((0, 3))), SPEC, True)
    assert len(g) == 0 and g.features.shape == (0, voxel_feature_dim(4))


def test_boundary_point_uses_floor():
    g = voxelize(_scene([[0.0, 0.0, 0.0]]), SPEC, False)
    np.testing.assert_array_equal(g.coords, [[80, 80, 5]])
    g2 = voxelize(_scene([[0.0, 0.0, 0.0]]), SPEC, False)
    assert g.features.tobytes() == g2.features.tobytes()


def test_outside_points_are_counted_not_fatal():
    g = voxelize(_scene([[100.0, 0, 0], [0.05, 0.05, 0.1]]), SPEC, False)
    assert g.skipped == 1 and len(g) == 1


@pytest.mark.parametrize("seed", [0, 3, 11])
def test_modality_changes_features_not_geometry(seed):
    sc = generate_scene(SceneConfig(), seed)
    a, b = voxelize(sc, SPEC, True), voxelize(sc, SPEC, False)
    np.testing.assert_array_equal(a.coords, b.coords)
    assert a.features.shape == b.features.shape
    np.testing.assert_array_equal(a.features[:, :5], b.features[:, :5])
    assert np.all(b.features[:, 5:] == 0)


def test_coords_sorted_and_unique():
    g = voxelize(generate_scene(SceneConfig(), 2), SPEC, True)
    keys = [tuple(c) for c in g.coords]
    assert keys == sorted(set(keys))
    assert all(g.index[k] == i for i, k in enumerate(keys))


# ------------------------------------------------------------------- mining
def _column_grid(coords):
    coords = np.asarray(coords, dtype=np.int64)
    return SparseVoxelGrid(coords, np.zeros((len(coords), 2)))


def test_empty_crucial_sets():
    g = voxelize(generate_scene(SceneConfig(), 0), SPEC, False)
    m = mine_crucial_voxels(_crucial(), g, SPEC)
    assert len(m.tp_v) == len(m.fp_v) == len(m.fn_v) == 0


def test_tp_cell_over_column():
    # BEV cell (row 2, col 3) covers ix in [12, 16), iy in [8, 12)
    g = _column_grid([[13, 9, 0], [13, 9, 4], [13, 9, 7], [16, 9, 0], [13, 12, 0]])
    m = mine_crucial_voxels(_crucial(tp=[(0, 2, 3)]), g, SPEC)
    np.testing.assert_array_equal(m.tp_v, [0, 1, 2])
    assert len(m.fp_v) == len(m.fn_v) == 0


def test_priority_fn_over_fp_over_tp():
    g = _column_grid([[0, 0, 0], [4, 0, 0], [8, 0, 0]])
    m = mine_crucial_voxels(
        _crucial(tp=[(0, 0, 0), (1, 0, 1), (0, 0, 2)], fp=[(1, 0, 0), (0, 0, 1)], fn=[(1, 0, 0)]), g, SPEC)
    np.testing.assert_array_equal(m.fn_v, [0])
    np.testing.assert_array_equal(m.fp_v, [1])
    np.testing.assert_array_equal(m.tp_v, [2])


def _brute_mine(crucial, coords, s):
    label = {}
    for kind, cells in ((1, crucial.tp), (2, crucial.fp), (3, crucial.fn)):
        for v, (ix, iy, _) in enumerate(coords):
            for _, r, c in cells:
                if c * s <= ix < (c + 1) * s and r * s <= iy < (r + 1) * s:
                    label[v] = max(label.get(v, 0), kind)
    return [sorted(v for v, k in label.items() if k == kind) for kind in (1, 2, 3)]


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_mining_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    spec = GridSpec(dims=(40, 40, 10), bev_stride=4)
    coords = np.unique(rng.integers(0, [40, 40, 10], size=(rng.integers(1, 400), 3)), axis=0)
    g = _column_grid(coords)

    def cells(n):
        return np.column_stack([rng.integers(0, 2, n), rng.integers(0, 10, n), rng.integers(0, 10, n)])

    crucial = CrucialSets(cells(rng.integers(0, 12)), cells(rng.integers(0, 12)), cells(rng.integers(0, 12)))
    m = mine_crucial_voxels(crucial, g, spec)
    tp, fp, fn = _brute_mine(crucial, coords, 4)
    assert list(m.tp_v) == tp and list(m.fp_v) == fp and list(m.fn_v) == fn


def test_mining_keeps_a_fraction_on_sparse_scene():
    sc = generate_scene(SceneConfig(), 5)
    g = voxelize(sc, SPEC, False)
    cells = {(0, int(np.floor((b.y + 8) / 0.4)), int(np.floor((b.x + 8) / 0.4))) for b in sc.boxes}
    m = mine_crucial_voxels(_crucial(tp=sorted(cells)), g, SPEC)
    assert 0 < len(m.all) < len(g)


# ------------------------------------------------------------ interpolation
def _grid_with(coords, feats):
    return SparseVoxelGrid(np.asarray(coords, dtype=np.int64), np.asarray(feats, dtype=np.float64))


def test_query_at_center_copies_feature():
    g = _grid_with([[0, 0, 0], [3, 1, 2], [7, 7, 7]], [[1, 2], [3, 4], [5, 6]])
    q = SPEC.voxel_centers(np.array([[3, 1, 2]]))
    np.testing.assert_array_equal(interpolate_to_points(g, q, SPEC, k=3), [[3, 4]])


def test_equidistant_mean():
    g = _grid_with([[0, 0, 0], [2, 0, 0]], [[1.0, 0.0], [3.0, 4.0]])
    q = SPEC.voxel_centers(np.array([[1, 0, 0]]))
    np.testing.assert_allclose(interpolate_to_points(g, q, SPEC, k=2), [[2.0, 2.0]], atol=1e-15)


def _brute_idw(centers, feats, q, k):
    out = []
    for p in q:
        d = np.linalg.norm(centers - p, axis=1)
        nn = np.argsort(d, kind="stable")[:k]
        w = 1.0 / d[nn]
        out.append((w[:, None] * feats[nn]).sum(0) / w.sum())
    return np.array(out)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_knn_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    coords = np.unique(rng.integers(0, [160, 160, 10], size=(50, 3)), axis=0)
    feats = rng.normal(size=(len(coords), 4))
    q = rng.uniform([-8, -8, -1], [8, 8, 1], size=(30, 3))
    got = interpolate_to_points(_grid_with(coords, feats), q, SPEC, k=3)
    np.testing.assert_allclose(got, _brute_idw(SPEC.voxel_centers(coords), feats, q, 3), atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(1, 6))
def test_weights_are_convex(seed, k):
    rng = np.random.default_rng(seed)
    centers = rng.uniform(-5, 5, size=(20, 3))
    q = np.vstack([rng.uniform(-6, 6, size=(10, 3)), centers[:2]])
    _, w = idw_neighbors(centers, q, k)
    assert np.all(w >= 0)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)


def test_empty_grid_and_bad_k():
    with pytest.raises(ValueError):
        interpolate_to_points(_grid_with(np.zeros((0, 3)), np.zeros((0, 2))), np.zeros((1, 3)), SPEC)
    with pytest.raises(ValueError):
        interpolate_to_points(_grid_with([[0, 0, 0]], [[1.0]]), np.zeros((1, 3)), SPEC, k=0)


def test_interpolation_gradient():
    rng = np.random.default_rng(4)
    coords = np.unique(rng.integers(0, [20, 20, 5], size=(12, 3)), axis=0)
    feats = rng.normal(size=(len(coords), 3))
    g = _grid_with(coords, feats)
    q = rng.uniform([-8, -8, -1], [-6, -6, 0], size=(7, 3))
    target = rng.normal(size=(7, 3))

    def f(t):
        d = interpolate_to_points(g, q, SPEC, k=3, features=t) - Tensor(target)
        return (d * d).sum()

    assert finite_diff_check(f, feats).max_rel_err < 1e-4
