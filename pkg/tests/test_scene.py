import numpy as np
import pytest
from dataclasses import replace
from hypothesis import given, settings, strategies as st

from mmdistill.geometry import points_in_box
from mmdistill.scene import (
    Box3D, DatasetFormatError, Scene, SceneConfig, SceneGenerationError, box_point_count,
    dump_dataset, generate_dataset, generate_scene, load_dataset, paint_points, parse_dataset,
    dihedral_augment, save_dataset, scene_to_json,
)

CFG = SceneConfig()


def _brute_inside(p, b):
    """Rotate the point by -yaw about the box center and compare to half-extents."""
    c, s = np.cos(-b.yaw), np.sin(-b.yaw)
    dx, dy = p[0] - b.x, p[1] - b.y
    lx, ly = c * dx - s * dy, s * dx + c * dy
    return abs(lx) <= b.l / 2 and abs(ly) <= b.w / 2 and abs(p[2] - b.z) <= b.h / 2


def test_no_boxes_gives_background_only():
    sc = generate_scene(replace(CFG, boxes_per_scene=(0, 0)), 5)
    assert sc.boxes == []
    assert np.all(sc.point_to_box == -1)
    assert len(sc.points) > 0


def test_determinism_byte_identical():
    a, b = generate_scene(CFG, 1234), generate_scene(CFG, 1234)
    assert a.equals(b)
    assert dump_dataset([a]) == dump_dataset([b])
    assert not a.equals(generate_scene(CFG, 1235))


def test_density_doubles_at_half_distance_for_unit_exponent():
    cfg = replace(CFG, distance_sparsity_exponent=1.0)
    R = cfg.range_radius
    near = box_point_count(cfg, R / 2, clamp=False)
    far = box_point_count(cfg, R, clamp=False)
    assert near / far == pytest.approx(2.0, rel=1e-12)


def test_density_is_clamped():
    lo, hi = CFG.points_per_box
    assert box_point_count(CFG, 1e-3) == hi
    assert box_point_count(CFG, 1e3) == lo


def test_denser_boxes_near_the_sensor():
    near, far = [], []
    for sc in generate_dataset(CFG, range(40)):
        for b_idx, b in enumerate(sc.boxes):
            n = int(np.sum(sc.point_to_box == b_idx))
            (near if np.hypot(b.x, b.y) < 4 else far).append(n)
    assert np.mean(near) > np.mean(far)


@pytest.mark.parametrize("seed", [0, 7, 99, 2024])
def test_scene_invariants(seed):
    sc = generate_scene(CFG, seed)
    x0, x1, y0, y1, z0, z1 = CFG.range
    p = sc.points
    assert np.all((p[:, 0] >= x0) & (p[:, 0] <= x1) & (p[:, 1] >= y0) & (p[:, 1] <= y1))
    assert np.all((p[:, 2] >= z0) & (p[:, 2] <= z1))
    assert np.all(sc.semantics.sum(axis=1) <= 1 + 1e-9)
    assert np.all((sc.semantics >= 0) & (sc.semantics <= 1))
    for i in range(len(p)):
        k = sc.point_to_box[i]
        inside_any = [j for j, b in enumerate(sc.boxes) if _brute_inside(p[i], b)]
        if k == -1:
            assert inside_any == []
        else:
            assert k in inside_any
    for b in sc.boxes:
        assert -np.pi < b.yaw <= np.pi
        assert 0 <= b.class_id < CFG.K


def test_boxes_do_not_overlap_in_bev():
    from mmdistill.geometry import rotated_iou_bev

    for sc in generate_dataset(CFG, range(30)):
        for i, a in enumerate(sc.boxes):
            for b in sc.boxes[i + 1:]:
                assert rotated_iou_bev(a, b) == 0.0


def test_containment_oracle_1000_pairs():
    rng = np.random.default_rng(42)
    agree = 0
    for _ in range(1000):
        b = Box3D(*rng.uniform(-3, 3, 3), *rng.uniform(0.3, 4, 3), 0.0, 0.0,
                  float(rng.uniform(-np.pi, np.pi)), 0)
        p = np.array([b.x, b.y, b.z]) + rng.uniform(-2.5, 2.5, 3)
        agree += bool(points_in_box(p[None], b)[0]) == _brute_inside(p, b)
    assert agree == 1000


def test_class_balance_over_100_scenes():
    seen = set()
    for sc in generate_dataset(CFG, range(100)):
        seen.update(b.class_id for b in sc.boxes)
    assert seen == set(range(CFG.K))


def test_placement_failure_names_seed():
    cfg = replace(CFG, range=(-2.0, 2.0, -2.0, 2.0, -1.0, 1.0), boxes_per_scene=(30, 30))
    with pytest.raises(SceneGenerationError, match="seed 17"):
        generate_scene(cfg, 17)


def test_invalid_config():
    with pytest.raises(ValueError):
        generate_scene(replace(CFG, range=(1, 0, 0, 1, 0, 1)), 0)
    with pytest.raises(ValueError):
        generate_scene(replace(CFG, semantic_noise=1.5), 0)


# ----------------------------------------------------------------- painting
def _toy_scene(K=3, cls=2):
    box = Box3D(0, 0, 0, 2, 2, 2, 0, 0, 0.0, cls)
    pts = np.array([[0.1, 0.2, 0.0], [5.0, 5.0, 0.0]])
    return Scene(pts, np.zeros((2, K)), [box], np.array([0, -1]), 0)


def test_paint_noise_zero_in_box():
    sem = paint_points(_toy_scene(), 0.0, seed=1)
    np.testing.assert_array_equal(sem[0], [0, 0, 1])


def test_paint_background_symmetric_low():
    sem = paint_points(_toy_scene(), 0.0, seed=1)
    assert np.all(sem[1] == sem[1][0])
    assert sem[1][0] <= 1 / 3


def test_paint_deterministic():
    sc = _toy_scene()
    np.testing.assert_array_equal(paint_points(sc, 0.5, 3), paint_points(sc, 0.5, 3))


def test_paint_rejects_bad_noise():
    with pytest.raises(ValueError):
        paint_points(_toy_scene(), -0.1, 0)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), noise=st.floats(0.0, 0.49))
def test_paint_argmax_matches_box_class(seed, noise):
    sc = generate_scene(replace(CFG, semantic_noise=noise), seed % 5000)
    sem = paint_points(sc, noise, seed)
    fg = sc.point_to_box >= 0
    cls = np.array([sc.boxes[b].class_id for b in sc.point_to_box[fg]], dtype=int)
    np.testing.assert_array_equal(np.argmax(sem[fg], axis=1), cls)
    assert np.all(sem.sum(axis=1) <= 1 + 1e-9)


# ---------------------------------------------------------------- file I/O
def test_round_trip_ten_scenes(tmp_path):
    scenes = generate_dataset(CFG, range(10))
    path = tmp_path / "d.bin"
    save_dataset(scenes, path)
    back = load_dataset(path)
    assert len(back) == 10
    assert all(a.equals(b) for a, b in zip(scenes, back))


def test_empty_dataset():
    buf = dump_dataset([])
    assert buf[:4] == b"S2M2"
    assert parse_dataset(buf) == []


def test_truncated_file_reports_offset():
    buf = dump_dataset(generate_dataset(CFG, [3]))
    with pytest.raises(DatasetFormatError) as ei:
        parse_dataset(buf[:-7])
    assert 0 < ei.value.offset < len(buf)


@pytest.mark.parametrize("mangle", [
    lambda b: b"XXXX" + b[4:],
    lambda b: b[:4] + (99).to_bytes(4, "little") + b[8:],
    lambda b: b + b"\0",
    lambda b: b[:10],
])
def test_malformed_files(mangle):
    buf = dump_dataset(generate_dataset(CFG, [3]))
    with pytest.raises(DatasetFormatError):
        parse_dataset(mangle(buf))


def test_json_export_is_valid():
    import json

    sc = generate_scene(CFG, 4)
    d = json.loads(scene_to_json(sc))
    assert d["seed"] == 4 and len(d["points"]) == len(sc.points)


# ------------------------------------------------------------ augmentation
def test_augment_identity_returns_scene():
    sc = generate_scene(CFG, 3)
    assert dihedral_augment(sc, 0, False, CFG.range) is sc
    assert dihedral_augment(sc, 4, False, CFG.range) is sc


def test_quarter_turn_moves_box_and_yaw():
    box = Box3D(1.0, 0.0, 0.0, 1.0, 2.0, 1.0, 0.5, 0.0, 0.0, 1)
    sc = Scene(np.array([[1.0, 0.0, 0.0]]), np.zeros((1, 4)), [box], np.array([0]), 0)
    out = dihedral_augment(sc, 1, False, CFG.range)
    b = out.boxes[0]
    assert (b.x, b.y, b.vx, b.vy) == pytest.approx((0.0, 1.0, 0.0, 0.5))
    assert b.yaw == pytest.approx(np.pi / 2)
    np.testing.assert_allclose(out.points[0], [0.0, 1.0, 0.0], atol=1e-15)
    flipped = dihedral_augment(sc, 1, True, CFG.range).boxes[0]
    assert (flipped.x, flipped.y, flipped.yaw) == pytest.approx((0.0, -1.0, -np.pi / 2))


@pytest.mark.parametrize("seed", range(10))
def test_augment_keeps_points_in_their_boxes(seed):
    sc = generate_scene(CFG, seed)
    for k in range(4):
        for flip in (False, True):
            out = dihedral_augment(sc, k, flip, CFG.range)
            assert np.all(out.points[:, :2] >= -8.0) and np.all(out.points[:, :2] < 8.0)
            np.testing.assert_array_equal(out.points[:, 2], sc.points[:, 2])
            assert out.semantics is sc.semantics
            for b, box in enumerate(out.boxes):
                assert points_in_box(out.points[out.point_to_box == b], box).all()
                assert box.class_id == sc.boxes[b].class_id


def test_augment_group_laws():
    sc = generate_scene(CFG, 8)
    inner = np.all(np.abs(sc.points[:, :2]) < 7.9, axis=1)  # away from the clamped edge
    four = sc
    for _ in range(4):
        four = dihedral_augment(four, 1, False, CFG.range)
    np.testing.assert_allclose(four.points[inner], sc.points[inner], atol=1e-12)
    twice = dihedral_augment(dihedral_augment(sc, 0, True, CFG.range), 0, True, CFG.range)
    np.testing.assert_allclose(twice.points, sc.points, atol=1e-12)
    for a, b in zip(four.boxes, sc.boxes):
        assert (a.x, a.y, a.yaw) == pytest.approx((b.x, b.y, b.yaw), abs=1e-12)


def test_augment_rejects_off_center_range():
    sc = generate_scene(CFG, 1)
    with pytest.raises(ValueError):
        dihedral_augment(sc, 1, False, (0.0, 16.0, -8.0, 8.0, -1.0, 1.0))
