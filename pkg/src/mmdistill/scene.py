"""Synthetic LiDAR scenes with boxes, painted semantics, and a binary dataset format."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Sequence

import numpy as np

from .geometry import bev_corners, points_in_box, rotated_iou_bev, wrap_angle

MAGIC = b"S2M2"
FORMAT_VERSION = 1

# (w, l, h) templates per class; classes 0/1 and 2/3 share a head and are
# deliberately close in size.
CLASS_SIZES = np.array([
    [1.7, 3.6, 1.5],
    [2.0, 4.4, 1.7],
    [0.6, 0.7, 1.6],
    [0.6, 1.6, 1.3],
])
GROUND_TOP = -0.92
BOX_BOTTOM = -0.88


@dataclass
class Box3D:
    x: float
    y: float
    z: float
    w: float
    l: float
    h: float
    vx: float
    vy: float
    yaw: float
    class_id: int

    def __post_init__(self):
        if min(self.w, self.l, self.h) <= 0:
            raise ValueError(f"box extents must be positive: {self.w}, {self.l}, {self.h}")


@dataclass
class SceneConfig:
    range: tuple = (-8.0, 8.0, -8.0, 8.0, -1.0, 1.0)
    K: int = 4
    boxes_per_scene: tuple = (2, 6)
    points_per_box: tuple = (6, 80)
    background_points: int = 400
    distance_sparsity_exponent: float = 1.5
    semantic_noise: float = 0.2
    # object-sized point blobs that belong to no class
    clutter_per_scene: tuple = (1, 4)

    def validate(self) -> "SceneConfig":
        r = self.range
        if len(r) != 6 or not (r[0] < r[1] and r[2] < r[3] and r[4] < r[5]):
            raise ValueError(f"range must be ordered [x0,x1,y0,y1,z0,z1], got {r}")
        if self.K < 1 or self.K > len(CLASS_SIZES):
            raise ValueError(f"K must be in [1, {len(CLASS_SIZES)}]")
        for name in ("boxes_per_scene", "points_per_box", "clutter_per_scene"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValueError(f"{name} must satisfy 0 <= min <= max, got {(lo, hi)}")
        if self.background_points < 0:
            raise ValueError("background_points must be >= 0")
        if not 0.0 <= self.semantic_noise <= 1.0:
            raise ValueError("semantic_noise must be in [0, 1]")
        return self

    @property
    def range_radius(self) -> float:
        r = self.range
        return max(r[1] - r[0], r[3] - r[2]) / 2


@dataclass
class Scene:
    points: np.ndarray
    semantics: np.ndarray
    boxes: List[Box3D]
    point_to_box: np.ndarray
    seed: int

    def foreground_mask(self) -> np.ndarray:
        return self.point_to_box >= 0

    def unpainted(self) -> "Scene":
        """Copy with zeroed semantic channels (what the LiDAR-only model sees)."""
        return Scene(self.points, np.zeros_like(self.semantics), self.boxes,
                     self.point_to_box, self.seed)

    def equals(self, other: "Scene") -> bool:
        return (self.seed == other.seed
                and np.array_equal(self.points, other.points)
                and np.array_equal(self.semantics, other.semantics)
                and np.array_equal(self.point_to_box, other.point_to_box)
                and [asdict(b) for b in self.boxes] == [asdict(b) for b in other.boxes])


def dihedral_augment(scene: Scene, quarter_turns: int, flip: bool, rng_box: Sequence[float]) -> Scene:
    """Rotate the scene about the z axis by ``quarter_turns`` * 90 degrees, then
    optionally mirror y -> -y.

    Exact for a square BEV range centered on the sensor, which maps onto itself.
    Points are re-clamped to the half-open range so the upper edge stays outside.
    """
    x0, x1, y0, y1 = rng_box[:4]
    if not (np.isclose(x0, -x1) and np.isclose(y0, -y1) and np.isclose(x1, y1)):
        raise ValueError(f"dihedral augmentation needs a square range centered at 0, got {tuple(rng_box[:4])}")
    k = int(quarter_turns) % 4
    if k == 0 and not flip:
        return scene

    def rot(x, y):
        for _ in range(k):
            x, y = -y, x
        return (x, -y) if flip else (x, y)

    px, py = rot(scene.points[:, 0], scene.points[:, 1])
    eps = 1e-6
    pts = scene.points.copy()
    pts[:, 0] = np.clip(px, x0, x1 - eps)
    pts[:, 1] = np.clip(py, y0, y1 - eps)
    boxes = []
    for b in scene.boxes:
        x, y = rot(b.x, b.y)
        vx, vy = rot(b.vx, b.vy)
        yaw = b.yaw + k * np.pi / 2
        yaw = -yaw if flip else yaw
        boxes.append(Box3D(float(x), float(y), b.z, b.w, b.l, b.h, float(vx), float(vy),
                           float(wrap_angle(yaw)), b.class_id))
    return Scene(pts, scene.semantics, boxes, scene.point_to_box, scene.seed)


class SceneGenerationError(RuntimeError):
    pass


class DatasetFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def box_point_count(cfg: SceneConfig, distance: float, clamp: bool = True) -> float:
    """Points on a box at BEV ``distance`` from the sensor: sparser further out."""
    lo, hi = cfg.points_per_box
    raw = lo * (cfg.range_radius / max(distance, 1e-6)) ** cfg.distance_sparsity_exponent
    return float(np.clip(raw, lo, hi)) if clamp else raw


def generate_scene(cfg: SceneConfig, seed: int) -> Scene:
    cfg.validate()
    rng = np.random.default_rng(seed)
    x0, x1, y0, y1, z0, z1 = cfg.range
    n_boxes = int(rng.integers(cfg.boxes_per_scene[0], cfg.boxes_per_scene[1] + 1))
    n_clutter = int(rng.integers(cfg.clutter_per_scene[0], cfg.clutter_per_scene[1] + 1))

    placed: list[tuple] = []  # inflated BEV footprints (x, y, w, l, yaw)

    def place(w: float, l: float, yaw: float) -> tuple[float, float]:
        corners = np.abs(bev_corners(0.0, 0.0, w, l, yaw))
        rx, ry = corners[:, 0].max(), corners[:, 1].max()
        fits = x1 - x0 >= 2 * rx and y1 - y0 >= 2 * ry
        for _ in range(1000 if fits else 0):
            cx = rng.uniform(x0 + rx, x1 - rx)
            cy = rng.uniform(y0 + ry, y1 - ry)
            foot = (cx, cy, w + 0.3, l + 0.3, yaw)
            if all(rotated_iou_bev(foot, other) == 0.0 for other in placed):
                placed.append(foot)
                return cx, cy
        raise SceneGenerationError(
            f"could not place {n_boxes} boxes and {n_clutter} clutter blobs without overlap for seed {seed}")

    boxes: list[Box3D] = []
    chunks: list[np.ndarray] = []
    for _ in range(n_boxes):
        cls = int(rng.integers(0, cfg.K))
        w, l, h = CLASS_SIZES[cls] * rng.uniform(0.9, 1.1, size=3)
        yaw = float(wrap_angle(rng.uniform(-np.pi, np.pi)))
        cx, cy = place(w, l, yaw)
        vx, vy = rng.uniform(-2.0, 2.0, size=2)
        box = Box3D(float(cx), float(cy), BOX_BOTTOM + h / 2, float(w), float(l), float(h),
                    float(vx), float(vy), yaw, cls)
        boxes.append(box)
        count = int(round(box_point_count(cfg, float(np.hypot(cx, cy)))))
        local = rng.uniform(-0.5, 0.5, size=(count, 3)) * np.array([l, w, h])
        c, s = np.cos(yaw), np.sin(yaw)
        pts = np.stack([c * local[:, 0] - s * local[:, 1] + cx,
                        s * local[:, 0] + c * local[:, 1] + cy,
                        local[:, 2] + box.z], axis=1)
        chunks.append(pts)

    for _ in range(n_clutter):
        size = rng.uniform(0.5, 2.5)
        cx, cy = place(size, size, 0.0)
        count = int(round(box_point_count(cfg, float(np.hypot(cx, cy)))))
        pts = np.column_stack([
            cx + np.clip(rng.normal(0, size / 4, count), -size / 2, size / 2),
            cy + np.clip(rng.normal(0, size / 4, count), -size / 2, size / 2),
            rng.uniform(BOX_BOTTOM, min(BOX_BOTTOM + rng.uniform(0.6, 1.8), z1), count),
        ])
        chunks.append(pts)

    ground = np.column_stack([
        rng.uniform(x0, x1, cfg.background_points),
        rng.uniform(y0, y1, cfg.background_points),
        rng.uniform(z0, GROUND_TOP, cfg.background_points),
    ])
    chunks.append(ground)
    points = np.concatenate(chunks, axis=0) if chunks else np.zeros((0, 3))
    # keep every point strictly inside the detection range
    eps = 1e-6
    points[:, 0] = np.clip(points[:, 0], x0, x1 - eps)
    points[:, 1] = np.clip(points[:, 1], y0, y1 - eps)
    points[:, 2] = np.clip(points[:, 2], z0, z1 - eps)

    point_to_box = assign_points(points, boxes)
    scene = Scene(points, np.zeros((len(points), cfg.K)), boxes, point_to_box, int(seed))
    scene.semantics = paint_points(scene, cfg.semantic_noise, seed=int(seed) ^ 0x5EED, K=cfg.K)
    return scene


def assign_points(points: np.ndarray, boxes: Sequence[Box3D]) -> np.ndarray:
    out = np.full(len(points), -1, dtype=np.int64)
    for b, box in enumerate(boxes):
        out[points_in_box(points, box) & (out < 0)] = b
    return out


def paint_points(scene: Scene, noise: float, seed: int, K: int | None = None) -> np.ndarray:
    """Simulated per-point segmentation scores, peaked at the owning box's class."""
    if not 0.0 <= noise <= 1.0:
        raise ValueError("noise must be in [0, 1]")
    K = scene.semantics.shape[1] if K is None else K
    rng = np.random.default_rng(seed)
    n = len(scene.points)
    u = rng.uniform(0.0, 1.0, size=n)
    u_bg = rng.uniform(0.0, 1.0, size=(n, K))
    out = 0.5 / K * (1.0 - noise * u_bg)
    fg = scene.point_to_box >= 0
    if fg.any():
        cls = np.array([scene.boxes[b].class_id for b in scene.point_to_box[fg]])
        peak = 1.0 - noise * u[fg]
        rest = (noise * u[fg] / (K - 1)) if K > 1 else np.zeros(fg.sum())
        rows = np.repeat(rest[:, None], K, axis=1)
        rows[np.arange(len(cls)), cls] = peak
        out[fg] = rows
    sums = out.sum(axis=1, keepdims=True)
    return np.where(sums > 1.0, out / np.maximum(sums, 1e-300), out)


# ------------------------------------------------------------------ file I/O
_BOX_FIELDS = ("x", "y", "z", "w", "l", "h", "vx", "vy", "yaw")


def dump_dataset(scenes: Sequence[Scene]) -> bytes:
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(scenes))]
    for s in scenes:
        n, k = s.semantics.shape
        parts.append(struct.pack("<QIII", s.seed, n, k, len(s.boxes)))
        parts.append(np.ascontiguousarray(s.points, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(s.semantics, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(s.point_to_box, dtype="<i4").tobytes())
        boxes = np.array([[getattr(b, f) for f in _BOX_FIELDS] for b in s.boxes],
                         dtype="<f8").reshape(-1, len(_BOX_FIELDS))
        parts.append(boxes.tobytes())
        parts.append(np.array([b.class_id for b in s.boxes], dtype="<i4").tobytes())
    return b"".join(parts)


def parse_dataset(buf: bytes) -> List[Scene]:
    pos = 0

    def take(nbytes: int, what: str) -> bytes:
        nonlocal pos
        if pos + nbytes > len(buf):
            raise DatasetFormatError(f"truncated while reading {what}", pos)
        chunk = buf[pos:pos + nbytes]
        pos += nbytes
        return chunk

    if take(4, "magic") != MAGIC:
        raise DatasetFormatError("bad magic, not a scene dataset", 0)
    version, count = struct.unpack("<II", take(8, "header"))
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported version {version}", 4)
    scenes = []
    for _ in range(count):
        seed, n, k, nb = struct.unpack("<QIII", take(20, "scene header"))
        points = np.frombuffer(take(8 * n * 3, "points"), dtype="<f8").reshape(n, 3)
        sem = np.frombuffer(take(8 * n * k, "semantics"), dtype="<f8").reshape(n, k)
        p2b = np.frombuffer(take(4 * n, "point_to_box"), dtype="<i4").astype(np.int64)
        bx = np.frombuffer(take(8 * nb * len(_BOX_FIELDS), "boxes"), dtype="<f8").reshape(nb, -1)
        cls = np.frombuffer(take(4 * nb, "class ids"), dtype="<i4")
        boxes = [Box3D(*map(float, row), class_id=int(c)) for row, c in zip(bx, cls)]
        scenes.append(Scene(points.astype(np.float64), sem.astype(np.float64), boxes, p2b, int(seed)))
    if pos != len(buf):
        raise DatasetFormatError("trailing bytes after last scene", pos)
    return scenes


def save_dataset(scenes: Sequence[Scene], path) -> None:
    Path(path).write_bytes(dump_dataset(scenes))


def load_dataset(path) -> List[Scene]:
    return parse_dataset(Path(path).read_bytes())


def scene_to_json(scene: Scene) -> str:
    """Debug-only JSON view of one scene."""
    return json.dumps({
        "seed": scene.seed,
        "points": scene.points.tolist(),
        "semantics": scene.semantics.tolist(),
        "point_to_box": scene.point_to_box.tolist(),
        "boxes": [asdict(b) for b in scene.boxes],
    })


def generate_dataset(cfg: SceneConfig, seeds: Sequence[int]) -> List[Scene]:
    return [generate_scene(cfg, s) for s in seeds]
