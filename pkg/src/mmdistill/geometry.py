"""BEV box geometry: corners, containment, convex clipping, rotated IoU."""
from __future__ import annotations

import numpy as np


def wrap_angle(a):
    """Map angles into (-pi, pi]."""
    out = np.mod(np.asarray(a, dtype=np.float64) + np.pi, 2 * np.pi) - np.pi
    out = np.where(out <= -np.pi, out + 2 * np.pi, out)
    return out if out.ndim else float(out)


def to_box_frame(xy: np.ndarray, cx: float, cy: float, yaw: float) -> np.ndarray:
    """Express BEV points in a box frame whose local x axis is the length axis."""
    d = np.asarray(xy, dtype=np.float64) - np.array([cx, cy])
    c, s = np.cos(yaw), np.sin(yaw)
    return np.stack([c * d[..., 0] + s * d[..., 1], -s * d[..., 0] + c * d[..., 1]], axis=-1)


def from_box_frame(local: np.ndarray, cx: float, cy: float, yaw: float) -> np.ndarray:
    local = np.asarray(local, dtype=np.float64)
    c, s = np.cos(yaw), np.sin(yaw)
    x = c * local[..., 0] - s * local[..., 1] + cx
    y = s * local[..., 0] + c * local[..., 1] + cy
    return np.stack([x, y], axis=-1)


def bev_corners(cx: float, cy: float, w: float, l: float, yaw: float) -> np.ndarray:
    """Counter-clockwise BEV corners (4, 2); length ``l`` runs along the heading."""
    local = np.array([[l / 2, w / 2], [-l / 2, w / 2], [-l / 2, -w / 2], [l / 2, -w / 2]])
    return from_box_frame(local, cx, cy, yaw)


def points_in_box(points: np.ndarray, box) -> np.ndarray:
    """Boolean mask of points (N, 3) inside a rotated 3D box (closed boundary)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    local = to_box_frame(points[:, :2], box.x, box.y, box.yaw)
    return ((np.abs(local[:, 0]) <= box.l / 2)
            & (np.abs(local[:, 1]) <= box.w / 2)
            & (np.abs(points[:, 2] - box.z) <= box.h / 2))


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def clip_polygon(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of ``subject`` by the convex CCW polygon ``clipper``."""
    out = [tuple(p) for p in subject]
    n = len(clipper)
    for i in range(n):
        if not out:
            break
        a, b = clipper[i], clipper[(i + 1) % n]
        ex, ey = b[0] - a[0], b[1] - a[1]

        def side(p):
            return ex * (p[1] - a[1]) - ey * (p[0] - a[0])

        inp, out = out, []
        prev = inp[-1]
        sp = side(prev)
        for cur in inp:
            sc = side(cur)
            if sc >= 0:
                if sp < 0:
                    out.append(_cross_point(prev, cur, sp, sc))
                out.append(cur)
            elif sp >= 0:
                out.append(_cross_point(prev, cur, sp, sc))
            prev, sp = cur, sc
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def _cross_point(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def rotated_iou_bev(a, b) -> float:
    """BEV IoU of two boxes given as (x, y, w, l, yaw) sequences or Box3D-likes."""
    a, b = _bev_tuple(a), _bev_tuple(b)
    # disjoint circumscribed circles: no polygon work needed
    ra = 0.5 * np.hypot(a[2], a[3])
    rb = 0.5 * np.hypot(b[2], b[3])
    if np.hypot(a[0] - b[0], a[1] - b[1]) > ra + rb:
        return 0.0
    pa, pb = bev_corners(*a), bev_corners(*b)
    inter = polygon_area(clip_polygon(pa, pb))
    union = a[2] * a[3] + b[2] * b[3] - inter
    if union <= 0:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


def _bev_tuple(box):
    if hasattr(box, "yaw"):
        return (box.x, box.y, box.w, box.l, box.yaw)
    x, y, w, l, yaw = box
    return (float(x), float(y), float(w), float(l), float(yaw))
