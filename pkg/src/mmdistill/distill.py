"""Crucial response mining and the four levels of teacher-to-student distillation."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Dict, Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor, smooth_l1, take_rows
from .voxel import CrucialVoxelSets, GridSpec, SparseVoxelGrid, idw_neighbors

# attribute weights for regression distillation: x, y, z, w, l, h, vx, vy, sin, cos
DEFAULT_ATTR_WEIGHTS = (0.0, 0.0, 0.0, 0.1, 0.1, 0.1, 0.1, 0.1, 0.0, 0.0)
LEVELS = ("rsp", "vxl", "pts", "ins")


@dataclass
class DistillConfig:
    tau: float = 0.1
    w_r1: float = 1.0
    w_r2: float = 5.0
    w_attr: tuple = DEFAULT_ATTR_WEIGHTS
    w_v1: float = 2.0
    w_v2: float = 8.0
    w_pf: float = 2.0
    w_I: float = 8.0
    lam: float = 0.25
    mu: float = 0.5
    point_cap: int = 4500
    roi_grid: int = 5
    nms_iou: float = 0.2
    enable_rsp: bool = True
    enable_vxl: bool = True
    enable_pts: bool = True
    enable_ins: bool = True

    # config-file key -> attribute
    KEYS = {"tau": "tau", "w_r1": "w_r1", "w_r2": "w_r2", "w_attr": "w_attr", "w_v1": "w_v1",
            "w_v2": "w_v2", "w_pf": "w_pf", "w_I": "w_I", "lambda": "lam", "mu": "mu",
            "point_cap": "point_cap", "roi_grid": "roi_grid", "enable_rsp": "enable_rsp",
            "enable_vxl": "enable_vxl", "enable_pts": "enable_pts", "enable_ins": "enable_ins"}

    def validate(self) -> "DistillConfig":
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must be in (0, 1), got {self.tau}")
        if len(self.w_attr) != 10:
            raise ValueError("w_attr needs 10 weights (x, y, z, w, l, h, vx, vy, sin, cos)")
        weights = [self.w_r1, self.w_r2, self.w_v1, self.w_v2, self.w_pf, self.w_I,
                   self.lam, self.mu, *self.w_attr]
        if min(weights) < 0:
            raise ValueError("all loss weights must be non-negative")
        if self.roi_grid < 1:
            raise ValueError("roi_grid must be >= 1")
        if self.point_cap < 1:
            raise ValueError("point_cap must be >= 1")
        if not 0.0 < self.nms_iou < 1.0:
            raise ValueError("nms_iou must be in (0, 1)")
        return self

    def to_dict(self) -> dict:
        return {key: getattr(self, attr) if key != "w_attr" else list(self.w_attr)
                for key, attr in self.KEYS.items()}

    @classmethod
    def from_dict(cls, d: dict, **extra) -> "DistillConfig":
        unknown = set(d) - set(cls.KEYS)
        if unknown:
            raise KeyError(f"unknown distill keys: {sorted(unknown)}")
        kw = {cls.KEYS[k]: (tuple(v) if k == "w_attr" else v) for k, v in d.items()}
        kw.update(extra)
        return cls(**kw).validate()

    def with_levels(self, **flags) -> "DistillConfig":
        d = asdict(self)
        d.update({f"enable_{k}": bool(v) for k, v in flags.items()})
        return DistillConfig(**d)


@dataclass
class CrucialSets:
    """Crucial BEV cells as (head, y, x) rows."""
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    def union(self) -> set:
        return {tuple(map(int, r)) for s in (self.tp, self.fp, self.fn) for r in s}


@dataclass
class LossBreakdown:
    l_cls: float = 0.0
    l_reg: float = 0.0
    l_rsp_cls: float = 0.0
    l_rsp_loc: float = 0.0
    l_vxl_fea: float = 0.0
    l_vxl_rel: float = 0.0
    l_pts_fea: float = 0.0
    l_pts_rel: float = 0.0
    l_ins: float = 0.0
    total: float = 0.0
    graph: Optional[Tensor] = field(default=None, repr=False, compare=False)

    DISTILL_FIELDS = ("l_rsp_cls", "l_rsp_loc", "l_vxl_fea", "l_vxl_rel",
                      "l_pts_fea", "l_pts_rel", "l_ins")

    def as_dict(self) -> Dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "graph"}


def _max_over_classes(h) -> np.ndarray:
    data = h.data if isinstance(h, Tensor) else np.asarray(h)
    return data.max(axis=-1)


def mine_crucial_responses(h_s: Sequence, h_g: Sequence, tau: float) -> CrucialSets:
    """Split BEV cells into TP / FP / FN by thresholding student and GT heatmaps.

    Each head's heatmap (H, W, K_head) is reduced to its per-cell class max.
    Comparisons are strict, so a cell exactly at ``tau`` is never crucial.
    """
    if len(h_s) != len(h_g):
        raise ValueError("student and ground-truth head counts differ")
    out = {"tp": [], "fp": [], "fn": []}
    for head, (hs, hg) in enumerate(zip(h_s, h_g)):
        s, g = _max_over_classes(hs), _max_over_classes(hg)
        if s.shape != g.shape:
            raise ValueError(f"heatmap shapes differ for head {head}: {s.shape} vs {g.shape}")
        for name, mask in (("tp", (s > tau) & (g > tau)),
                           ("fp", (s > tau) & (g < tau)),
                           ("fn", (s < tau) & (g > tau))):
            y, x = np.nonzero(mask)
            out[name].append(np.column_stack([np.full(len(y), head), y, x]))
    return CrucialSets(*(np.concatenate(out[k]).astype(np.int64).reshape(-1, 3)
                         for k in ("tp", "fp", "fn")))


def _zero_like(t: Tensor) -> Tensor:
    return t.sum() * 0.0 if isinstance(t, Tensor) else Tensor(0.0)


def _gather_cells(maps: Sequence, cells: np.ndarray):
    """Per-cell class vectors for (head, y, x) cells, grouped by head."""
    for head in np.unique(cells[:, 0]) if len(cells) else ():
        sel = cells[cells[:, 0] == head]
        yield int(head), sel[:, 1], sel[:, 2]


def _cell_term_sum(h_s, h_m, cells: np.ndarray, beta: float = 1.0) -> Optional[Tensor]:
    total = None
    for head, y, x in _gather_cells(h_s, cells):
        s = h_s[head][y, x]
        m = T.as_tensor(h_m[head]).data[y, x]
        term = smooth_l1(s, Tensor(m), beta).mean(axis=1).sum()
        total = term if total is None else total + term
    return total


def response_cls_loss(h_s: Sequence[Tensor], h_m: Sequence, sets: CrucialSets,
                      cfg: DistillConfig) -> Tensor:
    """Weighted smooth-L1 between student and teacher heatmaps on crucial cells."""
    loss = _zero_like(h_s[0])
    tp_sum = _cell_term_sum(h_s, h_m, sets.tp)
    if tp_sum is not None:
        loss = loss + tp_sum * (cfg.w_r1 / len(sets.tp))
    false = np.concatenate([sets.fp, sets.fn]).reshape(-1, 3)
    false_sum = _cell_term_sum(h_s, h_m, false)
    if false_sum is not None:
        loss = loss + false_sum * (cfg.w_r2 / len(false))
    return loss


def response_reg_loss(reg_s: Tensor, reg_m, sets: CrucialSets, cfg: DistillConfig) -> Tensor:
    """Attribute-weighted smooth-L1 on TP and FN cells (those with a GT object)."""
    cells = np.concatenate([sets.tp, sets.fn]).reshape(-1, 3)
    if len(cells) == 0:
        return _zero_like(reg_s)
    y, x = cells[:, 1], cells[:, 2]
    s = reg_s[y, x]
    m = Tensor(T.as_tensor(reg_m).data[y, x])
    w = np.asarray(cfg.w_attr, dtype=np.float64)
    return (smooth_l1(s, m) * w).sum() * (1.0 / len(cells))


def _row_mean_sml1(fs: Tensor, fm, rows: np.ndarray) -> Tensor:
    s = take_rows(fs, rows)
    m = Tensor(T.as_tensor(fm).data[rows])
    return smooth_l1(s, m).mean(axis=1).sum()


def voxel_feature_loss(fv_s: Tensor, fv_m, vsets: CrucialVoxelSets, cfg: DistillConfig) -> Tensor:
    """Channel-averaged smooth-L1 on crucial voxels, heavier on false-prediction pillars."""
    fv_m = T.as_tensor(fv_m)
    if fv_s.shape[1] != fv_m.shape[1]:
        raise ValueError(f"adapted student width {fv_s.shape[1]} != teacher width {fv_m.shape[1]}")
    loss = _zero_like(fv_s)
    if len(vsets.tp_v):
        loss = loss + _row_mean_sml1(fv_s, fv_m, vsets.tp_v) * (cfg.w_v1 / len(vsets.tp_v))
    false = vsets.false
    if len(false):
        loss = loss + _row_mean_sml1(fv_s, fv_m, false) * (cfg.w_v2 / len(false))
    return loss


def relation_loss(fs: Tensor, fm) -> Tensor:
    """Mean squared difference of the two pairwise cosine-similarity matrices."""
    if fs.shape[0] == 0:
        return _zero_like(fs)
    r_s = T.cosine_matrix(fs)
    r_m = T.cosine_matrix(T.as_tensor(fm).detach()).data
    d = r_s - r_m
    return (d * d).mean()


def voxel_relation_loss(fv_s: Tensor, fv_m, vsets: CrucialVoxelSets, cfg: DistillConfig) -> Tensor:
    rows = vsets.all
    if len(rows) == 0:
        return _zero_like(fv_s)
    return relation_loss(take_rows(fv_s, rows), T.as_tensor(fv_m).data[rows])


def point_losses(grid_s: SparseVoxelGrid, grid_m: SparseVoxelGrid, scene, spec: GridSpec,
                 cfg: DistillConfig, seed: int, k: int = 3) -> tuple:
    """Point feature and point relation losses on foreground points.

    Both grids must share coordinates; features are interpolated to the points
    inside ground-truth boxes by inverse-distance weighting.
    """
    fs = grid_s.features
    fg = np.flatnonzero(np.asarray(scene.point_to_box) >= 0)
    if len(fg) == 0 or len(grid_s) == 0:
        z = _zero_like(fs)
        return z, _zero_like(fs)
    if not np.array_equal(grid_s.coords, grid_m.coords):
        raise ValueError("student and teacher grids have different active voxels")
    idx, w = idw_neighbors(spec.voxel_centers(grid_s.coords), scene.points[fg], k)
    m, kk = idx.shape
    c = fs.shape[1]
    p_s = (take_rows(fs, idx.reshape(-1)).reshape(m, kk, c) * w[:, :, None]).sum(axis=1)
    p_m = np.einsum("mk,mkc->mc", w, T.as_tensor(grid_m.features).data[idx])
    l_fea = smooth_l1(p_s, Tensor(p_m)).mean(axis=1).sum() * (cfg.w_pf / m)
    n_rel = min(m, cfg.point_cap)
    if n_rel < m:
        pick = np.sort(np.random.default_rng(seed).choice(m, size=n_rel, replace=False))
        l_rel = relation_loss(take_rows(p_s, pick), p_m[pick])
    else:
        l_rel = relation_loss(p_s, p_m)
    return l_fea, l_rel


def roi_grid_points(box, g: int) -> np.ndarray:
    """g*g BEV sample points inside a rotated box, at lattice fractions (2u+1)/(2g)."""
    frac = (2 * np.arange(g) + 1) / (2 * g) - 0.5
    lx, ly = np.meshgrid(frac * box.l, frac * box.w, indexing="ij")
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    x = c * lx - s * ly + box.x
    y = s * lx + c * ly + box.y
    return np.column_stack([x.reshape(-1), y.reshape(-1)])


def bilinear_weights(xy: np.ndarray, spec: GridSpec) -> tuple:
    """Corner flat indices (n, 4) and weights (n, 4) on the BEV map, clamped to the border."""
    H, W = spec.bev_shape
    cx, cy = spec.bev_cell
    u = np.clip((xy[:, 0] - spec.origin[0]) / cx - 0.5, 0.0, W - 1.0)
    v = np.clip((xy[:, 1] - spec.origin[1]) / cy - 0.5, 0.0, H - 1.0)
    u0 = np.minimum(np.floor(u).astype(np.int64), max(W - 2, 0))
    v0 = np.minimum(np.floor(v).astype(np.int64), max(H - 2, 0))
    u1, v1 = np.minimum(u0 + 1, W - 1), np.minimum(v0 + 1, H - 1)
    du, dv = u - u0, v - v0
    idx = np.column_stack([v0 * W + u0, v0 * W + u1, v1 * W + u0, v1 * W + u1])
    wts = np.column_stack([(1 - du) * (1 - dv), du * (1 - dv), (1 - du) * dv, du * dv])
    return idx, wts


def sample_bev(bev, xy: np.ndarray, spec: GridSpec):
    H, W = spec.bev_shape
    idx, wts = bilinear_weights(xy, spec)
    n = len(xy)
    if isinstance(bev, Tensor):
        c = bev.shape[-1]
        flat = bev.reshape(H * W, c)
        return (take_rows(flat, idx.reshape(-1)).reshape(n, 4, c) * wts[:, :, None]).sum(axis=1)
    flat = np.asarray(bev).reshape(H * W, -1)
    return np.einsum("nk,nkc->nc", wts, flat[idx])


def instance_loss(bev_s: Tensor, bev_m, boxes: Sequence, spec: GridSpec, cfg: DistillConfig) -> Tensor:
    """Smooth-L1 between BEV features pooled on a g x g grid in each predicted box."""
    if len(boxes) == 0:
        return _zero_like(bev_s)
    g = cfg.roi_grid
    xy = np.concatenate([roi_grid_points(b, g) for b in boxes])
    f_s = sample_bev(bev_s, xy, spec)
    f_m = sample_bev(T.as_tensor(bev_m).data, xy, spec)
    per_point = smooth_l1(f_s, Tensor(f_m)).mean(axis=1)
    return per_point.sum() * (cfg.w_I / (len(boxes) * g * g))


def total_loss(components: Dict[str, Tensor], cfg: DistillConfig) -> LossBreakdown:
    """Combine supervised and distillation terms; disabled levels contribute exactly 0."""
    enabled = {
        "l_rsp_cls": cfg.enable_rsp, "l_rsp_loc": cfg.enable_rsp,
        "l_vxl_fea": cfg.enable_vxl, "l_vxl_rel": cfg.enable_vxl,
        "l_pts_fea": cfg.enable_pts, "l_pts_rel": cfg.enable_pts,
        "l_ins": cfg.enable_ins,
    }
    graph = components["l_cls"] + components["l_reg"] * cfg.lam
    distill = None
    values = {"l_cls": float(components["l_cls"].data), "l_reg": float(components["l_reg"].data)}
    for name in LossBreakdown.DISTILL_FIELDS:
        term = components.get(name)
        if not enabled[name] or term is None:
            values[name] = 0.0
            continue
        values[name] = float(term.data)
        distill = term if distill is None else distill + term
    if distill is not None:
        graph = graph + distill * cfg.mu
    return LossBreakdown(**values, total=float(graph.data), graph=graph)
