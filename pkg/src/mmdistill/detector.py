"""Toy center-based single-stage detector shared by teacher and student.

Pipeline: voxelize -> per-voxel two-layer perceptron -> column max-collapse to
BEV -> two 3x3 convolutions -> 1x1 heads (sigmoid heatmaps per head group and
a shared 10-channel regression map). All BEV maps are channel-last (H, W, C).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .voxel import GridSpec, SparseVoxelGrid, voxel_feature_dim, voxelize

REG_ATTRS = ("x", "y", "z", "w", "l", "h", "vx", "vy", "sin", "cos")
# prior probability 0.1 for every heatmap cell at initialization
HEATMAP_BIAS_INIT = -2.19
CKPT_MAGIC = b"MDCK"
CKPT_VERSION = 1


@dataclass(frozen=True)
class HeadSpec:
    groups: tuple = ((0, 1), (2, 3))

    def validate(self, K: int) -> "HeadSpec":
        flat = sorted(c for g in self.groups for c in g)
        if flat != list(range(K)):
            raise ValueError(f"head groups {self.groups} do not partition classes 0..{K - 1}")
        return self

    @property
    def num_classes(self) -> int:
        return sum(len(g) for g in self.groups)

    def locate(self, class_id: int) -> tuple:
        """(head index, slot within head) of a class."""
        for h, g in enumerate(self.groups):
            if class_id in g:
                return h, list(g).index(class_id)
        raise KeyError(class_id)


@dataclass
class DetectorOutputs:
    voxel_features: SparseVoxelGrid          # features: Tensor (V, C)
    bev_features: Tensor                     # (H, W, C)
    heatmaps: List[Tensor]                   # per head (H, W, K_head), in [0, 1]
    heatmap_logits: List[Tensor]
    regression: Tensor                       # (H, W, 10)

    def detached(self) -> "DetectorOutputs":
        return DetectorOutputs(
            self.voxel_features.with_features(self.voxel_features.features.detach()),
            self.bev_features.detach(),
            [h.detach() for h in self.heatmaps],
            [h.detach() for h in self.heatmap_logits],
            self.regression.detach(),
        )


@dataclass
class GTTargets:
    heatmaps: List[np.ndarray]   # per head (H, W, K_head)
    regression: np.ndarray       # (H, W, 10)
    mask: np.ndarray             # (H, W) bool, center cells
    skipped: int = 0


class Params:
    """Named parameter tensors in insertion order."""

    def __init__(self, tensors: Optional[Dict[str, Tensor]] = None):
        self.tensors: Dict[str, Tensor] = dict(tensors or {})

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __setitem__(self, name: str, value: Tensor) -> None:
        self.tensors[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors.values())

    def names(self) -> List[str]:
        return list(self.tensors)

    def copy(self, requires_grad: Optional[bool] = None) -> "Params":
        return Params({k: Tensor(v.data.copy(),
                                 requires_grad=v.requires_grad if requires_grad is None else requires_grad)
                       for k, v in self.tensors.items()})

    def frozen(self) -> "Params":
        return self.copy(requires_grad=False)

    def equals(self, other: "Params") -> bool:
        return (self.names() == other.names()
                and all(np.array_equal(self[k].data, other[k].data) for k in self.names()))


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def init_detector(K: int, heads: HeadSpec, seed: int, width: int = 32) -> Params:
    heads.validate(K)
    rng = np.random.default_rng(seed)
    cin = voxel_feature_dim(K)
    p = Params()
    p["mlp1.w"] = _uniform(rng, (cin, width), cin)
    p["mlp1.b"] = _uniform(rng, (width,), cin)
    p["mlp2.w"] = _uniform(rng, (width, width), width)
    p["mlp2.b"] = _uniform(rng, (width,), width)
    # bias-free convolutions: an empty scene then yields sigmoid(head bias) everywhere
    for i in (1, 2):
        p[f"conv{i}.w"] = _uniform(rng, (3, 3, width, width), 9 * width)
    for h, g in enumerate(heads.groups):
        p[f"head{h}.hm.w"] = _uniform(rng, (width, len(g)), width)
        p[f"head{h}.hm.b"] = Tensor(np.full(len(g), HEATMAP_BIAS_INIT), requires_grad=True)
    p["reg.w"] = _uniform(rng, (width, len(REG_ATTRS)), width)
    p["reg.b"] = _uniform(rng, (len(REG_ATTRS),), width)
    return p


def init_adaptation(prefix: str, c_s: int, c_t: int) -> Params:
    """Linear + rectifier adaptation, initialized to the identity map.

    Inputs are rectified features, so identity weights reproduce them exactly.
    """
    w = np.eye(c_s, c_t)
    return Params({f"{prefix}.w": Tensor(w, requires_grad=True),
                   f"{prefix}.b": Tensor(np.zeros(c_t), requires_grad=True)})


def adapt(features: Tensor, params: Params, prefix: str) -> Tensor:
    w, b = params[f"{prefix}.w"], params[f"{prefix}.b"]
    if features.shape[1] != w.shape[0]:
        raise ValueError(f"adaptation expects {w.shape[0]} channels, got {features.shape[1]}")
    return T.relu(features @ w + b)


def forward(scene, modality: str, params: Params, spec: GridSpec, heads: HeadSpec) -> DetectorOutputs:
    if modality not in ("student", "teacher"):
        raise ValueError(f"unknown modality {modality!r}")
    grid = voxelize(scene, spec, use_semantics=(modality == "teacher"))
    return forward_grid(grid, params, spec, heads)


def forward_grid(grid: SparseVoxelGrid, params: Params, spec: GridSpec, heads: HeadSpec) -> DetectorOutputs:
    H, W = spec.bev_shape
    x = Tensor(grid.features)
    v = T.relu(x @ params["mlp1.w"] + params["mlp1.b"])
    v = T.relu(v @ params["mlp2.w"] + params["mlp2.b"])
    width = params["mlp2.w"].shape[1]
    r, c = spec.bev_cell_of(grid.coords)
    bev = T.segment_max(v, r * W + c, H * W).reshape(H, W, width)
    bev = T.relu(T.conv2d(bev, params["conv1.w"]))
    bev = T.relu(T.conv2d(bev, params["conv2.w"]))
    flat = bev.reshape(H * W, width)
    logits, maps = [], []
    for h in range(len(heads.groups)):
        lg = (flat @ params[f"head{h}.hm.w"] + params[f"head{h}.hm.b"]).reshape(H, W, -1)
        logits.append(lg)
        maps.append(T.sigmoid(lg))
    reg = (flat @ params["reg.w"] + params["reg.b"]).reshape(H, W, len(REG_ATTRS))
    return DetectorOutputs(grid.with_features(v), bev, maps, logits, reg)


# ------------------------------------------------------------------ targets
def gaussian_radius(w: float, l: float, cell: float) -> float:
    return max(1.0, min(w, l) / (3.0 * cell))


def make_gt_targets(scene, heads: HeadSpec, spec: GridSpec) -> GTTargets:
    """Gaussian center splats per class plus regression targets at center cells."""
    H, W = spec.bev_shape
    cx_size, cy_size = spec.bev_cell
    ox, oy = spec.origin[0], spec.origin[1]
    hms = [np.zeros((H, W, len(g))) for g in heads.groups]
    reg = np.zeros((H, W, len(REG_ATTRS)))
    mask = np.zeros((H, W), dtype=bool)
    skipped = 0
    rows, cols = np.mgrid[0:H, 0:W]
    for box in scene.boxes:
        fx, fy = (box.x - ox) / cx_size, (box.y - oy) / cy_size
        j, i = int(np.floor(fx)), int(np.floor(fy))
        if not (0 <= i < H and 0 <= j < W):
            skipped += 1
            continue
        radius = gaussian_radius(box.w, box.l, min(cx_size, cy_size))
        sigma = (2 * radius + 1) / 6.0
        reach = int(np.ceil(radius))
        d2 = (rows - i) ** 2 + (cols - j) ** 2
        g = np.exp(-d2 / (2 * sigma * sigma))
        g[(np.abs(rows - i) > reach) | (np.abs(cols - j) > reach)] = 0.0
        h, slot = heads.locate(box.class_id)
        hms[h][:, :, slot] = np.maximum(hms[h][:, :, slot], g)
        reg[i, j] = [fx - j, fy - i, box.z, np.log(box.w), np.log(box.l), np.log(box.h),
                     box.vx, box.vy, np.sin(box.yaw), np.cos(box.yaw)]
        mask[i, j] = True
    return GTTargets(hms, reg, mask, skipped)


# ------------------------------------------------------------------- losses
def focal_loss(logits: Tensor, gt: np.ndarray, alpha: float = 2.0, beta: float = 4.0) -> Tensor:
    """Penalty-reduced focal loss on one head, normalized by the positive count."""
    p = T.sigmoid(logits)
    pos = (gt == 1.0).astype(np.float64)
    neg = 1.0 - pos
    logp = T.log_sigmoid(logits)
    log1mp = T.log_sigmoid(-1.0 * logits)
    pos_term = logp * ((1.0 - p) ** alpha) * pos
    neg_term = log1mp * (p ** alpha) * (neg * (1.0 - gt) ** beta)
    num_pos = max(pos.sum(), 1.0)
    return (pos_term + neg_term).sum() * (-1.0 / num_pos)


def supervised_loss(out: DetectorOutputs, targets: GTTargets) -> tuple:
    """(L_cls, L_reg): focal loss summed over heads, mean smooth-L1 at center cells."""
    if len(out.heatmap_logits) != len(targets.heatmaps):
        raise ValueError("head count mismatch between outputs and targets")
    l_cls = None
    for lg, gt in zip(out.heatmap_logits, targets.heatmaps):
        if lg.shape != gt.shape:
            raise ValueError(f"heatmap shape mismatch {lg.shape} vs {gt.shape}")
        term = focal_loss(lg, gt)
        l_cls = term if l_cls is None else l_cls + term
    ii, jj = np.nonzero(targets.mask)
    if len(ii) == 0:
        l_reg = out.regression.sum() * 0.0
    else:
        pred = out.regression[ii, jj]
        l_reg = T.smooth_l1(pred, Tensor(targets.regression[ii, jj])).mean()
    return l_cls, l_reg


# --------------------------------------------------------------- checkpoints
def dump_params(params: Params) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(params.names()))]
    for name in params.names():
        data = np.ascontiguousarray(params[name].data, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", data.ndim) + struct.pack(f"<{data.ndim}I", *data.shape))
        parts.append(data.tobytes())
    return b"".join(parts)


def parse_params(buf: bytes) -> Params:
    from .scene import DatasetFormatError

    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise DatasetFormatError(f"truncated checkpoint while reading {what}", pos)
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != CKPT_MAGIC:
        raise DatasetFormatError("bad checkpoint magic", 0)
    version, count = struct.unpack("<II", take(8, "header"))
    if version != CKPT_VERSION:
        raise DatasetFormatError(f"unsupported checkpoint version {version}", 4)
    out = Params()
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2, "name length"))
        name = take(n, "name").decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1, "rank"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "shape"))
        size = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(take(8 * size, name), dtype="<f8").reshape(shape)
        out[name] = Tensor(data.astype(np.float64), requires_grad=True)
    return out


def save_params(params: Params, path) -> None:
    Path(path).write_bytes(dump_params(params))


def load_params(path) -> Params:
    return parse_params(Path(path).read_bytes())
