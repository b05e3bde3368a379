"""Teacher pre-training, distilled student training, evaluation, and ablations."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import detector as D
from .config import RunConfig
from .distill import (
    LossBreakdown, instance_loss, mine_crucial_responses, point_losses,
    response_cls_loss, response_reg_loss, total_loss, voxel_feature_loss, voxel_relation_loss,
)
from .eval import MetricsReport, classwise_nms, decode, evaluate, flops_voxel_distill, nms
from .scene import Scene, dihedral_augment, generate_scene
from .tensor import backward, zero_grad
from .voxel import mine_crucial_voxels

logger = logging.getLogger(__name__)

VOXEL_ADAPT = "adapt_vxl"
POINT_ADAPT = "adapt_pts"


class NumericFailure(RuntimeError):
    pass


def scene_seeds(run_seed: int, count: int, start: int = 0) -> List[int]:
    """Per-scene RNG seeds: run seed XOR scene index."""
    return [run_seed ^ i for i in range(start, start + count)]


def benchmark_split(cfg: RunConfig) -> tuple:
    n_tr, n_ev = cfg.train.train_scenes, cfg.train.eval_scenes
    seeds = scene_seeds(cfg.train.seed, n_tr + n_ev)
    scenes = [generate_scene(cfg.scene, s) for s in seeds]
    return scenes[:n_tr], scenes[n_tr:]


class SGD:
    """Plain SGD with heavy-ball momentum and global-norm gradient clipping."""

    def __init__(self, params: Sequence, lr: float, momentum: float = 0.9, clip: float = 0.0):
        self.params = list(params)
        self.lr, self.momentum, self.clip = lr, momentum, clip
        self.velocity = [np.zeros(p.shape) for p in self.params]

    def step(self) -> float:
        grads = [np.zeros(p.shape) if p.grad is None else p.grad for p in self.params]
        norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
        scale = self.clip / norm if self.clip > 0 and norm > self.clip else 1.0
        for p, g, v in zip(self.params, grads, self.velocity):
            v *= self.momentum
            v += scale * g
            p.data -= self.lr * v
        return norm

    def zero_grad(self) -> None:
        zero_grad(self.params)


def _batches(n: int, steps: int, batch: int, seed: int):
    """Scene indices per step: reshuffled every pass over the data."""
    rng = np.random.default_rng(seed)
    order: List[int] = []
    for _ in range(steps):
        picked = []
        for _ in range(batch):
            if not order:
                order = list(rng.permutation(n))
            picked.append(int(order.pop()))
        yield picked


def _augmented(scene: Scene, cfg: RunConfig, step: int, slot: int) -> Scene:
    """The training view of ``scene`` at (step, slot); identity when augmentation is off."""
    if not cfg.train.augment:
        return scene
    rng = np.random.default_rng((cfg.train.seed, step, slot))
    return dihedral_augment(scene, int(rng.integers(4)), bool(rng.integers(2)), cfg.scene.range)


def _check_finite(value: float, step: int) -> None:
    if not np.isfinite(value):
        raise NumericFailure(f"non-finite loss at step {step}")


# ------------------------------------------------------------------ teacher
def train_teacher(cfg: RunConfig, scenes: Sequence[Scene], steps: Optional[int] = None,
                  params: Optional[D.Params] = None):
    """Supervised training of the model that sees painted points.

    Returns (params, per-step loss log).
    """
    return _train_supervised(cfg, scenes, "teacher", steps or cfg.train.teacher_steps, params)


def _train_supervised(cfg: RunConfig, scenes, modality: str, steps: int, params=None):
    if not scenes:
        raise ValueError("dataset is empty")
    params = params or D.init_detector(cfg.scene.K, cfg.heads, cfg.train.seed)
    opt = SGD(params, cfg.train.lr, cfg.train.momentum, cfg.train.grad_clip)
    log = []
    for step, picked in enumerate(_batches(len(scenes), steps, cfg.train.batch_scenes, cfg.train.seed)):
        opt.zero_grad()
        l_cls_sum = l_reg_sum = 0.0
        for slot, k in enumerate(picked):
            scene = _augmented(scenes[k], cfg, step, slot)
            scene = scene if modality == "teacher" else scene.unpainted()
            out = D.forward(scene, modality, params, cfg.grid, cfg.heads)
            tg = D.make_gt_targets(scene, cfg.heads, cfg.grid)
            l_cls, l_reg = D.supervised_loss(out, tg)
            loss = (l_cls + l_reg * cfg.distill.lam) * (1.0 / len(picked))
            _check_finite(float(loss.data), step)
            backward(loss)
            l_cls_sum += float(l_cls.data) / len(picked)
            l_reg_sum += float(l_reg.data) / len(picked)
        opt.step()
        log.append({"step": step, "l_cls": l_cls_sum, "l_reg": l_reg_sum,
                    "total": l_cls_sum + cfg.distill.lam * l_reg_sum})
        if step % 50 == 0:
            logger.info("%s step %d l_cls %.4f l_reg %.4f", modality, step, l_cls_sum, l_reg_sum)
    return params, log


# ------------------------------------------------------------------ student
def init_student(cfg: RunConfig, seed: Optional[int] = None) -> D.Params:
    """Student detector parameters plus both adaptation layers."""
    params = D.init_detector(cfg.scene.K, cfg.heads, cfg.train.seed + 1 if seed is None else seed)
    width = params["mlp2.w"].shape[1]
    for prefix in (VOXEL_ADAPT, POINT_ADAPT):
        for k, v in D.init_adaptation(prefix, width, width).tensors.items():
            params[k] = v
    return params


def train_student_baseline(cfg: RunConfig, scenes: Sequence[Scene], steps: Optional[int] = None,
                           params: Optional[D.Params] = None):
    """Supervised-only student training (no teacher), from the same initialization."""
    return _train_supervised(cfg, scenes, "student", steps or cfg.train.steps, params or init_student(cfg))


def instance_boxes(out: D.DetectorOutputs, cfg: RunConfig) -> list:
    dets = decode(out.detached(), cfg.grid, cfg.heads, cfg.eval.top_n, cfg.eval.score_thresh)
    return [d.box for d in nms(dets, cfg.distill.nms_iou)]


def distill_components(scene: Scene, teacher: D.Params, student: D.Params, cfg: RunConfig,
                       seed: int = 0) -> Dict:
    """Every loss term for one scene; teacher outputs are constants."""
    dc = cfg.distill
    t_out = D.forward(scene, "teacher", teacher, cfg.grid, cfg.heads).detached()
    s_scene = scene.unpainted()
    s_out = D.forward(s_scene, "student", student, cfg.grid, cfg.heads)
    targets = D.make_gt_targets(scene, cfg.heads, cfg.grid)
    l_cls, l_reg = D.supervised_loss(s_out, targets)
    comp = {"l_cls": l_cls, "l_reg": l_reg}
    sets = None
    if dc.enable_rsp or dc.enable_vxl:
        sets = mine_crucial_responses([h.data for h in s_out.heatmaps], targets.heatmaps, dc.tau)
    if dc.enable_rsp:
        comp["l_rsp_cls"] = response_cls_loss(s_out.heatmaps, t_out.heatmaps, sets, dc)
        comp["l_rsp_loc"] = response_reg_loss(s_out.regression, t_out.regression, sets, dc)
    fv_s = s_out.voxel_features.features
    fv_m = t_out.voxel_features.features
    if dc.enable_vxl:
        vsets = mine_crucial_voxels(sets, s_out.voxel_features, cfg.grid)
        adapted = D.adapt(fv_s, student, VOXEL_ADAPT)
        comp["l_vxl_fea"] = voxel_feature_loss(adapted, fv_m, vsets, dc)
        comp["l_vxl_rel"] = voxel_relation_loss(adapted, fv_m, vsets, dc)
    if dc.enable_pts:
        adapted = D.adapt(fv_s, student, POINT_ADAPT)
        l_fea, l_rel = point_losses(s_out.voxel_features.with_features(adapted),
                                    t_out.voxel_features, scene, cfg.grid, dc, seed)
        comp["l_pts_fea"], comp["l_pts_rel"] = l_fea, l_rel
    if dc.enable_ins:
        comp["l_ins"] = instance_loss(s_out.bev_features, t_out.bev_features,
                                      instance_boxes(s_out, cfg), cfg.grid, dc)
    return comp


def train_student(cfg: RunConfig, scenes: Sequence[Scene], teacher: D.Params,
                  steps: Optional[int] = None, params: Optional[D.Params] = None):
    """Student training against the frozen teacher. Returns (params, LossBreakdown log)."""
    if not scenes:
        raise ValueError("dataset is empty")
    teacher = teacher.frozen()
    params = params or init_student(cfg)
    for name in teacher.names():
        if name not in params or params[name].shape != teacher[name].shape:
            raise ValueError(f"teacher/student mismatch at parameter {name!r}")
    opt = SGD(params, cfg.train.lr, cfg.train.momentum, cfg.train.grad_clip)
    steps = steps or cfg.train.steps
    log: List[LossBreakdown] = []
    for step, picked in enumerate(_batches(len(scenes), steps, cfg.train.batch_scenes, cfg.train.seed)):
        opt.zero_grad()
        acc = None
        for slot, k in enumerate(picked):
            comp = distill_components(_augmented(scenes[k], cfg, step, slot), teacher, params, cfg,
                                      seed=cfg.train.seed ^ step)
            br = total_loss(comp, cfg.distill)
            _check_finite(br.total, step)
            backward(br.graph * (1.0 / len(picked)))
            acc = _accumulate(acc, br, len(picked))
        opt.step()
        acc.graph = None
        log.append(acc)
        if step % 50 == 0:
            logger.info("student step %d total %.4f", step, acc.total)
    return params, log


def _accumulate(acc: Optional[LossBreakdown], br: LossBreakdown, n: int) -> LossBreakdown:
    vals = {k: v / n for k, v in br.as_dict().items()}
    if acc is None:
        return LossBreakdown(**vals)
    return LossBreakdown(**{k: getattr(acc, k) + v for k, v in vals.items()})


# --------------------------------------------------------------- evaluation
def predict(params: D.Params, scene: Scene, modality: str, cfg: RunConfig) -> list:
    s = scene if modality == "teacher" else scene.unpainted()
    out = D.forward(s, modality, params, cfg.grid, cfg.heads)
    dets = decode(out, cfg.grid, cfg.heads, cfg.eval.top_n, cfg.eval.score_thresh)
    return classwise_nms(dets, cfg.eval.nms_iou)


def evaluate_model(params: D.Params, scenes: Sequence[Scene], modality: str,
                   cfg: RunConfig) -> MetricsReport:
    frozen = params.frozen()
    preds = [predict(frozen, s, modality, cfg) for s in scenes]
    return evaluate(preds, [s.boxes for s in scenes], cfg.scene.K, cfg.eval.thresholds)


# ----------------------------------------------------------------- ablation
ABLATION_COMBOS = (
    (False, False, False, False),
    (True, False, False, False),
    (False, True, False, False),
    (False, False, True, False),
    (False, False, False, True),
    (True, True, False, False),
    (True, True, True, False),
    (True, True, True, True),
)


@dataclass
class AblationRow:
    response: bool
    voxel: bool
    point: bool
    instance: bool
    map_lite: float
    nds_lite: float
    seed: int


def run_ablation(cfg: RunConfig, train_scenes, eval_scenes, teacher: D.Params,
                 combos: Sequence[tuple] = ABLATION_COMBOS) -> List[AblationRow]:
    if not combos:
        raise ValueError("need at least one flag combination")
    rows = []
    for flags in combos:
        rsp, vxl, pts, ins = (bool(f) for f in flags)
        sub = replace(cfg, distill=cfg.distill.with_levels(rsp=rsp, vxl=vxl, pts=pts, ins=ins))
        params, _ = train_student(sub, train_scenes, teacher)
        rep = evaluate_model(params, eval_scenes, "student", sub)
        rows.append(AblationRow(rsp, vxl, pts, ins, rep.map, rep.nds_lite, cfg.train.seed))
        logger.info("ablation %s map %.4f nds %.4f", flags, rep.map, rep.nds_lite)
    return rows


def ablation_csv(rows: Sequence[AblationRow]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["response", "voxel", "point", "instance", "map_lite", "nds_lite", "seed"])
    for r in rows:
        wr.writerow([int(r.response), int(r.voxel), int(r.point), int(r.instance),
                     repr(r.map_lite), repr(r.nds_lite), r.seed])
    return buf.getvalue()


def loss_trace_csv(log: Sequence) -> str:
    """Tidy (step, loss_component, value) rows."""
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["step", "loss_component", "value"])
    for step, entry in enumerate(log):
        d = entry.as_dict() if isinstance(entry, LossBreakdown) else {k: v for k, v in entry.items() if k != "step"}
        for k, v in d.items():
            wr.writerow([step, k, repr(float(v))])
    return buf.getvalue()


def flops_report(V_list: Sequence[int], C: int) -> List[dict]:
    rows = []
    for V in V_list:
        cons, rel = flops_voxel_distill(V, C, with_relation=True)
        rows.append({"voxels": int(V), "channels": int(C), "flops_cons": cons, "flops_rel": rel})
    return rows
