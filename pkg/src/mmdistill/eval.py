"""Peak decoding, rotated NMS, center-distance mAP / NDS-lite, and loss FLOPs."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np
from scipy.ndimage import maximum_filter

from .detector import DetectorOutputs, HeadSpec
from .geometry import rotated_iou_bev, wrap_angle
from .scene import Box3D
from .voxel import GridSpec

NUSCENES_THRESHOLDS = (0.5, 1.0, 2.0, 4.0)
NUSCENES_RANGE = 102.4
# decoded log-sizes are clipped to keep untrained outputs finite
LOG_SIZE_CLIP = 4.0


@dataclass
class Detection:
    box: Box3D
    score: float
    head: int

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


def scaled_thresholds(range_extent: float) -> tuple:
    """nuScenes center-distance thresholds shrunk to a smaller detection range."""
    f = range_extent / NUSCENES_RANGE
    return tuple(float(np.floor(t * f * 100 + 0.5) / 100) for t in NUSCENES_THRESHOLDS)


def decode(out: DetectorOutputs, spec: GridSpec, heads: HeadSpec, top_n: int = 50,
           score_thresh: float = 0.1) -> List[Detection]:
    """3x3 local maxima of every class heatmap, boxes read from the regression map."""
    if top_n < 1:
        raise ValueError("top_n must be >= 1")
    reg = out.regression.data
    cx, cy = spec.bev_cell
    ox, oy = spec.origin[0], spec.origin[1]
    cand = []  # (score, head, class, i, j)
    for h, group in enumerate(heads.groups):
        hm = out.heatmaps[h].data
        for slot, cls in enumerate(group):
            m = hm[:, :, slot]
            peaks = (m == maximum_filter(m, size=3, mode="constant", cval=-np.inf)) & (m > score_thresh)
            ii, jj = np.nonzero(peaks)
            cand.append(np.column_stack([m[ii, jj], np.full(len(ii), h), np.full(len(ii), cls), ii, jj]))
    cand = np.concatenate(cand) if cand else np.zeros((0, 5))
    cand = cand[np.argsort(-cand[:, 0], kind="stable")][:top_n]
    dets = []
    for score, h, cls, i, j in cand:
        i, j = int(i), int(j)
        r = reg[i, j]
        w, l, hh = np.exp(np.clip(r[3:6], -LOG_SIZE_CLIP, LOG_SIZE_CLIP))
        yaw = float(np.arctan2(r[8], r[9])) if (r[8] or r[9]) else 0.0
        box = Box3D(float(ox + (j + r[0]) * cx), float(oy + (i + r[1]) * cy), float(r[2]),
                    float(w), float(l), float(hh), float(r[6]), float(r[7]), yaw, int(cls))
        dets.append(Detection(box, float(score), int(h)))
    return dets


def nms(dets: Sequence[Detection], iou_thresh: float) -> List[Detection]:
    """Greedy rotated-BEV-IoU suppression, score descending, ties by input order."""
    if not 0.0 < iou_thresh < 1.0:
        raise ValueError("iou_thresh must be in (0, 1)")
    order = sorted(range(len(dets)), key=lambda k: (-dets[k].score, k))
    keep: List[Detection] = []
    for k in order:
        d = dets[k]
        if all(rotated_iou_bev(d.box, s.box) <= iou_thresh for s in keep):
            keep.append(d)
    return keep


def classwise_nms(dets: Sequence[Detection], iou_thresh: float) -> List[Detection]:
    kept = []
    for cls in sorted({d.box.class_id for d in dets}):
        kept.extend(nms([d for d in dets if d.box.class_id == cls], iou_thresh))
    return sorted(kept, key=lambda d: -d.score)


# ------------------------------------------------------------------ metrics
@dataclass
class MetricsReport:
    ap: Dict[int, Dict[float, float]]
    map: float
    tp_errors: Dict[str, float]
    nds_lite: float
    thresholds: tuple = field(default_factory=tuple)

    def to_dict(self) -> dict:
        return {
            "ap": {str(c): {f"{t:g}": v for t, v in sorted(per.items())}
                   for c, per in sorted(self.ap.items())},
            "map": self.map,
            "nds_lite": self.nds_lite,
            "thresholds": list(self.thresholds),
            "tp_errors": dict(sorted(self.tp_errors.items())),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["class", "threshold", "ap"])
        for c, per in sorted(self.ap.items()):
            for t, v in sorted(per.items()):
                wr.writerow([c, f"{t:g}", repr(v)])
        wr.writerow(["all", "mean", repr(self.map)])
        wr.writerow(["nds_lite", "", repr(self.nds_lite)])
        return buf.getvalue()


def average_precision(matched: Sequence[bool], num_gt: int) -> float:
    """101-point interpolated AP from score-sorted match flags."""
    if num_gt == 0:
        return float("nan")
    flags = np.asarray(matched, dtype=bool)
    if len(flags) == 0:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / num_gt
    precision = tp / (tp + fp)
    # precision envelope: best precision at any recall >= r
    env = np.maximum.accumulate(precision[::-1])[::-1]
    levels = np.linspace(0.0, 1.0, 101)
    pos = np.searchsorted(recall, levels, side="left")
    vals = np.where(pos < len(env), env[np.minimum(pos, len(env) - 1)], 0.0)
    return float(vals.mean())


def _match(preds, gts, cls: int, thresh: float):
    """Greedy score-ordered matching of class ``cls`` by BEV center distance."""
    items = [(d.score, s, k, d) for s, ds in enumerate(preds) for k, d in enumerate(ds)
             if d.box.class_id == cls]
    items.sort(key=lambda t: (-t[0], t[1], t[2]))
    taken = [set() for _ in gts]
    flags, pairs = [], []
    num_gt = sum(1 for g in gts for b in g if b.class_id == cls)
    for _, s, _, d in items:
        best, best_dist = None, np.inf
        for gi, b in enumerate(gts[s]):
            if b.class_id != cls or gi in taken[s]:
                continue
            dist = float(np.hypot(b.x - d.box.x, b.y - d.box.y))
            if dist < best_dist:
                best, best_dist = gi, dist
        ok = best is not None and best_dist < thresh
        if ok:
            taken[s].add(best)
            pairs.append((d.box, gts[s][best], best_dist))
        flags.append(ok)
    return flags, num_gt, pairs


def _scale_error(a: Box3D, b: Box3D) -> float:
    inter = np.prod(np.minimum([a.w, a.l, a.h], [b.w, b.l, b.h]))
    union = a.w * a.l * a.h + b.w * b.l * b.h - inter
    return float(1.0 - inter / union)


def evaluate(preds: Sequence[Sequence[Detection]], gts: Sequence[Sequence[Box3D]], K: int,
             thresholds: Sequence[float] = scaled_thresholds(16.0), tp_threshold_index: int = 2) -> MetricsReport:
    """Per-class AP at each center-distance threshold, mAP, and NDS-lite.

    Translation error is measured in units of the second threshold (the
    analog of nuScenes' 1 m), so ``1 - min(1, err)`` matches the nuScenes
    normalization at full scale.
    """
    thresholds = tuple(float(t) for t in thresholds)
    if list(thresholds) != sorted(thresholds):
        raise ValueError("thresholds must be ascending")
    if len(preds) != len(gts):
        raise ValueError("need one prediction list per scene")
    ap: Dict[int, Dict[float, float]] = {}
    errs = {"trans": [], "scale": [], "orient": []}
    unit = thresholds[min(1, len(thresholds) - 1)]
    tp_t = thresholds[min(tp_threshold_index, len(thresholds) - 1)]
    for c in range(K):
        per = {}
        for t in thresholds:
            flags, num_gt, pairs = _match(preds, gts, c, t)
            per[t] = average_precision(flags, num_gt)
            if t == tp_t and num_gt:
                if pairs:
                    errs["trans"].append(np.mean([d / unit for _, _, d in pairs]))
                    errs["scale"].append(np.mean([_scale_error(p, g) for p, g, _ in pairs]))
                    errs["orient"].append(np.mean([abs(wrap_angle(p.yaw - g.yaw)) for p, g, _ in pairs]))
                else:
                    for k in errs:
                        errs[k].append(1.0)
        if not all(np.isnan(v) for v in per.values()):
            ap[c] = per
    vals = [v for per in ap.values() for v in per.values()]
    m_ap = float(np.mean(vals)) if vals else 0.0
    tp_errors = {k: (float(np.mean(v)) if v else 1.0) for k, v in errs.items()}
    tp_score = float(np.mean([1.0 - min(1.0, e) for e in tp_errors.values()]))
    nds = 0.5 * m_ap + 0.5 * tp_score if ap else 0.0
    return MetricsReport(ap, m_ap, tp_errors, float(nds), thresholds)


# -------------------------------------------------------------------- FLOPs
def flops_voxel_distill(V: int, C: int, with_relation: bool = True) -> tuple:
    """Analytical FLOPs of the voxel feature and voxel relation losses.

    Feature loss: one operation per compared feature element (V*C).
    Relation loss: three C-length dot products per voxel pair (one for each
    branch's similarity numerator and one for the norms), 2C each: 6*C*V^2.
    """
    if V < 0 or C < 1:
        raise ValueError("need V >= 0 and C >= 1")
    cons = int(V) * int(C)
    rel = 6 * int(C) * int(V) ** 2 if with_relation else 0
    return cons, rel
