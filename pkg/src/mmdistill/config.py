"""Run configuration and its INI-style file format.

Sections: [scene], [grid], [heads], [distill], [train], [eval], [run].
Every key is checked; unknown keys raise ConfigError.
"""
from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict

from .detector import HeadSpec
from .distill import DistillConfig
from .eval import scaled_thresholds
from .scene import SceneConfig
from .voxel import GridSpec


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    steps: int = 4000
    teacher_steps: int = 2000
    lr: float = 0.01
    momentum: float = 0.9
    batch_scenes: int = 1
    seed: int = 0
    grad_clip: float = 10.0
    # random quarter turns and mirror flips of each training scene
    augment: bool = True
    train_scenes: int = 200
    eval_scenes: int = 50

    def validate(self) -> "TrainConfig":
        if self.steps < 1 or self.teacher_steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must be in [0, 1)")
        if self.batch_scenes < 1:
            raise ConfigError("batch_scenes must be >= 1")
        if self.train_scenes < 1 or self.eval_scenes < 0:
            raise ConfigError("need at least one training scene")
        return self


@dataclass
class EvalConfig:
    thresholds: tuple = scaled_thresholds(16.0)
    nms_iou: float = 0.2
    top_n: int = 50
    score_thresh: float = 0.1

    def validate(self) -> "EvalConfig":
        if list(self.thresholds) != sorted(self.thresholds) or not self.thresholds:
            raise ConfigError("thresholds must be non-empty and ascending")
        if not 0.0 < self.nms_iou < 1.0:
            raise ConfigError("nms_iou must be in (0, 1)")
        if self.top_n < 1:
            raise ConfigError("top_n must be >= 1")
        return self


@dataclass
class RunConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    grid: GridSpec = field(default_factory=GridSpec)
    heads: HeadSpec = field(default_factory=HeadSpec)
    distill: DistillConfig = field(default_factory=DistillConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    out_dir: str = "runs/default"

    def validate(self) -> "RunConfig":
        try:
            self.scene.validate()
            self.heads.validate(self.scene.K)
            self.distill.validate()
        except (ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc
        self.train.validate()
        self.eval.validate()
        r = self.scene.range
        if self.train.augment and not (abs(r[0] + r[1]) < 1e-9 and abs(r[2] + r[3]) < 1e-9
                                       and abs(r[1] - r[3]) < 1e-9):
            raise ConfigError("train.augment needs a square scene range centered at 0")
        for axis in range(3):
            lo = self.grid.origin[axis]
            hi = lo + self.grid.dims[axis] * self.grid.voxel_size[axis]
            if abs(lo - r[2 * axis]) > 1e-9 or abs(hi - r[2 * axis + 1]) > 1e-6:
                raise ConfigError(f"grid does not cover the scene range on axis {axis}")
        if self.distill.nms_iou != self.eval.nms_iou:
            self.distill = replace(self.distill, nms_iou=self.eval.nms_iou)
        return self


def default_config() -> RunConfig:
    scene = SceneConfig()
    return RunConfig(scene=scene, grid=GridSpec.from_range(scene.range)).validate()


# ------------------------------------------------------------- file format
def _parse_value(raw: str, like: Any, key: str):
    raw = raw.strip()
    try:
        if isinstance(like, bool):
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, tuple):
            parts = [p for p in raw.replace(",", " ").split()]
            kind = type(like[0]) if like else float
            return tuple(kind(p) if kind is not bool else p.lower() == "true" for p in parts)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(_format_value(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _heads_from_str(raw: str) -> HeadSpec:
    try:
        groups = tuple(tuple(int(c) for c in g.replace(",", " ").split()) for g in raw.split("|"))
    except ValueError as exc:
        raise ConfigError(f"bad head groups {raw!r}") from exc
    return HeadSpec(groups)


def _heads_to_str(heads: HeadSpec) -> str:
    return " | ".join(", ".join(str(c) for c in g) for g in heads.groups)


def _section_dict(obj) -> Dict[str, Any]:
    if isinstance(obj, DistillConfig):
        return obj.to_dict()
    return {f.name: getattr(obj, f.name) for f in fields(obj)}


def dumps_config(cfg: RunConfig) -> str:
    cp = configparser.ConfigParser()
    cp.optionxform = str
    for name in ("scene", "grid", "distill", "train", "eval"):
        cp[name] = {k: _format_value(v) for k, v in _section_dict(getattr(cfg, name)).items()}
    cp["heads"] = {"groups": _heads_to_str(cfg.heads)}
    cp["run"] = {"out_dir": cfg.out_dir}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def loads_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser()
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    base = RunConfig()
    known = {"scene", "grid", "heads", "distill", "train", "eval", "run"}
    extra = set(cp.sections()) - known
    if extra:
        raise ConfigError(f"unknown config sections: {sorted(extra)}")
    updates: Dict[str, Any] = {}
    for name in ("scene", "train", "eval"):
        if name not in cp:
            continue
        current = _section_dict(getattr(base, name))
        kw = {}
        for key, raw in cp[name].items():
            if key not in current:
                raise ConfigError(f"unknown key [{name}] {key}")
            kw[key] = _parse_value(raw, current[key], f"{name}.{key}")
        try:
            updates[name] = replace(getattr(base, name), **kw)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    if "distill" in cp:
        current = base.distill.to_dict()
        kw = {}
        for key, raw in cp["distill"].items():
            if key not in current:
                raise ConfigError(f"unknown key [distill] {key}")
            like = current[key]
            kw[key] = _parse_value(raw, tuple(like) if isinstance(like, list) else like, f"distill.{key}")
        try:
            updates["distill"] = DistillConfig.from_dict({**current, **kw})
        except (ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc
    if "heads" in cp:
        for key in cp["heads"]:
            if key != "groups":
                raise ConfigError(f"unknown key [heads] {key}")
        updates["heads"] = _heads_from_str(cp["heads"]["groups"])
    out_dir = base.out_dir
    if "run" in cp:
        for key in cp["run"]:
            if key != "out_dir":
                raise ConfigError(f"unknown key [run] {key}")
        out_dir = cp["run"].get("out_dir", out_dir)
    scene = updates.get("scene", base.scene)
    grid_kw = {}
    if "grid" in cp:
        current = _section_dict(base.grid)
        for key, raw in cp["grid"].items():
            if key not in current:
                raise ConfigError(f"unknown key [grid] {key}")
            grid_kw[key] = _parse_value(raw, current[key], f"grid.{key}")
    try:
        grid = GridSpec.from_range(scene.range, grid_kw.pop("voxel_size", base.grid.voxel_size),
                                   grid_kw.pop("bev_stride", base.grid.bev_stride))
        grid = replace(grid, **grid_kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    cfg = RunConfig(scene=scene, grid=grid, heads=updates.get("heads", base.heads),
                    distill=updates.get("distill", base.distill),
                    train=updates.get("train", base.train), eval=updates.get("eval", base.eval),
                    out_dir=out_dir)
    return cfg.validate()


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return loads_config(text)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(dumps_config(cfg))
