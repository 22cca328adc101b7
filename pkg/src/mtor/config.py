"""Experiment configuration as nested dataclasses.

Configs are loaded from YAML, patched with ``key=value`` overrides
(dotted keys such as ``train.lam=0.5``) and serialized back to YAML as the
effective config of a run.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    pass


LOSS_NAMES = ("rcl", "egl", "agl")


@dataclass
class SplitSizes:
    source: int = 200
    target: int = 200
    target_test: int = 0


@dataclass
class ShiftConfig:
    fog_density: float = 0.5
    fog_color: tuple[float, float, float] = (0.75, 0.75, 0.78)
    noise_sigma: float = 0.05
    hue_shift: float = 0.0


@dataclass
class AugConfig:
    # relative strength of brightness/contrast/saturation jitter; hue jitter is jitter/4 turns
    jitter: float = 0.3
    pca_noise: float = 0.1
    # maximum translation (pixels) of the shared pad-and-crop
    crop: int = 8
    flip: bool = True


@dataclass
class DatasetConfig:
    seed: int = 0
    size: SplitSizes = field(default_factory=SplitSizes)
    image_size: int = 128
    num_objects: tuple[int, int] = (1, 4)
    object_size: tuple[int, int] = (18, 44)
    categories: tuple[str, ...] = ("circle", "square", "triangle")
    background_style: str = "gradient"
    shift: ShiftConfig = field(default_factory=ShiftConfig)
    aug: AugConfig = field(default_factory=AugConfig)


@dataclass
class DetectorConfig:
    widths: tuple[int, int, int, int] = (16, 32, 64, 64)
    anchor_sizes: tuple[float, ...] = (32.0,)
    aspect_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    pre_nms_top_n: int = 256
    proposals_train: int = 64
    proposals_eval: int = 32
    rpn_nms: float = 0.7
    pool_grid: int = 4
    hidden: int = 256
    rpn_pos_iou: float = 0.7
    rpn_neg_iou: float = 0.3
    rpn_batch: int = 128
    rpn_pos_fraction: float = 0.5
    rcnn_pos_iou: float = 0.5
    rcnn_batch: int = 64
    rcnn_pos_fraction: float = 0.25
    # which vector feeds the relational graphs: "pooled" ROI vector or "embedding" (head hidden layer)
    relation_feature: str = "pooled"


@dataclass
class TrainConfig:
    lam: float = 1.0
    alpha: float = 0.99
    eps: float = 0.98
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    pretrain_lr: float = 1e-2
    pretrain_epochs: int = 30
    # pre-training lr drops by 10x after this fraction of its steps
    pretrain_decay_at: float = 0.7
    adapt_epochs: int = 10
    seed: int = 0
    losses: tuple[str, ...] = LOSS_NAMES
    source_flip: bool = True
    checkpoint_every: int = 500
    log_every: int = 1


@dataclass
class EvalConfig:
    iou_thresh: float = 0.5
    score_thresh: float = 0.01
    nms: float = 0.5
    max_detections: int = 100
    # weights used for evaluation after adaptation: "teacher" or "student"
    weights: str = "teacher"


@dataclass
class ExperimentConfig:
    run_id: str = "run"
    output_dir: str = "runs"
    data_dir: str = "data/shapes"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        t = self.train
        if t.lam < 0:
            raise ConfigError(f"train.lam must be >= 0, got {t.lam}")
        if not 0.0 <= t.alpha < 1.0:
            raise ConfigError(f"train.alpha must lie in [0, 1), got {t.alpha}")
        if not 0.0 <= t.eps <= 1.0:
            raise ConfigError(f"train.eps must lie in [0, 1], got {t.eps}")
        bad = set(t.losses) - set(LOSS_NAMES)
        if bad:
            raise ConfigError(f"unknown consistency losses {sorted(bad)}; choose from {LOSS_NAMES}")
        if len(self.dataset.categories) < 2:
            raise ConfigError("dataset.categories needs at least two entries")
        if self.dataset.image_size < 64:
            raise ConfigError("dataset.image_size must be >= 64")
        if self.detector.relation_feature not in ("pooled", "embedding"):
            raise ConfigError("detector.relation_feature must be 'pooled' or 'embedding'")
        if self.eval.weights not in ("teacher", "student"):
            raise ConfigError("eval.weights must be 'teacher' or 'student'")


def _coerce(tp: Any, value: Any) -> Any:
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"expected a mapping for {tp.__name__}, got {value!r}")
        return from_dict(tp, value)
    origin = typing.get_origin(tp)
    if origin is tuple:
        return tuple(value) if isinstance(value, (list, tuple)) else (value,)
    if tp is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if tp is float and isinstance(value, str):
        # YAML 1.1 reads "1e-6" as a string
        try:
            return float(value)
        except ValueError as exc:
            raise ConfigError(f"expected a number, got {value!r}") from exc
    return value


def from_dict(cls: type, data: dict[str, Any]):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    return cls(**{k: _coerce(hints[k], v) for k, v in data.items()})


def to_dict(cfg) -> dict[str, Any]:
    def conv(v):
        if isinstance(v, tuple):
            return [conv(x) for x in v]
        if isinstance(v, dict):
            return {k: conv(x) for k, x in v.items()}
        return v

    return conv(dataclasses.asdict(cfg))


def apply_overrides(data: dict[str, Any], overrides: list[str]) -> dict[str, Any]:
    """Apply ``a.b.c=value`` overrides to a nested dict; values are parsed as YAML."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, raw = item.split("=", 1)
        node = data
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot descend into non-mapping at {key!r}")
        node[parts[-1]] = yaml.safe_load(raw)
    return data


def _merge(base: dict, top: dict) -> dict:
    out = dict(base)
    for k, v in top.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(paths: list[str | Path] | None = None, overrides: list[str] | None = None) -> ExperimentConfig:
    """Layer YAML files (later wins) and overrides on top of the defaults."""
    data = to_dict(ExperimentConfig())
    for p in paths or []:
        try:
            layer = yaml.safe_load(Path(p).read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc}") from exc
        data = _merge(data, layer)
    data = apply_overrides(data, list(overrides or []))
    cfg = from_dict(ExperimentConfig, data)
    cfg.validate()
    return cfg


def dump_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(to_dict(cfg), sort_keys=False))


def config_hash(section) -> str:
    data = section if isinstance(section, dict) else to_dict(section)
    blob = json.dumps(data, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
