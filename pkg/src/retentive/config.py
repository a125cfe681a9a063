"""Experiment configuration: dataclasses, YAML loading, canonical digests.

Every knob that shapes an artifact lives here so that a single SHA-256 over
the resolved configuration identifies a run.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError

RPN_STRATEGIES = ("max", "arith-avg", "geo-avg", "base-only")
CONSISTENCY_VARIANTS = ("kldiv", "l1", "cos", "off")
CLASSIFIER_KINDS = ("cos", "fc")
HEAD_DOMAINS = ("all", "novel-only")


@dataclass
class DatasetConfig:
    """Synthetic benchmark sizing."""

    image_side: int = 64
    num_classes: int = 12
    num_novel: int = 4
    base_train_images: int = 500
    test_images: int = 100
    uar_eval_images: int = 100
    shots: int = 5
    min_instances: int = 2
    max_instances: int = 5
    min_glyph: int = 12
    max_glyph: int = 28
    novel_frequency: float = 0.3
    overlap_iou_cap: float = 0.3
    placement_retries: int = 50
    noise: float = 0.0


@dataclass
class ModelConfig:
    """Frozen featurizer and head dimensions."""

    feat_channels: int = 32
    feat_stride: int = 4
    mixer_channels: int = 32
    roi_pool_bins: int = 3
    head_dim: int = 64
    anchor_scales: tuple[float, ...] = (8.0, 16.0, 32.0)
    cosine_scale: float = 20.0
    init_sigma: float = 0.01


@dataclass
class TrainConfig:
    """One training stage (pretrain or finetune)."""

    lr: float = 0.05
    momentum: float = 0.9
    lam: float = 0.1
    minibatch_images: int = 2
    roi_per_image: int = 32
    roi_positive_fraction: float = 0.25
    rpn_per_image: int = 64
    rpn_positive_fraction: float = 0.5
    rpn_pos_iou: float = 0.7
    rpn_neg_iou: float = 0.3
    roi_pos_iou: float = 0.5
    max_iters: int = 3000
    convergence_window: int = 50
    convergence_rel_tol: float = 1e-4
    consistency: str = "kldiv"
    rpn_strategy: str = "max"
    classifier: str = "cos"
    head_domain: str = "all"
    rpn_obj_init: str = "copy"  # "copy" from base objectness head, or "random"
    head_init: str = "random"   # "copy" seeds the box head from the padded base head

    def validate(self) -> None:
        if self.lam < 0:
            raise ConfigError(f"consistency coefficient must be >= 0, got {self.lam}")
        for name in ("rpn_pos_iou", "rpn_neg_iou", "roi_pos_iou"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.rpn_neg_iou > self.rpn_pos_iou:
            raise ConfigError("rpn_neg_iou must not exceed rpn_pos_iou")
        if self.consistency not in CONSISTENCY_VARIANTS:
            raise ConfigError(f"unknown consistency variant {self.consistency!r}")
        if self.rpn_strategy not in RPN_STRATEGIES:
            raise ConfigError(f"unknown rpn strategy {self.rpn_strategy!r}")
        if self.classifier not in CLASSIFIER_KINDS:
            raise ConfigError(f"unknown classifier {self.classifier!r}")
        if self.head_domain not in HEAD_DOMAINS:
            raise ConfigError(f"unknown head domain {self.head_domain!r}")
        if self.head_domain == "novel-only" and self.consistency != "off":
            raise ConfigError("novel-only head domain requires consistency='off'")
        if self.rpn_obj_init not in ("copy", "random"):
            raise ConfigError(f"rpn_obj_init must be 'copy' or 'random', got {self.rpn_obj_init!r}")
        if self.head_init not in ("copy", "random"):
            raise ConfigError(f"head_init must be 'copy' or 'random', got {self.head_init!r}")
        if self.head_init == "copy" and (self.classifier != "fc" or self.head_domain != "all"):
            raise ConfigError("head_init='copy' needs classifier='fc' and head_domain='all'")


@dataclass
class DetectConfig:
    """Proposal generation and final inference."""

    pre_nms_k: int = 256
    proposal_nms_iou: float = 0.7
    post_nms_k: int = 64
    score_thresh: float = 0.05
    nms_iou: float = 0.5
    max_dets: int = 20
    base_bonus: float = 0.1


@dataclass
class EvalConfig:
    iou_thresholds: tuple[float, ...] = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
    recall_ks: tuple[int, ...] = (10, 100)
    recall_iou: float = 0.5


@dataclass
class ExperimentConfig:
    """Everything a full gen/pretrain/finetune/eval run depends on."""

    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(max_iters=3000))
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig(max_iters=800))
    detect: DetectConfig = field(default_factory=DetectConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        self.pretrain.validate()
        self.finetune.validate()
        d = self.dataset
        if not 0 < d.num_novel < d.num_classes:
            raise ConfigError("need 0 < num_novel < num_classes")
        if d.image_side % self.model.feat_stride != 0:
            raise ConfigError("image side must be divisible by the featurizer stride")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return canonical_digest(self.to_dict())


def canonical_json(obj) -> str:
    """Canonical serialization: sorted keys, no whitespace, exact float repr."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def canonical_digest(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def _merge_into(cfg, data: dict, path: str) -> None:
    for key, value in data.items():
        if not hasattr(cfg, key):
            raise ConfigError(f"unknown config key {path}{key!r}")
        current = getattr(cfg, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"config section {path}{key!r} must be a mapping")
            _merge_into(current, value, f"{path}{key}.")
        else:
            if isinstance(current, tuple) and isinstance(value, list):
                value = tuple(value)
            setattr(cfg, key, value)


def load_config(path: str | Path | None) -> ExperimentConfig:
    """Build an ExperimentConfig from defaults overlaid with a YAML file."""
    cfg = ExperimentConfig()
    if path is not None:
        raw = Path(path).read_text()
        try:
            data = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ConfigError(f"config root of {path} must be a mapping")
        _merge_into(cfg, data, "")
    cfg.validate()
    return cfg
