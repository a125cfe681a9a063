"""Model assembly and forward passes.

A model is a named-array parameter set over a frozen random featurizer. The
pretrained ("base") detector owns one RPN objectness head and one fc box head
over base classes plus background. Finetuning adds a second objectness head
and a second box head over all classes, leaving every base array untouched;
inference ensembles the two objectness maps elementwise and merges both box
heads' candidates in one class-wise NMS.

Canonical logit ordering everywhere: [base..., novel..., background].
"""
from __future__ import annotations

import functools
from dataclasses import dataclass, field
from hashlib import sha256

import numpy as np

from .config import DetectConfig, ModelConfig, RPN_STRATEGIES
from .errors import ParameterError, StateError
from .synthgen import ClassSplit
from .tensorops import (
    AnchorGrid,
    conv3x3,
    cosine_logits,
    decode_boxes,
    fixed_featurizer,
    generate_anchors,
    linear_forward,
    nms,
    roi_pool,
    sigmoid,
    softmax,
)

_TAG_MIXER = 0x313E
_TAG_PROJ = 0x9203
_TAG_BASE_INIT = 0xBA5E
_TAG_NOVEL_INIT = 0x0E11

BASE_LAYERS = ("rpn_shared", "rpn_obj_b", "rpn_box", "boxhead_proj", "cls_b", "reg_b")
NOVEL_LAYERS = ("rpn_obj_n", "cls_n", "reg_n")
PRETRAIN_TRAINABLE = ("rpn_obj_b", "rpn_box", "cls_b", "reg_b")
FINETUNE_TRAINABLE = ("rpn_obj_n", "cls_n", "reg_n")

STAGE_INIT = "init"
STAGE_BASE = "base"
STAGE_RETENTIVE = "retentive"


def _rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([k & 0xFFFFFFFFFFFFFFFF for k in keys]))


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass
class ParamSet:
    """Named float64 arrays keyed "layer/part" plus the set of trainable layers."""

    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    trainable: set[str] = field(default_factory=set)

    def layer_names(self) -> tuple[str, ...]:
        return tuple(sorted({k.split("/")[0] for k in self.arrays}))

    def parts_of(self, layer: str) -> tuple[str, ...]:
        return tuple(sorted(k for k in self.arrays if k.split("/")[0] == layer))

    def copy(self) -> "ParamSet":
        return ParamSet(
            arrays={k: v.copy() for k, v in self.arrays.items()},
            trainable=set(self.trainable),
        )

    def digest(self, layers: tuple[str, ...] | None = None) -> str:
        h = sha256()
        for key in sorted(self.arrays):
            if layers is not None and key.split("/")[0] not in layers:
                continue
            arr = self.arrays[key]
            h.update(key.encode())
            h.update(str(arr.shape).encode())
            h.update(arr.tobytes())
        return h.hexdigest()


@dataclass
class Model:
    params: ParamSet
    split: ClassSplit
    mcfg: ModelConfig
    feat_seed: int
    stage: str = STAGE_INIT
    classifier: str = "cos"     # novel-head form: cosine or fc
    head_domain: str = "all"    # novel-head class domain: all or novel-only
    rpn_strategy: str = "max"

    @property
    def num_base(self) -> int:
        return self.split.num_base

    @property
    def num_novel(self) -> int:
        return self.split.num_novel

    def novel_head_classes(self) -> tuple[int, ...]:
        """Foreground ids scored by the finetuned box head, in logit order."""
        if self.head_domain == "novel-only":
            return self.split.novel_ids
        return self.split.base_ids + self.split.novel_ids

    def base_subset_digest(self) -> str:
        return self.params.digest(BASE_LAYERS)


def base_subset_digest(params: ParamSet) -> str:
    return params.digest(BASE_LAYERS)


def init_base_model(split: ClassSplit, mcfg: ModelConfig, feat_seed: int, seed: int) -> Model:
    """Fresh untrained base detector; frozen arrays derive from feat_seed only."""
    c = mcfg.mixer_channels
    d = mcfg.head_dim
    pooled = mcfg.feat_channels * mcfg.roi_pool_bins ** 2
    n_scales = len(mcfg.anchor_scales)
    nb = split.num_base

    arrays: dict[str, np.ndarray] = {}
    rng_frozen = _rng(feat_seed, _TAG_MIXER)
    arrays["rpn_shared/W"] = rng_frozen.normal(0.0, 1.0 / np.sqrt(9.0 * mcfg.feat_channels),
                                               size=(c, mcfg.feat_channels, 3, 3))
    rng_proj = _rng(feat_seed, _TAG_PROJ)
    arrays["boxhead_proj/W"] = rng_proj.normal(0.0, 1.0 / np.sqrt(pooled), size=(d, pooled))

    rng = _rng(seed, _TAG_BASE_INIT)
    sig = mcfg.init_sigma
    arrays["rpn_obj_b/W"] = rng.normal(0.0, sig, size=(n_scales, c))
    arrays["rpn_obj_b/b"] = np.zeros(n_scales)
    arrays["rpn_box/W"] = rng.normal(0.0, sig, size=(4 * n_scales, c))
    arrays["rpn_box/b"] = np.zeros(4 * n_scales)
    arrays["cls_b/W"] = rng.normal(0.0, sig, size=(nb + 1, d))
    arrays["cls_b/b"] = np.zeros(nb + 1)
    arrays["reg_b/W"] = rng.normal(0.0, sig, size=(4, d))
    arrays["reg_b/b"] = np.zeros(4)

    params = ParamSet(arrays={k: np.ascontiguousarray(v) for k, v in arrays.items()},
                      trainable=set(PRETRAIN_TRAINABLE))
    return Model(params=params, split=split, mcfg=mcfg, feat_seed=feat_seed, stage=STAGE_INIT)


def extend_for_finetune(base: Model, seed: int, classifier: str = "cos",
                        head_domain: str = "all", rpn_obj_init: str = "copy",
                        head_init: str = "random", rpn_strategy: str = "max") -> Model:
    """Add the three finetune layers; base arrays are shared bit-for-bit."""
    if base.stage != STAGE_BASE:
        raise StateError(f"finetune extension requires a pretrained model, got stage {base.stage!r}")
    if head_init == "copy" and (classifier != "fc" or head_domain != "all"):
        raise ParameterError("head_init='copy' requires classifier='fc' and head_domain='all'")
    params = base.params.copy()
    d = base.mcfg.head_dim
    sig = base.mcfg.init_sigma
    rng = _rng(seed, _TAG_NOVEL_INIT)

    if rpn_obj_init == "copy":
        params.arrays["rpn_obj_n/W"] = params.arrays["rpn_obj_b/W"].copy()
        params.arrays["rpn_obj_n/b"] = params.arrays["rpn_obj_b/b"].copy()
    elif rpn_obj_init == "random":
        params.arrays["rpn_obj_n/W"] = rng.normal(0.0, sig, size=params.arrays["rpn_obj_b/W"].shape)
        params.arrays["rpn_obj_n/b"] = np.zeros_like(params.arrays["rpn_obj_b/b"])
    else:
        raise ParameterError(f"unknown rpn_obj_init {rpn_obj_init!r}")

    if head_domain == "novel-only":
        n_out = base.num_novel + 1
    else:
        n_out = base.num_base + base.num_novel + 1
    if head_init == "copy":
        nb = base.num_base
        w = np.zeros((n_out, d))
        bvec = np.zeros(n_out)
        w[:nb] = params.arrays["cls_b/W"][:nb]
        w[-1] = params.arrays["cls_b/W"][-1]
        bvec[:nb] = params.arrays["cls_b/b"][:nb]
        bvec[-1] = params.arrays["cls_b/b"][-1]
        params.arrays["cls_n/W"] = w
        params.arrays["cls_n/b"] = bvec
        params.arrays["reg_n/W"] = params.arrays["reg_b/W"].copy()
        params.arrays["reg_n/b"] = params.arrays["reg_b/b"].copy()
    else:
        params.arrays["cls_n/W"] = rng.normal(0.0, sig, size=(n_out, d))
        if classifier == "fc":
            params.arrays["cls_n/b"] = np.zeros(n_out)
        params.arrays["reg_n/W"] = rng.normal(0.0, sig, size=(4, d))
        params.arrays["reg_n/b"] = np.zeros(4)

    params.trainable = set(FINETUNE_TRAINABLE)
    return Model(params=params, split=base.split, mcfg=base.mcfg, feat_seed=base.feat_seed,
                 stage=STAGE_RETENTIVE, classifier=classifier, head_domain=head_domain,
                 rpn_strategy=rpn_strategy)


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

@functools.lru_cache(maxsize=4)
def anchor_grid_for(grid_h: int, grid_w: int, stride: float, scales: tuple) -> AnchorGrid:
    return generate_anchors(grid_h, grid_w, stride, scales)


def model_anchors(model: Model, side: int) -> AnchorGrid:
    g = side // model.mcfg.feat_stride
    return anchor_grid_for(g, g, float(model.mcfg.feat_stride), tuple(model.mcfg.anchor_scales))


def image_features(model: Model, image: np.ndarray) -> np.ndarray:
    return fixed_featurizer(image, model.feat_seed, model.mcfg.feat_channels)


def mixed_features(model: Model, feat: np.ndarray) -> np.ndarray:
    """Frozen 3x3 mixer with rectification, shared by both objectness heads."""
    return np.maximum(conv3x3(feat, model.params.arrays["rpn_shared/W"]), 0.0)


def rpn_cells(mixed: np.ndarray) -> np.ndarray:
    """(C,H,W) -> (H*W, C) rows in row-major cell order."""
    c = mixed.shape[0]
    return np.ascontiguousarray(mixed.reshape(c, -1).T)


def _require_head(model: Model, head: str) -> str:
    if head not in ("base", "novel"):
        raise ParameterError(f"unknown rpn head {head!r}")
    if head == "novel" and "rpn_obj_n/W" not in model.params.arrays:
        raise StateError("model has no finetuned objectness head")
    return "rpn_obj_b" if head == "base" else "rpn_obj_n"


def rpn_objectness_logits(model: Model, cells: np.ndarray, head: str) -> np.ndarray:
    layer = _require_head(model, head)
    a = model.params.arrays
    z = linear_forward(cells, a[f"{layer}/W"], a[f"{layer}/b"])  # (cells, scales)
    return z.reshape(-1)


def rpn_box_deltas(model: Model, cells: np.ndarray) -> np.ndarray:
    a = model.params.arrays
    d = linear_forward(cells, a["rpn_box/W"], a["rpn_box/b"])  # (cells, 4*scales)
    n_scales = len(model.mcfg.anchor_scales)
    return d.reshape(-1, n_scales, 4).reshape(-1, 4)


def rpn_forward(model: Model, feat: np.ndarray, head: str) -> tuple[np.ndarray, np.ndarray]:
    """Featurizer output -> (per-anchor objectness, per-anchor box deltas).

    The box regression layer is shared between heads; only the objectness
    linear differs.
    """
    cells = rpn_cells(mixed_features(model, feat))
    obj = sigmoid(rpn_objectness_logits(model, cells, head))
    deltas = rpn_box_deltas(model, cells)
    return obj, deltas


def bias_balanced_objectness(o_b: np.ndarray, o_n: np.ndarray, strategy: str) -> np.ndarray:
    o_b = np.asarray(o_b, dtype=np.float64)
    o_n = np.asarray(o_n, dtype=np.float64)
    if o_b.shape != o_n.shape:
        raise ParameterError(f"objectness shapes differ: {o_b.shape} vs {o_n.shape}")
    if strategy == "max":
        return np.maximum(o_b, o_n)
    if strategy == "arith-avg":
        return 0.5 * (o_b + o_n)
    if strategy == "geo-avg":
        return np.sqrt(o_b * o_n)
    if strategy == "base-only":
        return o_b.copy()
    raise ParameterError(f"unknown rpn strategy {strategy!r}; expected one of {RPN_STRATEGIES}")


@dataclass
class Proposals:
    boxes: np.ndarray   # (P, 4)
    scores: np.ndarray  # (P,) objectness that survived

    def __len__(self) -> int:
        return self.boxes.shape[0]


def propose(objectness: np.ndarray, deltas: np.ndarray, anchors: AnchorGrid,
            dcfg: DetectConfig, side: float) -> Proposals:
    """Top-k by objectness, decode, clip, greedy NMS, top-k again."""
    objectness = np.asarray(objectness, dtype=np.float64).reshape(-1)
    if len(objectness) != len(anchors) or deltas.shape != (len(anchors), 4):
        raise ParameterError("objectness/deltas not aligned with the anchor grid")
    order = np.lexsort((np.arange(len(objectness)), -objectness))[:dcfg.pre_nms_k]
    boxes = decode_boxes(deltas[order], anchors.boxes[order], side=side)
    scores = objectness[order]
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    ok = (w > 1e-6) & (h > 1e-6)
    boxes, scores = boxes[ok], scores[ok]
    kept = nms(boxes, scores, dcfg.proposal_nms_iou)[:dcfg.post_nms_k]
    return Proposals(boxes=np.ascontiguousarray(boxes[kept]), scores=np.ascontiguousarray(scores[kept]))


def roi_features(model: Model, feat: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """Pooled, projected, rectified per-ROI feature rows (P, head_dim)."""
    mcfg = model.mcfg
    proj = model.params.arrays["boxhead_proj/W"]
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if len(boxes) == 0:
        return np.zeros((0, mcfg.head_dim))
    pooled = np.stack([
        roi_pool(feat, box, bins=mcfg.roi_pool_bins, stride=float(mcfg.feat_stride))
        for box in boxes
    ])
    return np.maximum(pooled @ proj.T, 0.0)


def box_head_scores(model: Model, rois: np.ndarray, head: str) -> tuple[np.ndarray, np.ndarray]:
    """ROI feature rows -> (classification logits, class-agnostic box deltas)."""
    a = model.params.arrays
    if head == "base":
        logits = linear_forward(rois, a["cls_b/W"], a["cls_b/b"])
        deltas = linear_forward(rois, a["reg_b/W"], a["reg_b/b"])
        return logits, deltas
    if head != "novel":
        raise ParameterError(f"unknown box head {head!r}")
    if "cls_n/W" not in a:
        raise StateError("model has no finetuned box head")
    if model.classifier == "cos":
        logits = cosine_logits(rois, a["cls_n/W"], model.mcfg.cosine_scale)
    else:
        logits = linear_forward(rois, a["cls_n/W"], a["cls_n/b"])
    deltas = linear_forward(rois, a["reg_n/W"], a["reg_n/b"])
    return logits, deltas


def roi_head_forward(model: Model, feat: np.ndarray, boxes: np.ndarray,
                     head: str) -> tuple[np.ndarray, np.ndarray]:
    rois = roi_features(model, feat, boxes)
    if len(rois) == 0:
        width = model.num_base + 1 if head == "base" else len(model.novel_head_classes()) + 1
        return np.zeros((0, width)), np.zeros((0, 4))
    return box_head_scores(model, rois, head)


def pad_base_logits(logits_b: np.ndarray, num_novel: int) -> np.ndarray:
    """Insert zero logits for novel entries between base block and background."""
    logits_b = np.asarray(logits_b, dtype=np.float64)
    if logits_b.ndim != 2 or logits_b.shape[1] < 1:
        raise StateError(f"base logits must be (N, num_base+1), got {logits_b.shape}")
    if num_novel < 0:
        raise StateError(f"negative novel count {num_novel}")
    if num_novel == 0:
        return logits_b.copy()
    n, wb = logits_b.shape
    out = np.zeros((n, wb + num_novel))
    out[:, :wb - 1] = logits_b[:, :-1]
    out[:, -1] = logits_b[:, -1]
    return out


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Detection:
    box: tuple[float, float, float, float]
    class_id: int
    score: float        # plain probability; never includes the ranking bonus
    source_head: str    # "base" or "novel"


def _merge_candidates(cands: list[tuple[np.ndarray, int, float, str]],
                      dcfg: DetectConfig) -> list[Detection]:
    """Class-wise NMS on bonus-adjusted ranks, then a global top-k cut."""
    if not cands:
        return []
    boxes = np.stack([c[0] for c in cands])
    classes = np.asarray([c[1] for c in cands])
    raw = np.asarray([c[2] for c in cands])
    heads = [c[3] for c in cands]
    ranks = raw + np.asarray([dcfg.base_bonus if h == "base" else 0.0 for h in heads])
    kept_idx: list[int] = []
    for cid in sorted(set(classes.tolist())):
        members = np.flatnonzero(classes == cid)
        kept = nms(boxes[members], ranks[members], dcfg.nms_iou)
        kept_idx.extend(int(members[j]) for j in kept)
    kept_idx.sort(key=lambda i: (-ranks[i], i))
    kept_idx = kept_idx[:dcfg.max_dets]
    return [
        Detection(
            box=tuple(float(v) for v in boxes[i]),
            class_id=int(classes[i]),
            score=float(raw[i]),
            source_head=heads[i],
        )
        for i in kept_idx
    ]


def detect_base(model: Model, image: np.ndarray, dcfg: DetectConfig) -> list[Detection]:
    """Base-detector inference: base RPN head, base box head, base classes.

    Scores come from the padded-logit softmax so they are comparable with
    ensemble inference.
    """
    if model.stage == STAGE_INIT:
        raise StateError("cannot run inference on an untrained model")
    side = float(image.shape[0])
    feat = image_features(model, image)
    obj, deltas = rpn_forward(model, feat, "base")
    props = propose(obj, deltas, model_anchors(model, image.shape[0]), dcfg, side)
    logits, reg = roi_head_forward(model, feat, props.boxes, "base")
    probs = softmax(pad_base_logits(logits, model.num_novel))
    boxes = decode_boxes(reg, props.boxes, side=side)
    cands = []
    for i in range(len(props)):
        for slot, cid in enumerate(model.split.base_ids):
            p = float(probs[i, slot])
            if p >= dcfg.score_thresh:
                cands.append((boxes[i], cid, p, "base"))
    return _merge_candidates(cands, dcfg)


def detect(model: Model, image: np.ndarray, dcfg: DetectConfig,
           strategy: str | None = None) -> list[Detection]:
    """Full ensemble inference.

    Proposals come from the elementwise-combined objectness maps. Both box
    heads score every proposal; the base head's logits are zero-padded on
    novel entries before softmax, and the finetuned head's base-class
    predictions stay in the candidate pool. Base-head candidates get a
    rank-only bonus so NMS prefers them on ties.
    """
    if model.stage != STAGE_RETENTIVE:
        raise StateError(f"ensemble inference needs a finetuned model, got stage {model.stage!r}")
    strategy = model.rpn_strategy if strategy is None else strategy
    side = float(image.shape[0])
    feat = image_features(model, image)
    cells = rpn_cells(mixed_features(model, feat))
    o_b = sigmoid(rpn_objectness_logits(model, cells, "base"))
    o_n = sigmoid(rpn_objectness_logits(model, cells, "novel"))
    obj = bias_balanced_objectness(o_b, o_n, strategy)
    deltas = rpn_box_deltas(model, cells)
    props = propose(obj, deltas, model_anchors(model, image.shape[0]), dcfg, side)

    rois = roi_features(model, feat, props.boxes)
    if len(rois) == 0:
        return []
    logits_b, reg_b = box_head_scores(model, rois, "base")
    logits_n, reg_n = box_head_scores(model, rois, "novel")
    probs_b = softmax(pad_base_logits(logits_b, model.num_novel))
    probs_n = softmax(logits_n)
    boxes_b = decode_boxes(reg_b, props.boxes, side=side)
    boxes_n = decode_boxes(reg_n, props.boxes, side=side)

    novel_head_ids = model.novel_head_classes()
    cands = []
    for i in range(len(props)):
        for slot, cid in enumerate(model.split.base_ids):
            p = float(probs_b[i, slot])
            if p >= dcfg.score_thresh:
                cands.append((boxes_b[i], cid, p, "base"))
        for slot, cid in enumerate(novel_head_ids):
            p = float(probs_n[i, slot])
            if p >= dcfg.score_thresh:
                cands.append((boxes_n[i], cid, p, "novel"))
    return _merge_candidates(cands, dcfg)


def ensembled_proposals(model: Model, image: np.ndarray, dcfg: DetectConfig,
                        strategy: str) -> Proposals:
    """Proposal stage only, under an explicit combination strategy."""
    if model.stage == STAGE_INIT:
        raise StateError("cannot run inference on an untrained model")
    feat = image_features(model, image)
    cells = rpn_cells(mixed_features(model, feat))
    o_b = sigmoid(rpn_objectness_logits(model, cells, "base"))
    if strategy == "base-only":
        obj = bias_balanced_objectness(o_b, o_b, strategy)
    else:
        o_n = sigmoid(rpn_objectness_logits(model, cells, "novel"))
        obj = bias_balanced_objectness(o_b, o_n, strategy)
    deltas = rpn_box_deltas(model, cells)
    return propose(obj, deltas, model_anchors(model, image.shape[0]), dcfg, float(image.shape[0]))
